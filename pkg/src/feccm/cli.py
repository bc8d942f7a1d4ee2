"""Command-line entry point: ``feccm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import yaml

from . import harness
from .errors import ConfigError, DataError, FeccmError
from .tasks import load_dataset, save_dataset
from .training import ONE_GOAL, TARGET_SPECIFIC, UNIFIED, select_pi_target_specific, train_feccm

log = logging.getLogger("feccm")

CASCADE_METHODS = ("ccm", "feccm_unified", "feccm_one_goal", "feccm_target_specific")


def _read_doc(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping")
    return doc


def _parse_pi(text):
    """``unified`` | ``onegoal:<k>`` | ``grid`` -> (instantiation, target or None)."""
    if text is None or text == "unified":
        return UNIFIED, None
    if text == "grid":
        return TARGET_SPECIFIC, None
    if text.startswith("onegoal:"):
        try:
            return ONE_GOAL, int(text.split(":", 1)[1])
        except ValueError:
            pass
    raise ConfigError(f"--pi must be unified, onegoal:<k> or grid, got {text!r}")


def _parse_beta(text):
    if text is None or text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"--beta must be 'auto' or a number, got {text!r}") from None
    if v < 0:
        raise ConfigError("--beta must be non-negative")
    return v


def _feedback(args, doc):
    fb_doc = dict(doc.get("feedback", {}))
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iters is not None:
        over["max_outer_iters"] = args.iters
    if args.mode is not None:
        over["feedback_mode"] = args.mode
    if getattr(args, "beta", None) is not None:
        over["beta"] = _parse_beta(args.beta)
    if getattr(args, "jobs", None) is not None:
        over["n_jobs"] = args.jobs
    return harness.feedback_config(fb_doc, **over)


def _load_data(path, specs):
    try:
        return load_dataset(path, specs)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None


def _specs(args):
    try:
        return harness.load_specs(args.specs)
    except OSError as e:
        raise DataError(f"cannot read specs {args.specs}: {e}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"bad specs document {args.specs}: {e}") from None


def _load_model(path):
    try:
        return harness.load_any_model(path)
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DataError(f"bad model document {path}: {e}") from None


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args):
    doc = _read_doc(args.config)
    gen = dict(doc.get("generator", doc))
    if args.seed is not None:
        gen["seed"] = args.seed
    try:
        cfg = harness.SyntheticConfig(**gen)
    except TypeError as e:
        raise ConfigError(f"bad generator settings: {e}") from None
    train, test = harness.generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(train, os.path.join(args.out, "train.csv"))
    save_dataset(test, os.path.join(args.out, "test.csv"))
    harness.save_specs(train.specs, os.path.join(args.out, "specs.json"))
    print(f"wrote {len(train)} training and {len(test)} test samples to {args.out}")
    return 0


def cmd_train(args):
    doc = _read_doc(args.config)
    specs = _specs(args)
    train = _load_data(args.train, specs)
    fb = _feedback(args, doc)
    kinds = harness._kinds(doc.get("kinds"))
    method = args.method
    inst, target = _parse_pi(args.pi)
    if args.target is not None:
        target = args.target
    trace = None
    if method in ("base", "all_features_direct"):
        fit = harness.train_base if method == "base" else harness.train_all_features_direct
        model = fit(train, kinds, fb.l2, fb.inner)
    elif method == "ccm":
        model, trace = train_feccm(train, kinds, replace(fb, max_outer_iters=0))
    else:
        if method == "feccm_one_goal":
            inst = ONE_GOAL
        elif method == "feccm_target_specific":
            inst = TARGET_SPECIFIC
        if inst != UNIFIED and target is None:
            raise ConfigError(f"{inst} training needs a target task (--pi onegoal:<k> or --target)")
        model, trace = train_feccm(train, kinds, replace(fb, instantiation=inst, target_task=target, pi=fb.pi))
    harness.save_any_model(model, args.out)
    if trace is not None and args.trace:
        trace.to_csv(args.trace)
    print(f"wrote {method} model to {args.out}")
    return 0


def cmd_predict(args):
    model = _load_model(args.model)
    data = _load_data(args.data, model.specs)
    rows = harness.predictions_rows(model, data)
    text = "".join(",".join(r) + "\n" for r in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args):
    model = _load_model(args.model)
    data = _load_data(args.data, model.specs)
    report = harness.evaluate(model, data, method=args.name, n_boot=args.bootstrap, seed=args.seed or 0)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_experiment(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.seeds = (args.seed,)
    over = {}
    if args.iters is not None:
        over["max_outer_iters"] = args.iters
    if args.mode is not None:
        over["feedback_mode"] = args.mode
    if args.beta is not None:
        over["beta"] = _parse_beta(args.beta)
    cfg.feedback = {**cfg.feedback, **over}
    out = harness.run_experiment(cfg, args.out)
    print(f"wrote report to {out}")
    return 0


def cmd_xval_pi(args):
    doc = _read_doc(args.config)
    specs = _specs(args)
    train = _load_data(args.train, specs)
    fb = _feedback(args, doc)
    grid = doc.get("pi_grid")
    pi = select_pi_target_specific(train, args.target, grid, args.folds or fb.folds, fb)
    print(json.dumps({"target": args.target, "pi": list(pi)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feccm", description="Cascaded classification models with feedback.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, beta=True):
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--iters", type=int, help="maximum feedback iterations")
        sp.add_argument("--mode", choices=("exact", "surrogate"), help="feedback mode")
        if beta:
            sp.add_argument("--beta", help="surrogate sparsity: 'auto' or a number")

    sp = sub.add_parser("synth", help="generate synthetic train/test datasets")
    sp.add_argument("--config", help="generator settings (YAML/JSON)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--method", default="feccm_unified", choices=harness.METHODS)
    sp.add_argument("--train", required=True, help="training dataset CSV")
    sp.add_argument("--specs", required=True, help="task specs JSON")
    sp.add_argument("--config", help="settings document with 'feedback' and 'kinds' sections")
    sp.add_argument("--pi", help="unified | onegoal:<k> | grid")
    sp.add_argument("--target", type=int, help="target task for one-goal / grid selection")
    sp.add_argument("--jobs", type=int, help="worker threads")
    sp.add_argument("--trace", help="write the training trace CSV here")
    sp.add_argument("--out", required=True, help="output model JSON")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="predict every task for a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="predictions CSV (stdout when omitted)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="evaluate a model on a labeled dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--name", default="model", help="method name recorded in the report")
    sp.add_argument("--bootstrap", type=int, default=1000, help="bootstrap resamples (0 disables)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="report JSON (stdout when omitted)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="run an experiment config into a report directory")
    sp.add_argument("config")
    sp.add_argument("--out", required=True, help="report directory")
    common(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("xval-pi", help="cross-validate importance factors for a target task")
    sp.add_argument("--train", required=True)
    sp.add_argument("--specs", required=True)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--config", help="settings document; may hold 'pi_grid'")
    sp.add_argument("--pi", help="accepted for symmetry; only 'grid' is meaningful here")
    common(sp)
    sp.set_defaults(func=cmd_xval_pi)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FeccmError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
