"""Command-line entry point: one binary, subcommands for every workflow.

Configuration resolution: built-in defaults are overridden by an optional
JSON config file (--config), which is in turn overridden by explicit flags.
Every command writes the fully resolved configuration and the toolkit
version into its output directory, and a rerun with the same configuration
produces byte-identical outputs (nothing timestamped is ever written).

Exit codes: 0 success, 1 assertion/acceptance failure, 2 usage or config
error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .communities import (CommunitySet, build_tensor, nn_parafac_symmetric,
                          robustness, tensor_communities)
from .communities import extract_communities as _extract
from .data import SynthConfig, load_dataset, synth_generate, write_dataset
from .errors import ConfigError, DataError, DglstmError
from .model import VARIANTS, backward_joint, build_model, community_influence
from .model_io import load_model, save_model
from .numeric import derived_rng, grad_check
from .training import (TrainConfig, crossval, paired_ttest_one_tailed,
                       windows_for_subjects)

_REQUIRED = object()


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(out: str, command: str, resolved: dict) -> None:
    os.makedirs(out, exist_ok=True)
    echo = {"command": command, "version": __version__}
    echo.update(resolved)
    _write_json(os.path.join(out, "config_resolved.json"), echo)


def _resolve(args: argparse.Namespace, keys: dict, config: dict) -> dict:
    """Merge flag values over config-file values over defaults."""
    resolved = {}
    for key, default in keys.items():
        v = getattr(args, key, None)
        if v is None:
            v = config.get(key, default)
        if v is _REQUIRED:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")
        resolved[key] = v
    return resolved


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            cfg = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config '{path}' is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config '{path}' must be a JSON object")
    return cfg


SYNTH_KEYS = {"n_subjects": 200, "rois": 20, "length": 120, "k_true": 4,
              "overlap": 0.1, "coupling": 0.5, "noise_sd": 1.0, "seed": 0,
              "out": _REQUIRED}

TRAIN_KEYS = {"data": _REQUIRED, "k": 10, "variant": "dg", "k1": 50, "k2": 20,
              "window": 30, "lam": 0.1, "dropout": 0.5, "batch_size": 32,
              "learning_rate": 1e-3, "max_epochs": 200, "patience": 10,
              "seed": 0, "jobs": 1, "out": _REQUIRED}

CD_KEYS = {"data": _REQUIRED, "k_communities": 50, "window": 30,
           "max_sweeps": 500, "tol": 1e-6, "seed": 0, "out": _REQUIRED}

GRADCHECK_KEYS = {"variant": "all", "rois": 5, "k1": 4, "k2": 3, "window": 7,
                  "batch": 2, "lam": 0.1, "eps": 1e-5, "threshold": 1e-4,
                  "seed": 0, "corrupt": False, "out": None}


def cmd_synth(args, config) -> int:
    rc = _resolve(args, SYNTH_KEYS, config)
    cfg = SynthConfig(n_subjects=rc["n_subjects"], r=rc["rois"], l=rc["length"],
                      k_true=rc["k_true"], overlap=rc["overlap"],
                      coupling=rc["coupling"], noise_sd=rc["noise_sd"],
                      seed=rc["seed"])
    cfg.validate()
    _prepare_out(rc["out"], "synth", rc)
    records, truth = synth_generate(cfg)
    manifest = write_dataset(records, rc["out"], truth=truth)
    print(f"wrote {len(records)} subjects to {manifest}")
    return 0


def cmd_crossval(args, config) -> int:
    rc = _resolve(args, TRAIN_KEYS, config)
    if rc["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant '{rc['variant']}'")
    _prepare_out(rc["out"], "crossval", rc)
    subjects = load_dataset(rc["data"])
    cfg = TrainConfig(variant=rc["variant"], k1=rc["k1"], k2=rc["k2"],
                      window=rc["window"], dropout=rc["dropout"], lam=rc["lam"],
                      batch_size=rc["batch_size"],
                      learning_rate=rc["learning_rate"],
                      max_epochs=rc["max_epochs"], patience=rc["patience"],
                      seed=rc["seed"])
    reports, models, agg = crossval(subjects, cfg, rc["k"], jobs=rc["jobs"])
    _write_json(os.path.join(rc["out"], "folds.json"),
                [r.to_json_dict() for r in reports])
    _write_json(os.path.join(rc["out"], "aggregate.json"), agg)
    with open(os.path.join(rc["out"], "aggregate.csv"), "w",
              encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "mean", "std"])
        for name in ("acc", "tpr", "tnr", "auc"):
            w.writerow([name, f"{agg[f'{name}_mean']:.6f}",
                        f"{agg[f'{name}_std']:.6f}"])
        w.writerow(["auc_pooled", f"{agg['auc_pooled']:.6f}", ""])
    model_dir = os.path.join(rc["out"], "models")
    os.makedirs(model_dir, exist_ok=True)
    for i, model in enumerate(models):
        save_model(model, os.path.join(model_dir, f"fold_{i:02d}.dglstm"))
    print(f"{rc['k']}-fold CV ({rc['variant']}): "
          f"ACC {agg['acc_mean']:.3f} ({agg['acc_std']:.3f}), "
          f"AUC {agg['auc_mean']:.3f} ({agg['auc_std']:.3f})")
    return 0


def cmd_communities(args, config) -> int:
    rc = _resolve(args, {"model": _REQUIRED, "out": _REQUIRED}, config)
    _prepare_out(rc["out"], "communities", rc)
    model = load_model(rc["model"])
    if not model.has_generative:
        raise ConfigError(
            f"variant '{model.variant}' has no generative weights to extract from")
    cs = _extract(model.params["gen.W_d"], model.params["gen.b_d"])
    cs.save(os.path.join(rc["out"], "communities.json"))
    scores, ranking = community_influence(model)
    _write_json(os.path.join(rc["out"], "influence.json"),
                {"scores": [float(s) for s in scores],
                 "ranking": [int(i) + 1 for i in ranking]})
    n_live = sum(1 for d in cs.degenerate if not d)
    print(f"extracted {cs.k} communities ({n_live} non-degenerate) "
          f"from {rc['model']}")
    return 0


def cmd_cd_baseline(args, config) -> int:
    rc = _resolve(args, CD_KEYS, config)
    if rc["k_communities"] < 1:
        raise ConfigError(f"k_communities must be >= 1, got {rc['k_communities']}")
    _prepare_out(rc["out"], "cd-baseline", rc)
    subjects = load_dataset(rc["data"])
    windows = [w.x for w in windows_for_subjects(subjects, rc["window"],
                                                 require_target=False)]
    tensor = build_tensor(windows)
    result = nn_parafac_symmetric(tensor, rc["k_communities"],
                                  max_sweeps=rc["max_sweeps"], tol=rc["tol"],
                                  seed=rc["seed"])
    cs = tensor_communities(result)
    cs.save(os.path.join(rc["out"], "communities.json"))
    _write_json(os.path.join(rc["out"], "parafac.json"),
                {"fit": result.fit, "sweeps": result.sweeps,
                 "converged": result.converged,
                 "n_slices": int(tensor.shape[2]),
                 "k": rc["k_communities"],
                 "fit_history": [float(v) for v in result.fit_history]})
    print(f"NN-PARAFAC fit {result.fit:.4f} after {result.sweeps} sweeps "
          f"on {tensor.shape[2]} slices")
    return 0


def cmd_robustness(args, config) -> int:
    rc = _resolve(args, {"ref": _REQUIRED, "other": _REQUIRED,
                         "out": _REQUIRED}, config)
    _prepare_out(rc["out"], "robustness", rc)
    report = robustness(CommunitySet.load(rc["ref"]),
                        CommunitySet.load(rc["other"]))
    _write_json(os.path.join(rc["out"], "robustness.json"), report.to_json_dict())
    report.save_csv(os.path.join(rc["out"], "robustness.csv"))
    print(f"mean best-match corr {report.mean_corr:.4f}, "
          f"DSC {report.mean_dsc:.4f}")
    return 0


def _gradcheck_one(variant: str, rc: dict) -> float:
    model = build_model(variant, r=rc["rois"], k1=rc["k1"], k2=rc["k2"],
                        t=rc["window"], dropout=0.0, seed=rc["seed"])
    rng = derived_rng(rc["seed"], 77)
    x = rng.normal(size=(rc["batch"], rc["window"], rc["rois"]))
    y = rng.integers(0, 2, size=rc["batch"]).astype(float)
    x_next = rng.normal(size=(rc["batch"], rc["rois"])) if model.has_generative else None

    def loss_fn(_params):
        loss, _ = backward_joint(model, x, y, x_next=x_next, lam=rc["lam"])
        return loss.total

    _, analytic = backward_joint(model, x, y, x_next=x_next, lam=rc["lam"])
    if rc["corrupt"]:
        analytic[analytic.names()[0]] += 0.5
    return grad_check(loss_fn, model.params, analytic, eps=rc["eps"])


def cmd_gradcheck(args, config) -> int:
    rc = _resolve(args, GRADCHECK_KEYS, config)
    variants = list(VARIANTS) if rc["variant"] == "all" else [rc["variant"]]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant '{v}'")
    if rc["out"]:
        _prepare_out(rc["out"], "gradcheck", rc)
    results = {}
    ok = True
    for v in variants:
        err = float(_gradcheck_one(v, rc))
        passed = bool(err < rc["threshold"])
        ok = ok and passed
        results[v] = {"max_rel_error": err, "passed": passed}
        print(f"variant {v}: max relative error {err:.3e} "
              f"({'pass' if passed else 'FAIL'})")
    if rc["out"]:
        _write_json(os.path.join(rc["out"], "gradcheck.json"),
                    {"threshold": rc["threshold"], "results": results,
                     "passed": ok})
    return 0 if ok else 1


def cmd_ttest(args, config) -> int:
    rc = _resolve(args, {"report_a": _REQUIRED, "report_b": _REQUIRED,
                         "metric": "acc", "out": None}, config)
    vals = []
    for path in (rc["report_a"], rc["report_b"]):
        try:
            with open(path, "r", encoding="utf-8") as f:
                folds = json.load(f)
        except OSError as exc:
            raise DataError(f"cannot read fold report '{path}': {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"fold report '{path}' is not valid JSON: {exc}") from exc
        if not isinstance(folds, list) or not folds:
            raise DataError(f"fold report '{path}' must be a non-empty JSON array")
        try:
            vals.append(np.asarray([fold[rc["metric"]] for fold in folds],
                                   dtype=float))
        except KeyError as exc:
            raise ConfigError(f"metric '{rc['metric']}' missing in '{path}'") from exc
    if vals[0].size != vals[1].size:
        raise ConfigError(
            f"fold counts differ: {vals[0].size} vs {vals[1].size}")
    t, p = paired_ttest_one_tailed(vals[0], vals[1])
    out_dict = {"metric": rc["metric"], "n": int(vals[0].size), "t": t, "p": p,
                "mean_a": float(vals[0].mean()), "mean_b": float(vals[1].mean())}
    if rc["out"]:
        _prepare_out(rc["out"], "ttest", rc)
        _write_json(os.path.join(rc["out"], "ttest.json"), out_dict)
    print(f"paired one-tailed t-test on {rc['metric']}: "
          f"t={t:.4f}, p={p:.6f} (n={vals[0].size})")
    return 0


def _int(p, *names, **kw):
    p.add_argument(*names, type=int, default=None, **kw)


def _float(p, *names, **kw):
    p.add_argument(*names, type=float, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dglstm",
        description="Jointly discriminative and generative LSTM toolkit for "
                    "ROI time-series: training, evaluation, and "
                    "functional-community extraction.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="JSON file with defaults for this command's options")
        _int(p, "--seed", help="base random seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("synth", help="generate a planted-community synthetic dataset")
    add_common(p)
    _int(p, "--n-subjects", dest="n_subjects")
    _int(p, "--rois")
    _int(p, "--length", help="time points per subject")
    _int(p, "--k-true", dest="k_true", help="number of planted communities")
    _float(p, "--overlap", help="fraction of ROIs with a second community")
    _float(p, "--coupling", help="class-1 amplitude scaling of designated communities")
    _float(p, "--noise-sd", dest="noise_sd")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crossval", help="grouped k-fold cross-validation")
    add_common(p)
    p.add_argument("--data", default=None, help="dataset manifest JSON")
    _int(p, "--k", help="number of folds")
    p.add_argument("--variant", default=None, choices=VARIANTS)
    _int(p, "--k1", help="first-LSTM (community) nodes")
    _int(p, "--k2", help="second-LSTM nodes")
    _int(p, "--window", help="window length T")
    _float(p, "--lambda", dest="lam", help="discriminative loss weight")
    _float(p, "--dropout")
    _int(p, "--batch-size", dest="batch_size")
    _float(p, "--learning-rate", dest="learning_rate")
    _int(p, "--max-epochs", dest="max_epochs")
    _int(p, "--patience")
    _int(p, "--jobs", help="fold-level parallelism")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("communities",
                       help="extract communities from a trained model")
    add_common(p)
    p.add_argument("--model", default=None, help="trained model file")
    p.set_defaults(func=cmd_communities)

    p = sub.add_parser("cd-baseline",
                       help="correlation-tensor community detection baseline")
    add_common(p)
    p.add_argument("--data", default=None, help="dataset manifest JSON")
    _int(p, "--k-communities", dest="k_communities")
    _int(p, "--window", help="window length T")
    _int(p, "--max-sweeps", dest="max_sweeps")
    _float(p, "--tol", help="relative fit-change stopping tolerance")
    p.set_defaults(func=cmd_cd_baseline)

    p = sub.add_parser("robustness",
                       help="best-match agreement between two community sets")
    add_common(p)
    p.add_argument("--ref", default=None, help="reference CommunitySet JSON")
    p.add_argument("--other", default=None, help="comparison CommunitySet JSON")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the analytic gradients")
    add_common(p)
    p.add_argument("--variant", default=None,
                   choices=list(VARIANTS) + ["all"])
    _int(p, "--rois")
    _int(p, "--k1")
    _int(p, "--k2")
    _int(p, "--window")
    _int(p, "--batch")
    _float(p, "--lambda", dest="lam")
    _float(p, "--eps", help="central-difference step")
    _float(p, "--threshold", help="max relative error to pass")
    p.add_argument("--corrupt", action="store_true", default=None,
                   help="debug: corrupt one gradient to force a failure")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ttest",
                       help="paired one-tailed t-test between two fold reports")
    add_common(p)
    p.add_argument("--report-a", dest="report_a", default=None,
                   help="folds.json of the model claimed better")
    p.add_argument("--report-b", dest="report_b", default=None,
                   help="folds.json of the comparison model")
    p.add_argument("--metric", default=None,
                   help="fold metric to compare (default acc)")
    p.set_defaults(func=cmd_ttest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DglstmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
