"""``telad`` command line: one subcommand per pipeline stage.

    telad synth     --spec synth.yaml --out data/
    telad train     --config run.yaml --out runs/a
    telad calibrate --config run.yaml --checkpoint runs/a/model.ckpt --out runs/a
    telad score     --config run.yaml --checkpoint runs/a/model.ckpt --thresholds runs/a/thresholds.csv
    telad evaluate  --config run.yaml --decisions runs/a/decisions.csv --labels data/labels.csv
    telad report    --config run.yaml --decisions runs/a/decisions.csv --residuals runs/a/residuals.csv
    telad ablate    --config run.yaml --axis gat_version --seeds 1 2 3

Failures exit non-zero with a JSON object on stderr.  The output root
defaults to ``$TELAD_OUTPUT_ROOT`` (else ``./runs``) plus the command name.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .alerting import (
    PriorityBinning,
    aggregate_alerts,
    fit_priority_bins,
    plot_json,
    read_maintenance,
    write_alerts_csv,
)
from .calibration import (
    DecisionFrame,
    ResidualFrame,
    ThresholdTable,
    compare_exp_gamma,
    compute_residuals,
    fit_exponential,
    fit_pot,
    flag_anomalies,
)
from .errors import ConfigurationError, TeladError
from .metrics import comparison_table, evaluate_streams, label_streams, random_baseline
from .model import load_state, parameter_shapes, save_state
from .pipeline import (
    AXES,
    ablation_table,
    calibration_config,
    groups_for,
    model_config,
    prepare,
    resolve_config,
    run_ablation,
    train_config,
)
from .synth import SynthSpec, plan_anomalies, write_synth
from .train import train

log = logging.getLogger("telad")


def _load_yaml(path):
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def _out_dir(args):
    out = Path(args.out) if args.out else Path(os.environ.get("TELAD_OUTPUT_ROOT", "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args):
    cfg = resolve_config(_load_yaml(args.config), args.preset)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _snapshot(cfg, out):
    with open(out / "resolved_config.yaml", "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def read_labels(path):
    df = pd.read_csv(path, dtype={"ne_id": str, "feature": str})
    ts = df["timestamp"]
    if not pd.api.types.is_numeric_dtype(ts):
        ts = pd.to_datetime(ts, utc=True).astype("int64") // 10**9
    return df.assign(timestamp=ts.astype(np.int64))


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    spec_d = _load_yaml(args.spec)
    plan = spec_d.pop("random_anomalies", None)
    if args.seed is not None:
        spec_d["seed"] = int(args.seed)
    spec = SynthSpec.from_dict(spec_d)
    if plan:
        rng = np.random.default_rng(spec.seed + 7919)
        spec.anomalies = spec.anomalies + plan_anomalies(
            spec.n_nes, spec.T, spec.k, int(plan.get("count", 10)),
            float(plan.get("magnitude_sigma", 6.0)) * spec.noise, rng,
            max_len=int(plan.get("max_len", 6)), lo=int(spec.T * float(plan.get("start_frac", 0.0))))
    out = _out_dir(args)
    write_synth(spec, out)
    schema = json.loads((out / "schema.json").read_text())
    run = {"data": {"paths": [str((out / "data.csv").resolve())], "schema": schema,
                    "labels": str((out / "labels.csv").resolve())},
           "alerting": {"group_column": "local_area"}}
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(run, fh, sort_keys=True)
    log.info("wrote %s", out)
    return {"out": str(out), "n_anomalies": len(spec.anomalies)}


def cmd_train(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    prep = prepare(cfg)
    mcfg, tcfg = model_config(cfg, prep.ds), train_config(cfg)
    log.info("training %d NEs, k=%d, %d parameters", len(prep.ds.nes), prep.ds.k,
             sum(int(np.prod(s)) for s in parameter_shapes(mcfg).values()))
    state, run = train(prep.ds, prep.splits, mcfg, tcfg, seed=cfg["seed"], log_path=out / "train_log.csv")
    state.meta["features"] = list(prep.ds.feature_names)
    save_state(state, out / "model.ckpt")
    scaler, encoder = prep.scalers
    (out / "preprocessing.json").write_text(json.dumps(
        {"scaler": scaler.to_dict(), "encoder": encoder.to_dict(), "removed": prep.eligibility},
        indent=1, sort_keys=True))
    return {"checkpoint": str(out / "model.ckpt"), "best_epoch": run.best_epoch, "minima": run.minima()}


def _scored(cfg, checkpoint):
    prep = prepare(cfg)
    state = load_state(checkpoint)
    cal = calibration_config(cfg)
    frame = compute_residuals(state, prep.ds, prep.splits, weight=cal.weight)
    return prep, frame, cal


def cmd_calibrate(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    _, frame, cal = _scored(cfg, args.checkpoint)
    exp = fit_exponential(frame, cal.p, "val", cal.min_count)
    pot = fit_pot(frame, cal.p, cal.pot_init_quantile, "val", cal.min_exceedances)
    (pot if cal.method == "pot" else exp).to_csv(out / "thresholds.csv")
    exp.to_csv(out / "thresholds_exponential.csv")
    pot.to_csv(out / "thresholds_pot.csv")
    bins = fit_priority_bins(frame, cal.priority_quantiles)
    (out / "bins.json").write_text(json.dumps(bins.to_dict(), indent=1, sort_keys=True))
    aic = compare_exp_gamma(frame)
    (out / "exp_vs_gamma.json").write_text(json.dumps(aic, indent=1, sort_keys=True))
    frame.to_csv(out / "residuals.csv")
    return {"thresholds": str(out / "thresholds.csv"), "exponential_fraction": aic["exponential_fraction"]}


def cmd_score(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    _, frame, _ = _scored(cfg, args.checkpoint)
    table = ThresholdTable.read_csv(args.thresholds)
    frame.to_csv(out / "residuals.csv")
    dec = flag_anomalies(frame, table, "test")
    dec.to_csv(out / "decisions.csv")
    return {"decisions": str(out / "decisions.csv"), "flags": int(sum(y.sum() for _, y, _ in dec.nes.values()))}


def cmd_evaluate(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    labels_path = args.labels or cfg["data"].get("labels")
    if not labels_path:
        raise ConfigurationError("no labels given (--labels or data.labels)")
    labels = read_labels(labels_path)
    runs = {"model": args.decisions}
    for item in args.compare or []:
        name, _, path = item.partition("=")
        runs[name] = path
    reports = {}
    for name, path in runs.items():
        dec = DecisionFrame.read_csv(path)
        gts, preds = label_streams(dec, labels)
        reports[name] = evaluate_streams(gts, preds, dec.features, {"decisions": str(path)})
    seed = int(cfg["evaluation"].get("random_seed", 0))
    first = DecisionFrame.read_csv(args.decisions)
    gts, _ = label_streams(first, labels)
    rand = [random_baseline(g, seed + i) for i, g in enumerate(gts)]
    reports["random"] = evaluate_streams(gts, rand, first.features, {"seed": seed})
    payload = {name: r.to_dict() for name, r in reports.items()}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    text = "\n\n".join([reports["model"].table("affiliation"), reports["model"].table("pointwise"),
                        comparison_table(reports, "affiliation"), comparison_table(reports, "pointwise")])
    (out / "metrics.txt").write_text(text + "\n")
    if not args.quiet:
        print(text)
    return {name: {k: list(v) for k, v in r.aggregates["affiliation"].items()} for name, r in reports.items()}


def cmd_report(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    dec = DecisionFrame.read_csv(args.decisions)
    if args.bins:
        bins = PriorityBinning.from_dict(json.loads(Path(args.bins).read_text()))
    elif args.residuals:
        frame = ResidualFrame.read_csv(args.residuals, cfg["calibration"].get("weight", 0.5))
        bins = fit_priority_bins(frame, calibration_config(cfg).priority_quantiles)
    else:
        raise ConfigurationError("report needs --residuals or --bins")
    al = cfg["alerting"]
    col = al.get("group_column")
    if col:
        prep = prepare(cfg)
        grouping = groups_for(prep.ds, col)
    else:
        grouping = {n: n for n in dec.nes}
    maint = read_maintenance(al["maintenance"]) if al.get("maintenance") else []
    records = aggregate_alerts(dec, bins, grouping, maint)
    write_alerts_csv(records, out / "alerts.csv")
    (out / "alerts.json").write_text(plot_json(records) + "\n")
    return {"alerts": str(out / "alerts.csv"), "records": len(records),
            "flagged_steps": sum(r.aggregated_count > 0 for r in records)}


def cmd_ablate(args):
    cfg = _resolved(args)
    out = _out_dir(args)
    _snapshot(cfg, out)
    prep = prepare(cfg)
    seeds = args.seeds or [cfg["seed"]]
    report = run_ablation(prep, cfg, args.axis, seeds, variants=args.variants, score=not args.no_score)
    serial = json.loads(json.dumps(report, default=lambda o: sorted(o) if isinstance(o, set) else str(o)))
    (out / "ablation.json").write_text(json.dumps(serial, indent=2, sort_keys=True) + "\n")
    text = ablation_table(report)
    (out / "ablation.txt").write_text(text + "\n")
    if not args.quiet:
        print(text)
    return {"report": str(out / "ablation.json"), "rows": len(report["per_seed"])}


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate, "score": cmd_score,
    "evaluate": cmd_evaluate, "report": cmd_report, "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=["telco", "ran", "epc", "custom"])
    common.add_argument("--quiet", action="store_true")

    ap = argparse.ArgumentParser(prog="telad", description="Context-conditioned graph-attention anomaly detection")
    ap.add_argument("--version", action="version", version=f"telad {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="synthetic spec (YAML)")
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("calibrate", parents=[common], help="fit thresholds and priority bins")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("score", parents=[common], help="compute residuals and flags on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", required=True)
    p = sub.add_parser("evaluate", parents=[common], help="metrics against labels")
    p.add_argument("--decisions", required=True)
    p.add_argument("--labels")
    p.add_argument("--compare", nargs="*", metavar="NAME=DECISIONS", help="extra decision files to tabulate")
    p = sub.add_parser("report", parents=[common], help="aggregated alert stream")
    p.add_argument("--decisions", required=True)
    p.add_argument("--residuals")
    p.add_argument("--bins")
    p = sub.add_parser("ablate", parents=[common], help="variant comparison over seeds")
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--variants", nargs="*")
    p.add_argument("--no-score", action="store_true", help="skip scoring and Jaccard overlaps")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except TeladError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc), "command": args.command}) + "\n")
        return 2
    except (OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        if os.environ.get("TELAD_DEBUG"):
            traceback.print_exc()
        return 1
    if not args.quiet:
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
