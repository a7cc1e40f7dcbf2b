"""Stage glue shared by the CLI and the experiment harnesses.

A run configuration is a nested dict::

    preset: ran | epc | telco | custom
    seed: 0
    data: {paths, schema, labels, splits, max_missing_frac, encoder_fit, test_frac, val_frac}
    window: {L, H, S}
    train: {batch_size, epochs, patience, clip_norm}
    model: {...ModelConfig overrides...}
    calibration: {p, method, pot_init_quantile, priority_quantiles, weight}
    evaluation: {random_seed}
    alerting: {group_column, maintenance}
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy import stats

from .calibration import CalibrationConfig, compute_residuals, fit_thresholds, flag_anomalies
from .data import (
    Schema,
    apply_scalers,
    filter_eligible,
    fit_scalers,
    ingest_csv,
    load_split_file,
    split_timeline,
)
from .errors import ConfigurationError
from .metrics import jaccard_overlap
from .model import ModelConfig
from .presets import deep_merge, get_preset
from .train import TrainConfig, train

DEFAULTS = {
    "preset": "custom",
    "seed": 0,
    "data": {"paths": [], "schema": None, "labels": None, "splits": None, "max_missing_frac": 0.10,
             "encoder_fit": "all", "test_frac": 0.20, "val_frac": 0.20},
    "window": {"L": 24, "H": 4, "S": 1},
    "train": {"batch_size": 32, "epochs": 30, "patience": 10, "clip_norm": 5.0},
    "model": {},
    "calibration": {"p": 0.99, "method": "exponential", "pot_init_quantile": 0.98,
                    "priority_quantiles": [0.98, 0.99, 0.995, 0.999], "weight": 0.5},
    "evaluation": {"random_seed": 0},
    "alerting": {"group_column": None, "maintenance": None},
}

_PRESET_SECTIONS = ("window", "train", "model", "calibration")


def resolve_config(config=None, preset=None):
    """Defaults <- preset <- config overrides (overrides win)."""
    config = dict(config or {})
    name = preset or config.get("preset") or "custom"
    out = deep_merge(DEFAULTS, {})
    if name != "custom":
        p = get_preset(name)
        out = deep_merge(out, {s: p[s] for s in _PRESET_SECTIONS})
        out["alerting"]["group_column"] = p["group_column"]
    out = deep_merge(out, config)
    out["preset"] = name
    return out


@dataclass
class Prepared:
    ds: object
    splits: dict
    scalers: tuple
    eligibility: dict
    raw: object


def load_dataset(cfg):
    data = cfg["data"]
    if not data.get("paths"):
        raise ConfigurationError("config data.paths is empty")
    if not data.get("schema"):
        raise ConfigurationError("config data.schema is missing")
    return ingest_csv(data["paths"], Schema.from_dict(data["schema"]))


def prepare(cfg, raw=None):
    """Ingest (unless ``raw`` given), split, filter, fit and apply scalers."""
    raw = raw if raw is not None else load_dataset(cfg)
    data, win = cfg["data"], cfg["window"]
    if data.get("splits"):
        splits = load_split_file(data["splits"], raw)
    else:
        splits = split_timeline(raw, data["test_frac"], data["val_frac"])
    ds, report = filter_eligible(raw, data["max_missing_frac"], win["L"], win["H"], splits=splits)
    splits = {n: splits[n] for n in ds.nes}
    scalers = fit_scalers(ds, splits, data["encoder_fit"])
    return Prepared(apply_scalers(ds, scalers), splits, scalers, report, raw)


def model_config(cfg, ds):
    known = {f.name for f in fields(ModelConfig)}
    overrides = dict(cfg["model"])
    unknown = set(overrides) - known
    if unknown:
        raise ConfigurationError(f"unknown model keys {sorted(unknown)}")
    win = cfg["window"]
    overrides.update(L=win["L"], H=win["H"], k=ds.k,
                     dyn_cardinalities=ds.dyn_cardinalities(),
                     static_cardinalities=ds.static_cardinalities(),
                     n_static_real=len(ds.static_real_names))
    return ModelConfig(**overrides)


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), patience=int(t["patience"]),
                       S=int(cfg["window"]["S"]), clip_norm=float(t.get("clip_norm", 5.0)))


def calibration_config(cfg):
    c = dict(cfg["calibration"])
    c["priority_quantiles"] = tuple(c.get("priority_quantiles", (0.98, 0.99, 0.995, 0.999)))
    return CalibrationConfig(**c)


def groups_for(ds, column):
    """ne_id -> group id from a static categorical column (or the NE itself)."""
    if column is None:
        return {n: n for n in ds.nes}
    if column not in ds.static_cat_names:
        raise ConfigurationError(f"group column {column!r} is not a static categorical")
    j = ds.static_cat_names.index(column)
    return {n: str(ne.s_raw[j]) for n, ne in ds.nes.items()}


def fit_and_flag(state, prep, cal_cfg):
    """Residuals on val+test, thresholds from val, flags on test."""
    frame = compute_residuals(state, prep.ds, prep.splits, weight=cal_cfg.weight)
    table = fit_thresholds(frame, cal_cfg)
    return frame, table, flag_anomalies(frame, table, "test")


# ---------------------------------------------------------------- ablations

AXES = {
    "gat_version": [("gatv2", {"use_gatv2": True}), ("gatv1", {"use_gatv2": False})],
    "context_blocks": [(v, {"context_blocks": v}) for v in ("both", "block1", "block2", "none")],
    "context_mode": [(v, {"context_mode": v}) for v in ("full", "dynamic_only", "static_only")],
}


def paired_stats(base, other):
    """Paired mean difference ``other - base`` with t-test p-value and Cohen's d_z."""
    base, other = np.asarray(base, float), np.asarray(other, float)
    d = other - base
    out = {"n": int(d.size), "mean_diff": float(d.mean()) if d.size else float("nan")}
    if d.size >= 2 and np.std(d, ddof=1) > 0:
        out["p_value"] = float(stats.ttest_rel(other, base).pvalue)
        out["cohen_dz"] = float(d.mean() / np.std(d, ddof=1))
    else:
        out["p_value"] = float("nan")
        out["cohen_dz"] = float("nan")
    return out


def bh_adjust(pvals):
    """Benjamini-Hochberg adjusted p-values (NaN entries pass through)."""
    p = np.asarray(pvals, float)
    ok = np.isfinite(p)
    adj = np.full_like(p, np.nan)
    if ok.any():
        adj[ok] = stats.false_discovery_control(p[ok], method="bh")
    return adj.tolist()


def run_ablation(prep, cfg, axis, seeds, variants=None, score=True):
    """Train every variant of ``axis`` for every seed and compare to the first variant."""
    if axis not in AXES:
        raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    chosen = [v for v in AXES[axis] if variants is None or v[0] in variants]
    tcfg = train_config(cfg)
    cal = calibration_config(cfg)
    runs = {}
    for name, override in chosen:
        vcfg = deep_merge(cfg, {"model": override})
        mcfg = model_config(vcfg, prep.ds)
        runs[name] = []
        for seed in seeds:
            state, run = train(prep.ds, prep.splits, mcfg, tcfg, seed=int(seed))
            rec = {"seed": int(seed), "minima": run.minima(), "best_epoch": run.best_epoch}
            if score:
                rec["keys"] = fit_and_flag(state, prep, cal)[2].keys()
            runs[name].append(rec)
    base = chosen[0][0]
    metrics = ("val_forecast", "val_recon", "val_total")
    comparisons = []
    for name, _ in chosen[1:]:
        for m in metrics:
            comparisons.append({"variant": name, "baseline": base, "metric": m,
                                **paired_stats([r["minima"][m] for r in runs[base]],
                                               [r["minima"][m] for r in runs[name]])})
    for c, q in zip(comparisons, bh_adjust([c["p_value"] for c in comparisons])):
        c["p_adj_bh"] = q
    jacc = []
    if score:
        for name, _ in chosen[1:]:
            for rb, rv in zip(runs[base], runs[name]):
                jacc.append({"variant": name, "baseline": base, "seed": rb["seed"],
                             "jaccard": jaccard_overlap(rb["keys"], rv["keys"]),
                             "both_empty": not rb["keys"] and not rv["keys"]})
    per_seed = [{"variant": n, "seed": r["seed"], **r["minima"], "best_epoch": r["best_epoch"],
                 **({"n_flags": len(r["keys"])} if score else {})}
                for n, rs in runs.items() for r in rs]
    return {"axis": axis, "baseline": base, "variants": [v[0] for v in chosen], "seeds": [int(s) for s in seeds],
            "per_seed": per_seed, "comparisons": comparisons, "jaccard": jacc}


def ablation_table(report):
    lines = [f"ablation over {report['axis']} (baseline {report['baseline']})",
             f"{'variant':<14}{'seed':>6}{'val_forecast':>14}{'val_recon':>12}{'val_total':>12}"]
    for r in report["per_seed"]:
        lines.append(f"{r['variant']:<14}{r['seed']:>6}{r['val_forecast']:14.5f}{r['val_recon']:12.5f}"
                     f"{r['val_total']:12.5f}")
    lines.append("")
    lines.append(f"{'variant':<14}{'metric':<14}{'mean diff':>11}{'p':>9}{'p_bh':>9}{'d_z':>8}")
    for c in report["comparisons"]:
        lines.append(f"{c['variant']:<14}{c['metric']:<14}{c['mean_diff']:11.5f}{c['p_value']:9.3f}"
                     f"{c['p_adj_bh']:9.3f}{c['cohen_dz']:8.2f}")
    if report["jaccard"]:
        lines.append("")
        for j in report["jaccard"]:
            lines.append(f"jaccard {j['variant']} vs {j['baseline']} seed {j['seed']}: {j['jaccard']:.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- centralisation


def centralisation_curve(prep, cfg, focus, families, seeds):
    """Jaccard between per-NE models and models trained on growing NE sets.

    ``families`` are lists of NE ids.  Anomaly keys of a family model are
    compared with the per-NE model on every focus NE inside the family.
    Returns per-family mean J with a 95% t-interval across NEs and seeds.
    """
    mcfg = model_config(cfg, prep.ds)
    tcfg = train_config(cfg)
    cal = calibration_config(cfg)

    def keys_on(nes, seed):
        sub = Prepared(prep.ds.subset(nes), {n: prep.splits[n] for n in nes}, prep.scalers,
                       prep.eligibility, prep.raw)
        state, _ = train(sub.ds, sub.splits, mcfg, tcfg, seed=seed)
        keys = fit_and_flag(state, sub, cal)[2].keys()
        return {n: {k for k in keys if k[0] == n} for n in nes}

    baseline = {(n, s): keys_on([n], s)[n] for n in focus for s in seeds}
    curve = [{"family": "model_1", "size": 1, "mean": 1.0, "ci95": [1.0, 1.0], "values": []}]
    for fam in families:
        members = [n for n in focus if n in fam]
        if not members:
            raise ConfigurationError(f"family {list(fam)} contains no focus NE")
        vals = []
        for s in seeds:
            fk = keys_on(list(fam), s)
            vals += [jaccard_overlap(baseline[(n, s)], fk[n]) for n in members]
        v = np.asarray(vals)
        half = float(stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
        curve.append({"family": f"model_{len(fam)}", "size": len(fam), "mean": float(v.mean()),
                      "ci95": [float(v.mean() - half), float(v.mean() + half)], "values": vals})
    sizes = [c["size"] for c in curve]
    means = [c["mean"] for c in curve]
    trend = float(stats.spearmanr(sizes, means).statistic) if len(curve) > 2 else float("nan")
    return {"focus": list(focus), "seeds": list(seeds), "curve": curve, "spearman_size_vs_J": trend}
