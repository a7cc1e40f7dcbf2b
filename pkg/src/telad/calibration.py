"""Residual scoring and unsupervised threshold calibration.

Scores are per (NE, feature, timestamp).  The exponential fit is the
production rule (``tau = -theta * ln(1 - p)`` with ``theta`` the mean
validation residual); POT and a Gamma AIC check are comparison baselines.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .data import SPLITS, gather_windows
from .errors import ContractError, DegenerateFitWarning, SmallSampleWarning
from .model import predict

ISO = "%Y-%m-%dT%H:%M:%SZ"


def _iso(ts):
    return pd.to_datetime(np.asarray(ts, dtype=np.int64), unit="s", utc=True).strftime(ISO)


def _epoch(col):
    if pd.api.types.is_numeric_dtype(col):
        return col.astype(np.int64).to_numpy()
    return (pd.to_datetime(col, utc=True).astype("int64") // 10**9).to_numpy()


@dataclass
class CalibrationConfig:
    p: float = 0.99
    method: str = "exponential"
    pot_init_quantile: float = 0.98
    priority_quantiles: tuple = (0.98, 0.99, 0.995, 0.999)
    weight: float = 0.5
    min_count: int = 10
    min_exceedances: int = 30

    def __post_init__(self):
        from .errors import ConfigurationError

        if not 0 < self.p < 1:
            raise ConfigurationError(f"p must lie in (0, 1), got {self.p}")
        if self.method not in ("exponential", "pot"):
            raise ConfigurationError(f"method must be 'exponential' or 'pot', got {self.method!r}")
        q = list(self.priority_quantiles)
        if len(q) != 4 or any(not 0 < v < 1 for v in q) or any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigurationError(f"priority_quantiles must be 4 increasing values in (0,1): {q}")
        if not 0 <= self.weight <= 1:
            raise ConfigurationError(f"weight must lie in [0, 1], got {self.weight}")


# ---------------------------------------------------------------- residuals


@dataclass
class NEResiduals:
    timestamps: np.ndarray  # (n,)
    split: np.ndarray  # (n,) split names
    e_for: np.ndarray  # (n, k), NaN where absent
    e_rec: np.ndarray  # (n, k), NaN where absent

    def combined(self, weight=0.5):
        both = weight * self.e_for + (1.0 - weight) * self.e_rec
        return np.where(np.isnan(self.e_for), self.e_rec, np.where(np.isnan(self.e_rec), self.e_for, both))


@dataclass
class ResidualFrame:
    """Per-NE residual arrays; ``e`` is the weighted forecast/recon mean."""

    features: list
    nes: dict = field(default_factory=dict)
    weight: float = 0.5

    def e(self, ne_id):
        return self.nes[ne_id].combined(self.weight)

    def values(self, ne_id, feature_idx, split):
        """Finite combined residuals of one unit within one split."""
        r = self.nes[ne_id]
        v = self.e(ne_id)[r.split == split, feature_idx]
        return v[np.isfinite(v)]

    def units(self):
        return [(n, f) for n in self.nes for f in self.features]

    def to_frame(self):
        rows = []
        for ne_id, r in self.nes.items():
            e = self.e(ne_id)
            n, k = e.shape
            rows.append(pd.DataFrame({
                "ne_id": np.repeat(ne_id, n * k),
                "feature": np.tile(self.features, n),
                "timestamp": np.repeat(r.timestamps, k),
                "split": np.repeat(r.split, k),
                "e_for": r.e_for.ravel(), "e_rec": r.e_rec.ravel(), "e": e.ravel(),
            }))
        cols = ["ne_id", "feature", "timestamp", "split", "e_for", "e_rec", "e"]
        return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=cols)

    def to_csv(self, path):
        df = self.to_frame()
        df["timestamp"] = _iso(df["timestamp"].to_numpy())
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_frame(cls, df, weight=0.5):
        features = list(dict.fromkeys(df["feature"]))
        fpos = {f: j for j, f in enumerate(features)}
        df = df.assign(_ts=_epoch(df["timestamp"]))
        out = cls(features, {}, weight)
        for ne_id, g in df.groupby("ne_id", sort=False):
            ts, inv = np.unique(g["_ts"].to_numpy(), return_inverse=True)
            ef = np.full((len(ts), len(features)), np.nan)
            er = ef.copy()
            cols = g["feature"].map(fpos).to_numpy()
            ef[inv, cols] = g["e_for"].to_numpy(dtype=float)
            er[inv, cols] = g["e_rec"].to_numpy(dtype=float)
            split = np.empty(len(ts), dtype=object)
            split[inv] = g["split"].to_numpy()
            out.nes[str(ne_id)] = NEResiduals(ts, split, ef, er)
        return out

    @classmethod
    def read_csv(cls, path, weight=0.5):
        return cls.from_frame(pd.read_csv(path, dtype={"ne_id": str}, float_precision="round_trip"), weight)


def compute_residuals(state, ds, splits, blocks=("val", "test"), weight=0.5, stride=1, batch_size=256):
    """Absolute forecast and reconstruction errors per scored timestamp.

    Within each block, windows whose inputs lie in the block are slid with
    ``stride``.  The reconstruction residual at ``t`` comes from the window
    ending at ``t``; the forecast residual at ``t`` is the first horizon step
    of the window ending at ``t - 1``.  Timestamps with only one of the two
    keep that one alone.
    """
    L = state.config.L
    frame = ResidualFrame(list(ds.feature_names), {}, weight)
    for ne_id, ne in ds.nes.items():
        ts_parts, split_parts, ef_parts, er_parts = [], [], [], []
        for name in blocks:
            a, b = splits[ne_id].block(name)
            starts = list(range(a, b - L + 1, stride))
            if b - a < L or not starts:
                continue
            n = b - (a + L - 1)
            ef = np.full((n, ds.k), np.nan)
            er = np.full((n, ds.k), np.nan)
            off = a + L - 1
            for lo in range(0, len(starts), batch_size):
                chunk = starts[lo:lo + batch_size]
                batch = gather_windows(ds, [(ne_id, t0) for t0 in chunk], L, 1)
                f, r = predict(batch, state)
                for i, t0 in enumerate(chunk):
                    t_last = t0 + L - 1
                    er[t_last - off] = np.abs(r[i, -1] - ne.x[t_last])
                    if t_last + 1 < b:
                        ef[t_last + 1 - off] = np.abs(f[i, 0] - ne.x[t_last + 1])
            keep = ~(np.isnan(ef).all(1) & np.isnan(er).all(1))
            ts_parts.append(ne.timestamps[off:b][keep])
            split_parts.append(np.full(int(keep.sum()), name, dtype=object))
            ef_parts.append(ef[keep])
            er_parts.append(er[keep])
        if ts_parts:
            frame.nes[ne_id] = NEResiduals(np.concatenate(ts_parts), np.concatenate(split_parts),
                                           np.concatenate(ef_parts), np.concatenate(er_parts))
    return frame


# ---------------------------------------------------------------- thresholds


def exp_threshold(theta, p):
    return -theta * math.log1p(-p)


@dataclass
class Threshold:
    theta: float
    tau: float
    method: str = "exponential"
    extras: dict = field(default_factory=dict)


@dataclass
class ThresholdTable:
    p: float
    entries: dict = field(default_factory=dict)  # (ne_id, feature) -> Threshold

    def __getitem__(self, key):
        return self.entries[key]

    def __contains__(self, key):
        return key in self.entries

    def to_frame(self):
        rows = [{"ne_id": n, "feature": f, "method": t.method, "theta": t.theta, "tau": t.tau,
                 "extras": json.dumps({"p": self.p, **t.extras}, sort_keys=True)}
                for (n, f), t in self.entries.items()]
        return pd.DataFrame(rows, columns=["ne_id", "feature", "method", "theta", "tau", "extras"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path, dtype={"ne_id": str, "feature": str}, float_precision="round_trip")
        table = cls(p=float("nan"))
        for row in df.itertuples(index=False):
            extras = json.loads(row.extras)
            table.p = float(extras.pop("p", table.p))
            table.entries[(row.ne_id, row.feature)] = Threshold(float(row.theta), float(row.tau),
                                                                row.method, extras)
        return table


def fit_exponential(frame, p, split="val", min_count=10):
    """Per-unit exponential MLE (``theta`` = mean) and ``tau = -theta ln(1-p)``.

    Units with fewer than ``min_count`` residuals use the pooled fit over all
    NEs for that feature, recorded as ``extras["fallback"] = "pooled"``.
    """
    table = ThresholdTable(p)
    pooled = {}
    for j, feat in enumerate(frame.features):
        vals = [frame.values(n, j, split) for n in frame.nes]
        allv = np.concatenate(vals) if vals else np.zeros(0)
        pooled[feat] = float(allv.mean()) if allv.size else 0.0
    degenerate = []
    for ne_id in frame.nes:
        for j, feat in enumerate(frame.features):
            v = frame.values(ne_id, j, split)
            extras = {"n": int(v.size)}
            if v.size >= min_count:
                theta = float(v.mean())
            else:
                theta = pooled[feat]
                extras["fallback"] = "pooled"
            if theta == 0.0:
                degenerate.append((ne_id, feat))
            table.entries[(ne_id, feat)] = Threshold(theta, exp_threshold(theta, p), "exponential", extras)
    if degenerate:
        warnings.warn(f"all-zero residuals give tau=0 for {len(degenerate)} unit(s), e.g. {degenerate[:3]}",
                      DegenerateFitWarning, stacklevel=2)
    return table


def gpd_pwm(y):
    """Probability-weighted-moment estimates ``(xi, sigma)`` of a GPD sample."""
    y = np.sort(np.asarray(y, dtype=np.float64))
    n = y.size
    pp = (np.arange(1, n + 1) - 0.35) / n
    a0 = y.mean()
    a1 = np.mean((1.0 - pp) * y)
    d = a0 - 2.0 * a1
    return 2.0 - a0 / d, 2.0 * a0 * a1 / d


def pot_threshold(t0, xi, sigma, n, n_exc, p):
    r = n * (1.0 - p) / n_exc
    if abs(xi) < 1e-9:
        return t0 - sigma * math.log(r)
    return t0 + (sigma / xi) * (r ** (-xi) - 1.0)


def fit_pot(frame, p, init_quantile=0.98, split="val", min_exceedances=30):
    """Static peaks-over-threshold fit per unit, exponential fallback when thin."""
    table = ThresholdTable(p)
    for ne_id in frame.nes:
        for j, feat in enumerate(frame.features):
            v = frame.values(ne_id, j, split)
            theta = float(v.mean()) if v.size else 0.0
            t0 = float(np.quantile(v, init_quantile)) if v.size else 0.0
            exc = v[v > t0] - t0
            reason = None
            if exc.size < min_exceedances:
                reason = f"{exc.size} exceedances < {min_exceedances}"
            else:
                with np.errstate(all="ignore"):
                    xi, sigma = gpd_pwm(exc)
                if not (np.isfinite(xi) and np.isfinite(sigma)) or sigma <= 0:
                    reason = f"invalid GPD fit (xi={xi}, sigma={sigma})"
            if reason is not None:
                table.entries[(ne_id, feat)] = Threshold(
                    theta, exp_threshold(theta, p), "exponential",
                    {"fallback": "exponential", "reason": reason, "t0": t0, "n": int(v.size)})
                continue
            tau = pot_threshold(t0, xi, sigma, v.size, exc.size, p)
            table.entries[(ne_id, feat)] = Threshold(
                theta, float(tau), "pot",
                {"t0": t0, "xi": float(xi), "sigma": float(sigma), "n": int(v.size), "n_exc": int(exc.size)})
    return table


def fit_thresholds(frame, cfg, split="val"):
    if cfg.method == "pot":
        return fit_pot(frame, cfg.p, cfg.pot_init_quantile, split, cfg.min_exceedances)
    return fit_exponential(frame, cfg.p, split, cfg.min_count)


# ---------------------------------------------------------------- decisions


@dataclass
class DecisionFrame:
    """Binary flags per NE over one split; ``y[t, f] = e[t, f] > tau[f]``."""

    features: list
    nes: dict = field(default_factory=dict)  # ne_id -> (timestamps, y uint8 (n,k), e (n,k))

    def keys(self):
        """Anomaly keys ``(ne_id, feature, timestamp)`` of every flagged cell."""
        out = set()
        for ne_id, (ts, y, _) in self.nes.items():
            t_idx, f_idx = np.nonzero(y)
            out.update((ne_id, self.features[f], int(ts[t])) for t, f in zip(t_idx, f_idx))
        return out

    def to_frame(self):
        rows = []
        for ne_id, (ts, y, e) in self.nes.items():
            n, k = y.shape
            rows.append(pd.DataFrame({
                "ne_id": np.repeat(ne_id, n * k), "feature": np.tile(self.features, n),
                "timestamp": np.repeat(ts, k), "e": e.ravel(), "y": y.ravel().astype(int),
            }))
        return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(
            columns=["ne_id", "feature", "timestamp", "e", "y"])

    def to_csv(self, path):
        df = self.to_frame()
        df["timestamp"] = _iso(df["timestamp"].to_numpy())
        df.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_frame(cls, df):
        features = list(dict.fromkeys(df["feature"]))
        fpos = {f: j for j, f in enumerate(features)}
        df = df.assign(_ts=_epoch(df["timestamp"]))
        out = cls(features)
        for ne_id, g in df.groupby("ne_id", sort=False):
            ts, inv = np.unique(g["_ts"].to_numpy(), return_inverse=True)
            cols = g["feature"].map(fpos).to_numpy()
            y = np.zeros((len(ts), len(features)), dtype=np.uint8)
            e = np.full((len(ts), len(features)), np.nan)
            y[inv, cols] = g["y"].to_numpy()
            e[inv, cols] = g["e"].to_numpy(dtype=float)
            out.nes[str(ne_id)] = (ts, y, e)
        return out

    @classmethod
    def read_csv(cls, path):
        return cls.from_frame(pd.read_csv(path, dtype={"ne_id": str, "feature": str}, float_precision="round_trip"))


def flag_anomalies(frame, thresholds, split="test"):
    """Strict ``e > tau`` per unit; missing scores never flag."""
    out = DecisionFrame(list(frame.features))
    for ne_id, r in frame.nes.items():
        taus = []
        for feat in frame.features:
            if (ne_id, feat) not in thresholds:
                raise ContractError(f"no threshold for unit ({ne_id!r}, {feat!r})")
            taus.append(thresholds[(ne_id, feat)].tau)
        sel = r.split == split if split is not None else np.ones(len(r.timestamps), dtype=bool)
        e = frame.e(ne_id)[sel]
        with np.errstate(invalid="ignore"):
            y = (np.nan_to_num(e, nan=-np.inf) > np.asarray(taus)).astype(np.uint8)
        out.nes[ne_id] = (r.timestamps[sel], y, e)
    return out


# ---------------------------------------------------------------- exponential vs gamma


def _gamma_fit(x):
    """Moment-matched shape refined by one Newton step on the profile likelihood."""
    n = x.size
    m, v = x.mean(), x.var()
    a = m * m / v if v > 0 else 1e6
    mlog = np.log(x).mean()
    g1 = n * (mlog - special.digamma(a) - math.log(m) + math.log(a))
    g2 = n * (-special.polygamma(1, a) + 1.0 / a)
    a_new = a - g1 / g2 if g2 != 0 else a
    a = a_new if np.isfinite(a_new) and a_new > 0 else a / 2.0
    scale = m / a
    ll = n * ((a - 1.0) * mlog - m / scale - a * math.log(scale) - special.gammaln(a))
    return float(a), float(scale), float(ll)


def exp_gamma_aic(x, eps=1e-12):
    x = np.maximum(np.asarray(x, dtype=np.float64), eps)
    n = x.size
    theta = float(x.mean())
    aic_exp = 2.0 + 2.0 * n * (math.log(theta) + 1.0)
    if n < 2:
        return {"n": n, "theta": theta, "aic_exp": aic_exp, "aic_gamma": float("nan"),
                "shape": float("nan"), "scale": float("nan"), "winner": "exponential"}
    a, s, ll = _gamma_fit(x)
    aic_gamma = 4.0 - 2.0 * ll
    return {"n": n, "theta": theta, "aic_exp": aic_exp, "aic_gamma": aic_gamma, "shape": a,
            "scale": s, "winner": "exponential" if aic_exp <= aic_gamma else "gamma"}


def compare_exp_gamma(frame, split="val", small_n=30):
    """Per-unit AIC of exponential vs Gamma fits of the validation residuals."""
    rows = []
    for ne_id in frame.nes:
        for j, feat in enumerate(frame.features):
            v = frame.values(ne_id, j, split)
            if v.size == 0:
                continue
            row = {"ne_id": ne_id, "feature": feat, **exp_gamma_aic(v)}
            row["small_sample"] = v.size < small_n
            rows.append(row)
    small = [r for r in rows if r["small_sample"]]
    if small:
        warnings.warn(f"{len(small)} unit(s) have fewer than {small_n} residuals; AIC is unreliable",
                      SmallSampleWarning, stacklevel=2)
    n_exp = sum(r["winner"] == "exponential" for r in rows)
    return {"units": rows, "exponential_fraction": n_exp / len(rows) if rows else float("nan"),
            "n_units": len(rows), "small_sample_units": len(small)}


__all__ = [
    "CalibrationConfig", "DecisionFrame", "NEResiduals", "ResidualFrame", "SPLITS", "Threshold",
    "ThresholdTable", "compare_exp_gamma", "compute_residuals", "exp_gamma_aic", "exp_threshold",
    "fit_exponential", "fit_pot", "fit_thresholds", "flag_anomalies", "gpd_pwm", "pot_threshold",
]
