"""Seeded synthetic multi-NE telemetry with injected, labelled anomalies.

Each KPI is a daily + weekly seasonal profile on top of a per-NE offset.
NEs carry a static ``profile`` category: ``business`` NEs go quiet at the
weekend, ``residential`` ones get busier.  That effect is only visible
through the calendar and static context, so context-conditioning has
something to learn.

Injection happens after noise, so ``|value - pre-injection value|`` over an
injected cell is exactly the planned magnitude.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .data import Schema, dataset_from_frame
from .errors import SpecError

KINDS = ("spike", "level_shift", "dropout")
PROFILES = ("business", "residential")


@dataclass
class Anomaly:
    ne: int
    features: list
    start: int
    end: int  # exclusive
    kind: str = "spike"
    magnitude: float = 1.0
    sign: int = 1  # level shifts only

    def delta(self):
        if self.kind == "spike":
            return self.magnitude
        if self.kind == "dropout":
            return -self.magnitude
        return self.magnitude * (1 if self.sign >= 0 else -1)


@dataclass
class SynthSpec:
    n_nes: int = 5
    T: int = 2000
    k: int = 4
    cadence_minutes: int = 60
    start: str = "2024-01-01T00:00:00Z"
    noise: float = 0.02
    daily_amplitude: tuple = (0.5, 1.0)
    weekly_amplitude: tuple = (0.0, 0.3)
    offset_scale: float = 1.0
    weekend_damping: float = 0.3
    weekend_boost: float = 1.6
    missing_frac: float = 0.0
    anomalies: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.anomalies = [a if isinstance(a, Anomaly) else Anomaly(**a) for a in self.anomalies]
        if min(self.n_nes, self.T, self.k, self.cadence_minutes) < 1:
            raise SpecError("n_nes, T, k and cadence_minutes must be positive")
        for a in self.anomalies:
            if a.kind not in KINDS:
                raise SpecError(f"unknown anomaly kind {a.kind!r}; expected one of {KINDS}")
            if not (0 <= a.start < a.end <= self.T):
                raise SpecError(f"anomaly interval [{a.start}, {a.end}) outside [0, {self.T})")
            if a.magnitude <= 0:
                raise SpecError(f"anomaly magnitude must be > 0, got {a.magnitude}")
            if not 0 <= a.ne < self.n_nes or any(not 0 <= f < self.k for f in a.features):
                raise SpecError(f"anomaly references unknown NE/feature: {a}")

    def to_dict(self):
        d = asdict(self)
        d["daily_amplitude"] = list(self.daily_amplitude)
        d["weekly_amplitude"] = list(self.weekly_amplitude)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ne_name(i):
    return f"ne{i:03d}"


def feature_name(f):
    return f"kpi{f}"


def plan_anomalies(n_nes, T, k, count, magnitude, rng, min_len=1, max_len=6,
                   kinds=KINDS, max_features=2, lo=0, gap=2):
    """Random non-overlapping anomaly plan (per NE, intervals separated by ``gap``).

    ``lo`` keeps injections out of the first ``lo`` steps, e.g. the train block.
    """
    taken = {i: [] for i in range(n_nes)}
    plan = []
    for _ in range(count * 50):
        if len(plan) == count:
            break
        ne = int(rng.integers(n_nes))
        length = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(lo, T - length))
        if any(start < e + gap and s < start + length + gap for s, e in taken[ne]):
            continue
        nf = int(rng.integers(1, min(max_features, k) + 1))
        feats = sorted(rng.choice(k, size=nf, replace=False).tolist())
        kind = str(kinds[int(rng.integers(len(kinds)))])
        plan.append(Anomaly(ne, feats, start, start + length, kind, float(magnitude),
                            int(rng.choice([-1, 1]))))
        taken[ne].append((start, start + length))
    if len(plan) < count:
        raise SpecError(f"could only place {len(plan)} of {count} anomalies")
    return plan


def _clean_signal(spec, rng):
    """Noise-free per-NE signals ``(n_nes, T, k)`` plus static attributes."""
    step = spec.cadence_minutes * 60
    t0 = int(pd.Timestamp(spec.start).timestamp())
    ts = t0 + step * np.arange(spec.T, dtype=np.int64)
    dt = pd.to_datetime(ts, unit="s", utc=True)
    hour = np.asarray(dt.hour) + np.asarray(dt.minute) / 60.0
    dow = np.asarray(dt.dayofweek)
    weekend = dow >= 5

    n, k = spec.n_nes, spec.k
    profiles = rng.integers(len(PROFILES), size=n)
    capacity = rng.uniform(0.5, 2.0, size=n)
    offsets = rng.normal(0.0, spec.offset_scale, size=(n, k)) + 3.0 * capacity[:, None]
    amp_d = rng.uniform(*spec.daily_amplitude, size=(n, k))
    amp_w = rng.uniform(*spec.weekly_amplitude, size=(n, k))
    phase = rng.uniform(0, 24, size=(n, k))
    clean = np.empty((n, spec.T, k))
    for i in range(n):
        factor = spec.weekend_damping if PROFILES[profiles[i]] == "business" else spec.weekend_boost
        wk = np.where(weekend, factor, 1.0)[:, None]
        daily = np.sin(2 * np.pi * (hour[:, None] + phase[i]) / 24.0)
        weekly = np.cos(2 * np.pi * (dow[:, None] + hour[:, None] / 24.0) / 7.0)
        clean[i] = offsets[i] + amp_d[i] * daily * wk + amp_w[i] * weekly
    return ts, clean, profiles, capacity


def generate_arrays(spec):
    """Numpy core of :func:`generate`.

    Returns ``(timestamps, clean, noisy, values, labels, profiles, capacity)``;
    ``values`` has NaN where cells were dropped as missing.
    """
    rng = np.random.default_rng(spec.seed)
    ts, clean, profiles, capacity = _clean_signal(spec, rng)
    noisy = clean + rng.normal(0.0, spec.noise, size=clean.shape)
    values = noisy.copy()
    labels = np.zeros(clean.shape, dtype=np.uint8)
    for a in spec.anomalies:
        cells = labels[a.ne, a.start:a.end][:, a.features]
        if cells.any():
            raise SpecError(f"anomaly {a} overlaps an earlier injection")
        for f in a.features:
            values[a.ne, a.start:a.end, f] += a.delta()
            labels[a.ne, a.start:a.end, f] = 1
    if spec.missing_frac > 0:
        drop = rng.random(values.shape) < spec.missing_frac
        drop &= labels == 0
        values = np.where(drop, np.nan, values)
    return ts, clean, noisy, values, labels, profiles, capacity


def schema_for(spec):
    cols = {feature_name(f): "dynamic_real" for f in range(spec.k)}
    cols.update({"profile": "static_cat", "capacity": "static_real",
                 "local_area": "static_cat"})
    return Schema(columns=cols, cadence_minutes=spec.cadence_minutes)


def generate_frames(spec):
    """Dataset and label tables in the CSV layouts of the ingestion layer."""
    ts, _, _, values, labels, profiles, capacity = generate_arrays(spec)
    iso = pd.to_datetime(ts, unit="s", utc=True).strftime("%Y-%m-%dT%H:%M:%SZ")
    parts, lab = [], []
    for i in range(spec.n_nes):
        df = pd.DataFrame(values[i], columns=[feature_name(f) for f in range(spec.k)])
        df.insert(0, "timestamp", iso)
        df.insert(0, "ne_id", ne_name(i))
        df["profile"] = PROFILES[profiles[i]]
        df["capacity"] = capacity[i]
        df["local_area"] = f"area{i % 3}"
        parts.append(df)
        t_idx, f_idx = np.nonzero(labels[i])
        lab.append(pd.DataFrame({
            "ne_id": ne_name(i),
            "feature": [feature_name(f) for f in f_idx],
            "timestamp": iso[t_idx],
            "label": 1,
        }))
    data = pd.concat(parts, ignore_index=True)
    labels_df = pd.concat(lab, ignore_index=True)
    return data, labels_df.sort_values(["ne_id", "feature", "timestamp"], ignore_index=True)


def generate(spec):
    """``(TelemetryDataset, label frame)``; the label frame lists positive cells."""
    data, labels = generate_frames(spec)
    return dataset_from_frame(data, schema_for(spec)), labels


def write_synth(spec, out_dir):
    """Write ``data.csv``, ``labels.csv`` and ``schema.json`` into ``out_dir``."""
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, labels = generate_frames(spec)
    data.to_csv(out / "data.csv", index=False, float_format="%.17g")
    labels.to_csv(out / "labels.csv", index=False)
    (out / "schema.json").write_text(json.dumps(schema_for(spec).to_dict(), indent=2, sort_keys=True))
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return out
