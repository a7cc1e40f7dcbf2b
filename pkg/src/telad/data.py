"""Telemetry ingestion, scaling, encoding, splitting and windowing.

The pipeline is::

    ds = ingest_csv(path, schema)
    ds, report = filter_eligible(ds, max_missing_frac=0.1, L=L, H=H)
    splits = split_timeline(ds)
    scaler, encoder = fit_scalers(ds, splits)
    ds = apply_scalers(ds, (scaler, encoder))
    index = enumerate_windows(ds, splits, L, H, S)
    for batch in assemble_batches(ds, index.select("train"), 32, shuffle_seed=0): ...

Every NE keeps its own regular time grid; timestamps absent from the input
become fully masked rows.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DataError, EmptyDatasetError, SchemaError

ROLES = ("dynamic_real", "dynamic_cat", "static_cat", "static_real")
SPLITS = ("train", "val", "test")
CALENDAR_COLUMNS = ("hour", "dow")


@dataclass
class Schema:
    """Column-role declaration for a dataset CSV."""

    columns: dict
    ne_id: str = "ne_id"
    timestamp: str = "timestamp"
    cadence_minutes: int | None = None
    calendar: bool = True

    def __post_init__(self):
        bad = {c: r for c, r in self.columns.items() if r not in ROLES}
        if bad:
            raise SchemaError(f"unknown column roles {bad}; expected one of {ROLES}")
        if not self.role("dynamic_real"):
            raise SchemaError("schema declares no dynamic_real columns")

    def role(self, role):
        return [c for c, r in self.columns.items() if r == role]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(columns=dict(d.pop("columns")), **d)

    def to_dict(self):
        return {
            "columns": dict(self.columns),
            "ne_id": self.ne_id,
            "timestamp": self.timestamp,
            "cadence_minutes": self.cadence_minutes,
            "calendar": self.calendar,
        }


@dataclass
class NESeries:
    ne_id: str
    timestamps: np.ndarray  # (T,) int64 epoch seconds
    x: np.ndarray  # (T, k) float64, missing cells hold 0
    m: np.ndarray  # (T, k) uint8, 1 where the raw value was absent
    z_raw: np.ndarray  # (T, d_dyn) object, raw dynamic categoricals (None = null)
    s_raw: list  # (d_stat,) raw static categoricals
    r_raw: np.ndarray  # (d_real,) float64, NaN = absent
    z: np.ndarray | None = None  # (T, d_dyn) int64 codes
    s: np.ndarray | None = None  # (d_stat,) int64 codes
    r: np.ndarray | None = None  # (d_real,) float64, scaled statics

    @property
    def T(self):
        return len(self.timestamps)


@dataclass
class TelemetryDataset:
    nes: dict
    cadence_minutes: int
    feature_names: list
    dyn_cat_names: list
    static_cat_names: list
    static_real_names: list
    scaled: bool = False
    encoder: "OrdinalEncoder | None" = None

    def __post_init__(self):
        k = len(self.feature_names)
        for ne in self.nes.values():
            if ne.x.shape[1] != k or ne.m.shape != ne.x.shape:
                raise SchemaError(f"NE {ne.ne_id!r} has {ne.x.shape[1]} KPI columns, expected {k}")

    @property
    def k(self):
        return len(self.feature_names)

    @property
    def ne_ids(self):
        return list(self.nes)

    def subset(self, ne_ids):
        keep = [n for n in self.nes if n in set(ne_ids)]
        return replace(self, nes={n: self.nes[n] for n in keep})

    def dyn_cardinalities(self):
        return [self.encoder.cardinality(c) for c in self.dyn_cat_names]

    def static_cardinalities(self):
        return [self.encoder.cardinality(c) for c in self.static_cat_names]


# ---------------------------------------------------------------- encoding and scaling


class OrdinalEncoder:
    """Category -> code per column; code 0 is the null/unseen token."""

    def __init__(self):
        self.vocab = {}

    def fit(self, values_by_column):
        self.vocab = {}
        for col, values in values_by_column.items():
            cats = sorted({str(v) for v in values if v is not None}, key=_natural_key)
            self.vocab[col] = {c: i + 1 for i, c in enumerate(cats)}
        return self

    def cardinality(self, col):
        return len(self.vocab.get(col, {})) + 1

    def transform(self, col, values):
        table = self.vocab.get(col, {})
        return np.array([0 if v is None else table.get(str(v), 0) for v in values], dtype=np.int64)

    def to_dict(self):
        return {c: dict(v) for c, v in self.vocab.items()}

    @classmethod
    def from_dict(cls, d):
        enc = cls()
        enc.vocab = {c: dict(v) for c, v in d.items()}
        return enc


def _natural_key(s):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


class MinMaxScaler:
    """Per-(NE, feature) min-max from train rows; static reals scaled globally."""

    def __init__(self, mins=None, maxs=None, static_min=None, static_max=None):
        self.mins = mins or {}
        self.maxs = maxs or {}
        self.static_min = static_min
        self.static_max = static_max

    @staticmethod
    def _scale(values, lo, hi):
        rng = hi - lo
        safe = np.where(rng > 0, rng, 1.0)
        return np.where(rng > 0, (values - lo) / safe, 0.0)

    def transform(self, ne_id, x, m):
        out = self._scale(x, self.mins[ne_id], self.maxs[ne_id])
        return np.where(m.astype(bool), 0.0, out)

    def inverse_transform(self, ne_id, x_scaled):
        lo, hi = self.mins[ne_id], self.maxs[ne_id]
        return np.where(hi - lo > 0, x_scaled * (hi - lo) + lo, lo)

    def transform_static(self, r):
        if r.size == 0:
            return r.copy()
        out = self._scale(r, self.static_min, self.static_max)
        return np.where(np.isnan(r), 0.0, out)

    def to_dict(self):
        return {
            "mins": {k: v.tolist() for k, v in self.mins.items()},
            "maxs": {k: v.tolist() for k, v in self.maxs.items()},
            "static_min": None if self.static_min is None else self.static_min.tolist(),
            "static_max": None if self.static_max is None else self.static_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(
            {k: arr(v) for k, v in d["mins"].items()},
            {k: arr(v) for k, v in d["maxs"].items()},
            arr(d["static_min"]),
            arr(d["static_max"]),
        )


# ---------------------------------------------------------------- ingestion


def _to_epoch_seconds(col):
    if pd.api.types.is_numeric_dtype(col):
        return col.astype(np.int64).to_numpy()
    ts = pd.to_datetime(col, utc=True)
    return (ts.astype("int64") // 10**9).to_numpy()


def _calendar(timestamps):
    dt = pd.to_datetime(timestamps, unit="s", utc=True)
    return np.asarray(dt.hour), np.asarray(dt.dayofweek)


def read_frames(paths):
    """Read one or more CSVs sharing an identical header."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    frames = [pd.read_csv(p, dtype={"ne_id": str}, keep_default_na=True, float_precision="round_trip") for p in paths]
    cols = [list(f.columns) for f in frames]
    for p, c in zip(paths[1:], cols[1:]):
        if set(c) != set(cols[0]):
            diff = sorted(set(c) ^ set(cols[0]))
            raise SchemaError(f"{p}: columns differ from {paths[0]}: {diff}")
    return pd.concat(frames, ignore_index=True) if len(frames) > 1 else frames[0]


def ingest_csv(paths, schema):
    """Load dataset CSV(s) into a :class:`TelemetryDataset`."""
    return dataset_from_frame(read_frames(paths), schema)


def dataset_from_frame(df, schema):
    required = [schema.ne_id, schema.timestamp, *schema.columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"declared columns missing from data: {missing}")
    df = df.copy()
    df[schema.ne_id] = df[schema.ne_id].astype(str)
    df["_ts"] = _to_epoch_seconds(df[schema.timestamp])

    dup = df.duplicated([schema.ne_id, "_ts"], keep=False)
    if dup.any():
        offenders = df.loc[dup, [schema.ne_id, schema.timestamp]].drop_duplicates().head(10)
        raise DataError(f"duplicate (ne_id, timestamp) rows: {offenders.values.tolist()}")

    backwards = df.groupby(schema.ne_id, sort=False)["_ts"].diff() < 0
    if backwards.any():
        offenders = df.loc[backwards, [schema.ne_id, schema.timestamp]].head(10)
        raise DataError(f"non-monotone timestamps: {offenders.values.tolist()}")

    cadence = schema.cadence_minutes
    diffs = df.groupby(schema.ne_id, sort=False)["_ts"].diff().dropna()
    if cadence is None:
        if diffs.empty:
            raise DataError("cannot infer cadence from single-row series; declare cadence_minutes")
        cadence = int(diffs.min()) // 60
    step = int(cadence) * 60
    if step <= 0:
        raise DataError(f"cadence must be positive, got {cadence}")
    if (diffs % step != 0).any():
        raise DataError(f"timestamps are not aligned to a {cadence}-minute cadence")

    kpis = schema.role("dynamic_real")
    dyn_cats = schema.role("dynamic_cat")
    stat_cats = schema.role("static_cat")
    stat_reals = schema.role("static_real")
    dyn_names = (list(CALENDAR_COLUMNS) if schema.calendar else []) + dyn_cats
    dyn_names += [f"missing:{c}" for c in kpis]

    nes = {}
    for ne_id, g in df.groupby(schema.ne_id, sort=False):
        t0, t1 = int(g["_ts"].iloc[0]), int(g["_ts"].iloc[-1])
        grid = np.arange(t0, t1 + step, step, dtype=np.int64)
        pos = ((g["_ts"].to_numpy() - t0) // step).astype(np.int64)
        T, k = len(grid), len(kpis)
        raw = np.full((T, k), np.nan)
        raw[pos] = g[kpis].to_numpy(dtype=np.float64)
        m = np.isnan(raw).astype(np.uint8)
        x = np.where(m.astype(bool), 0.0, raw)

        cols = []
        if schema.calendar:
            hour, dow = _calendar(grid)
            cols += [hour.astype(object), dow.astype(object)]
        for c in dyn_cats:
            col = np.full(T, None, dtype=object)
            vals = g[c].to_numpy(dtype=object)
            col[pos] = [None if pd.isna(v) else v for v in vals]
            cols.append(col)
        for j in range(k):
            cols.append(m[:, j].astype(object))
        z_raw = np.stack(cols, axis=1) if cols else np.empty((T, 0), dtype=object)

        s_raw = []
        for c in stat_cats:
            vals = g[c].dropna()
            s_raw.append(None if vals.empty else vals.iloc[0])
        r_raw = np.array(
            [g[c].dropna().iloc[0] if g[c].notna().any() else np.nan for c in stat_reals],
            dtype=np.float64,
        )
        nes[ne_id] = NESeries(str(ne_id), grid, x, m, z_raw, s_raw, r_raw)

    ds = TelemetryDataset(nes, int(cadence), list(kpis), dyn_names, list(stat_cats), list(stat_reals))
    return encode_categoricals(ds, fit_encoder(ds))


def fit_encoder(ds, splits=None):
    """Fit the ordinal encoder on all rows, or on train rows when ``splits`` given."""
    values = {c: [] for c in ds.dyn_cat_names + ds.static_cat_names}
    for ne in ds.nes.values():
        rows = ne.z_raw
        if splits is not None:
            a, b = splits[ne.ne_id].train
            rows = rows[a:b]
        for j, c in enumerate(ds.dyn_cat_names):
            values[c].extend(rows[:, j].tolist())
        for j, c in enumerate(ds.static_cat_names):
            values[c].append(ne.s_raw[j])
    return OrdinalEncoder().fit(values)


def encode_categoricals(ds, encoder):
    nes = {}
    for ne_id, ne in ds.nes.items():
        z = np.stack(
            [encoder.transform(c, ne.z_raw[:, j]) for j, c in enumerate(ds.dyn_cat_names)], axis=1
        ) if ds.dyn_cat_names else np.zeros((ne.T, 0), dtype=np.int64)
        s = np.array(
            [encoder.transform(c, [ne.s_raw[j]])[0] for j, c in enumerate(ds.static_cat_names)],
            dtype=np.int64,
        )
        nes[ne_id] = replace(ne, z=z, s=s)
    return replace(ds, nes=nes, encoder=encoder)


# ---------------------------------------------------------------- splits and eligibility


@dataclass(frozen=True)
class SplitBounds:
    """Half-open index ranges of the three contiguous blocks of one NE."""

    train: tuple
    val: tuple
    test: tuple

    def block(self, name):
        return getattr(self, name)

    def split_of(self, t):
        for name in SPLITS:
            a, b = self.block(name)
            if a <= t < b:
                return name
        return None


def split_bounds(T, test_frac=0.20, val_frac_of_remainder=0.20):
    if not (0 < test_frac < 1 and 0 < val_frac_of_remainder < 1):
        raise DataError("split fractions must lie in (0, 1)")
    n_trainval = int(np.floor(T * (1.0 - test_frac)))
    n_train = int(np.floor(n_trainval * (1.0 - val_frac_of_remainder)))
    return SplitBounds((0, n_train), (n_train, n_trainval), (n_trainval, T))


def split_timeline(ds, test_frac=0.20, val_frac_of_remainder=0.20):
    """Time-ordered train/val/test blocks per NE (floor-rounded boundaries)."""
    return {n: split_bounds(ne.T, test_frac, val_frac_of_remainder) for n, ne in ds.nes.items()}


def load_split_file(path, ds):
    """Read predefined splits: CSV with ne_id, split, start, end (inclusive timestamps)."""
    df = pd.read_csv(path, dtype={"ne_id": str})
    need = {"ne_id", "split", "start", "end"}
    if not need.issubset(df.columns):
        raise SchemaError(f"split file needs columns {sorted(need)}")
    df["start"] = _to_epoch_seconds(df["start"])
    df["end"] = _to_epoch_seconds(df["end"])
    out = {}
    for ne_id, ne in ds.nes.items():
        rows = df[df["ne_id"] == ne_id]
        if rows.empty:
            rows = df[df["ne_id"] == "*"]
        if rows.empty:
            raise DataError(f"split file has no entry for NE {ne_id!r}")
        blocks = {}
        for name in SPLITS:
            r = rows[rows["split"] == name]
            if r.empty:
                blocks[name] = (0, 0)
                continue
            a = int(np.searchsorted(ne.timestamps, int(r["start"].iloc[0]), side="left"))
            b = int(np.searchsorted(ne.timestamps, int(r["end"].iloc[0]), side="right"))
            blocks[name] = (a, b)
        out[ne_id] = SplitBounds(**blocks)
    return out


def filter_eligible(ds, max_missing_frac=0.10, L=1, H=1, splits=None,
                    test_frac=0.20, val_frac_of_remainder=0.20):
    """Drop NEs with too many missing KPI cells or too little history.

    History is sufficient when every non-empty split block holds at least two
    non-overlapping ``L + H`` windows.  Returns ``(dataset, report)`` where the
    report maps each removed NE to its reasons.
    """
    if not 0.0 <= max_missing_frac <= 1.0:
        raise DataError("max_missing_frac must lie in [0, 1]")
    need = L + H
    report = {}
    for ne_id, ne in ds.nes.items():
        reasons = []
        frac = float(ne.m.mean()) if ne.m.size else 1.0
        if frac > max_missing_frac:
            reasons.append(f"missing fraction {frac:.3f} > {max_missing_frac}")
        b = splits[ne_id] if splits is not None else split_bounds(ne.T, test_frac, val_frac_of_remainder)
        for name in SPLITS:
            lo, hi = b.block(name)
            if hi > lo and (hi - lo) // need < 2:
                reasons.append(f"{name} block of {hi - lo} rows holds fewer than 2 windows of {need}")
        if reasons:
            report[ne_id] = reasons
    kept = [n for n in ds.nes if n not in report]
    if not kept:
        raise EmptyDatasetError(f"all {len(ds.nes)} NEs removed by eligibility filter: {report}")
    return ds.subset(kept), report


def fit_scalers(ds, splits, encoder_fit="all"):
    """Fit min-max statistics on train rows and the categorical encoder.

    ``encoder_fit="all"`` fits on every row (deployment); ``"train"`` only on
    train rows (benchmarking).
    """
    mins, maxs = {}, {}
    for ne_id, ne in ds.nes.items():
        a, b = splits[ne_id].train
        if b <= a:
            raise DataError(f"NE {ne_id!r} has an empty train block")
        x = np.where(ne.m[a:b].astype(bool), np.nan, ne.x[a:b])
        observed = ~np.isnan(x).all(axis=0)
        with np.errstate(all="ignore"):
            lo = np.where(observed, np.nanmin(np.where(np.isnan(x), np.inf, x), axis=0), 0.0)
            hi = np.where(observed, np.nanmax(np.where(np.isnan(x), -np.inf, x), axis=0), 0.0)
        mins[ne_id], maxs[ne_id] = lo, hi
    smin = smax = None
    if ds.static_real_names:
        r = np.stack([ne.r_raw for ne in ds.nes.values()])
        smin = np.where(np.isnan(r).all(0), 0.0, np.nanmin(np.where(np.isnan(r), np.inf, r), axis=0))
        smax = np.where(np.isnan(r).all(0), 0.0, np.nanmax(np.where(np.isnan(r), -np.inf, r), axis=0))
    if encoder_fit == "all":
        encoder = fit_encoder(ds)
    elif encoder_fit == "train":
        encoder = fit_encoder(ds, splits)
    else:
        raise DataError(f"encoder_fit must be 'all' or 'train', got {encoder_fit!r}")
    return MinMaxScaler(mins, maxs, smin, smax), encoder


def apply_scalers(ds, scalers):
    scaler, encoder = scalers
    ds = encode_categoricals(ds, encoder)
    nes = {}
    for ne_id, ne in ds.nes.items():
        nes[ne_id] = replace(
            ne,
            x=scaler.transform(ne_id, ne.x, ne.m),
            r=scaler.transform_static(ne.r_raw) if ne.r_raw.size else np.zeros(0),
        )
    return replace(ds, nes=nes, scaled=True)


# ---------------------------------------------------------------- windows and batches


@dataclass
class WindowIndex:
    ne_ids: list
    starts: np.ndarray
    splits: list
    L: int
    H: int
    S: int

    def __len__(self):
        return len(self.starts)

    def select(self, split):
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return WindowIndex([self.ne_ids[i] for i in keep], self.starts[keep],
                           [split] * len(keep), self.L, self.H, self.S)

    def entries(self):
        return list(zip(self.ne_ids, self.starts.tolist(), self.splits))


def enumerate_windows(ds, splits, L, H, S, blocks=SPLITS):
    """Window starts advancing by ``S`` inside each split block.

    A window's input ``[t0, t0+L-1]`` and target ``[t0+L, t0+L+H-1]`` lie in
    the same block.
    """
    if min(L, H, S) < 1:
        raise DataError("L, H and S must be >= 1")
    ne_ids, starts, tags = [], [], []
    for ne_id in ds.nes:
        for name in blocks:
            a, b = splits[ne_id].block(name)
            for t0 in range(a, b - L - H + 1, S):
                ne_ids.append(ne_id)
                starts.append(t0)
                tags.append(name)
    return WindowIndex(ne_ids, np.asarray(starts, dtype=np.int64), tags, L, H, S)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, L, k)
    targets: np.ndarray  # (B, H, k)
    dyn_ctx: np.ndarray  # (B, L, d_dyn) int codes
    static_codes: np.ndarray  # (B, d_stat) int codes
    static_reals: np.ndarray  # (B, d_real)
    provenance: list = field(default_factory=list)  # [(ne_id, t0)]

    def __post_init__(self):
        n = {len(self.inputs), len(self.targets), len(self.dyn_ctx),
             len(self.static_codes), len(self.static_reals)}
        if len(n) != 1:
            raise DataError(f"batch fields disagree on batch size: {sorted(n)}")

    def __len__(self):
        return len(self.inputs)


def gather_windows(ds, entries, L, H):
    """Build a :class:`WindowBatch` from ``(ne_id, t0)`` pairs.

    Targets that run past the end of the series are zero-padded; callers
    that need complete targets only pass starts from :func:`enumerate_windows`.
    """
    B = len(entries)
    k = ds.k
    d_dyn = len(ds.dyn_cat_names)
    inputs = np.empty((B, L, k))
    targets = np.zeros((B, H, k))
    dyn = np.empty((B, L, d_dyn), dtype=np.int64)
    scodes = np.empty((B, len(ds.static_cat_names)), dtype=np.int64)
    sreals = np.empty((B, len(ds.static_real_names)))
    for i, (ne_id, t0) in enumerate(entries):
        ne = ds.nes[ne_id]
        inputs[i] = ne.x[t0:t0 + L]
        tgt = ne.x[t0 + L:t0 + L + H]
        targets[i, :len(tgt)] = tgt
        dyn[i] = ne.z[t0:t0 + L]
        scodes[i] = ne.s
        sreals[i] = ne.r if ne.r is not None else np.nan_to_num(ne.r_raw)
    return WindowBatch(inputs, targets, dyn, scodes, sreals, [(n, int(t)) for n, t in entries])


def assemble_batches(ds, index, batch_size, shuffle_seed=None):
    """Yield batches covering every window once; shuffled when a seed is given."""
    order = np.arange(len(index))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(index))
    for lo in range(0, len(order), batch_size):
        sel = order[lo:lo + batch_size]
        entries = [(index.ne_ids[i], int(index.starts[i])) for i in sel]
        yield gather_windows(ds, entries, index.L, index.H)
