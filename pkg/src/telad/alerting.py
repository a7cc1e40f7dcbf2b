"""Priority binning and per-group alert aggregation.

Each (NE, feature) gets four validation-quantile edges; a score maps to
level ``1 + #(edges < e)`` in 1..5.  Per group and timestamp the alert
stream carries the number of flagged pairs and the sum of their levels.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ContractError, DegenerateFitWarning

DEFAULT_QUANTILES = (0.98, 0.99, 0.995, 0.999)


@dataclass
class PriorityBinning:
    quantiles: tuple
    edges: dict = field(default_factory=dict)  # (ne_id, feature) -> (4,) edges or None if degenerate

    def level(self, ne_id, feature, e):
        edges = self.edges[(ne_id, feature)]
        e = np.asarray(e, dtype=np.float64)
        if edges is None:
            return np.ones(e.shape, dtype=np.int64)
        return 1 + np.searchsorted(edges, e, side="left").astype(np.int64)

    def to_dict(self):
        return {"quantiles": list(self.quantiles),
                "edges": [{"ne_id": n, "feature": f, "edges": None if e is None else e.tolist()}
                          for (n, f), e in self.edges.items()]}

    @classmethod
    def from_dict(cls, d):
        out = cls(tuple(d["quantiles"]))
        for r in d["edges"]:
            out.edges[(r["ne_id"], r["feature"])] = None if r["edges"] is None else np.asarray(r["edges"])
        return out


def fit_priority_bins(frame, quantiles=DEFAULT_QUANTILES, split="val"):
    """Empirical quantile edges of validation residuals per unit."""
    q = np.asarray(quantiles, dtype=np.float64)
    if q.shape != (4,) or np.any(np.diff(q) <= 0) or q[0] <= 0 or q[-1] >= 1:
        raise ContractError(f"quantiles must be 4 strictly increasing values in (0, 1): {quantiles}")
    bins = PriorityBinning(tuple(float(v) for v in q))
    degenerate = []
    for ne_id in frame.nes:
        for j, feat in enumerate(frame.features):
            v = frame.values(ne_id, j, split)
            edges = np.quantile(v, q) if v.size else None
            if edges is None or np.any(np.diff(edges) <= 0):
                degenerate.append((ne_id, feat))
                edges = None
            bins.edges[(ne_id, feat)] = edges
    if degenerate:
        warnings.warn(f"{len(degenerate)} unit(s) have degenerate residuals; their level is always 1",
                      DegenerateFitWarning, stacklevel=2)
    return bins


@dataclass(frozen=True)
class AlertRecord:
    timestamp: int
    group_id: str
    aggregated_priority: int
    aggregated_count: int
    in_maintenance: bool


def aggregate_alerts(decisions, bins, grouping, maintenance=()):
    """Alert stream from a :class:`DecisionFrame`.

    ``grouping`` maps ne_id -> group_id and must cover every NE.
    ``maintenance`` holds ``(group_id, start, end)`` with inclusive epoch
    second bounds.  Levels are summed over flagged pairs only.
    """
    missing = [n for n in decisions.nes if n not in grouping]
    if missing:
        raise ContractError(f"grouping does not cover NEs {missing[:5]}")
    per_group = {}
    for ne_id, (ts, y, e) in decisions.nes.items():
        prio = np.zeros(len(ts), dtype=np.int64)
        for j, feat in enumerate(decisions.features):
            lv = bins.level(ne_id, feat, np.nan_to_num(e[:, j], nan=-np.inf))
            prio += np.where(y[:, j] > 0, lv, 0)
        cnt = y.astype(np.int64).sum(1)
        acc = per_group.setdefault(grouping[ne_id], {})
        for t, p, c in zip(ts.tolist(), prio.tolist(), cnt.tolist()):
            a = acc.setdefault(t, [0, 0])
            a[0] += p
            a[1] += c
    windows = {}
    for g, a, b in maintenance:
        windows.setdefault(str(g), []).append((int(a), int(b)))
    records = []
    for g in sorted(per_group):
        for t in sorted(per_group[g]):
            p, c = per_group[g][t]
            inside = any(a <= t <= b for a, b in windows.get(str(g), ()))
            records.append(AlertRecord(int(t), str(g), int(p), int(c), bool(inside)))
    return records


def _iso(ts):
    return pd.to_datetime(np.asarray(ts, dtype=np.int64), unit="s", utc=True).strftime("%Y-%m-%dT%H:%M:%SZ")


def alerts_frame(records):
    df = pd.DataFrame([r.__dict__ for r in records],
                      columns=["timestamp", "group_id", "aggregated_priority", "aggregated_count",
                               "in_maintenance"])
    return df


def write_alerts_csv(records, path):
    df = alerts_frame(records)
    df["timestamp"] = _iso(df["timestamp"].to_numpy())
    df.to_csv(path, index=False)


def read_maintenance(path):
    """Maintenance windows CSV (group_id, start, end; ISO-8601) as epoch tuples."""
    df = pd.read_csv(path, dtype={"group_id": str})
    need = {"group_id", "start", "end"}
    if not need.issubset(df.columns):
        raise ContractError(f"maintenance file needs columns {sorted(need)}")
    start = pd.to_datetime(df["start"], utc=True).astype("int64") // 10**9
    end = pd.to_datetime(df["end"], utc=True).astype("int64") // 10**9
    return [(g, int(a), int(b)) for g, a, b in zip(df["group_id"], start, end)]


def plot_json(records):
    """One series per group, ready for an external plotting tool."""
    series = {}
    for r in records:
        s = series.setdefault(r.group_id, {"group_id": r.group_id, "timestamp": [], "aggregated_priority": [],
                                           "aggregated_count": [], "in_maintenance": []})
        s["timestamp"].append(str(_iso([r.timestamp])[0]))
        s["aggregated_priority"].append(r.aggregated_priority)
        s["aggregated_count"].append(r.aggregated_count)
        s["in_maintenance"].append(r.in_maintenance)
    return json.dumps({"series": [series[g] for g in sorted(series)]}, indent=1)
