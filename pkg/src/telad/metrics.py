"""Pointwise and event-affiliation metrics with Macro/Micro/Union aggregation.

Event affiliation: consecutive positives form inclusive intervals.  Each
predicted event is matched to the ground-truth event of largest IoU; it is a
true positive when that IoU is positive.  Ground-truth events no prediction
touches are false negatives and recall is the covered fraction of GT events.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class EventInterval:
    start: int
    end: int  # inclusive

    def __len__(self):
        return self.end - self.start + 1


def merge_events(stream):
    """Maximal runs of ones as inclusive intervals."""
    s = np.asarray(stream).astype(bool).astype(np.int8)
    if s.size == 0:
        return []
    d = np.diff(np.concatenate([[0], s, [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return [EventInterval(int(a), int(b)) for a, b in zip(starts, ends)]


def expand_events(events, length):
    out = np.zeros(length, dtype=np.uint8)
    for ev in events:
        out[ev.start:ev.end + 1] = 1
    return out


def iou(g, p):
    inter = min(g.end, p.end) - max(g.start, p.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (len(g) + len(p) - inter)


def prf(tp, fp, fn):
    """Precision/recall/F1 with 0/0 -> 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class Counts:
    """Confusion counts.  For events ``n_gt`` is |G|; recall uses (n_gt - fn) / n_gt."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_gt: int = 0
    n_pred: int = 0

    def __add__(self, other):
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                      self.n_gt + other.n_gt, self.n_pred + other.n_pred)

    def prf(self):
        p = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        r = (self.n_gt - self.fn) / self.n_gt if self.n_gt else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return p, r, f

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "n_gt": self.n_gt, "n_pred": self.n_pred}


def affiliation_counts(gt_events, pred_events):
    gt = sorted(gt_events, key=lambda e: e.start)
    tp = fp = 0
    covered = set()
    starts = np.array([g.start for g in gt])
    ends = np.array([g.end for g in gt])
    for p in pred_events:
        # only GT events that intersect p can have positive IoU
        lo = int(np.searchsorted(ends, p.start, side="left"))
        hi = int(np.searchsorted(starts, p.end, side="right"))
        best, best_i = 0.0, -1
        for i in range(lo, hi):
            v = iou(gt[i], p)
            if v > best:
                best, best_i = v, i
        if best > 0:
            tp += 1
            covered.add(best_i)
        else:
            fp += 1
        # GT events overlapped by p count as covered even if p affiliates elsewhere
        covered.update(i for i in range(lo, hi) if iou(gt[i], p) > 0)
    fn = len(gt) - len(covered)
    return Counts(tp, fp, fn, len(gt), len(pred_events))


def affiliation_prf(gt_events, pred_events):
    """``(P, R, F1, TP, FP, FN)`` under max-IoU affiliation."""
    c = affiliation_counts(gt_events, pred_events)
    return (*c.prf(), c.tp, c.fp, c.fn)


def _check_streams(gt, pred):
    gt, pred = np.asarray(gt).astype(bool), np.asarray(pred).astype(bool)
    if gt.shape != pred.shape:
        raise ContractError(f"stream lengths differ: {gt.shape} vs {pred.shape}")
    return gt, pred


def pointwise_counts(gt, pred):
    gt, pred = _check_streams(gt, pred)
    tp = int((gt & pred).sum())
    fp = int((~gt & pred).sum())
    fn = int((gt & ~pred).sum())
    return Counts(tp, fp, fn, int(gt.sum()), int(pred.sum()))


def pointwise_prf(gt, pred):
    c = pointwise_counts(gt, pred)
    return prf(c.tp, c.fp, c.fn)


def stream_counts(gt, pred, kind):
    if kind == "pointwise":
        return pointwise_counts(gt, pred)
    if kind == "affiliation":
        _check_streams(gt, pred)
        return affiliation_counts(merge_events(gt), merge_events(pred))
    raise ContractError(f"unknown metric kind {kind!r}")


def aggregate(gt, pred, mode, kind="affiliation"):
    """Aggregate over features of ``(n, F)`` streams (or lists of them, e.g. one per NE).

    ``macro`` averages per-feature P, R and F1; ``micro`` pools counts;
    ``union`` ORs features at each timestamp before applying the metric.
    """
    gts = [np.asarray(g) for g in (gt if isinstance(gt, list) else [gt])]
    preds = [np.asarray(p) for p in (pred if isinstance(pred, list) else [pred])]
    if mode == "union":
        c = sum((stream_counts(g.any(1), p.any(1), kind) for g, p in zip(gts, preds)), Counts())
        return c.prf()
    per_feat = [sum((stream_counts(g[:, f], p[:, f], kind) for g, p in zip(gts, preds)), Counts())
                for f in range(gts[0].shape[1])]
    if mode == "micro":
        return sum(per_feat, Counts()).prf()
    if mode == "macro":
        vals = np.array([c.prf() for c in per_feat])
        return tuple(float(v) for v in vals.mean(0))
    raise ContractError(f"unknown aggregation mode {mode!r}")


def random_baseline(gt, seed=0):
    """Bernoulli(prevalence) predictions per feature column of ``gt`` (n, F)."""
    gt = np.asarray(gt).astype(bool)
    rng = np.random.default_rng(seed)
    prev = gt.mean(0) if gt.size else np.zeros(gt.shape[1:])
    return (rng.random(gt.shape) < prev).astype(np.uint8)


def jaccard_overlap(a, b):
    """``|A & B| / |A | B|``; two empty sets give 1 by convention."""
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    features: list
    per_feature: dict = field(default_factory=dict)  # kind -> feature -> {"p","r","f1",counts}
    aggregates: dict = field(default_factory=dict)  # kind -> mode -> (p, r, f1)
    counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"features": self.features, "per_feature": self.per_feature,
                "aggregates": {k: {m: list(v) for m, v in d.items()} for k, d in self.aggregates.items()},
                "counts": self.counts, "meta": self.meta}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def table(self, kind="affiliation"):
        head = f"{'feature':<16}{'P':>8}{'R':>8}{'F1':>8}{'#GT ev':>8}{'#pred ev':>9}{'#GT ts':>8}{'#pred ts':>9}"
        lines = [f"[{kind}]", head, "-" * len(head)]
        for f in self.features:
            r = self.per_feature[kind][f]
            ce = self.per_feature["affiliation"][f]["counts"]
            cp = self.per_feature["pointwise"][f]["counts"]
            lines.append(f"{f:<16}{r['p']:8.3f}{r['r']:8.3f}{r['f1']:8.3f}"
                         f"{ce['n_gt']:8d}{ce['n_pred']:9d}{cp['n_gt']:8d}{cp['n_pred']:9d}")
        lines.append("-" * len(head))
        for mode in ("macro", "micro", "union"):
            p, r, f1 = self.aggregates[kind][mode]
            lines.append(f"{mode.capitalize():<16}{p:8.3f}{r:8.3f}{f1:8.3f}")
        return "\n".join(lines)


def evaluate_streams(gt, pred, features, meta=None):
    """Full report for aligned ``gt``/``pred`` arrays (one ``(n, F)`` pair per NE)."""
    gts = gt if isinstance(gt, list) else [gt]
    preds = pred if isinstance(pred, list) else [pred]
    rep = MetricReport(list(features), meta=dict(meta or {}))
    for kind in ("pointwise", "affiliation"):
        rep.per_feature[kind] = {}
        for j, f in enumerate(features):
            c = sum((stream_counts(g[:, j], p[:, j], kind) for g, p in zip(gts, preds)), Counts())
            p_, r_, f1 = c.prf()
            rep.per_feature[kind][f] = {"p": p_, "r": r_, "f1": f1, "counts": c.to_dict()}
        rep.aggregates[kind] = {m: aggregate(gts, preds, m, kind) for m in ("macro", "micro", "union")}
    rep.counts = {
        "gt_events": sum(v["counts"]["n_gt"] for v in rep.per_feature["affiliation"].values()),
        "pred_events": sum(v["counts"]["n_pred"] for v in rep.per_feature["affiliation"].values()),
        "gt_timestamps": sum(v["counts"]["n_gt"] for v in rep.per_feature["pointwise"].values()),
        "pred_timestamps": sum(v["counts"]["n_pred"] for v in rep.per_feature["pointwise"].values()),
    }
    return rep


def label_streams(decisions, labels):
    """Ground-truth arrays aligned to a :class:`DecisionFrame`.

    ``labels`` is a frame with ne_id, feature, timestamp (epoch seconds) and
    label; absent rows are negatives.
    """
    pos = labels[labels["label"].astype(int) == 1]
    keyset = set(zip(pos["ne_id"].astype(str), pos["feature"].astype(str), pos["timestamp"].astype(np.int64)))
    gts, preds = [], []
    for ne_id, (ts, y, _) in decisions.nes.items():
        g = np.zeros_like(y)
        for j, f in enumerate(decisions.features):
            g[:, j] = [(ne_id, f, int(t)) in keyset for t in ts]
        gts.append(g)
        preds.append(y)
    return gts, preds


def comparison_table(reports, kind="affiliation"):
    """Side-by-side per-feature P/R/F1 of several methods plus aggregate rows."""
    names = list(reports)
    feats = reports[names[0]].features
    head = f"{'feature':<16}" + "".join(f"{n + ' P':>10}{n + ' R':>10}{n + ' F1':>10}" for n in names)
    lines = [f"[{kind}]", head, "-" * len(head)]
    for f in feats:
        cells = "".join(f"{reports[n].per_feature[kind][f]['p']:10.3f}{reports[n].per_feature[kind][f]['r']:10.3f}"
                        f"{reports[n].per_feature[kind][f]['f1']:10.3f}" for n in names)
        lines.append(f"{f:<16}{cells}")
    lines.append("-" * len(head))
    for mode in ("macro", "micro", "union"):
        cells = "".join("".join(f"{v:10.3f}" for v in reports[n].aggregates[kind][mode]) for n in names)
        lines.append(f"{mode.capitalize():<16}{cells}")
    return "\n".join(lines)
