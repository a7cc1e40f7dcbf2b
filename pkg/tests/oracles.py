"""Brute-force reference implementations used by the metric tests.

Written from the definitions with plain loops and index sets, sharing no code
with ``telad.metrics``.
"""


def runs(stream):
    out, cur = [], None
    for i, v in enumerate(stream):
        if v and cur is None:
            cur = i
        if not v and cur is not None:
            out.append(set(range(cur, i)))
            cur = None
    if cur is not None:
        out.append(set(range(cur, len(stream))))
    return out


def counts_affiliation(gt, pred):
    G, P = runs(gt), runs(pred)
    tp = fp = 0
    for p in P:
        best = max((len(g & p) / len(g | p) for g in G), default=0.0)
        if best > 0:
            tp += 1
        else:
            fp += 1
    fn = sum(1 for g in G if not any(g & p for p in P))
    return tp, fp, fn, len(G)


def counts_pointwise(gt, pred):
    tp = sum(1 for a, b in zip(gt, pred) if a and b)
    fp = sum(1 for a, b in zip(gt, pred) if not a and b)
    fn = sum(1 for a, b in zip(gt, pred) if a and not b)
    return tp, fp, fn, tp + fn


def prf_from(tp, fp, fn, n_gt):
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = (n_gt - fn) / n_gt if n_gt > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def column(rows, j):
    return [row[j] for row in rows]


def aggregate(gt_rows, pred_rows, mode, kind):
    """``gt_rows``/``pred_rows``: lists of timestamps, each a list of 0/1 per feature."""
    count = counts_affiliation if kind == "affiliation" else counts_pointwise
    F = len(gt_rows[0])
    if mode == "union":
        g = [int(any(r)) for r in gt_rows]
        p = [int(any(r)) for r in pred_rows]
        return prf_from(*count(g, p))
    per = [count(column(gt_rows, j), column(pred_rows, j)) for j in range(F)]
    if mode == "micro":
        return prf_from(*[sum(c[i] for c in per) for i in range(4)])
    vals = [prf_from(*c) for c in per]
    return tuple(sum(v[i] for v in vals) / F for i in range(3))
