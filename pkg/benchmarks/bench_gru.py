"""Compare the compiled and numpy GRU kernels.

    python3 benchmarks/bench_gru.py [--repeat N]

Prints forward/backward milliseconds per call for each backend and the max
absolute difference between them.
"""

import argparse
import time

import numpy as np

from telad.autodiff import _gru_py, kernels

SHAPES = [(24, 32, 16), (24, 100, 32), (24, 100, 128), (100, 30, 64), (101, 30, 128)]


def _time(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn()
    return (time.perf_counter() - t0) / repeat * 1e3, out


def bench(shape, repeat, rng):
    T, B, H = shape
    xp = rng.normal(size=(T, B, 3 * H))
    h0 = rng.normal(size=(B, H))
    wh = rng.normal(size=(H, 3 * H)) / np.sqrt(H)
    bh = rng.normal(size=3 * H) * 0.1
    dhs = rng.normal(size=(T, B, H))
    rows = {}
    mods = {"python": _gru_py}
    if "cython" in kernels.available():
        from telad.autodiff import _gru_ext

        mods["cython"] = _gru_ext
    for name, mod in mods.items():
        tf, (hs, cache) = _time(lambda: mod.gru_forward(xp, h0, wh, bh), repeat)
        tb, grads = _time(lambda: mod.gru_backward(dhs, cache, h0, hs, wh), repeat)
        rows[name] = (tf, tb, hs, grads)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'T,B,H':>14} {'backend':>8} {'fwd ms':>8} {'bwd ms':>8} {'speedup':>8}")
    for shape in SHAPES:
        rows = bench(shape, args.repeat, rng)
        base = rows["python"][0] + rows["python"][1]
        for name, (tf, tb, _, _) in rows.items():
            print(f"{str(shape):>14} {name:>8} {tf:8.2f} {tb:8.2f} {base / (tf + tb):8.2f}")
        if "cython" in rows:
            diff = np.abs(rows["python"][2] - rows["cython"][2]).max()
            gdiff = max(np.abs(a - b).max() for a, b in zip(rows["python"][3], rows["cython"][3]))
            print(f"{'':>14} max |dh| {diff:.1e}  max |dgrad| {gdiff:.1e}")


if __name__ == "__main__":
    main()
