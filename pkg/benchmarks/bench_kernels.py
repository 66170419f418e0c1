"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--draws 1000] [--repeat 5]

Each kernel is checked for agreement first, then timed on the same batch.
The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from dadvi import _kernels as K
from dadvi.model import bradley_terry_synthetic, instantiate_hierarchical


def cases(draws, seed):
    rng = np.random.default_rng(seed)
    hier = instantiate_hierarchical(1000, 0)
    th = rng.standard_normal((draws, hier.dim)) * 0.5
    vh = rng.standard_normal((draws, hier.dim))
    bt = bradley_terry_synthetic(200, 5000, 0)
    tb = rng.standard_normal((draws, bt.dim)) * 0.5
    vb = rng.standard_normal((draws, bt.dim))
    w, l = bt.winners, bt.losers
    return [
        ("hier_logp", (th, hier.y)),
        ("hier_grad", (th, hier.y)),
        ("hier_hvp", (th, vh, hier.y)),
        ("bt_loglik", (tb, w, l)),
        ("bt_grad", (tb, w, l)),
        ("bt_hvp", (tb, vb, w, l)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--draws", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled (DADVI_DISABLE_NUMBA); timing numpy only")
    print(f"{'kernel':<10} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max rel diff':>13}")
    for name, fargs in cases(args.draws, args.seed):
        f_np = getattr(K, f"{name}_numpy")
        f_nb = getattr(K, f"{name}_numba")
        ref = f_np(*fargs)
        t_np = min(timeit.repeat(lambda: f_np(*fargs), number=1, repeat=args.repeat)) * 1e3
        if f_nb is None:
            print(f"{name:<10} {t_np:>10.2f} {'-':>10} {'-':>8} {'-':>13}")
            continue
        out = f_nb(*fargs)
        diff = np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1.0))
        t_nb = min(timeit.repeat(lambda: f_nb(*fargs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<10} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.1f} {diff:>13.2e}")


if __name__ == "__main__":
    main()
