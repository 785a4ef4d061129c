"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

The numba column reads ``n/a`` when numba is missing or disabled through
``MEDK2N_DISABLE_NUMBA``. Compilation happens in a warm-up call that is not
timed.
"""

import argparse
import timeit

import numpy as np

from medk2n import kernels
from medk2n._accel import HAVE_NUMBA


def cases(rng):
    H = W = 64
    ys, xs = kernels.spiral_samples(H, W)
    x = rng.standard_normal((H * W, 32))
    a = rng.uniform(0.1, 0.95, 32)
    img1, img2 = rng.random((2, 256, 256))
    g = kernels.gaussian_window()
    ell = np.array([[32, 30, 20, 14, 0.3, 1], [28, 34, 6, 4, 1.1, 2], [40, 25, 5, 7, 2.0, 3]], float)
    return {
        "first_visits 64x64": (kernels.first_visits_numpy, kernels.first_visits_numba, (ys, xs, H, W)),
        "gated_scan 4096x32": (kernels.gated_scan_numpy, kernels.gated_scan_numba, (x, a)),
        "ssim_map 256x256": (kernels.ssim_map_numpy, kernels.ssim_map_numba,
                             (img1, img2, g, 1e-4, 9e-4)),
        "paint_ellipses 64x64": (kernels.paint_ellipses_numpy, kernels.paint_ellipses_numba, (64, 64, ell)),
    }


def best_of(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rows = []
    for name, (f_np, f_nb, fargs) in cases(np.random.default_rng(args.seed)).items():
        t_np = best_of(f_np, fargs, args.repeat)
        t_nb = best_of(f_nb, fargs, args.repeat) if HAVE_NUMBA else None
        if HAVE_NUMBA:
            same = np.allclose(f_np(*fargs), f_nb(*fargs), atol=1e-10)
            if not same:
                raise SystemExit(f"{name}: numba and numpy results differ")
        rows.append((name, t_np, t_nb))
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows:
        nb = f"{t_nb * 1e3:10.3f}" if t_nb is not None else f"{'n/a':>10s}"
        sp = f"{t_np / t_nb:8.1f}" if t_nb else f"{'-':>8s}"
        print(f"{name:24s} {t_np * 1e3:10.3f} {nb} {sp}")


if __name__ == "__main__":
    main()
