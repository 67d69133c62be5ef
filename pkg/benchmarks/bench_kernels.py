"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time of each backend and
the speedup. Exits with status 1 if the compiled extension is not built.
"""

import argparse
import sys
import timeit

import numpy as np

from georep import _kernels
from georep.geom import random_rotation


def cases(rng):
    m = 4096
    p = rng.uniform(-1, 2, (m, 2))
    start = rng.uniform(0, 1, (m, 2))
    delta = rng.normal(0, 0.3, (m, 2))
    radius = np.full(m, 0.1)
    rot = np.stack([random_rotation(2, rng) for _ in range(m)])
    half = np.array([0.15, 0.04])
    batch = rng.normal(size=128)
    big = rng.normal(size=10000)

    def disc(k):
        img = np.zeros((32, 32))
        k.splat_disc(img, 12.3, 20.1, 3.2, 1.0, 1.5)

    def box(k):
        img = np.zeros((32, 32))
        k.splat_box(img, 12.3, 20.1, 4.8, 1.3, 0.8, 0.6, 1.0, 1.5)

    return {
        "closest_params (4096)": lambda k: k.closest_params(p, start, delta),
        "point_segment_sqdist (4096)": lambda k: k.point_segment_sqdist(p, start, delta),
        "ball_contact (4096)": lambda k: k.ball_contact(p, radius, start, delta),
        "box_contact (4096)": lambda k: k.box_contact(p, rot, half, start, delta),
        "otsu_threshold (128)": lambda k: k.otsu_threshold(batch),
        "otsu_threshold (10000)": lambda k: k.otsu_threshold(big),
        "splat_disc (32x32)": disc,
        "splat_box (32x32)": box,
    }


def best_time(fn, kernels, repeat):
    timer = timeit.Timer(lambda: fn(kernels))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels.compiled_backend is None:
        print("compiled kernels are not built; run `python3 setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'python [us]':>12s} {'compiled [us]':>14s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = best_time(fn, _kernels.python_backend, args.repeat)
        t_c = best_time(fn, _kernels.compiled_backend, args.repeat)
        print(f"{name:30s} {t_py * 1e6:12.1f} {t_c * 1e6:14.1f} {t_py / t_c:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
