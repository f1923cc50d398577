"""Time the compiled and pure-numpy pixel kernels on the same inputs.

    python benchmarks/bench_kernels.py [--res 64] [--repeat 200]

Prints microseconds per call and the speedup of each backend over numpy.
Outputs are checked for equality before timing.
"""

import argparse
import timeit

import numpy as np

from taskobs import kernels
from taskobs.obs_core import EntityPalette


def make_inputs(res, seed=0):
    rng = np.random.default_rng(seed)
    robot = rng.random((res, res)) < 0.2
    obj = rng.random((res, res)) < 0.3
    depth = rng.uniform(0.5, 2.0, (res, res))
    return robot, obj, depth


def cases(backend, res):
    robot, obj, depth = make_inputs(res)
    palette = EntityPalette().as_array()
    img, _ = backend.canonicalize(robot, obj, depth, palette, 1e-6)
    norm, _ = backend.normalize_depth(depth, obj, 1e-6)
    l0 = backend.repaint(robot, obj, palette)
    return {
        "repaint": lambda: backend.repaint(robot, obj, palette),
        "normalize_depth": lambda: backend.normalize_depth(depth, obj, 1e-6),
        "fuse": lambda: backend.fuse(l0, obj, norm),
        "canonicalize": lambda: backend.canonicalize(robot, obj, depth, palette, 1e-6),
        "patch_pool_u8": lambda: backend.patch_pool_u8(img, 8),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()

    backends = kernels.backends()
    names = list(backends)
    tables = {n: cases(b, args.res) for n, b in backends.items()}
    for op in tables["python"]:
        outs = [tables[n][op]() for n in names]
        ref = outs[0]
        for n, out in zip(names[1:], outs[1:]):
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            for a, b in pairs:
                assert np.array_equal(a, b), f"{op}: {n} disagrees with {names[0]}"

    print(f"resolution {args.res}x{args.res}, {args.repeat} calls; default backend: {kernels.BACKEND}")
    print(f"{'kernel':<16}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for op in tables["python"]:
        us = {}
        for n in names:
            t = min(timeit.repeat(tables[n][op], number=args.repeat, repeat=3))
            us[n] = 1e6 * t / args.repeat
        speed = us["python"] / us[names[-1]] if len(names) > 1 else 1.0
        print(f"{op:<16}" + "".join(f"{us[n]:>14.2f}" for n in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
