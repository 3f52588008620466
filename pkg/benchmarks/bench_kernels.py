"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the desk model: the stem conv on a 128x64 panel batch, a
3x3 conv deeper in the encoder, and folding 16 panels back into a
256-column panorama.
"""

import argparse
import timeit

import numpy as np

from panelnet._kernels import _pykernels

try:
    from panelnet._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    stem = rng.standard_normal((16, 3, 128, 64)).astype(np.float32)
    mid = rng.standard_normal((16, 32, 16, 8)).astype(np.float32)
    cols = _pykernels.im2col(mid, 3, 3, 1, 1)
    panels = rng.standard_normal((16, 4, 128, 64)).astype(np.float32)
    return {
        "im2col 7x7/2 stem": lambda k: k.im2col(stem, 7, 7, 2, 3),
        "im2col 3x3 mid": lambda k: k.im2col(mid, 3, 3, 1, 1),
        "col2im 3x3 mid": lambda k: k.col2im(cols, 16, 32, 16, 8, 3, 3, 1, 1),
        "fold 16 panels": lambda k: k.fold_columns(panels, 256, 16),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the fallback only")

    print(f"{'kernel':22s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        ref = fn(_pykernels)
        times = {}
        for b, mod in backends.items():
            assert np.allclose(fn(mod), ref, atol=1e-5), f"{name}: {b} disagrees with the fallback"
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        line = f"{name:22s}" + "".join(f"{t:10.3f}ms" for t in times.values())
        if "cython" in times:
            line += f"  {times['python'] / times['cython']:8.2f}x"
        print(line)


if __name__ == "__main__":
    main()
