"""Compiled vs pure-numpy kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-``repeat`` time per call for each kernel and backend and
the speedup of the compiled one.
"""

import argparse
import timeit

import numpy as np

from sertk import kernels


def cases(rng):
    audio = rng.normal(size=44100)
    image = rng.random((128, 94, 3))
    y = kernels.softmax_rows(rng.normal(size=(4, 197, 197)).astype(np.float32))
    g = rng.normal(size=y.shape).astype(np.float32)
    return {
        "sinc_resample 44.1k->16k, 1 s": lambda k: k.sinc_resample(audio, 44100.0, 16000.0, 16000, 16),
        "bilinear_resize 128x94 -> 224x224": lambda k: k.bilinear_resize(image, 224, 224),
        "softmax_rows_backward 4x197x197 f32": lambda k: k.softmax_rows_backward(y, g),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(rng).items():
        times = {}
        for b in backends:
            impl = kernels.get_backend(b)
            fn(impl)  # warm up
            times[b] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        row = f"{name:40s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            row += f"{times['python'] / times['compiled']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
