"""Compare the Cython and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are run on the same inputs; outputs are checked for agreement
before timings are reported.
"""

import argparse
import timeit

import numpy as np

from smforge._kernels import backends


def psf_case(n_emitters=5000, size=256, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0, size * 100.0, n_emitters)
    ys = rng.uniform(0, size * 100.0, n_emitters)
    flux = rng.uniform(50, 500, n_emitters)
    return size, xs, ys, flux


def pair_case(n=20000, side=30000.0, seed=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, side, n), rng.uniform(0, side, n)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = backends()
    if "cython" not in impls:
        print("compiled kernels not available; only the numpy backend is timed")
    size, xs, ys, flux = psf_case()
    px, py = pair_case()

    results = {}
    for name, mod in impls.items():
        def run_psf():
            img = np.zeros((size, size))
            mod.accumulate_psf(img, xs, ys, flux, 130.0, 0.0, 0.0, 100.0, 7.0)
            return img

        def run_pairs():
            return mod.pairs_within(px, py, 50.0)

        results[name] = (run_psf(), run_pairs())
        t_psf = min(timeit.repeat(run_psf, number=1, repeat=args.repeat))
        t_pairs = min(timeit.repeat(run_pairs, number=1, repeat=args.repeat))
        print(f"{name:>7}  accumulate_psf {t_psf * 1e3:9.2f} ms   pairs_within {t_pairs * 1e3:9.2f} ms")

    if len(results) == 2:
        (img_a, pr_a), (img_b, pr_b) = results.values()
        np.testing.assert_allclose(img_a, img_b, rtol=1e-10, atol=1e-12)
        key = lambda p: sorted(zip(*(np.asarray(v).tolist() for v in p[:2])))  # noqa: E731
        assert key(pr_a) == key(pr_b), "pair lists differ"
        print("backends agree")


if __name__ == "__main__":
    main()
