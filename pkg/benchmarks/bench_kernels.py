"""Compare the numba kernels against the pure-numpy fallback.

Times the four hot kernels at the shapes that dominate training (acting
batches, update batches, QMIX unrolls), plus one full A2C update under FuPS
vs masked sharing. Run:

    python benchmarks/bench_kernels.py

The active backend for the training comparison follows PRUNESHARE_NUMBA;
the per-kernel table always measures both implementations explicitly.
"""

import time

import numpy as np

from pruneshare import kernels as K
from pruneshare.harness import mask_overhead_benchmark


def timeit(fn, repeats=300, warmup=3):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples)) * 1e6   # microseconds


def bench_dense(rows, in_w, out_w, label):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, in_w))
    w = rng.normal(size=(out_w, in_w))
    b = rng.normal(size=out_w)
    post = K.dense_forward_numpy(x, w, b, K.ACT_RELU)
    d = rng.normal(size=post.shape)
    out = []
    for name, fwd, bwd in (("numpy", K.dense_forward_numpy,
                            K.dense_backward_numpy),
                           ("numba", K.dense_forward_numba,
                            K.dense_backward_numba)):
        t = timeit(lambda: (fwd(x, w, b, K.ACT_RELU),
                            bwd(x, w, post, K.ACT_RELU, d)))
        out.append((name, t))
    report(f"dense fwd+bwd {label}", out)


def bench_gru(T, B, width, label):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(T, B, width))
    h0 = np.zeros((B, width))
    ws = [np.ascontiguousarray(rng.normal(size=(width, width)))
          for _ in range(3)]
    us = [np.ascontiguousarray(rng.normal(size=(width, width)))
          for _ in range(3)]
    bs = [np.zeros(width) for _ in range(3)]
    mask = np.ones((B, width))
    fw = K.gru_forward_seq_numpy(x, h0, *ws, *us, *bs, mask)
    dh = rng.normal(size=(T, B, width))
    dhf = np.zeros((B, width))
    h_seq, r, z, c, hprev = fw
    out = []
    for name, fwd, bwd in (("numpy", K.gru_forward_seq_numpy,
                            K.gru_backward_seq_numpy),
                           ("numba", K.gru_forward_seq_numba,
                            K.gru_backward_seq_numba)):
        t = timeit(lambda: (fwd(x, h0, *ws, *us, *bs, mask),
                            bwd(x, r, z, c, hprev, *ws, *us, mask, dh, dhf)),
                   repeats=60)
        out.append((name, t))
    report(f"gru fwd+bwd seq {label}", out)


def bench_rmsprop(size):
    rng = np.random.default_rng(2)
    p = rng.normal(size=size)
    g = rng.normal(size=size)
    v = np.abs(rng.normal(size=size))
    out = [(name, timeit(lambda: fn(p, g, v, 3e-4, 0.99, 1e-5)))
           for name, fn in (("numpy", K.rmsprop_update_numpy),
                            ("numba", K.rmsprop_update_numba))]
    report(f"rmsprop update ({size} params)", out)


def report(label, results):
    (n0, t0), (n1, t1) = results
    speedup = t0 / t1
    print(f"{label:<42} {n0} {t0:9.1f} us   {n1} {t1:9.1f} us   "
          f"numba speedup x{speedup:.2f}")


def main():
    print(f"numba available: {K.HAVE_NUMBA}; active backend: "
          f"{'numba' if K.USING_NUMBA else 'numpy'}\n")
    bench_dense(3, 75, 128, "(acting, 3x75->128)")
    bench_dense(15, 128, 128, "(update, 15x128->128)")
    bench_gru(1, 3, 64, "(acting step, B=3, H=64)")
    bench_gru(25, 96, 64, "(replay unroll, T=25, B=96)")
    bench_rmsprop(128 * 128)
    print("\nfull A2C update, FuPS vs masked sharing (active backend):")
    bench = mask_overhead_benchmark(repeats=100)
    print(f"  FuPS   {bench['fups_s'] * 1e3:7.2f} ms")
    print(f"  masked {bench['masked_s'] * 1e3:7.2f} ms "
          f"({bench['overhead'] * 100:+.1f}% overhead)")


if __name__ == "__main__":
    main()
