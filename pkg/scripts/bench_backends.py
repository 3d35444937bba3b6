"""Compare the numba and numpy kernel backends on representative shapes."""

import time

import numpy as np

from setcomplete import kernels


def median_time(fn, repeats=200):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(32, 4, 8, 8))
    k = rng.normal(size=(32, 4, 8, 8))
    mask = np.ones((32, 8))
    ctx, w = kernels.attn_forward(q, k, k, mask, 0.5)
    g = np.ones_like(ctx)
    x = rng.normal(size=(256, 32))
    gamma, beta = np.ones(32), np.zeros(32)
    _, xhat, rstd = kernels.layernorm_forward(x, gamma, beta, 1e-5)
    scores = rng.normal(size=5000)
    ids = np.arange(5000, dtype=np.int64)
    feats = rng.normal(size=(5000, 32))
    cents = rng.normal(size=(64, 32))

    cases = {
        "attn_forward": lambda: kernels.attn_forward(q, k, k, mask, 0.5),
        "attn_backward": lambda: kernels.attn_backward(g, q, k, k, w, mask, 0.5),
        "layernorm_forward": lambda: kernels.layernorm_forward(x, gamma, beta, 1e-5),
        "layernorm_backward": lambda: kernels.layernorm_backward(x, xhat, rstd, gamma),
        "topk_select": lambda: kernels.topk_select(scores, ids, 32),
        "assign_nearest": lambda: kernels.assign_nearest(feats, cents),
    }

    results = {}
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    for backend in backends:
        kernels.set_backend(backend)
        kernels.warmup()
        for name, fn in cases.items():
            fn()
            results[(backend, name)] = median_time(fn)

    print(f"{'kernel':<20} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name in cases:
        np_t = results[("numpy", name)]
        nb_t = results.get(("numba", name))
        nb_col = f"{nb_t * 1e6:10.1f}us" if nb_t else f"{'-':>12}"
        ratio = f"{np_t / nb_t:.2f}x" if nb_t else "-"
        print(f"{name:<20} {np_t * 1e6:10.1f}us {nb_col} {ratio:>9}")


if __name__ == "__main__":
    main()
