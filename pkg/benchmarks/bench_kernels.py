"""Time the numpy and compiled kernel backends on simulation-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Reports the best-of-N wall time per call and the speed-up of each backend
over the numpy reference.  Also checks that both backends agree.
"""

import argparse
import time

import numpy as np

from fedrn import _backend
from fedrn.model import TrainConfig, init_model


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(n, dim, classes, hidden):
    rng = np.random.default_rng(0)
    model = init_model(dim, classes, hidden, seed=0)
    dims = model.dims
    flat0 = model.flat()
    X = rng.normal(size=(n, dim))
    y = rng.integers(0, classes, size=n).astype(np.int64)
    cfg = TrainConfig()
    orders = np.stack([rng.permutation(n) for _ in range(cfg.local_epochs)]).astype(np.int64)
    losses = np.sort(np.abs(np.r_[rng.normal(0.2, 0.1, n // 2), rng.normal(2.0, 0.5, n - n // 2)]))

    def train(k):
        flat = flat0.copy()
        k.train_epochs(flat, np.zeros_like(flat), dims, X, y, orders, cfg.batch_size,
                       cfg.learning_rate, cfg.momentum, 0)
        return flat

    def forward(k):
        return k.forward_probs(flat0, dims, X)

    def em(k):
        return k.em_fit(losses, np.percentile(losses, [10, 90]), [losses.var()] * 2, [0.5, 0.5],
                        100, 1e-6, 1e-6 * losses.var())

    return {"train 5 epochs": train, "forward": forward, "em fit": em}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--examples", type=int, default=1000)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--classes", type=int, default=10)
    args = p.parse_args()

    names = sorted(_backend.BACKENDS, key=lambda s: s != "python")
    if len(names) == 1:
        print("compiled kernels not built; only the numpy backend is available")
    jobs = workloads(args.examples, args.dim, args.classes, (32, 32))
    print(f"{'kernel':<16}" + "".join(f"{n:>12}" for n in names) + f"{'speed-up':>10}")
    for label, job in jobs.items():
        times, results = [], []
        for name in names:
            k = _backend.BACKENDS[name]
            results.append(job(k))
            times.append(best_time(lambda: job(k), args.repeats))
        ref = np.asarray(results[0][0] if isinstance(results[0], tuple) else results[0])
        for r in results[1:]:
            got = np.asarray(r[0] if isinstance(r, tuple) else r)
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)
        speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
        print(f"{label:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
