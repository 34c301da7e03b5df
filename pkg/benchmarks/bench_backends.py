"""Timing comparison of the gate kernels under each backend.

Runs the fused LSTM gate forward/backward pair and a full training step
(graph build, loss, gradients) with the numba and numpy backends and prints
per-call times plus the speedup.  Usage:

    python3 benchmarks/bench_backends.py --d 64 --batch 64 --steps 50
"""

import argparse
import time

import numpy as np

from qckt import kernels
from qckt.data import SynthConfig, gen_synthetic, preprocess
from qckt.model import Batch, ModelConfig, Parameters, batch_loss_and_grads


def time_call(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_gates(d, batch, repeats):
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4 * d, batch))
    c = rng.normal(size=(d, batch))
    dh = rng.normal(size=(d, batch))
    dc = rng.normal(size=(d, batch))

    def once():
        gates, tc, c_new, h = kernels.gates_forward(z, c)
        kernels.gates_backward(dh, dc, gates, tc, c)

    return time_call(once, repeats)


def bench_train_step(d, repeats):
    ds, _ = gen_synthetic(SynthConfig(students=64, questions=50, kcs=10, seed=1))
    ds = preprocess(ds)
    cfg = ModelConfig(n_questions=50, n_kcs=10, dim=d)
    params = Parameters.init(cfg, seed=0)
    batch = Batch(ds.sequences[:64])

    def once():
        batch_loss_and_grads(params, batch, cfg)

    return time_call(once, repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rows = []
    for backend in ("numba", "numpy"):
        try:
            kernels.set_backend(backend)
        except Exception as exc:  # numba may be absent
            print(f"{backend:>6}: unavailable ({exc})")
            continue
        kernels.warmup()
        gates = bench_gates(args.d, args.batch, args.repeats)
        step = bench_train_step(args.d, args.repeats)
        rows.append((backend, gates, step))
        print(
            f"{backend:>6}: gates fwd+bwd {gates * 1e6:9.1f} us   "
            f"train step {step * 1e3:8.2f} ms"
        )

    if len(rows) == 2:
        print(
            f"speedup (numpy/numba): gates {rows[1][1] / rows[0][1]:.2f}x, "
            f"train step {rows[1][2] / rows[0][2]:.2f}x"
        )


if __name__ == "__main__":
    main()
