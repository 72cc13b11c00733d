#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the numpy fallback.

Times each swappable kernel at desk scale and published-scale scale, then an
end-to-end training step with each backend selected.

    python3 benchmarks/bench_kernels.py [--reps 50]
"""

import argparse
import time

import numpy as np

from mrnadistill import _kernels_py as kpy
from mrnadistill.backend import available_backends, resolve_backend
from mrnadistill.rng import SeededRng


def timeit(fn, reps):
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        best = min(best, (time.perf_counter() - t0) / reps)
    return best * 1e3  # ms


def kernel_cases(rows, dim, n_params, dtype=np.float32):
    rng = SeededRng(0)
    x = np.ascontiguousarray(rng.normal((rows, dim)), dtype=dtype)
    gain = np.ascontiguousarray(rng.normal((dim,)), dtype=dtype)
    bias = np.zeros(dim, dtype=dtype)
    dy = np.ascontiguousarray(rng.normal((rows, dim)), dtype=dtype)
    _, mean, rstd = kpy.layer_norm_forward(x, gain, bias, 1e-5)
    param = np.ascontiguousarray(rng.normal((n_params,)), dtype=dtype)
    grad = np.ascontiguousarray(rng.normal((n_params,)), dtype=dtype)
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    ids = np.ascontiguousarray((rng.uniform((rows,)) * 6).astype(np.int64))

    def cases(k):
        return {
            f"layer_norm fwd   {rows}x{dim}": lambda: k.layer_norm_forward(x, gain, bias, 1e-5),
            f"layer_norm bwd   {rows}x{dim}": lambda: k.layer_norm_backward(dy, x, gain, mean, rstd),
            f"adamw update     {n_params:>7}": lambda: k.adamw_update(
                param, grad, m, v, 5, 1e-4, 0.9, 0.999, 1e-8, 0.01),
            f"embedding scatter {rows:>6}": lambda: k.embedding_grad(
                ids, dy, np.zeros((6, dim), dtype=dtype)),
        }

    return cases


def bench_train_step(backend_name, steps=60):
    import importlib

    import mrnadistill.backend as backend_mod
    import mrnadistill.tensor as tensor_mod
    import mrnadistill.trainer as trainer_mod

    kernels, name = backend_mod.resolve_backend(backend_name)
    saved = backend_mod.kernels
    backend_mod.kernels = kernels
    tensor_mod.kernels = kernels
    trainer_mod.kernels = kernels
    try:
        from mrnadistill.genbank import synthetic_records
        from mrnadistill.student import StudentConfig, StudentModel
        from mrnadistill.teacher import SyntheticTeacher, preset_spec
        from mrnadistill.tokenizer import TokenizedDataset
        from mrnadistill.trainer import TrainConfig, train

        recs = synthetic_records(600, seed=1, length_range=(64, 192), composition_spread=0.5)
        tr = TokenizedDataset.from_sequences([r.sequence for r in recs], 128)
        va = TokenizedDataset.from_sequences([r.sequence for r in recs[:8]], 128)
        teacher = SyntheticTeacher(preset_spec("desk", seed=1))
        student = StudentModel(StudentConfig(hidden_dim=32, n_blocks=6, tap_layers=(3, 6),
                                             proj_dims=(64, 64)), seed=1)
        cfg = TrainConfig(batch_size=16, context_length=128, warmup_steps=20,
                          max_steps=steps, eval_every=steps, seed=1)
        t0 = time.perf_counter()
        train(cfg, tr, va, teacher, student, f"/tmp/bench_step_{name}")
        return (time.perf_counter() - t0) / steps * 1e3
    finally:
        backend_mod.kernels = saved
        tensor_mod.kernels = saved
        trainer_mod.kernels = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args()

    backends = available_backends()
    print(f"available backends: {backends}")
    if "compiled" not in backends:
        print("compiled extension not built; showing python-only timings")

    scales = [("desk (16x128 tokens, d=32)", 2048, 32, 16_000),
              ("published-scale (32x2048, d=256)", 65_536, 256, 5_000_000)]
    for label, rows, dim, n_params in scales:
        print(f"\n== {label} ==")
        cases = kernel_cases(rows, dim, n_params)
        py_times = {k: timeit(fn, args.reps) for k, fn in cases(kpy).items()}
        if "compiled" in backends:
            kc = resolve_backend("compiled")[0]
            c_times = {k: timeit(fn, args.reps) for k, fn in cases(kc).items()}
        else:
            c_times = {}
        header = f"{'kernel':<28} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}"
        print(header)
        print("-" * len(header))
        for key, pt in py_times.items():
            if key in c_times:
                print(f"{key:<28} {pt:>10.3f} {c_times[key]:>12.3f} {pt / c_times[key]:>7.1f}x")
            else:
                print(f"{key:<28} {pt:>10.3f} {'-':>12} {'-':>8}")

    print("\n== end-to-end training step (desk config) ==")
    for name in backends[::-1]:  # python first
        ms = bench_train_step(name)
        print(f"{name:<10} {ms:.1f} ms/step")


if __name__ == "__main__":
    main()
