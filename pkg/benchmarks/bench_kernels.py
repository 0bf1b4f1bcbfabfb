"""Compare the compiled and NumPy kernel backends.

Each kernel is timed on both backends at the shapes a desk-scale training step
produces (batch 32, length 32, hidden 64, vocab 2000). With ``--e2e`` one
training epoch is also timed end to end in a fresh interpreter per backend,
since the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeat 20] [--e2e]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from adapter_uda import kernels as K

B, L, H, V = 32, 32, 64, 2000


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(B * L, H)).astype(dtype)
    ffn = rng.normal(size=(B * L, 2 * H)).astype(dtype)
    att = rng.normal(size=(B * 4 * L, L)).astype(dtype)
    logits = rng.normal(size=(B * L // 6, V)).astype(dtype)
    targets = rng.integers(0, V, size=len(logits))
    weights = np.ones(len(logits), dtype)
    gamma, beta = np.ones(H, dtype), np.zeros(H, dtype)
    y_ln, xhat, rstd = K.layer_norm_forward(x, gamma, beta, 1e-5)
    p_att = K.softmax_forward(att)
    ce = K.cross_entropy_forward(logits, targets, weights)
    probs = ce[1] if isinstance(ce, tuple) else ce
    index = rng.integers(0, V, size=B * L)
    return {
        "gelu_forward": lambda impl: K.gelu_forward(ffn, impl=impl),
        "gelu_backward": lambda impl: K.gelu_backward(ffn, ffn, impl=impl),
        "layer_norm_forward": lambda impl: K.layer_norm_forward(x, gamma, beta, 1e-5, impl=impl),
        "layer_norm_backward": lambda impl: K.layer_norm_backward(x, xhat, rstd, gamma, impl=impl),
        "softmax_forward": lambda impl: K.softmax_forward(att, impl=impl),
        "softmax_backward": lambda impl: K.softmax_backward(p_att, att, impl=impl),
        "cross_entropy_forward": lambda impl: K.cross_entropy_forward(logits, targets, weights, impl=impl),
        "cross_entropy_backward": lambda impl: K.cross_entropy_backward(probs, targets, weights, 1.0, impl=impl),
        "scatter_add_rows": lambda impl: K.scatter_add_rows(V, index, x, impl=impl),
    }


def bench_kernels(repeat: int, dtype) -> None:
    backends = K.available_backends()
    impls = {name: K.get_backend(name) for name in backends}
    print(f"dtype={np.dtype(dtype).name}  backends={backends}  (best of {repeat}, microseconds)")
    header = f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in cases(dtype).items():
        times = {}
        for b, impl in impls.items():
            fn(impl)  # warm up
            times[b] = min(timeit.repeat(lambda: fn(impl), number=5, repeat=repeat)) / 5 * 1e6
        row = f"{name:<24}" + "".join(f"{times[b]:>12.1f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)


_E2E = """
import time
from adapter_uda.data import SynthSpec, gen_synthetic, dataset_vocab
from adapter_uda.kernels import BACKEND
from adapter_uda.model import ModelConfig
from adapter_uda.training import RunPlan, UDADatasets, run_method
spec = SynthSpec(n_domains=2, docs_per_domain=400, test_docs_per_domain=50)
splits = gen_synthetic(spec)
vocab = dataset_vocab(splits)
ds = UDADatasets.from_splits(splits, vocab, "d0", ["d1"])
plan = RunPlan("ADA_TSA", "d0", ["d1"], model=ModelConfig(vocab_size=len(vocab)), epochs_fusion=1, epochs_task=1)
t = time.perf_counter()
r = run_method(plan, ds)
print(f"{BACKEND:<8} one fusion + one task epoch: {time.perf_counter() - t:.2f}s  accuracy {r.target_accuracy['d1']:.4f}")
"""


def bench_e2e() -> None:
    for force in ("", "1"):
        env = dict(os.environ, ADAPTER_UDA_PURE_PYTHON=force)
        subprocess.run([sys.executable, "-c", _E2E], env=env, check=True)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--precision", choices=["single", "double"], default="single")
    ap.add_argument("--e2e", action="store_true", help="also time a short training run per backend")
    args = ap.parse_args()
    bench_kernels(args.repeat, np.float32 if args.precision == "single" else np.float64)
    if args.e2e:
        bench_e2e()


if __name__ == "__main__":
    main()
