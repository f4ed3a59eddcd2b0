"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --batch 80 --hidden 256 --repeat 50
"""

import argparse
import timeit

import numpy as np

from mmtl import kernels


def make_inputs(batch, emb, hidden, src_len, dtype, seed=0):
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(scale=0.1, size=s).astype(dtype)  # noqa: E731
    mask = np.ones(batch, dtype=dtype)
    mask[batch // 2 :] = 0.0
    gru = dict(h_prev=r(batch, hidden), x=r(batch, emb), mask=mask, W=r(emb, 3 * hidden), U=r(hidden, 3 * hidden),
               b=r(3 * hidden), rmask=np.ones((batch, hidden), dtype=dtype))
    smask = np.ones((batch, src_len), dtype=dtype)
    smask[:, src_len - 3 :] = 0.0
    att = dict(d=r(batch, hidden), keys=r(batch, src_len, hidden), Wa=r(hidden, hidden), va=r(hidden),
               hs=r(batch, src_len, 2 * hidden), mask=smask)
    return gru, att


def bench(backend, gru, att, repeat):
    kernels.use_backend(backend)
    h, cache = kernels.gru_forward(**gru)
    gh = np.ones_like(h)
    ctx, alpha, t = kernels.attention_forward(**att)
    gctx = np.ones_like(ctx)
    cases = {
        "gru_forward": lambda: kernels.gru_forward(**gru),
        "gru_backward": lambda: kernels.gru_backward(
            gh, gru["h_prev"], gru["x"], gru["mask"], gru["W"], gru["U"], gru["rmask"], cache
        ),
        "attention_forward": lambda: kernels.attention_forward(**att),
        "attention_backward": lambda: kernels.attention_backward(
            gctx, att["d"], att["Wa"], att["va"], att["hs"], alpha, t
        ),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in cases.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=80)
    ap.add_argument("--emb", type=int, default=128)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--src-len", type=int, default=20)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()

    gru, att = make_inputs(args.batch, args.emb, args.hidden, args.src_len, np.dtype(args.dtype))
    names = [b for b in ("python", "cython") if b in kernels.BACKENDS]
    results = {b: bench(b, gru, att, args.repeat) for b in names}
    print(f"batch={args.batch} emb={args.emb} hidden={args.hidden} src_len={args.src_len} dtype={args.dtype}")
    print(f"{'kernel':<20}" + "".join(f"{b + ' ms':>12}" for b in names) + ("     speedup" if len(names) == 2 else ""))
    for k in results[names[0]]:
        row = f"{k:<20}" + "".join(f"{1e3 * results[b][k]:>12.3f}" for b in names)
        if len(names) == 2:
            row += f"{results['python'][k] / results['cython'][k]:>11.2f}x"
        print(row)
    if "cython" not in kernels.BACKENDS:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
