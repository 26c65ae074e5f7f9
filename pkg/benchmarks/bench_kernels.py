"""Time each hot kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes mirror the desk configuration: attention rows of a 4-head model over
~60 reaction tokens, a 512-byte text context, molecule-sized BFS graphs and
test-split-sized AUC inputs. numba timings exclude the first (compiling) call.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from reacfuse.kernels import backends


def _ring_graph(n):
    src = np.arange(n)
    nbr = np.stack([(src - 1) % n, (src + 1) % n], axis=1)
    indptr = np.arange(0, 2 * n + 1, 2, dtype=np.int64)
    return indptr, nbr.reshape(-1).astype(np.int64)


def cases(rng):
    att = rng.normal(size=(32 * 4 * 60, 60)).astype(np.float32)
    att_mask = rng.random(att.shape) > 0.1
    att_mask[:, 0] = True
    txt = rng.normal(size=(16 * 4 * 512, 512)).astype(np.float32)
    txt_mask = np.tril(np.ones((512, 512), dtype=bool))[None].repeat(16 * 4, 0).reshape(-1, 512)
    act = rng.normal(size=(32, 60, 256)).astype(np.float32)
    indptr, indices = _ring_graph(40)
    scores = rng.random(2000)
    labels = rng.random(2000) < 0.7
    return {
        "masked_softmax/graph": lambda k: k.masked_softmax(att, att_mask),
        "masked_softmax/text": lambda k: k.masked_softmax(txt, txt_mask),
        "softmax_backward/graph": lambda k: k.softmax_backward(att, att),
        "gelu_forward": lambda k: k.gelu_forward(act),
        "gelu_backward": lambda k: k.gelu_backward(act, act),
        "bfs_distances/40": lambda k: k.bfs_distances(40, indptr, indices, 10, 11),
        "mann_whitney_auc/2000": lambda k: k.mann_whitney_auc(scores, labels),
    }


def run(repeat=5, seed=0):
    rng = np.random.default_rng(seed)
    impls = backends()
    rows = []
    for name, fn in cases(rng).items():
        row = {"kernel": name}
        for label, mod in impls.items():
            fn(mod)  # warm-up / compile
            row[label] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        if "numba" in row:
            row["speedup"] = row["numpy"] / row["numba"]
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write rows to this file")
    args = ap.parse_args(argv)
    rows = run(args.repeat)
    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for r in rows:
        nb = r.get("numba")
        print(f"{r['kernel']:26s} {1e3 * r['numpy']:10.3f} "
              f"{'-' if nb is None else f'{1e3 * nb:10.3f}':>10s} {r.get('speedup', float('nan')):8.2f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
