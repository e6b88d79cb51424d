"""Train the two vector-fusion baselines on a toy two-modality task.

Each example has a modality A matrix and a modality B matrix; the class is
recoverable only by combining the mean of B with A. A linear probe on the
fused, mean-pooled vector is trained jointly with the fusion parameters
using AdamW.

    python scripts/fusion_baselines.py --steps 300 --dim 6
"""

import argparse
import time

import numpy as np

from moma.fusion import CrossAttnParams, MoEParams, Probe, cross_attention_fuse, fuse_gradients, moe_fuse
from moma.head import AdamWState, adamw_step, lr_multiplier


def make_task(n, dim, classes, rng):
    centers = rng.normal(size=(classes, dim))
    data = []
    for _ in range(n):
        y = int(rng.integers(classes))
        U_a = rng.normal(scale=0.5, size=(int(rng.integers(2, 5)), dim))
        U_b = centers[y] + rng.normal(scale=0.5, size=(int(rng.integers(2, 5)), dim))
        data.append((U_a, U_b, y))
    return data


def instance(variant, params, probe, ex):
    U_a, U_b, y = ex
    if variant == "cross_attention":
        return {"params": params, "U_a": U_a, "U_b": U_b, "probe": probe, "label": y}
    return {"params": params, "inputs": [U_a, U_b], "probe": probe, "label": y}


def rebuild(variant, flat, top_k):
    probe = Probe(flat["probe.W"], flat["probe.b"])
    body = {k: v for k, v in flat.items() if not k.startswith("probe.")}
    params = MoEParams.from_dict(body, top_k) if variant == "moe" else CrossAttnParams(**body)
    return params, probe


def accuracy(variant, params, probe, data):
    hits = 0
    for U_a, U_b, y in data:
        if variant == "cross_attention":
            vec = cross_attention_fuse(U_a, U_b, params)[0].mean(axis=0)
        else:
            vec = moe_fuse([U_a, U_b], params)
        hits += int(np.argmax(vec @ probe.W + probe.b) == y)
    return hits / len(data)


def train(variant, train_data, dim, classes, args):
    rng = np.random.default_rng(args.seed)
    if variant == "cross_attention":
        params = CrossAttnParams.init(dim, seed=args.seed)
    else:
        params = MoEParams.init(dim, num_experts=4, top_k=2, seed=args.seed)
    probe = Probe(rng.normal(scale=0.1, size=(dim, classes)), np.zeros(classes))
    flat = {**params.as_dict(), "probe.W": probe.W, "probe.b": probe.b}
    state = AdamWState(learning_rate=args.lr, weight_decay=0.01)
    losses = []
    for step in range(1, args.steps + 1):
        batch = rng.integers(0, len(train_data), size=args.batch)
        total, grads = 0.0, {k: np.zeros_like(v) for k, v in flat.items()}
        for i in batch:
            value, g = fuse_gradients(variant, instance(variant, params, probe, train_data[i]))
            total += value
            for k in grads:
                grads[k] += g[k] / len(batch)
        flat, state = adamw_step(state, flat, grads, lr_multiplier(step, args.warmup))
        params, probe = rebuild(variant, flat, 2)
        losses.append(total / len(batch))
    return params, probe, losses


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=6)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--warmup", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    data = make_task(args.n, args.dim, args.classes, rng)
    cut = int(0.8 * len(data))
    train_data, test_data = data[:cut], data[cut:]
    print(f"{'variant':16s} {'first loss':>10s} {'last loss':>10s} {'test acc':>9s} {'seconds':>8s}")
    for variant in ("cross_attention", "moe"):
        t0 = time.perf_counter()
        params, probe, losses = train(variant, train_data, args.dim, args.classes, args)
        acc = accuracy(variant, params, probe, test_data)
        print(f"{variant:16s} {np.mean(losses[:10]):10.4f} {np.mean(losses[-10:]):10.4f} {acc:9.3f} "
              f"{time.perf_counter() - t0:8.1f}")


if __name__ == "__main__":
    main()
