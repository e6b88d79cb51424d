"""Vector-fusion baselines: single-head cross-attention and sparse mixture of experts.

Both come with hand-written backward passes so they can be trained with the
same AdamW routine as the predictor head and checked against finite
differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .head import ShapeError, _log_softmax


def softmax_rows(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return M.copy()
    Z = M - M.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def _softmax_backward(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - (dP * P).sum(axis=-1, keepdims=True))


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name}")


# -- cross-attention -------------------------------------------------------------

@dataclass
class CrossAttnParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray | None = None  # back-projection d -> dim, only when d != dim

    def __post_init__(self):
        self.W_Q, self.W_K, self.W_V = (np.asarray(w, dtype=np.float64) for w in (self.W_Q, self.W_K, self.W_V))
        if not (self.W_Q.shape == self.W_K.shape == self.W_V.shape) or self.W_Q.ndim != 2:
            raise ShapeError("W_Q, W_K, W_V must share one (dim, d) shape")
        dim, d = self.W_Q.shape
        if d < 1:
            raise ShapeError("projection width must be >= 1")
        if self.W_O is not None:
            self.W_O = np.asarray(self.W_O, dtype=np.float64)
            if self.W_O.shape != (d, dim):
                raise ShapeError(f"W_O must be ({d}, {dim})")
        elif d != dim:
            raise ShapeError("d != dim requires a back-projection W_O")

    @property
    def dim(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        p = {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}
        if self.W_O is not None:
            p["W_O"] = self.W_O
        return p

    @classmethod
    def init(cls, dim: int, d: int | None = None, seed: int = 0, scale: float | None = None) -> "CrossAttnParams":
        d = d or dim
        rng = np.random.default_rng(seed)
        s = scale if scale is not None else 1.0 / np.sqrt(dim)
        W_O = rng.normal(0, 1.0 / np.sqrt(d), (d, dim)) if d != dim else None
        return cls(*(rng.normal(0, s, (dim, d)) for _ in range(3)), W_O)


def cross_attention_fuse(U_a, U_b, p: CrossAttnParams, return_cache: bool = False):
    """Refine U_a by attending over U_b; returns (F, A) with F = A V (W_O) + U_a."""
    U_a = np.asarray(U_a, dtype=np.float64)
    U_b = np.asarray(U_b, dtype=np.float64)
    if U_a.ndim != 2 or U_b.ndim != 2 or U_a.shape[1] != p.dim or U_b.shape[1] != p.dim:
        raise ShapeError(f"inputs {U_a.shape}, {U_b.shape} do not match parameter dim {p.dim}")
    if U_b.shape[0] == 0:
        raise ShapeError("U_b has no rows to attend over")
    _check_finite("cross-attention inputs", U_a, U_b)
    Q = U_a @ p.W_Q
    K = U_b @ p.W_K
    V = U_b @ p.W_V
    A = softmax_rows(Q @ K.T / np.sqrt(p.d))
    H = A @ V
    F_a = H @ p.W_O if p.W_O is not None else H
    F = F_a + U_a
    if return_cache:
        return F, A, {"U_a": U_a, "U_b": U_b, "Q": Q, "K": K, "V": V, "A": A, "H": H}
    return F, A


def cross_attention_backward(U_a, U_b, p: CrossAttnParams, dF) -> dict[str, np.ndarray]:
    """Gradients of <dF, F> w.r.t. every parameter and both inputs."""
    _, _, c = cross_attention_fuse(U_a, U_b, p, return_cache=True)
    dF = np.asarray(dF, dtype=np.float64)
    grads = {}
    if p.W_O is not None:
        grads["W_O"] = c["H"].T @ dF
        dH = dF @ p.W_O.T
    else:
        dH = dF
    dA = dH @ c["V"].T
    dV = c["A"].T @ dH
    dS = _softmax_backward(c["A"], dA) / np.sqrt(p.d)
    dQ = dS @ c["K"]
    dK = dS.T @ c["Q"]
    grads["W_Q"] = c["U_a"].T @ dQ
    grads["W_K"] = c["U_b"].T @ dK
    grads["W_V"] = c["U_b"].T @ dV
    grads["U_a"] = dF + dQ @ p.W_Q.T
    grads["U_b"] = dK @ p.W_K.T + dV @ p.W_V.T
    _check_finite("cross-attention gradients", *grads.values())
    return grads


# -- sparse mixture of experts ------------------------------------------------------

@dataclass
class Expert:
    """One-hidden-layer tanh network dim -> h -> dim."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return np.tanh(u @ self.W1 + self.b1) @ self.W2 + self.b2


@dataclass
class MoEParams:
    experts: list[Expert]
    gate_W: np.ndarray
    gate_b: np.ndarray
    top_k: int = 2

    def __post_init__(self):
        K = len(self.experts)
        if K < 1:
            raise ShapeError("need at least one expert")
        if not 1 <= self.top_k <= K:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {K}]")
        self.gate_W = np.asarray(self.gate_W, dtype=np.float64)
        self.gate_b = np.asarray(self.gate_b, dtype=np.float64)
        if self.gate_W.shape != (self.dim, K) or self.gate_b.shape != (K,):
            raise ShapeError(f"gate must map dim {self.dim} to {K} experts")

    @property
    def dim(self) -> int:
        return self.experts[0].W1.shape[0]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def as_dict(self) -> dict[str, np.ndarray]:
        p = {"gate_W": self.gate_W, "gate_b": self.gate_b}
        for k, e in enumerate(self.experts):
            p.update({f"E{k}.W1": e.W1, f"E{k}.b1": e.b1, f"E{k}.W2": e.W2, f"E{k}.b2": e.b2})
        return p

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray], top_k: int) -> "MoEParams":
        K = sum(1 for k in d if k.endswith(".W1"))
        experts = [Expert(*(np.asarray(d[f"E{k}.{n}"], dtype=np.float64) for n in ("W1", "b1", "W2", "b2")))
                   for k in range(K)]
        return cls(experts, d["gate_W"], d["gate_b"], top_k)

    @classmethod
    def init(cls, dim: int, num_experts: int = 4, top_k: int = 2, hidden: int | None = None,
             seed: int = 0) -> "MoEParams":
        hidden = hidden or 2 * dim
        rng = np.random.default_rng(seed)
        experts = [Expert(rng.normal(0, 1 / np.sqrt(dim), (dim, hidden)), np.zeros(hidden),
                          rng.normal(0, 1 / np.sqrt(hidden), (hidden, dim)), np.zeros(dim))
                   for _ in range(num_experts)]
        return cls(experts, rng.normal(0, 1 / np.sqrt(dim), (dim, num_experts)), np.zeros(num_experts), top_k)


def pool_rows(U) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        return U
    if U.shape[0] == 0:
        raise ShapeError("cannot mean-pool an empty embedding matrix")
    return U.mean(axis=0)


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties resolved toward the lower index."""
    return np.sort(np.argsort(-scores, kind="stable")[:k])


@dataclass
class MoERouting:
    gates: np.ndarray          # softmax over all experts, per modality (M, K)
    active: list[np.ndarray]   # selected expert indices per modality
    weights: list[np.ndarray]  # renormalised gates over the active set


def moe_fuse(inputs: Sequence, p: MoEParams, return_routing: bool = False):
    """Sum over modalities of gate-weighted active-expert outputs."""
    if len(inputs) == 0:
        raise ValueError("moe_fuse needs at least one modality")
    pooled = [pool_rows(U) for U in inputs]
    for u in pooled:
        if u.shape != (p.dim,):
            raise ShapeError(f"pooled input {u.shape} does not match expert dim {p.dim}")
        _check_finite("MoE inputs", u)
    F = np.zeros(p.dim)
    gates, active, weights = [], [], []
    for u in pooled:
        g = softmax_rows(u @ p.gate_W + p.gate_b)
        sel = select_top_k(g, p.top_k)
        w = g[sel] / g[sel].sum()
        for k, wk in zip(sel, w):
            F += wk * p.experts[k](u)
        gates.append(g)
        active.append(sel)
        weights.append(w)
    if return_routing:
        return F, MoERouting(np.array(gates), active, weights)
    return F


def moe_dense(inputs: Sequence, p: MoEParams) -> np.ndarray:
    """Every expert weighted by its full softmax gate; no selection."""
    F = np.zeros(p.dim)
    for U in inputs:
        u = pool_rows(U)
        g = softmax_rows(u @ p.gate_W + p.gate_b)
        F += sum(g[k] * p.experts[k](u) for k in range(p.num_experts))
    return F


def moe_backward(inputs: Sequence, p: MoEParams, dF) -> dict[str, np.ndarray]:
    """Gradients of <dF, F> w.r.t. MoE parameters, holding the routing fixed."""
    dF = np.asarray(dF, dtype=np.float64)
    grads = {k: np.zeros_like(v) for k, v in p.as_dict().items()}
    for U in inputs:
        u = pool_rows(U)
        g = softmax_rows(u @ p.gate_W + p.gate_b)
        sel = select_top_k(g, p.top_k)
        total = g[sel].sum()
        w = g[sel] / total
        outs = []
        for k, wk in zip(sel, w):
            e = p.experts[k]
            h = np.tanh(u @ e.W1 + e.b1)
            outs.append(h @ e.W2 + e.b2)
            de = wk * dF
            grads[f"E{k}.W2"] += np.outer(h, de)
            grads[f"E{k}.b2"] += de
            da = (e.W2 @ de) * (1 - h * h)
            grads[f"E{k}.W1"] += np.outer(u, da)
            grads[f"E{k}.b1"] += da
        dw = np.array([dF @ o for o in outs])
        dg = np.zeros_like(g)
        dg[sel] = (dw - (dw * w).sum()) / total
        ds = _softmax_backward(g, dg)
        grads["gate_W"] += np.outer(u, ds)
        grads["gate_b"] += ds
    _check_finite("MoE gradients", *grads.values())
    return grads


# -- scalar readout used for training and gradient checks ----------------------------

@dataclass
class Probe:
    W: np.ndarray  # (dim, C)
    b: np.ndarray  # (C,)


def _readout(vec: np.ndarray, probe: Probe, label: int) -> tuple[float, np.ndarray, dict]:
    z = vec @ probe.W + probe.b
    logp = _log_softmax(z)
    dz = np.exp(logp)
    dz[label] -= 1.0
    return float(-logp[label]), dz, {"probe.W": np.outer(vec, dz), "probe.b": dz}


def fuse_gradients(variant: str, instance: dict) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for mean-pooled fusion output -> linear probe -> cross-entropy.

    ``instance`` keys: ``params`` (CrossAttnParams or MoEParams), ``probe``,
    ``label`` and either ``U_a``/``U_b`` or ``inputs``.
    """
    probe, label = instance["probe"], int(instance["label"])
    if variant == "cross_attention":
        p = instance["params"]
        F, _ = cross_attention_fuse(instance["U_a"], instance["U_b"], p)
        pooled = F.mean(axis=0)
        value, dz, grads = _readout(pooled, probe, label)
        dF = np.tile(probe.W @ dz / F.shape[0], (F.shape[0], 1))
        inner = cross_attention_backward(instance["U_a"], instance["U_b"], p, dF)
        grads.update({k: v for k, v in inner.items() if k in p.as_dict()})
    elif variant == "moe":
        p = instance["params"]
        F = moe_fuse(instance["inputs"], p)
        value, dz, grads = _readout(F, probe, label)
        grads.update(moe_backward(instance["inputs"], p, probe.W @ dz))
    else:
        raise ValueError(f"unknown fusion variant {variant!r}")
    _check_finite(f"{variant} gradients", *grads.values())
    return value, grads


# -- checkpoints ---------------------------------------------------------------------

def params_to_json(params: dict[str, np.ndarray], seed: int | None = None, **meta) -> str:
    body = {"seed": seed, "meta": meta,
            "tensors": {k: {"shape": list(np.shape(v)), "values": np.ravel(v).tolist()}
                        for k, v in sorted(params.items())}}
    return json.dumps(body, indent=1) + "\n"


def params_from_json(text: str) -> tuple[dict[str, np.ndarray], dict]:
    body = json.loads(text)
    tensors = {k: np.asarray(t["values"], dtype=np.float64).reshape(t["shape"]) for k, t in body["tensors"].items()}
    return tensors, {"seed": body.get("seed"), **body.get("meta", {})}


def save_params(path: str | Path, params: dict[str, np.ndarray], seed: int | None = None, **meta) -> None:
    Path(path).write_text(params_to_json(params, seed, **meta), encoding="utf-8")


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return params_from_json(Path(path).read_text(encoding="utf-8"))
