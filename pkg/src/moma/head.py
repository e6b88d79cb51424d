"""Trainable classification head over frozen predictor embeddings."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import TaskSpec

LOSS_KINDS = ("categorical_ce", "bce_with_logits", "multitask_ce_sum")
_LOSS_FOR_TASK = {"multiclass": "categorical_ce", "binary": "bce_with_logits", "multitask": "multitask_ce_sum"}


class ShapeError(ValueError):
    pass


@dataclass
class LinearHead:
    """Affine map from embedding to logits, optionally behind one tanh layer.

    ``subtask_slices`` partitions the logit vector; a binary task has a single
    slice of length 1 holding the positive-class logit.
    """

    weights: np.ndarray
    bias: np.ndarray
    subtask_slices: tuple[tuple[int, int], ...]
    task_kind: str = "multiclass"
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.subtask_slices = tuple((int(o), int(n)) for o, n in self.subtask_slices)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        pos = 0
        for off, n in self.subtask_slices:
            if off != pos or n < 1:
                raise ShapeError(f"subtask slices {self.subtask_slices} do not tile the logits")
            pos += n
        if pos != self.num_logits:
            raise ShapeError(f"subtask slices cover {pos} logits, head has {self.num_logits}")
        if self.task_kind == "binary" and self.subtask_slices != ((0, 1),):
            raise ShapeError("binary head needs exactly one logit")
        if (self.hidden_weights is None) != (self.hidden_bias is None):
            raise ShapeError("hidden layer needs both weights and bias")
        if self.hidden_weights is not None:
            self.hidden_weights = np.asarray(self.hidden_weights, dtype=np.float64)
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
            if self.hidden_weights.shape[0] != self.weights.shape[1]:
                raise ShapeError("hidden width does not match output weights")

    @property
    def num_logits(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        if self.hidden_weights is not None:
            return self.hidden_weights.shape[1]
        return self.weights.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {"W": self.weights, "b": self.bias}
        if self.hidden_weights is not None:
            p["W_h"] = self.hidden_weights
            p["b_h"] = self.hidden_bias
        return p

    def with_params(self, params: dict[str, np.ndarray]) -> "LinearHead":
        return replace(self, weights=params["W"], bias=params["b"],
                       hidden_weights=params.get("W_h"), hidden_bias=params.get("b_h"))


def slices_for_task(task: TaskSpec) -> tuple[tuple[int, int], ...]:
    if task.kind == "binary":
        return ((0, 1),)
    out, pos = [], 0
    for n in task.num_classes:
        out.append((pos, n))
        pos += n
    return tuple(out)


def init_head(task: TaskSpec, input_dim: int, seed: int = 0, hidden_width: int | None = None) -> LinearHead:
    """Seeded uniform init scaled by 1/sqrt(fan_in); biases start at zero."""
    rng = np.random.default_rng(seed)
    slices = slices_for_task(task)
    n_logits = sum(n for _, n in slices)
    W_h = b_h = None
    fan_in = input_dim
    if hidden_width:
        lim = 1.0 / np.sqrt(input_dim)
        W_h = rng.uniform(-lim, lim, size=(hidden_width, input_dim))
        b_h = np.zeros(hidden_width)
        fan_in = hidden_width
    lim = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-lim, lim, size=(n_logits, fan_in))
    return LinearHead(W, np.zeros(n_logits), slices, task.kind, W_h, b_h)


def _features(head: LinearHead, x: np.ndarray) -> np.ndarray:
    if head.hidden_weights is None:
        return x
    return np.tanh(x @ head.hidden_weights.T + head.hidden_bias)


def forward(head: LinearHead, x) -> np.ndarray:
    """Logits ``W x + b`` for one embedding (D,) or a batch (n, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.input_dim or x.ndim not in (1, 2):
        raise ShapeError(f"input has shape {x.shape}, head expects last dim {head.input_dim}")
    return _features(head, x) @ head.weights.T + head.bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(head: LinearHead, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim == 1:
        x = x[None, :]
        y = y.reshape(1, -1)
    elif y.ndim == 1:
        y = y.reshape(-1, 1) if len(head.subtask_slices) == 1 else y.reshape(1, -1)
    if y.shape != (x.shape[0], len(head.subtask_slices)):
        raise ShapeError(f"labels shape {y.shape} does not match batch {x.shape[0]} x {len(head.subtask_slices)}")
    return x, y.astype(np.int64)


def loss(head: LinearHead, x, y, kind: str) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its gradient with respect to every head parameter.

    ``y`` holds one class index per subtask (for ``bce_with_logits`` the index
    is the 0/1 target).
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    n_slices = len(head.subtask_slices)
    if kind == "bce_with_logits" and head.subtask_slices != ((0, 1),):
        raise ShapeError("bce_with_logits needs a single logit")
    if kind == "categorical_ce" and (n_slices != 1 or head.subtask_slices[0][1] < 2):
        raise ShapeError("categorical_ce needs one subtask with at least 2 logits")
    if kind == "multitask_ce_sum" and n_slices < 2:
        raise ShapeError("multitask_ce_sum needs at least 2 subtasks")

    x, y = _as_batch(head, x, y)
    n = x.shape[0]
    h = _features(head, x)
    z = h @ head.weights.T + head.bias
    dz = np.zeros_like(z)
    total = 0.0
    if kind == "bce_with_logits":
        t = y[:, 0].astype(np.float64)
        if np.any((t != 0) & (t != 1)):
            raise ValueError("binary targets must be 0 or 1")
        zz = z[:, 0]
        total = float(np.sum(np.maximum(zz, 0) - zz * t + np.log1p(np.exp(-np.abs(zz)))))
        dz[:, 0] = expit(zz) - t
    else:
        for s, (off, width) in enumerate(head.subtask_slices):
            labels = y[:, s]
            if np.any((labels < 0) | (labels >= width)):
                raise ValueError(f"label out of range for subtask {s} with {width} classes")
            logp = _log_softmax(z[:, off:off + width])
            total -= float(logp[np.arange(n), labels].sum())
            g = np.exp(logp)
            g[np.arange(n), labels] -= 1.0
            dz[:, off:off + width] = g
    value = total / n
    dz /= n
    grads = {"W": dz.T @ h, "b": dz.sum(axis=0)}
    if head.hidden_weights is not None:
        da = (dz @ head.weights) * (1.0 - h * h)
        grads["W_h"] = da.T @ x
        grads["b_h"] = da.sum(axis=0)
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError(f"non-finite {kind} loss or gradient")
    return value, grads


def predict_from_logits(head: LinearHead, logits: np.ndarray) -> tuple[list[int], float | None]:
    """Class index per subtask; ties go to the lowest index. Binary also returns P(positive)."""
    logits = np.asarray(logits, dtype=np.float64)
    if head.task_kind == "binary":
        z = float(logits[0])
        prob = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
        return [int(prob > 0.5)], float(prob)
    return [int(np.argmax(logits[off:off + n])) for off, n in head.subtask_slices], None


def split_logits(head: LinearHead, logits: np.ndarray) -> list[list[float]]:
    return [list(map(float, logits[off:off + n])) for off, n in head.subtask_slices]


# -- optimisation ------------------------------------------------------------

@dataclass
class AdamWState:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def adamw_step(state: AdamWState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr_scale: float = 1.0) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns new parameter arrays and a new state; inputs are not modified.
    """
    if set(params) != set(grads):
        raise ShapeError(f"parameter keys {sorted(params)} != gradient keys {sorted(grads)}")
    t = state.step_count + 1
    lr = state.learning_rate * lr_scale
    b1, b2 = state.beta1, state.beta2
    new_params, m_out, v_out = {}, {}, {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.first_moment.get(name, np.zeros_like(theta))
        v = state.second_moment.get(name, np.zeros_like(theta))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.epsilon) - lr * state.weight_decay * theta
        m_out[name], v_out[name] = m, v
    return new_params, replace(state, step_count=t, first_moment=m_out, second_moment=v_out)


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 4500
    batch_size: int = 2
    warmup_steps: int = 2
    seed: int = 0
    loss_kind: str | None = None
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    hidden_width: int | None = None

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("max_steps and batch_size must be positive, warmup_steps nonnegative")
        if self.loss_kind is not None and self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


def lr_multiplier(step: int, warmup_steps: int) -> float:
    """Linear warm-up over ``warmup_steps`` (1-based step), then constant."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def train_head(embeddings, labels, task: TaskSpec, cfg: TrainConfig) -> tuple[LinearHead, list[float]]:
    """Fit a head on frozen embeddings with minibatch AdamW.

    Shuffling and initialisation both derive from ``cfg.seed``, so a rerun
    reproduces the weights bit for bit. Returns the head and per-step losses.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a nonempty (n, dim) embedding matrix")
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (X.shape[0], len(task.subtasks)):
        raise ShapeError(f"labels shape {Y.shape} does not match {X.shape[0]} x {len(task.subtasks)}")
    kind = cfg.loss_kind or _LOSS_FOR_TASK[task.kind]
    if kind != _LOSS_FOR_TASK[task.kind]:
        raise ValueError(f"loss {kind!r} does not fit a {task.kind} task")
    for s, n_cls in enumerate(task.num_classes):
        absent = sorted(set(range(n_cls)) - set(Y[:, s].tolist()))
        if absent:
            warnings.warn(f"subtask {task.subtasks[s]!r}: classes {absent} absent from training labels",
                          stacklevel=2)

    head = init_head(task, X.shape[1], cfg.seed, cfg.hidden_width)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamWState(cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.epsilon)
    params = head.params()
    history = []
    order = rng.permutation(X.shape[0])
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(order):
            order = rng.permutation(X.shape[0])
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        value, grads = loss(head.with_params(params), X[idx], Y[idx], kind)
        params, state = adamw_step(state, params, grads, lr_multiplier(step, cfg.warmup_steps))
        history.append(value)
    return head.with_params(params), history


# -- checkpoints ---------------------------------------------------------------

def head_to_dict(head: LinearHead, cfg: TrainConfig | None = None) -> dict:
    d = {
        "task_kind": head.task_kind,
        "input_dim": head.input_dim,
        "num_logits": head.num_logits,
        "subtask_slices": [list(s) for s in head.subtask_slices],
        "weights": head.weights.ravel().tolist(),
        "bias": head.bias.tolist(),
        "hidden": None,
        "train_config": asdict(cfg) if cfg else None,
        "seed": cfg.seed if cfg else None,
    }
    if head.hidden_weights is not None:
        d["hidden"] = {"width": head.hidden_weights.shape[0],
                       "weights": head.hidden_weights.ravel().tolist(),
                       "bias": head.hidden_bias.tolist()}
    return d


def head_from_dict(d: dict) -> LinearHead:
    n, dim = d["num_logits"], d["input_dim"]
    W_h = b_h = None
    if d.get("hidden"):
        width = d["hidden"]["width"]
        W_h = np.asarray(d["hidden"]["weights"], dtype=np.float64).reshape(width, dim)
        b_h = np.asarray(d["hidden"]["bias"], dtype=np.float64)
        dim = width
    W = np.asarray(d["weights"], dtype=np.float64).reshape(n, dim)
    return LinearHead(W, np.asarray(d["bias"], dtype=np.float64), tuple(map(tuple, d["subtask_slices"])),
                      d.get("task_kind", "multiclass"), W_h, b_h)


def save_head(head: LinearHead, path: str | Path, cfg: TrainConfig | None = None) -> None:
    Path(path).write_text(json.dumps(head_to_dict(head, cfg), indent=1) + "\n", encoding="utf-8")


def load_head(path: str | Path) -> LinearHead:
    return head_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
