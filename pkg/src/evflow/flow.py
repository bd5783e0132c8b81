"""Two-layer perceptron mapping embeddings to generalized normal flow.

The head consumes the complex embedding as ``[Re; Im]`` features, applies
``W2 · relu(W1 · f + b1) + b2`` and emits flow in pixels per second. Weight
files embed the frequency vectors they were trained with, so a checkpoint
never depends on RNG reproduction.

Training uses a substitute objective grounded in the generalized
normal-flow constraint ``n · (u - n) = 0``: the squared constraint residual
normalized by ``|u|^2``, plus a small hinge penalty that keeps predictions
away from the degenerate ``n = 0`` solution (which satisfies the constraint
trivially).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .encoder import (
    Bases,
    Embedding,
    EmbeddingBatch,
    EncoderConfig,
    _pool_batch,
    _temporal_phases,
    accumulate_grid,
    bases_from_bytes,
    bases_to_bytes,
    precompute_spatial_phases,
)
from .errors import (
    DimensionMismatchError,
    EventParseError,
    TrainingDivergedError,
)
from .events import EventSlice, QuerySet, rebase_slice

WEIGHTS_MAGIC = b"VKMW"
WEIGHTS_VERSION = 1
_ACTIVATIONS = {0: "relu"}
_UNITS = {0: "px_per_s"}


@dataclass
class MlpWeights:
    """Parameters of the flow head plus the bases they are bound to."""

    w1: np.ndarray  # (hidden, 2 * embed_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (2, hidden)
    b2: np.ndarray  # (2,)
    bases: Bases
    activation: str = "relu"
    units: str = "px_per_s"

    def __post_init__(self) -> None:
        hidden, twice_dim = self.w1.shape
        if twice_dim != 2 * self.bases.dim:
            raise DimensionMismatchError(
                f"w1 expects {twice_dim} features but bases give {2 * self.bases.dim}"
            )
        if self.b1.shape != (hidden,) or self.w2.shape != (2, hidden) or self.b2.shape != (2,):
            raise DimensionMismatchError("inconsistent weight shapes")
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("weights must be finite")
        if self.activation not in _ACTIVATIONS.values():
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def embed_dim(self) -> int:
        return self.bases.dim

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


@dataclass(frozen=True)
class FlowPrediction:
    """Predicted generalized normal flow for one queried event."""

    event_index: int
    nx: float
    ny: float


def embed_to_features(emb: Union[Embedding, EmbeddingBatch, np.ndarray]) -> np.ndarray:
    """Map complex embeddings to real features: ``[Re(emb); Im(emb)]``."""
    values = emb.values if hasattr(emb, "values") else np.asarray(emb)
    return np.concatenate([values.real, values.imag], axis=-1)


def mlp_forward(w: MlpWeights, features: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single feature vector or an (n, 2D) batch."""
    features = np.asarray(features)
    if features.shape[-1] != 2 * w.embed_dim:
        raise DimensionMismatchError(
            f"feature length {features.shape[-1]} != 2*embed_dim {2 * w.embed_dim}"
        )
    hidden = np.maximum(features @ w.w1.T + w.b1, 0.0)
    return hidden @ w.w2.T + w.b2


def mlp_input_jacobian(w: MlpWeights, features: np.ndarray) -> np.ndarray:
    """d(output)/d(features), shape (2, 2D), for one feature vector."""
    features = np.asarray(features)
    pre = features @ w.w1.T + w.b1
    active = (pre > 0).astype(w.w1.dtype)
    return (w.w2 * active) @ w.w1


def save_weights(w: MlpWeights, path: str) -> None:
    act = {v: k for k, v in _ACTIVATIONS.items()}[w.activation]
    units = {v: k for k, v in _UNITS.items()}[w.units]
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<IIIBB", WEIGHTS_VERSION, w.embed_dim, w.hidden, act, units))
        fh.write(bases_to_bytes(w.bases))
        for arr in (w.w1, w.b1, w.w2, w.b2):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path: str) -> MlpWeights:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WEIGHTS_MAGIC:
        raise EventParseError(f"{path}: missing {WEIGHTS_MAGIC!r} magic")
    version, dim, hidden, act, units = struct.unpack_from("<IIIBB", buf, 4)
    if version != WEIGHTS_VERSION:
        raise EventParseError(f"{path}: unsupported weight version {version}")
    if act not in _ACTIVATIONS or units not in _UNITS:
        raise EventParseError(f"{path}: unknown activation/units tags ({act}, {units})")
    bases, pos = bases_from_bytes(buf, offset=18)
    if bases.dim != dim:
        raise DimensionMismatchError(f"{path}: header D={dim} but bases carry D={bases.dim}")

    def take(count: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).copy()
        pos += 4 * count
        return arr

    w1 = take(hidden * 2 * dim).reshape(hidden, 2 * dim)
    b1 = take(hidden)
    w2 = take(2 * hidden).reshape(2, hidden)
    b2 = take(2)
    return MlpWeights(w1, b1, w2, b2, bases, _ACTIVATIONS[act], _UNITS[units])


def predict_flows(
    sl: EventSlice,
    queries: QuerySet,
    cfg: EncoderConfig,
    weights: MlpWeights,
    threads: int = 1,
) -> Tuple[list[FlowPrediction], list[Tuple[int, str]]]:
    """Encode every query with the weights' own bases and run the head.

    Returns (predictions, failures); a failure is an (event_index, reason)
    pair and does not abort the remaining queries.
    """
    if weights.embed_dim != cfg.embed_dim:
        raise DimensionMismatchError(
            f"weights expect D={weights.embed_dim} but config has D={cfg.embed_dim}"
        )
    queries.check_within(len(sl))
    sl = rebase_slice(sl)
    table = precompute_spatial_phases(weights.bases, cfg)
    grid = accumulate_grid(sl, weights.bases, cfg, threads=threads)
    idx = queries.indices
    if len(idx) == 0:
        return [], []
    values, counts = _pool_batch(
        grid,
        table,
        sl.t[idx],
        sl.x[idx].astype(np.int64),
        sl.y[idx].astype(np.int64),
        weights.bases,
        cfg,
        allow_empty=True,
    )
    valid = counts > 0
    predictions: list[FlowPrediction] = []
    failures: list[Tuple[int, str]] = []
    if valid.any():
        flows = mlp_forward(weights, embed_to_features(values[valid]))
        for event_index, (nx, ny) in zip(idx[valid], flows):
            predictions.append(FlowPrediction(int(event_index), float(nx), float(ny)))
    for event_index in idx[~valid]:
        failures.append((int(event_index), "empty neighborhood"))
    return predictions, failures


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    hidden: int = 128
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    margin: Optional[float] = None  # default resolved to 0.05 * mean |u|
    margin_weight: float = 0.1
    constraint_eps: float = 1e-8
    seed: int = 0


def init_weights(
    embed_dim: int,
    hidden: int,
    bases: Bases,
    seed: int = 0,
    dtype=np.float64,
) -> MlpWeights:
    rng = np.random.default_rng(seed)
    fan_in = 2 * embed_dim
    w1 = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(hidden, fan_in)).astype(dtype)
    b1 = np.zeros(hidden, dtype=dtype)
    w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(2, hidden)).astype(dtype)
    b2 = np.zeros(2, dtype=dtype)
    return MlpWeights(w1, b1, w2, b2, bases)


def flow_loss(
    w: MlpWeights,
    features: np.ndarray,
    u: np.ndarray,
    margin: float,
    margin_weight: float,
    eps: float = 1e-8,
) -> float:
    """Constraint-residual loss with an anti-collapse hinge on |n|."""
    out = mlp_forward(w, features)
    r = np.sum(out * (u - out), axis=1)
    term1 = np.mean(r * r / (np.sum(u * u, axis=1) + eps))
    norm = np.linalg.norm(out, axis=1)
    gap = np.maximum(0.0, margin - norm)
    return float(term1 + margin_weight * np.mean(gap * gap))


def flow_loss_grads(
    w: MlpWeights,
    features: np.ndarray,
    u: np.ndarray,
    margin: float,
    margin_weight: float,
    eps: float = 1e-8,
) -> Tuple[float, dict]:
    """Loss and analytic parameter gradients (checked against central
    finite differences in the test suite)."""
    n = len(features)
    pre = features @ w.w1.T + w.b1
    act = np.maximum(pre, 0.0)
    out = act @ w.w2.T + w.b2

    r = np.sum(out * (u - out), axis=1)
    denom = np.sum(u * u, axis=1) + eps
    term1 = np.mean(r * r / denom)
    norm = np.linalg.norm(out, axis=1)
    gap = np.maximum(0.0, margin - norm)
    term2 = margin_weight * np.mean(gap * gap)
    loss = float(term1 + term2)

    # d term1 / d out = 2 r (u - 2 out) / denom, averaged.
    dout = (2.0 * r / denom)[:, None] * (u - 2.0 * out) / n
    # d term2 / d out = -2 lambda gap out/|out|, averaged; zero where the
    # hinge is inactive (subgradient 0 at |out| = 0).
    active = gap > 0
    safe_norm = np.where(norm > 0, norm, 1.0)
    dout += np.where(
        (active & (norm > 0))[:, None],
        (-2.0 * margin_weight * gap / safe_norm)[:, None] * out / n,
        0.0,
    )

    dw2 = dout.T @ act
    db2 = dout.sum(axis=0)
    dact = dout @ w.w2
    dpre = dact * (pre > 0)
    dw1 = dpre.T @ features
    db1 = dpre.sum(axis=0)
    return loss, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def _encode_dataset(
    dataset: Sequence[Tuple[EventSlice, QuerySet, np.ndarray]],
    cfg: EncoderConfig,
    bases: Bases,
    threads: int,
) -> Tuple[np.ndarray, np.ndarray]:
    feats = []
    flows = []
    table = precompute_spatial_phases(bases, cfg)
    for sl, queries, u in dataset:
        u = np.asarray(u, dtype=np.float64)
        queries.check_within(len(sl))
        if u.shape != (len(queries), 2):
            raise ValueError(f"ground truth must be ({len(queries)}, 2), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("ground-truth flows must be finite")
        sl = rebase_slice(sl)
        grid = accumulate_grid(sl, bases, cfg, threads=threads)
        idx = queries.indices
        values, _ = _pool_batch(
            grid, table, sl.t[idx], sl.x[idx].astype(np.int64), sl.y[idx].astype(np.int64),
            bases, cfg,
        )
        feats.append(embed_to_features(values).astype(np.float64))
        flows.append(u)
    if not feats:
        raise ValueError("training dataset is empty")
    return np.concatenate(feats), np.concatenate(flows)


def train_head(
    dataset: Sequence[Tuple[EventSlice, QuerySet, np.ndarray]],
    cfg: EncoderConfig,
    train_cfg: TrainConfig = TrainConfig(),
    bases: Optional[Bases] = None,
    threads: int = 1,
) -> MlpWeights:
    """Fit the head on (slice, queries, ground-truth optical flow) samples.

    Embeddings are computed once up front; optimization is mini-batch Adam
    on the constraint loss. Returns the weights with the best validation
    loss seen during training.
    """
    from .encoder import generate_bases

    if bases is None:
        bases = generate_bases(cfg)
    features, u = _encode_dataset(dataset, cfg, bases, threads)
    n = len(features)
    rng = np.random.default_rng(train_cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(n * train_cfg.val_fraction)) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    margin = train_cfg.margin
    if margin is None:
        margin = 0.05 * float(np.linalg.norm(u, axis=1).mean())

    w = init_weights(cfg.embed_dim, train_cfg.hidden, bases, seed=train_cfg.seed)
    params = {"w1": w.w1, "b1": w.b1, "w2": w.w2, "b2": w.b2}
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0

    def val_loss() -> float:
        if len(val_idx) == 0:
            return flow_loss(w, features[train_idx], u[train_idx], margin,
                             train_cfg.margin_weight, train_cfg.constraint_eps)
        return flow_loss(w, features[val_idx], u[val_idx], margin,
                         train_cfg.margin_weight, train_cfg.constraint_eps)

    best = val_loss()
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(train_idx)
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = order[lo : lo + train_cfg.batch_size]
            loss, grads = flow_loss_grads(
                w, features[batch], u[batch], margin,
                train_cfg.margin_weight, train_cfg.constraint_eps,
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step} "
                    f"(lr={train_cfg.learning_rate}, batch={len(batch)})"
                )
            step += 1
            for key in params:
                g = grads[key]
                m_state[key] = beta1 * m_state[key] + (1 - beta1) * g
                v_state[key] = beta2 * v_state[key] + (1 - beta2) * g * g
                m_hat = m_state[key] / (1 - beta1**step)
                v_hat = v_state[key] / (1 - beta2**step)
                params[key] -= train_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)
        current = val_loss()
        if not np.isfinite(current):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        if current < best:
            best = current
            best_params = {k: v.copy() for k, v in params.items()}

    return MlpWeights(
        best_params["w1"], best_params["b1"], best_params["w2"], best_params["b2"],
        bases, w.activation, w.units,
    )
