"""Adam training, inference and checkpoint files."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import compat
from ..errors import ConfigError, EmptyDataset, ParseError, ShapeError
from . import layers as L
from .model import Architecture, Model, backward, forward, init_model, loss_and_grad

log = logging.getLogger(__name__)

MINING_MODES = ("compatibility", "spatial")
CHECKPOINT_FORMAT = "nmnet-checkpoint/1"
TRAIN_F_PROBE = 64  # scenes scored for the per-epoch training F


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    k: int = compat.DEFAULT_K
    lam: float = compat.DEFAULT_LAMBDA
    seed: int = 0
    mining: str = "compatibility"
    include_self: bool = True
    arch: str = "full"
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.k < 1 or self.lam <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}")
        Architecture.named(self.arch)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


# ---------------------------------------------------------------------------
# Graph mining per scene
# ---------------------------------------------------------------------------


def mine_graph(corrs, k: int, lam: float = compat.DEFAULT_LAMBDA, mining: str = "compatibility", include_self: bool = True):
    """Neighbor indices ``(N, k)`` feeding the grouping layer."""
    if mining == "compatibility":
        graph = compat.mine_cs_knn(compat.score_matrix(corrs, lam), k, include_self)
    elif mining == "spatial":
        graph = compat.mine_spatial_knn(corrs, k, include_self)
    else:
        raise ValueError(f"unknown mining mode {mining!r}")
    return graph.indices


@dataclass
class PreparedScene:
    corrs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def prepare(scenes, config: TrainConfig) -> list[PreparedScene]:
    """Mine every scene's graph once; training reuses the cached indices."""
    return [
        PreparedScene(
            np.asarray(s.corrs, dtype=float),
            np.asarray(s.labels, dtype=np.int64),
            mine_graph(s.corrs, config.k, config.lam, config.mining, config.include_self),
        )
        for s in scenes
    ]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _batches(order, prepared, batch_size):
    """Consecutive chunks of ``order``, split further so each batch has one N."""
    for lo in range(0, len(order), batch_size):
        chunk = order[lo : lo + batch_size]
        by_n: dict = {}
        for i in chunk:
            by_n.setdefault(len(prepared[i].labels), []).append(i)
        yield from by_n.values()


def train_step(model: Model, batch: list[PreparedScene], state: AdamState, lr: float) -> float:
    corrs = np.stack([s.corrs for s in batch])
    labels = np.stack([s.labels for s in batch])
    indices = np.stack([s.indices for s in batch])
    logits, caches = forward(model, corrs, indices, training=True)
    value, dlogits = loss_and_grad(logits, labels)
    grads = backward(model, dlogits, caches)
    adam_step(model.params, grads, state, lr)
    return value


def train(scenes, config: TrainConfig, val_scenes=None, model: Model | None = None, callback=None):
    """Fit a model; deterministic given ``config.seed``.

    Returns ``(model, history)`` where ``history`` holds one dict per epoch
    with the mean training loss, training F-measure and (if ``val_scenes``
    is given) validation F-measure.  ``callback(entry)`` runs after every
    epoch; returning ``True`` stops training early.
    """
    from ..evaluation import prf

    scenes = list(scenes)
    if not scenes:
        raise EmptyDataset("no scenes to train on")
    prepared = prepare(scenes, config)
    val = prepare(val_scenes, config) if val_scenes else None
    if model is None:
        model = init_model(Architecture.named(config.arch), seed=config.seed, dtype=np.dtype(config.dtype))
    state = AdamState.zeros_like(model.params)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(prepared))
        losses = []
        for batch in _batches(order, prepared, config.batch_size):
            losses.append(train_step(model, [prepared[i] for i in batch], state, config.learning_rate))
        entry = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        probe = prepared[:TRAIN_F_PROBE]
        entry["train_f"] = float(np.mean([prf(predict(model, s)[1], s.labels).f_measure for s in probe]))
        if val is not None:
            entry["val_f"] = float(np.mean([prf(predict(model, s)[1], s.labels).f_measure for s in val]))
        history.append(entry)
        log.info("epoch %d: %s", epoch + 1, entry)
        if callback is not None and callback(entry) is True:
            break
    return model, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def probabilities(logits) -> np.ndarray:
    return L.sigmoid(np.asarray(logits, dtype=float))


def predict(model: Model, prepared: PreparedScene):
    logits, _ = forward(model, prepared.corrs, prepared.indices, training=False)
    probs = probabilities(logits[0])
    return probs, (probs > 0.5).astype(np.int64)


def infer(model: Model, scene, config: TrainConfig):
    """Inlier probabilities and labels (probability strictly above 0.5)."""
    corrs = np.asarray(getattr(scene, "corrs", scene), dtype=float)
    indices = mine_graph(corrs, config.k, config.lam, config.mining, config.include_self)
    probs, labels = predict(model, PreparedScene(corrs, np.zeros(len(corrs), dtype=np.int64), indices))
    return probs, labels


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float64 blocks
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, config: TrainConfig) -> None:
    blocks = []
    payload = []
    offset = 0
    for group, tensors in (("param", model.params), ("buffer", model.buffers)):
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            blocks.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            payload.append(data.tobytes())
            offset += data.size
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.arch.describe(),
        "arch": model.arch.to_dict(),
        "k": config.k,
        "lambda": config.lam,
        "mining": config.mining,
        "seed": config.seed,
        "config": asdict(config),
        "blocks": blocks,
        "payload_values": offset,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Return ``(model, config)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("checkpoint header missing", 1)
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}", 1) from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unknown checkpoint format {header.get('format')!r}", 1)
    values = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    if values.size != header["payload_values"]:
        raise ParseError("checkpoint payload size mismatch")
    arch = Architecture.from_dict(header["arch"])
    if arch.describe() != header["architecture"]:
        raise ShapeError("architecture string does not match its fields")
    params, buffers = {}, {}
    for blk in header["blocks"]:
        size = int(np.prod(blk["shape"], dtype=np.int64))
        arr = values[blk["offset"] : blk["offset"] + size].reshape(blk["shape"])
        (params if blk["group"] == "param" else buffers)[blk["name"]] = arr
    config = TrainConfig(**header["config"])
    dtype = np.dtype(config.dtype)
    params = {k: v.astype(dtype) for k, v in params.items()}
    buffers = {k: v.astype(dtype) for k, v in buffers.items()}
    return Model(arch, params, buffers), config


def check_compatible(config: TrainConfig, k: int | None = None, mining: str | None = None):
    """Refuse to run a checkpoint under a different graph configuration."""
    if k is not None and k != config.k:
        raise ConfigError(f"checkpoint was trained with k={config.k}, got k={k}")
    if mining is not None and mining != config.mining:
        raise ConfigError(f"checkpoint was trained with mining={config.mining!r}, got {mining!r}")
