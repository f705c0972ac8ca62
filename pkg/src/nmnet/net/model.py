"""Correspondence classifier over mined neighbor graphs.

Layout (``Architecture.full()``)::

    C(32, 1, 4)-GP-R(32, 1, 3)-R(32, 1, 3)-R(64, 1, 3)-R(64, 1, 3)
    -R(128, 1, 3)-R(128, 1, 3)-R(256, 1, 3)-R(256, 1, 3)-C(256, 1, 1)-C(1, 1, 1)

Every convolution except the last is followed by instance norm, batch norm
and ReLU.  Residual blocks add their input back (through a width-1
projection when the channel count changes).  After each channel stage the
neighbor width is halved by pairwise max while it exceeds one; leftover
width is collapsed by a final max before the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import layers as L

LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class Architecture:
    stem: int = 32
    stages: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    head: int = 256
    kernel: int = 3
    input_width: int = 4

    @classmethod
    def full(cls) -> "Architecture":
        return cls()

    @classmethod
    def tiny(cls) -> "Architecture":
        """Channels divided by eight; used for gradient checks."""
        return cls(stem=4, stages=(4, 8, 16, 32), head=32)

    @classmethod
    def micro(cls) -> "Architecture":
        """Two stages of widths 4 and 8 behind a width-4 stem; cheap enough to check every entry."""
        return cls(stem=4, stages=(4, 8), head=8)

    @classmethod
    def named(cls, name: str) -> "Architecture":
        try:
            return {"full": cls.full, "tiny": cls.tiny, "micro": cls.micro}[name]()
        except KeyError:
            raise ValueError(f"unknown architecture profile {name!r}") from None

    def describe(self) -> str:
        parts = [f"C({self.stem}, 1, {self.input_width})", "GP"]
        for c in self.stages:
            parts += [f"R({c}, 1, {self.kernel})"] * self.blocks_per_stage
        parts += [f"C({self.head}, 1, 1)", "C(1, 1, 1)"]
        return "-".join(parts)

    def to_dict(self) -> dict:
        return {
            "stem": self.stem,
            "stages": list(self.stages),
            "blocks_per_stage": self.blocks_per_stage,
            "head": self.head,
            "kernel": self.kernel,
            "input_width": self.input_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["stages"] = tuple(d["stages"])
        return cls(**d)

    def block_specs(self):
        """``(name, c_in, c_out)`` for every residual block, in order."""
        specs = []
        c_in = self.stem
        for s, c in enumerate(self.stages):
            for b in range(self.blocks_per_stage):
                specs.append((f"s{s}.b{b}", c_in, c))
                c_in = c
        return specs


@dataclass
class Model:
    """Parameters (learned) and buffers (batch-norm running statistics)."""

    arch: Architecture
    params: dict
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def blocks(self):
        """``(layer_index, name)`` addresses of every parameter block."""
        return list(enumerate(self.params))

    def block(self, layer: int, name: str) -> np.ndarray:
        key = list(self.params)[layer]
        if key != name:
            raise KeyError(f"layer {layer} holds {key!r}, not {name!r}")
        return self.params[key]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _bn_names(prefix):
    return f"{prefix}.gamma", f"{prefix}.beta", f"{prefix}.mean", f"{prefix}.var"


def init_model(arch: Architecture, seed: int = 0, dtype=np.float64) -> Model:
    """He-initialized kernels, unit/zero batch-norm affine terms."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def conv(name, d, cin, cout):
        std = np.sqrt(2.0 / (d * cin))
        params[f"{name}.kernel"] = (rng.standard_normal((d, cin, cout)) * std).astype(dtype)

    def bn(name, c):
        g, b, m, v = _bn_names(name)
        params[g] = np.ones(c, dtype=dtype)
        params[b] = np.zeros(c, dtype=dtype)
        buffers[m] = np.zeros(c, dtype=dtype)
        buffers[v] = np.ones(c, dtype=dtype)

    conv("stem", arch.input_width, 1, arch.stem)
    bn("stem.bn", arch.stem)
    for name, cin, cout in arch.block_specs():
        conv(f"{name}.conv1", arch.kernel, cin, cout)
        bn(f"{name}.bn1", cout)
        conv(f"{name}.conv2", arch.kernel, cout, cout)
        bn(f"{name}.bn2", cout)
        if cin != cout:
            conv(f"{name}.skip", 1, cin, cout)
    conv("head", 1, arch.stages[-1], arch.head)
    bn("head.bn", arch.head)
    params["out.kernel"] = (rng.standard_normal((1, arch.head, 1)) * np.sqrt(1.0 / arch.head)).astype(dtype)
    params["out.bias"] = np.zeros(1, dtype=dtype)
    return Model(arch, params, buffers)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _unit_forward(x, model, name, bn, training, padding):
    """conv -> instance norm -> batch norm -> ReLU."""
    p, buf = model.params, model.buffers
    g, b, m, v = _bn_names(bn)
    h, c_conv = L.conv_forward(x, p[f"{name}.kernel"], None, padding)
    h, c_in = L.instance_norm_forward(h)
    h, c_bn = L.batch_norm_forward(h, p[g], p[b], buf[m], buf[v], training)
    h, mask = L.relu_forward(h)
    return h, (name, bn, c_conv, c_in, c_bn, mask)


def _unit_backward(dy, cache, grads):
    name, bn, c_conv, c_in, c_bn, mask = cache
    dy = L.relu_backward(dy, mask)
    dy, dgamma, dbeta = L.batch_norm_backward(dy, c_bn)
    grads[f"{bn}.gamma"] = dgamma
    grads[f"{bn}.beta"] = dbeta
    dy, _, _ = L.instance_norm_backward(dy, c_in)
    dx, dk, _ = L.conv_backward(dy, c_conv)
    grads[f"{name}.kernel"] = dk
    return dx


def input_features(corrs) -> np.ndarray:
    """Raw ``(x, y, xp, yp)`` per correspondence as a width-4, 1-channel map."""
    corrs = np.asarray(corrs)
    return corrs[..., [0, 1, 6, 7]][..., None]


def _as_batch(corrs, indices):
    corrs = np.asarray(corrs, dtype=float)
    indices = np.asarray(indices)
    if corrs.ndim == 2:
        corrs = corrs[None]
    if indices.ndim == 2:
        indices = np.broadcast_to(indices, (corrs.shape[0],) + indices.shape)
    if corrs.ndim != 3 or corrs.shape[-1] != 12:
        raise ShapeError(f"expected (B, N, 12) correspondences, got {corrs.shape}")
    if indices.shape[:2] != corrs.shape[:2]:
        raise ShapeError(f"graph shape {indices.shape} does not match correspondences {corrs.shape}")
    if corrs.shape[1] < 2:
        raise ShapeError("need at least 2 correspondences")
    return corrs, indices


def forward(model: Model, corrs, indices, training: bool = False):
    """Logits for a batch of scenes.

    ``corrs`` is ``(B, N, 12)`` (or ``(N, 12)``) and ``indices`` the mined graph
    ``(B, N, k)`` (or ``(N, k)``).  Returns ``(logits (B, N), cache)``.  In training
    mode batch-norm statistics come from the batch and the running buffers
    are updated.
    """
    _check_params(model)
    corrs, indices = _as_batch(corrs, indices)
    arch = model.arch
    p = model.params
    caches = []
    x = input_features(corrs).astype(p["stem.kernel"].dtype)
    x, c = _unit_forward(x, model, "stem", "stem.bn", training, "valid")
    caches.append(("unit", c))
    x, c = L.group_forward(x, indices)
    caches.append(("group", c))
    for s in range(len(arch.stages)):
        for b in range(arch.blocks_per_stage):
            name = f"s{s}.b{b}"
            h, c1 = _unit_forward(x, model, f"{name}.conv1", f"{name}.bn1", training, "same")
            h, c2 = _unit_forward(h, model, f"{name}.conv2", f"{name}.bn2", training, "same")
            if f"{name}.skip.kernel" in p:
                skip, cs = L.conv_forward(x, p[f"{name}.skip.kernel"], None, "same")
            else:
                skip, cs = x, None
            x = skip + h
            caches.append(("block", (name, c1, c2, cs)))
        if x.shape[-2] > 1:
            x, c = L.pair_max_forward(x)
            caches.append(("pair_max", c))
    if x.shape[-2] > 1:
        x, c = L.width_max_forward(x)
        caches.append(("width_max", c))
    x, c = _unit_forward(x, model, "head", "head.bn", training, "same")
    caches.append(("unit", c))
    y, c = L.conv_forward(x, p["out.kernel"], p["out.bias"], "same")
    caches.append(("out", c))
    return y[..., 0, 0], caches


def backward(model: Model, dlogits, caches) -> dict:
    """Gradients of every parameter block given ``d loss / d logits``."""
    grads = {}
    dy = np.asarray(dlogits, dtype=model.params["out.kernel"].dtype)[..., None, None]
    for kind, c in reversed(caches):
        if kind == "out":
            dy, dk, db = L.conv_backward(dy, c)
            grads["out.kernel"] = dk
            grads["out.bias"] = db
        elif kind == "unit":
            dy = _unit_backward(dy, c, grads)
        elif kind == "width_max":
            dy = L.width_max_backward(dy, c)
        elif kind == "pair_max":
            dy = L.pair_max_backward(dy, c)
        elif kind == "block":
            name, c1, c2, cs = c
            dh = _unit_backward(dy, c2, grads)
            dh = _unit_backward(dh, c1, grads)
            if cs is not None:
                dskip, dk, _ = L.conv_backward(dy, cs)
                grads[f"{name}.skip.kernel"] = dk
            else:
                dskip = dy
            dy = dskip + dh
        elif kind == "group":
            dy = L.group_backward(dy, c)
        else:  # pragma: no cover
            raise RuntimeError(kind)
    return {k: grads[k] for k in model.params}


def activation_pattern(caches) -> list:
    """ReLU masks and max selections recorded by :func:`forward`.

    Two parameter settings with equal patterns (see :func:`same_pattern`) lie
    in the same smooth piece of the loss.
    """
    parts = []
    for kind, c in caches:
        if kind == "unit":
            parts.append(c[-1])
        elif kind == "block":
            parts.append(c[1][-1])
            parts.append(c[2][-1])
        elif kind in ("pair_max", "width_max"):
            parts.append(c[0])
    return parts


def same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _check_params(model: Model):
    ref = init_shapes(model.arch)
    for name, shape in ref.items():
        if name not in model.params:
            raise ShapeError(f"missing parameter block {name!r}")
        if model.params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {model.params[name].shape}")
    extra = set(model.params) - set(ref)
    if extra:
        raise ShapeError(f"unexpected parameter blocks {sorted(extra)}")


_SHAPE_CACHE: dict = {}


def init_shapes(arch: Architecture) -> dict:
    if arch not in _SHAPE_CACHE:
        m = init_model(arch)
        _SHAPE_CACHE[arch] = {k: v.shape for k, v in m.params.items()}
    return _SHAPE_CACHE[arch]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights per scene; mean weight is one.

    Scenes lacking either class fall back to unit weights.
    """
    labels = np.asarray(labels)
    n = labels.shape[-1]
    pos = labels.sum(axis=-1, keepdims=True).astype(float)
    neg = n - pos
    ok = (pos > 0) & (neg > 0)
    w_pos = np.where(ok, n / (2.0 * np.maximum(pos, 1)), 1.0)
    w_neg = np.where(ok, n / (2.0 * np.maximum(neg, 1)), 1.0)
    return np.where(labels > 0, w_pos, w_neg)


def loss_and_grad(logits, labels, weights=None):
    """Class-balanced binary cross-entropy on clamped logits.

    Per scene: ``mean_i alpha_i * H(y_i, sigmoid(g_i))``; a batch returns the
    mean over scenes.  Returns ``(loss, d loss / d logits)``.
    """
    g = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if g.shape != y.shape:
        raise ShapeError(f"logits {g.shape} and labels {y.shape} differ")
    if weights is None:
        weights = class_weights(y)
    squeeze = g.ndim == 1
    if squeeze:
        g, y, weights = g[None], y[None], np.asarray(weights)[None]
    inside = np.abs(g) < LOGIT_CLAMP
    gc = np.clip(g, -LOGIT_CLAMP, LOGIT_CLAMP)
    per = np.logaddexp(0.0, gc) - y * gc
    b, n = g.shape
    loss = float(np.sum(weights * per) / (b * n))
    dg = weights * (L.sigmoid(gc) - y) * inside / (b * n)
    return loss, dg[0] if squeeze else dg


def loss(logits, labels) -> float:
    return loss_and_grad(logits, labels)[0]
