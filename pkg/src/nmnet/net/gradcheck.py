"""Finite-difference check of the analytic gradients.

ReLU and max selections make the loss piecewise smooth.  A central
difference whose stencil crosses a kink measures a mix of two pieces, so
the step is shrunk until both probes keep the activation pattern of the
base point.  Entries whose kink is closer than ``min_step`` fall back to the
one-sided difference on the side that stays in the same piece.
"""

from __future__ import annotations

import numpy as np

from .model import Model, activation_pattern, backward, forward, loss_and_grad, same_pattern


def _loss_and_pattern(model: Model, corrs, indices, labels):
    logits, caches = forward(model, corrs, indices, training=True)
    return loss_and_grad(logits, labels)[0], activation_pattern(caches)


def numeric_entry(model: Model, name: str, idx, corrs, indices, labels, base, h: float = 1e-4, min_step: float = 1e-8):
    """Difference quotient of the loss for one parameter entry."""
    p = model.params[name]
    f0, pat0 = base
    orig = p[idx]
    step = h
    try:
        while True:
            p[idx] = orig + step
            fp, pat_p = _loss_and_pattern(model, corrs, indices, labels)
            p[idx] = orig - step
            fm, pat_m = _loss_and_pattern(model, corrs, indices, labels)
            ok_p, ok_m = same_pattern(pat0, pat_p), same_pattern(pat0, pat_m)
            if ok_p and ok_m:
                return (fp - fm) / (2 * step)
            if step / 10 < min_step:
                if ok_p:
                    return (fp - f0) / step
                if ok_m:
                    return (f0 - fm) / step
                return (fp - fm) / (2 * step)
            step /= 10
    finally:
        p[idx] = orig


def check_gradients(model: Model, corrs, indices, labels, h: float = 1e-4, max_entries: int | None = None, seed: int = 0):
    """Compare analytic and numeric gradients block by block.

    Uses training-mode batch statistics on a float64 copy of ``model``.
    With ``max_entries`` each larger block is checked on that many randomly
    chosen entries.  Returns ``{name: relative error}`` where the error of a
    block is ``max|a - n| / max(max|a|, max|n|)`` (0 when both vanish).
    """
    m = Model(model.arch, {k: v.astype(np.float64) for k, v in model.params.items()}, {k: v.astype(np.float64) for k, v in model.buffers.items()})
    logits, caches = forward(m, corrs, indices, training=True)
    f0, dlogits = loss_and_grad(logits, labels)
    grads = backward(m, dlogits, caches)
    base = (f0, activation_pattern(caches))
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in m.params.items():
        flat = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        a = np.empty(len(flat))
        n = np.empty(len(flat))
        for j, f in enumerate(flat):
            idx = np.unravel_index(f, p.shape)
            a[j] = grads[name][idx]
            n[j] = numeric_entry(m, name, idx, corrs, indices, labels, base, h)
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
        out[name] = float(np.max(np.abs(a - n)) / scale) if scale > 0 else 0.0
    return out
