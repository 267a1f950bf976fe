"""Token-level building blocks of the transformer tracker.

All token sets are ``n x d`` float arrays.  Blocks are pure functions; the
only stateful one, :func:`variation_token_step`, returns an updated copy of
the tracker state instead of mutating it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from advtrack.grad import DimensionError, Projections, attention, multihead, relu
from advtrack.trackers.base import TrackerState


def _tokens(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    for a in out:
        if a.ndim != 2:
            raise DimensionError(f"token sets must be 2-d, got shape {a.shape}")
    return out


def _concat(*arrays, d: int | None = None) -> np.ndarray:
    arrays = [a for a in arrays if a is not None]
    if d is None:
        d = next((a.shape[1] for a in arrays), 0)
    arrays = [np.asarray(a, dtype=np.float64).reshape(-1, d) for a in arrays]
    return np.concatenate(arrays, axis=0) if arrays else np.zeros((0, d))


@dataclass(frozen=True)
class FFN:
    """Two linear maps with a ReLU between them."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    @classmethod
    def zeros(cls, d: int, hidden: int | None = None) -> "FFN":
        hidden = hidden or 2 * d
        return cls(np.zeros((d, hidden)), np.zeros(hidden), np.zeros((hidden, d)), np.zeros(d))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, hidden: int | None = None, gain: float = 1.0) -> "FFN":
        hidden = hidden or 2 * d
        return cls(rng.normal(0, 1 / np.sqrt(d), (d, hidden)), np.zeros(hidden),
                   rng.normal(0, gain / np.sqrt(hidden), (hidden, d)), np.zeros(d))


def eca(X, P_x, heads: int = 1, proj: Projections | None = None) -> np.ndarray:
    """Residual self-attention: positions enter queries and keys, not values."""
    X, P_x = _tokens(X, P_x)
    if X.shape != P_x.shape:
        raise DimensionError(f"position encoding {P_x.shape} does not match tokens {X.shape}")
    proj = proj or Projections.identity(X.shape[1])
    Xp = X + P_x
    return X + multihead(Xp, Xp, X, heads, proj)


def cfa(X_q, P_q, X_kv, P_kv, heads: int = 1, proj: Projections | None = None,
        ffn: FFN | None = None) -> np.ndarray:
    """Residual cross-attention followed by a residual feed-forward block."""
    X_q, P_q, X_kv, P_kv = _tokens(X_q, P_q, X_kv, P_kv)
    if X_q.shape != P_q.shape or X_kv.shape != P_kv.shape:
        raise DimensionError("position encodings must match their token sets")
    d = X_q.shape[1]
    proj = proj or Projections.identity(d)
    ffn = ffn or FFN.zeros(d)
    mixed = X_q + multihead(X_q + P_q, X_kv + P_kv, X_kv, heads, proj)
    return mixed + ffn(mixed)


def mixed_attention(q_t, k_t, v_t, q_s, k_s, v_s):
    """Both streams attend over the concatenated target and search keys."""
    q_t, k_t, v_t, q_s, k_s, v_s = _tokens(q_t, k_t, v_t, q_s, k_s, v_s)
    k_m = _concat(k_t, k_s)
    v_m = _concat(v_t, v_s)
    return attention(q_t, k_m, v_m), attention(q_s, k_m, v_m)


def asymmetric_mixed_attention(q_t, k_t, v_t, q_s, k_m, v_m):
    """Target stream attends to itself only; search stream to the mixed keys."""
    q_t, k_t, v_t, q_s, k_m, v_m = _tokens(q_t, k_t, v_t, q_s, k_m, v_m)
    return attention(q_t, k_t, v_t), attention(q_s, k_m, v_m)


def variation_token_step(state: TrackerState, F_k_t, encoder_k1: Callable[[np.ndarray], np.ndarray],
                         hybrid_rows: int | None = None):
    """Carry the previous hybrid template forward as the variation token.

    ``F_k_t`` stacks this frame's layer-``k`` tokens with the hybrid template
    in its first ``hybrid_rows`` rows (defaults to the template token count).
    Returns ``(encoder_k1(concat(vt, F_k_t)), new_state)`` where the new state
    holds ``vt`` and this frame's hybrid template.  On the first frame, when
    no hybrid template exists yet, ``vt`` is a copy of the inherit-template
    tokens.
    """
    (F,) = _tokens(F_k_t)
    prev = state.hybrid_template if state.hybrid_template is not None else state.template_features
    vt = np.array(prev, dtype=np.float64, copy=True)
    if vt.ndim != 2 or vt.shape[1] != F.shape[1]:
        raise DimensionError(f"variation token {vt.shape} incompatible with tokens {F.shape}")
    n_h = vt.shape[0] if hybrid_rows is None else int(hybrid_rows)
    ht = F[:n_h].copy()
    out = encoder_k1(_concat(vt, F))
    new_state = dataclasses.replace(state, variation_token=vt, hybrid_template=ht)
    return out, new_state


def rom_cross_attention(it, ht, sr, vt, proj: Projections | None = None) -> np.ndarray:
    """Queries from ``[ht, sr]``; keys and values from ``[vt, it, ht, sr]``."""
    ht, sr = _tokens(ht, sr)
    d = ht.shape[1]
    it = np.asarray(it, dtype=np.float64).reshape(-1, d)
    vt = np.asarray(vt, dtype=np.float64).reshape(-1, d)
    proj = proj or Projections.identity(d)
    z_q = _concat(ht, sr, d=d)
    z_kv = _concat(vt, it, ht, sr, d=d)
    return attention(z_q @ proj.wq, z_kv @ proj.wk, z_kv @ proj.wv)
