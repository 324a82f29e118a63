"""Deterministic vector primitives, information measures, and AdamW.

Everything here computes in float64 regardless of what callers hand in;
encoder backends that run in float32 convert at this boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

_MASK64 = (1 << 64) - 1


class DegenerateInputError(ValueError):
    """Raised when an input is mathematically unusable (e.g. zero-norm vector)."""


def stable_hash64(text: str) -> int:
    """Platform- and process-stable 64-bit hash of a string.

    Python's builtin hash() is salted per process, so it cannot seed
    reproducible draws.
    """
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs produce identical draw sequences on
    every platform, and child streams are derived from string tags rather
    than draw order, so parallel scheduling cannot change any draws.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64, self.stream_id & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: str) -> "RngStream":
        mixed = stable_hash64(f"{self.stream_id:#018x}/{tag}")
        return RngStream(seed=self.seed, stream_id=mixed)


def as_float64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit Euclidean norm. Zero vectors are rejected."""
    v = check_finite(as_float64(v), "vector")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return v / norm


def softmax(scores) -> np.ndarray:
    """Stable softmax over the last axis (max-subtraction)."""
    s = check_finite(as_float64(scores), "scores")
    shifted = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(scores) -> np.ndarray:
    s = check_finite(as_float64(scores), "scores")
    shifted = s - np.max(s, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def entropy(p) -> float:
    """Shannon entropy in nats; 0*log(0) is treated as 0."""
    p = as_float64(p)
    pos = p[p > 0.0]
    return max(0.0, float(-np.sum(pos * np.log(pos))))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Row-wise entropy of a matrix of distributions."""
    p = as_float64(p)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return np.maximum(0.0, -terms.sum(axis=-1))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence: symmetric, in [0, ln 2], finite on zeros."""
    p = as_float64(p)
    q = as_float64(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def half_kl(a):
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return max(0.0, 0.5 * half_kl(p) + 0.5 * half_kl(q))


def check_prob_dist(p, atol: float = 1e-9) -> np.ndarray:
    """Assert the probability-distribution contract: entries in [0,1], sum 1."""
    p = as_float64(p)
    if np.any(p < -atol) or np.any(p > 1.0 + atol):
        raise ValueError("probabilities outside [0, 1]")
    if abs(float(p.sum()) - 1.0) > atol:
        raise ValueError(f"probabilities sum to {float(p.sum())}, not 1")
    return p


@dataclass
class AdamWState:
    """Moment estimates plus hyperparameters for one parameter tensor."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, params: np.ndarray, lr: float = 0.002,
             betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
             weight_decay: float = 0.0) -> "AdamWState":
        shape = np.asarray(params).shape
        return cls(step=0, m=np.zeros(shape), v=np.zeros(shape),
                   lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def adamw_step(params, grads, state: AdamWState) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update with bias correction.

    Functional: returns fresh arrays, leaves inputs untouched.
    """
    p = as_float64(params)
    g = as_float64(grads)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.m.shape}")
    check_finite(g, "gradient")

    b1, b2 = state.betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)

    p_new = p * (1.0 - state.lr * state.weight_decay)
    p_new = p_new - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return p_new, replace(state, step=step, m=m, v=v)
