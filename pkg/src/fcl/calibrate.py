"""Fair context adaptation: push each candidate pair's two-class posterior on
its shared-evidence embedding toward uniform, while an alignment term keeps
adapted text embeddings near their base versions.

Gradients are assembled analytically by chaining the loss derivative with
respect to each candidate text embedding into the text encoder's VJP; a
finite-difference VJP is used automatically for forward-only backends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ContextParams, finite_diff_vjp
from .numerics import AdamWState, adamw_step, as_float64, js_divergence, softmax

UNIFORM_PAIR = np.array([0.5, 0.5])


@dataclass
class CalibConfig:
    lambda_cal: float = 1.0
    lambda_align: float = 1.0
    steps: int = 2
    learning_rate: float = 0.002
    recompute_weights: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("step count must be >= 0")
        if self.lambda_cal < 0 or self.lambda_align < 0:
            raise ValueError("loss coefficients must be >= 0")


@dataclass
class Pair:
    i: int                      # vocabulary class ids, i < j not required
    j: int
    z_common: np.ndarray        # shared-evidence embedding for this pair
    weight: float


@dataclass
class PairSet:
    pairs: list[Pair]
    candidate_ids: list[int]
    full_image_embedding: np.ndarray | None = None
    base_pairwise: dict = field(default_factory=dict)   # logged, never optimized

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class CalibTrace:
    cal: list[float]
    align: list[float]
    total: list[float]
    initial_tokens: np.ndarray
    final_tokens: np.ndarray
    fallback: bool = False
    base_pairwise: dict = field(default_factory=dict)

    @property
    def steps_run(self) -> int:
        return len(self.total) - 1


def pairwise_posterior(z_common: np.ndarray, tau_i: np.ndarray,
                       tau_j: np.ndarray, beta: float) -> np.ndarray:
    """Two-class softmax of the pair's scores on the shared embedding."""
    z = as_float64(z_common)
    scores = beta * np.array([float(z @ tau_i), float(z @ tau_j)])
    return softmax(scores)


def pair_weight(posterior: np.ndarray, idx_i: int, idx_j: int) -> float:
    """w = 1 - |pi(i) - pi(j)| over the candidate-restricted posterior."""
    if idx_i == idx_j:
        raise ValueError("a pair needs two distinct classes")
    return float(1.0 - abs(posterior[idx_i] - posterior[idx_j]))


def candidate_posterior(z: np.ndarray, taus: np.ndarray, beta: float) -> np.ndarray:
    return softmax(beta * (as_float64(z) @ as_float64(taus).T))


def build_pair_set(candidate_ids: list[int], common_embeddings: dict,
                   z_full: np.ndarray, base_taus: dict, beta: float) -> PairSet:
    """All unordered candidate pairs, weighted by how close their full-image
    posteriors are; also logs each pair's base posterior on the full image."""
    ids = list(candidate_ids)
    taus = np.stack([base_taus[c] for c in ids])
    posterior = candidate_posterior(z_full, taus, beta)
    pairs = []
    base_pairwise = {}
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            key = (i, j)
            pairs.append(Pair(i=i, j=j, z_common=common_embeddings[key],
                              weight=pair_weight(posterior, a, b)))
            base_pairwise[key] = pairwise_posterior(
                z_full, base_taus[i], base_taus[j], beta)
    return PairSet(pairs=pairs, candidate_ids=ids,
                   full_image_embedding=as_float64(z_full),
                   base_pairwise=base_pairwise)


def _encode_candidates(text_encoder, ctx: ContextParams,
                       candidate_ids: list[int]) -> dict:
    return {c: text_encoder.encode(c, ctx) for c in candidate_ids}


def _pair_weights(pair_set: PairSet, taus: dict, beta: float,
                  recompute: bool) -> list[float]:
    if not recompute or pair_set.full_image_embedding is None:
        return [p.weight for p in pair_set.pairs]
    ids = pair_set.candidate_ids
    stacked = np.stack([taus[c] for c in ids])
    posterior = candidate_posterior(pair_set.full_image_embedding, stacked, beta)
    index = {c: k for k, c in enumerate(ids)}
    return [pair_weight(posterior, index[p.i], index[p.j]) for p in pair_set.pairs]


def calibration_loss(ctx: ContextParams, pair_set: PairSet, text_encoder,
                     beta: float, weights: list[float] | None = None) -> float:
    """Weighted mean JS divergence to uniform over all candidate pairs."""
    if len(pair_set) == 0:
        return 0.0
    taus = _encode_candidates(text_encoder, ctx, pair_set.candidate_ids)
    if weights is None:
        weights = [p.weight for p in pair_set.pairs]
    total = 0.0
    for pair, w in zip(pair_set.pairs, weights):
        p = pairwise_posterior(pair.z_common, taus[pair.i], taus[pair.j], beta)
        total += w * js_divergence(p, UNIFORM_PAIR)
    return total / len(pair_set)


def alignment_loss(ctx: ContextParams, base_taus: dict, candidate_ids: list[int],
                   text_encoder) -> float:
    """1 - mean cosine between adapted and base candidate embeddings."""
    taus = _encode_candidates(text_encoder, ctx, candidate_ids)
    cosines = [float(taus[c] @ base_taus[c]) for c in candidate_ids]
    return 1.0 - float(np.mean(cosines))


def _vjp(text_encoder, class_id: int, ctx: ContextParams,
         upstream: np.ndarray) -> np.ndarray:
    if hasattr(text_encoder, "encode_vjp"):
        return text_encoder.encode_vjp(class_id, ctx, upstream)
    return finite_diff_vjp(text_encoder, class_id, ctx, upstream)


def total_loss_and_grad(ctx: ContextParams, pair_set: PairSet, base_taus: dict,
                        text_encoder, cfg: CalibConfig, beta: float):
    """(L_total, L_cal, L_align, dL/d(ctx.tokens)).

    Pair weights are treated as constants (no gradient through them), and
    the uniform target has no parameters, so the chain is: JS -> pairwise
    softmax -> scores -> text embeddings -> context tokens.
    """
    ids = pair_set.candidate_ids
    taus = _encode_candidates(text_encoder, ctx, ids)
    upstream = {c: np.zeros_like(base_taus[c]) for c in ids}
    weights = _pair_weights(pair_set, taus, beta, cfg.recompute_weights)

    l_cal = 0.0
    if len(pair_set) > 0:
        for pair, w in zip(pair_set.pairs, weights):
            z = pair.z_common
            p = pairwise_posterior(z, taus[pair.i], taus[pair.j], beta)
            l_cal += w * js_divergence(p, UNIFORM_PAIR)
            m = 0.5 * (p + UNIFORM_PAIR)
            djs_dp = 0.5 * np.log(p / m)
            ds = p * (djs_dp - float(djs_dp @ p))
            coeff = cfg.lambda_cal * w / len(pair_set)
            upstream[pair.i] += coeff * beta * ds[0] * z
            upstream[pair.j] += coeff * beta * ds[1] * z
        l_cal /= len(pair_set)

    cosines = [float(taus[c] @ base_taus[c]) for c in ids]
    l_align = 1.0 - float(np.mean(cosines))
    for c in ids:
        upstream[c] -= (cfg.lambda_align / len(ids)) * base_taus[c]

    grad = np.zeros_like(ctx.tokens)
    if grad.size:
        for c in ids:
            grad += _vjp(text_encoder, c, ctx, upstream[c])

    l_total = cfg.lambda_cal * l_cal + cfg.lambda_align * l_align
    return l_total, l_cal, l_align, grad


def sensitivity_gap(z_common: np.ndarray, tau_i: np.ndarray,
                    tau_j: np.ndarray) -> float:
    """|<z_com, tau_i> - <z_com, tau_j>|: zero means equal sensitivity."""
    z = as_float64(z_common)
    return abs(float(z @ tau_i) - float(z @ tau_j))


def calibrate_context(ctx0: ContextParams, pair_set: PairSet, base_taus: dict,
                      text_encoder, cfg: CalibConfig,
                      beta: float) -> tuple[ContextParams, CalibTrace]:
    """Run the AdamW loop from the base context; returns the adapted context
    and the full loss trace (steps+1 entries, first is the pre-step value).

    A non-finite loss or gradient aborts the loop and falls back to the base
    context with the trace flagged.
    """
    ctx = ctx0.copy()
    state = AdamWState.init(ctx.tokens, lr=cfg.learning_rate)
    cal_hist, align_hist, total_hist = [], [], []
    fallback = False

    def evaluate(current):
        try:
            out = total_loss_and_grad(current, pair_set, base_taus,
                                      text_encoder, cfg, beta)
        except ValueError:
            return None
        if not (np.isfinite(out[0]) and np.all(np.isfinite(out[3]))):
            return None
        return out

    for _ in range(cfg.steps):
        result = evaluate(ctx)
        if result is None:
            fallback = True
            break
        l_total, l_cal, l_align, grad = result
        cal_hist.append(l_cal)
        align_hist.append(l_align)
        total_hist.append(l_total)
        tokens, state = adamw_step(ctx.tokens, grad, state)
        ctx = ctx.with_tokens(tokens)

    if fallback:
        ctx = ctx0.copy()
        cal_hist, align_hist, total_hist = [], [], []

    result = evaluate(ctx)
    if result is not None:
        l_total, l_cal, l_align, _ = result
        cal_hist.append(l_cal)
        align_hist.append(l_align)
        total_hist.append(l_total)

    trace = CalibTrace(cal=cal_hist, align=align_hist, total=total_hist,
                       initial_tokens=ctx0.tokens.copy(),
                       final_tokens=ctx.tokens.copy(),
                       fallback=fallback,
                       base_pairwise=dict(pair_set.base_pairwise))
    return ctx, trace
