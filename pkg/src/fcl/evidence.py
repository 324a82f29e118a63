"""Occlusion-based class evidence: multi-scale random masks, per-class
importance maps, spatial probability maps, and the shared/unique evidence
embeddings derived from them.

Masks are sampled directly at target resolution on coarse grids (no
upsampling or interpolation): the image is partitioned into g contiguous
blocks per axis with floor boundaries, and a random fraction gamma of the
g*g cells is occluded by zeroing raw pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_float64, log_softmax

WEIGHT_FLOOR = 1e-12


@dataclass
class EvidenceConfig:
    n_masks: int = 400
    grid_sizes: tuple[int, ...] = (7, 9, 11, 13)
    gamma: float = 0.5

    def __post_init__(self):
        if self.n_masks < 1:
            raise ValueError("n_masks must be >= 1")
        if any(g < 2 for g in self.grid_sizes) or not self.grid_sizes:
            raise ValueError("grid sizes must all be >= 2")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("masked area fraction gamma must be in (0, 1)")


@dataclass
class MaskSpec:
    grid_size: int
    cells: np.ndarray          # flat indices into the g*g cell grid
    pixel_mask: np.ndarray     # (H, W) bool, True where occluded


def masked_cell_count(grid_size: int, gamma: float) -> int:
    """round(gamma * g^2) clamped so a mask never covers nothing or everything."""
    total = grid_size * grid_size
    return int(np.clip(round(gamma * total), 1, total - 1))


def block_edges(size: int, grid_size: int) -> np.ndarray:
    """Balanced contiguous partition: block b spans [floor(b*size/g), floor((b+1)*size/g))."""
    return np.array([(b * size) // grid_size for b in range(grid_size + 1)])


def cells_to_pixel_mask(grid_size: int, cells: np.ndarray, height: int,
                        width: int) -> np.ndarray:
    rows = block_edges(height, grid_size)
    cols = block_edges(width, grid_size)
    mask = np.zeros((height, width), dtype=bool)
    for cell in np.asarray(cells, dtype=int):
        r, c = divmod(cell, grid_size)
        mask[rows[r]:rows[r + 1], cols[c]:cols[c + 1]] = True
    return mask


def sample_masks(cfg: EvidenceConfig, height: int, width: int,
                 rng: RngStream) -> list[MaskSpec]:
    """n_masks multi-scale masks: grid size uniform over the configured set,
    occluded cells uniform without replacement."""
    gen = rng.generator()
    sizes = np.asarray(cfg.grid_sizes, dtype=int)
    masks = []
    for _ in range(cfg.n_masks):
        g = int(sizes[gen.integers(0, sizes.size)])
        k = masked_cell_count(g, cfg.gamma)
        cells = np.sort(gen.choice(g * g, size=k, replace=False))
        masks.append(MaskSpec(grid_size=g, cells=cells,
                              pixel_mask=cells_to_pixel_mask(g, cells, height, width)))
    return masks


def apply_mask(x: np.ndarray, mask: MaskSpec) -> np.ndarray:
    """Occlude: zero the raw pixels inside the mask region."""
    out = as_float64(x).copy()
    out[mask.pixel_mask] = 0.0
    return out


def restricted_log_posteriors(embeddings: np.ndarray, text_embs: np.ndarray,
                              beta: float) -> np.ndarray:
    """Log softmax over the candidate classes, one row per embedding."""
    scores = beta * (np.atleast_2d(as_float64(embeddings)) @ as_float64(text_embs).T)
    return log_softmax(scores)


def delta_losses(x: np.ndarray, masks: list[MaskSpec], visual_encoder,
                 candidate_text_embs: np.ndarray, beta: float,
                 base_logp: np.ndarray | None = None) -> np.ndarray:
    """(N_m, K) increases in negative log-probability caused by each mask.

    delta[n, c] = log pi(c | x) - log pi(c | x masked by n), both restricted
    to the candidate classes at the base context.
    """
    x = as_float64(x)
    if base_logp is None:
        base_logp = restricted_log_posteriors(
            visual_encoder.encode(x), candidate_text_embs, beta)[0]
    masked = np.stack([apply_mask(x, m) for m in masks])
    embs = visual_encoder.encode_batch(masked)
    masked_logp = restricted_log_posteriors(embs, candidate_text_embs, beta)
    return base_logp[None, :] - masked_logp


def delta_loss(x: np.ndarray, mask: MaskSpec, class_index: int, visual_encoder,
               candidate_text_embs: np.ndarray, beta: float,
               base_logp: np.ndarray | None = None) -> float:
    """Single (mask, class) importance score; class_index is the candidate
    column, not a vocabulary id."""
    delta = delta_losses(x, [mask], visual_encoder, candidate_text_embs, beta,
                         base_logp=base_logp)
    return float(delta[0, class_index])


def class_evidence_map(delta_vals: np.ndarray, masks: list[MaskSpec],
                       height: int, width: int) -> np.ndarray:
    """E(u,v) = mean over masks of delta * mask(u,v)."""
    delta_vals = as_float64(delta_vals)
    if delta_vals.shape[0] != len(masks):
        raise ValueError("one delta value required per mask")
    if len(masks) == 0:
        raise ValueError("at least one mask is required")
    acc = np.zeros((height, width))
    for d, m in zip(delta_vals, masks):
        acc += d * m.pixel_mask
    return acc / len(masks)


def spatial_softmax(evidence: np.ndarray) -> np.ndarray:
    """Pixel-wise softmax of an evidence map; positive, sums to one."""
    e = as_float64(evidence)
    flat = e.reshape(-1)
    shifted = flat - flat.max()
    w = np.exp(shifted)
    return (w / w.sum()).reshape(e.shape)


def common_evidence_map(s_i: np.ndarray, s_j: np.ndarray) -> np.ndarray:
    """Normalized elementwise product of two spatial probability maps."""
    s_i = as_float64(s_i)
    s_j = as_float64(s_j)
    if s_i.shape != s_j.shape:
        raise ValueError("spatial maps must share a shape")
    prod = s_i * s_j
    total = prod.sum()
    if total <= 0.0:
        # unreachable with strictly positive softmax maps, guarded anyway
        return np.full(s_i.shape, 1.0 / s_i.size)
    return prod / total


def rescale_by_max(weight_map: np.ndarray) -> np.ndarray:
    """Probability maps scale like 1/(H*W); rescale to [0, 1] by the max so
    applying them pixel-wise does not blank the image."""
    w = as_float64(weight_map)
    peak = float(w.max())
    if peak <= 0.0:
        raise ValueError("weight map must contain a positive entry")
    return w / peak


def weighted_image(x: np.ndarray, weight_map: np.ndarray) -> np.ndarray:
    """Apply an (H, W) weight map to raw pixels, broadcast over channels."""
    x = as_float64(x)
    w = as_float64(weight_map)
    if w.shape != x.shape[:2]:
        raise ValueError("weight map must match the image's spatial shape")
    return x * w[:, :, None]


def common_evidence_embedding(visual_encoder, x: np.ndarray,
                              q_map: np.ndarray) -> np.ndarray:
    """Embedding of the image weighted by the max-rescaled common map."""
    return visual_encoder.encode(weighted_image(x, rescale_by_max(q_map)))


def unique_weight_map(s_pred: np.ndarray, q_pair: np.ndarray) -> np.ndarray:
    """weight = rescale(S_pred) * (1 - rescale(Q)): regions important to the
    predicted class with the shared regions suppressed. If the product
    vanishes everywhere (a uniform Q rescales to one), fall back to the
    S-only weighting."""
    s_w = rescale_by_max(s_pred)
    q_w = rescale_by_max(q_pair)
    weight = s_w * (1.0 - q_w)
    if float(weight.max()) <= WEIGHT_FLOOR:
        return s_w
    return weight


def unique_evidence_embedding(visual_encoder, x: np.ndarray, s_pred: np.ndarray,
                              q_pair: np.ndarray) -> np.ndarray:
    """Embedding of regions important to the predicted class but not shared."""
    return visual_encoder.encode(
        weighted_image(x, unique_weight_map(s_pred, q_pair)))


@dataclass
class EvidenceBundle:
    """Everything the calibration and metric stages need from one image."""

    masks: list[MaskSpec]
    delta: np.ndarray           # (N_m, K)
    evidence_maps: np.ndarray   # (K, H, W)
    spatial_maps: np.ndarray    # (K, H, W)
    base_logp: np.ndarray       # (K,)

    def common_map(self, i: int, j: int) -> np.ndarray:
        """Q for candidate columns i, j (symmetric)."""
        return common_evidence_map(self.spatial_maps[i], self.spatial_maps[j])


def estimate_evidence(x: np.ndarray, visual_encoder,
                      candidate_text_embs: np.ndarray, beta: float,
                      cfg: EvidenceConfig, rng: RngStream) -> EvidenceBundle:
    """Sample masks, score them, and aggregate per-candidate maps."""
    x = as_float64(x)
    height, width = x.shape[:2]
    masks = sample_masks(cfg, height, width, rng)
    base_logp = restricted_log_posteriors(
        visual_encoder.encode(x), candidate_text_embs, beta)[0]
    delta = delta_losses(x, masks, visual_encoder, candidate_text_embs, beta,
                         base_logp=base_logp)
    k = candidate_text_embs.shape[0]
    maps = np.stack([class_evidence_map(delta[:, c], masks, height, width)
                     for c in range(k)])
    spatial = np.stack([spatial_softmax(m) for m in maps])
    return EvidenceBundle(masks=masks, delta=delta, evidence_maps=maps,
                          spatial_maps=spatial, base_logp=base_logp)
