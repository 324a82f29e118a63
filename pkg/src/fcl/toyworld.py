"""Planted image world for end-to-end verification.

Images are a flat gray canvas plus smooth low-frequency patterns confined to
cells of a 3x3 grid: one shared cell whose encoder response is steered
toward a confusable class pair, one cell per class whose response aligns
with that class's text embedding alone, and a global class-neutral context
pattern that dilutes cosines the way real scene content does. The toy
visual encoder is affine with weights orthogonal to constants on every
occlusion cell, so pattern responses add exactly and occlusion measures
pure pattern removal. Every episode therefore carries known ground truth
for its common and unique evidence: what the occlusion maps, calibration,
and metric trends are supposed to recover.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import (init_context, make_planted_text_encoder,
                       make_toy_visual_encoder)
from .numerics import RngStream, as_float64, l2_normalize
from .theorylab import orthonormal_set

TOY_CLASS_NAMES = ["ant", "bee", "cat", "dog", "elk",
                   "fox", "gnu", "hen", "ibis", "jay"]


@dataclass
class ToyWorldConfig:
    """Geometry is aligned to a 3x3 grid of equal cells: cell (0,0) hosts
    the shared-evidence pattern, the next six cells (row-major) host one
    unique block per class, and the last two stay background-only. Coarse
    occlusion cells then remove whole evidence regions in one bite, keeping
    the per-cell importance signal strong and the evidence maps sharp."""

    image_size: int = 48
    d: int = 48
    d_token: int = 32
    n_ctx: int = 4
    n_classes: int = 6
    beta: float = 20.0
    ctx_gain: float = 8.0
    target_scale: float = 0.5
    cell: int = 16               # grid cell edge; image_size = 3 * cell
    block_freqs: int = 10        # cosine frequencies per axis, per cell
    bg_freqs: int = 9
    kappa_com: float = 0.5       # embedding-space response norm, shared cell
    kappa_uniq: float = 0.35     # response norm of each unique block
    kappa_bg: float = 0.28       # class-neutral scene-context response norm
    mask_grids: tuple = (3, 6)   # grids the encoder is occlusion-neutral on
    seed: int = 11

    def __post_init__(self):
        if self.image_size != 3 * self.cell:
            raise ValueError("image_size must be three cells")
        if not 1 <= self.n_classes <= 6:
            raise ValueError("the grid layout hosts at most 6 unique blocks")
        if 3 * self.bg_freqs ** 2 < self.d:
            raise ValueError("smooth basis too small for the embedding dim")


@dataclass
class Region:
    rows: slice
    cols: slice


class PatternSolver:
    """Solve for smooth region patterns with a prescribed encoder response.

    The pattern is a combination of low-frequency 2D cosine basis functions
    restricted to the region, chosen so that W_region @ pattern equals the
    target vector exactly (minimum-norm solution of an underdetermined
    system). Smoothness keeps the patterns recognizable under mild crops
    and bilinear resampling.
    """

    def __init__(self, region: Region, weight: np.ndarray, image_size: int,
                 n_freqs: int):
        self.region = region
        h = region.rows.stop - region.rows.start
        w = region.cols.stop - region.cols.start
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        cols = []
        for ch in range(3):
            for fy in range(n_freqs):
                for fx in range(n_freqs):
                    b = np.outer(np.cos(np.pi * fy * ys), np.cos(np.pi * fx * xs))
                    full = np.zeros((h, w, 3))
                    full[:, :, ch] = b
                    cols.append(full.reshape(-1) / np.linalg.norm(full))
        self.basis = np.stack(cols, axis=1)          # (h*w*3, n_basis)

        mask = np.zeros((image_size, image_size, 3), dtype=bool)
        mask[region.rows, region.cols, :] = True
        self.flat_index = np.flatnonzero(mask.reshape(-1))
        w_region = weight[:, self.flat_index]        # (d, h*w*3)
        self.response = w_region @ self.basis        # (d, n_basis)
        self.pinv = np.linalg.pinv(self.response)
        self.shape = (h, w)

    def pattern_for(self, target: np.ndarray, image_size: int) -> np.ndarray:
        """Full-size pattern whose encoder response is exactly `target`."""
        coeffs = self.pinv @ as_float64(target)
        patch = (self.basis @ coeffs).reshape(self.shape[0], self.shape[1], 3)
        full = np.zeros((image_size, image_size, 3))
        full[self.region.rows, self.region.cols, :] = patch
        return full


@dataclass
class ToyEpisode:
    image: np.ndarray
    label: int                   # true class id
    confuser: int                # class the shared cell is tilted toward
    a_com: float
    a_uniq: float
    a_conf: float                # confuser's unique amplitude
    tilt: float                  # how much of the shared response leaks to the true class
    dir_com: np.ndarray          # unit response direction of the shared cell
    dir_uniq: np.ndarray         # unit response direction of the true class block


class ToyImageWorld:
    """Factory for planted episodes and datasets over one seeded encoder pair."""

    def __init__(self, cfg: ToyWorldConfig):
        self.cfg = cfg
        rng = RngStream(seed=cfg.seed, stream_id=0)
        size = cfg.image_size
        self.visual = make_toy_visual_encoder(
            (size, size, 3), cfg.d, rng.child("visual"),
            bias_scale=0.0, center_rows=True,
            cell_orthogonal_grids=cfg.mask_grids)

        directions = orthonormal_set(cfg.d, cfg.n_classes + 1,
                                     rng.child("targets"))
        self.taus0_targets = directions[:cfg.n_classes]
        self.bg_direction = directions[cfg.n_classes]
        self.class_names = TOY_CLASS_NAMES[:cfg.n_classes]
        self.base_ctx = init_context("a photo of a", cfg.n_ctx, cfg.d_token)
        self.text = make_planted_text_encoder(
            self.class_names, self.taus0_targets, cfg.d_token,
            rng.child("text"), self.base_ctx, ctx_gain=cfg.ctx_gain,
            target_scale=cfg.target_scale)

        cell = cfg.cell
        self.common_region = self._cell_region(0)
        self.unique_regions = [self._cell_region(1 + c)
                               for c in range(cfg.n_classes)]
        self.common_solver = PatternSolver(self.common_region,
                                           self.visual.weight, size,
                                           cfg.block_freqs)
        self.unique_solvers = [PatternSolver(r, self.visual.weight, size,
                                             cfg.block_freqs)
                               for r in self.unique_regions]
        self.unique_patterns = np.stack([
            solver.pattern_for(cfg.kappa_uniq * self.taus0_targets[c], size)
            for c, solver in enumerate(self.unique_solvers)])
        # class-neutral context spread over the whole canvas; it dilutes all
        # cosines the way real scene content does, keeping scores away from
        # softmax saturation at the working temperature
        full = Region(rows=slice(0, size), cols=slice(0, size))
        self.bg_pattern = PatternSolver(full, self.visual.weight, size,
                                        cfg.bg_freqs) \
            .pattern_for(cfg.kappa_bg * self.bg_direction, size)

    def _cell_region(self, index: int) -> Region:
        r, c = divmod(index, 3)
        cell = self.cfg.cell
        return Region(rows=slice(r * cell, (r + 1) * cell),
                      cols=slice(c * cell, (c + 1) * cell))

    def base_text_embeddings(self) -> np.ndarray:
        return np.stack([self.text.encode(c, self.base_ctx)
                         for c in range(self.cfg.n_classes)])

    def episode_config(self, n_views: int = 32, top_k: int = 4,
                       n_masks: int = 120, steps: int = 2,
                       learning_rate: float = 0.002) -> "EpisodeConfig":
        """Episode settings tuned to this world's scale: gentle crops keep
        the smooth patterns recognizable to the affine encoder, no flips
        (the encoder is not mirror-invariant), and occlusion grids matching
        the encoder's neutrality grids."""
        from .augment import AugmentConfig
        from .calibrate import CalibConfig
        from .encoders import EncoderConfig
        from .evidence import EvidenceConfig
        from .explore import ExploreConfig
        from .pipeline import EpisodeConfig

        return EpisodeConfig(
            augment=AugmentConfig(n_views=n_views, crop_scale=(0.8, 1.0),
                                  flip_prob=0.0,
                                  output_size=self.cfg.image_size),
            explore=ExploreConfig(rho=0.3, top_k=top_k),
            evidence=EvidenceConfig(n_masks=n_masks,
                                    grid_sizes=self.cfg.mask_grids,
                                    gamma=0.4),
            calibrate=CalibConfig(steps=steps, learning_rate=learning_rate),
            encoder=EncoderConfig(beta=self.cfg.beta, d=self.cfg.d))

    def common_direction(self, label: int, confuser: int, tilt: float) -> np.ndarray:
        return l2_normalize(self.taus0_targets[confuser]
                            + tilt * self.taus0_targets[label])

    def compose(self, label: int, confuser: int, a_com: float, a_uniq: float,
                tilt: float, a_conf: float = 0.0) -> ToyEpisode:
        cfg = self.cfg
        dir_com = self.common_direction(label, confuser, tilt)
        common = self.common_solver.pattern_for(cfg.kappa_com * dir_com,
                                                cfg.image_size)
        image = np.full((cfg.image_size, cfg.image_size, 3), 0.5)
        image += self.bg_pattern
        image += a_com * common
        image += a_uniq * self.unique_patterns[label]
        if a_conf > 0.0:
            image += a_conf * self.unique_patterns[confuser]
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError(
                f"pattern amplitudes leave pixel range: [{image.min():.3f}, "
                f"{image.max():.3f}]; lower kappas or amplitudes")
        return ToyEpisode(image=image, label=label, confuser=confuser,
                          a_com=a_com, a_uniq=a_uniq, a_conf=a_conf, tilt=tilt,
                          dir_com=dir_com,
                          dir_uniq=self.taus0_targets[label].copy())

    def sample_episode(self, rng: RngStream,
                       bias: str = "mixed") -> ToyEpisode:
        """One episode; bias='high' plants a dominant shared cell,
        'low' a dominant unique block, 'mixed' draws between the two."""
        gen = rng.generator()
        label, confuser = gen.choice(self.cfg.n_classes, size=2, replace=False)
        if bias == "high":
            a_com, a_uniq = gen.uniform(1.0, 1.2), gen.uniform(0.45, 0.6)
            tilt = gen.uniform(0.55, 0.68)
        elif bias == "low":
            a_com, a_uniq = gen.uniform(0.15, 0.4), gen.uniform(0.85, 1.1)
            tilt = gen.uniform(0.45, 0.65)
        elif bias == "mixed":
            a_com = gen.uniform(0.3, 1.25)
            a_uniq = gen.uniform(0.4, 0.95)
            tilt = gen.uniform(0.55, 0.7)
        else:
            raise ValueError(f"unknown bias level {bias!r}")
        a_conf = gen.uniform(0.05, 0.15)
        # a rare amplitude draw can push a pattern past the pixel range;
        # shrink deterministically until the composition fits
        for _ in range(20):
            try:
                return self.compose(int(label), int(confuser), a_com, a_uniq,
                                    tilt, a_conf=a_conf)
            except ValueError:
                a_com *= 0.93
                a_uniq *= 0.93
                a_conf *= 0.93
        raise ValueError("could not fit a sampled episode into pixel range")

    def write_dataset(self, root, n_images: int, rng: RngStream,
                      bias: str = "mixed") -> dict:
        """Directory-per-class PNG dataset plus a classes file; returns the
        manifest dict the dataset loader accepts."""
        from PIL import Image
        import os

        root = str(root)
        os.makedirs(root, exist_ok=True)
        counts = {}
        for i in range(n_images):
            ep = self.sample_episode(rng.child(f"img:{i}"), bias=bias)
            name = self.class_names[ep.label]
            os.makedirs(os.path.join(root, name), exist_ok=True)
            counts[name] = counts.get(name, 0) + 1
            arr = np.clip(np.round(ep.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(
                os.path.join(root, name, f"{name}_{counts[name]:03d}.png"))
        classes_path = os.path.join(root, "classes.txt")
        with open(classes_path, "w") as f:
            f.write("\n".join(self.class_names) + "\n")
        return {"root": root, "layout": "directory", "classes_file": classes_path}
