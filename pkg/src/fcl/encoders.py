"""Visual/text encoder contracts and the fully differentiable toy backend.

The toy backend is a seeded random affine map followed by normalization:
exact, auditable, and cheap enough to finite-difference. The portable-graph
backend for real pretrained encoders lives in graphio.py; both expose the
same encode()/encode_batch() surface, so the pipeline never cares which one
it is running on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (DegenerateInputError, RngStream, as_float64,
                       check_finite, l2_normalize, stable_hash64)

MODE_CL = "cl"          # every context token is learnable (soft context)
MODE_CL_HP = "cl-hp"    # fixed hard-prompt tokens plus a learnable prefix


@dataclass
class ContextParams:
    """Learnable context-token matrix parameterizing the text encoder."""

    tokens: np.ndarray          # (n_ctx, d_token); may have 0 rows in cl-hp mode
    mode: str = MODE_CL

    def __post_init__(self):
        self.tokens = np.atleast_2d(as_float64(self.tokens))
        if self.mode not in (MODE_CL, MODE_CL_HP):
            raise ValueError(f"unknown context mode {self.mode!r}")
        check_finite(self.tokens, "context tokens")

    def copy(self) -> "ContextParams":
        return ContextParams(tokens=self.tokens.copy(), mode=self.mode)

    def with_tokens(self, tokens: np.ndarray) -> "ContextParams":
        return ContextParams(tokens=tokens, mode=self.mode)


@dataclass
class ClassVocabulary:
    """Ordered class names plus precomputed per-class token embeddings."""

    names: list[str]
    class_tokens: np.ndarray            # (C, tokens_per_class, dim)
    templates: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if self.class_tokens.shape[0] != len(self.names):
            raise ValueError("one token matrix required per class")
        hashes = [stable_hash64(n) for n in self.names]
        if len(set(hashes)) != len(hashes):
            raise ValueError("class-name hash collision detected")

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None


@dataclass
class EncoderConfig:
    beta: float = 20.0
    d: int = 64
    backend: str = "toy"    # "toy" | "graph"

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("similarity temperature must be positive")


def token_embedding(word: str, d_token: int, vocab_seed: int = 0) -> np.ndarray:
    """Pseudo-embedding of a single word: a hash-seeded unit-scale draw."""
    rng = RngStream(seed=vocab_seed,
                    stream_id=stable_hash64(f"word:{word}")).generator()
    return rng.normal(0.0, 1.0 / np.sqrt(d_token), size=d_token)


def init_context(template: str, n_ctx: int, d_token: int,
                 mode: str = MODE_CL, vocab_seed: int = 0) -> ContextParams:
    """Base context: token pseudo-embeddings of the template's first words.

    Templates shorter than n_ctx are padded with placeholder tokens. In
    cl-hp mode the template lives inside the encoder as fixed hard tokens,
    so the learnable part starts as zero-initialized prefix rows.
    """
    if mode == MODE_CL_HP:
        tokens = np.zeros((n_ctx, d_token))
        return ContextParams(tokens=tokens, mode=mode)
    words = template.split()
    rows = []
    for i in range(n_ctx):
        word = words[i] if i < len(words) else f"<pad{i}>"
        rows.append(token_embedding(word, d_token, vocab_seed))
    return ContextParams(tokens=np.stack(rows), mode=mode)


class ToyVisualEncoder:
    """Seeded random affine map from flattened pixels to a unit vector."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, image_shape: tuple):
        self.weight = as_float64(weight)
        self.bias = as_float64(bias)
        self.image_shape = tuple(image_shape)
        if self.weight.shape[1] != int(np.prod(image_shape)):
            raise ValueError("weight width must match flattened image size")

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    def raw(self, img: np.ndarray) -> np.ndarray:
        img = as_float64(img)
        if img.shape != self.image_shape:
            raise ValueError(
                f"expected image shape {self.image_shape}, got {img.shape}")
        return self.weight @ img.reshape(-1) + self.bias

    def encode(self, img: np.ndarray) -> np.ndarray:
        return l2_normalize(self.raw(img))

    def encode_batch(self, imgs: np.ndarray) -> np.ndarray:
        imgs = as_float64(imgs)
        if imgs.shape[1:] != self.image_shape:
            raise ValueError(
                f"expected image shape {self.image_shape}, got {imgs.shape[1:]}")
        raw = imgs.reshape(imgs.shape[0], -1) @ self.weight.T + self.bias
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero-norm embedding in batch")
        return raw / norms


def _cell_constant_basis(image_shape: tuple, grids: tuple) -> np.ndarray:
    """Indicator fields that are constant on each grid cell of each channel,
    across all the given grid sizes; columns of the returned matrix."""
    height, width, channels = image_shape
    cols = []
    for g in grids:
        row_edges = [(b * height) // g for b in range(g + 1)]
        col_edges = [(b * width) // g for b in range(g + 1)]
        for r in range(g):
            for c in range(g):
                for ch in range(channels):
                    field = np.zeros(image_shape)
                    field[row_edges[r]:row_edges[r + 1],
                          col_edges[c]:col_edges[c + 1], ch] = 1.0
                    cols.append(field.reshape(-1))
    return np.stack(cols, axis=1)


def make_toy_visual_encoder(image_shape: tuple, d: int, rng: RngStream,
                            bias_scale: float = 0.1,
                            center_rows: bool = False,
                            cell_orthogonal_grids: tuple | None = None
                            ) -> ToyVisualEncoder:
    """Fresh toy visual encoder with weights drawn from a seeded stream.

    center_rows subtracts each row's mean so constant images map to the bias
    alone. cell_orthogonal_grids additionally projects every weight row off
    fields that are constant on any occlusion cell of the given grid sizes:
    zeroing a flat region then leaves the embedding untouched, so occlusion
    measures pattern removal and nothing else. Synthetic worlds rely on both.
    """
    gen = rng.generator()
    in_dim = int(np.prod(image_shape))
    weight = gen.normal(0.0, 1.0 / np.sqrt(in_dim), size=(d, in_dim))
    if center_rows:
        weight -= weight.mean(axis=1, keepdims=True)
    if cell_orthogonal_grids:
        basis = _cell_constant_basis(image_shape, tuple(cell_orthogonal_grids))
        q, _ = np.linalg.qr(basis)
        weight -= (weight @ q) @ q.T
    bias = gen.normal(0.0, bias_scale / np.sqrt(d), size=d) if bias_scale > 0 \
        else np.zeros(d)
    return ToyVisualEncoder(weight, bias, image_shape)


class ToyTextEncoder:
    """tau_c(ctx) = normalize(W_ctx @ mean(tokens) + W_cls @ e_c).

    The mean runs over the *effective* token rows: the learnable rows alone
    in cl mode, or learnable prefix rows stacked on the fixed hard-prompt
    rows in cl-hp mode.
    """

    def __init__(self, w_ctx: np.ndarray, w_cls: np.ndarray,
                 vocabulary: ClassVocabulary, hard_tokens: np.ndarray | None = None):
        self.w_ctx = as_float64(w_ctx)
        self.w_cls = as_float64(w_cls)
        self.vocabulary = vocabulary
        self.hard_tokens = None if hard_tokens is None else as_float64(hard_tokens)
        # toy class vectors are single-token matrices; keep them as vectors
        self.class_vectors = as_float64(vocabulary.class_tokens[:, 0, :])
        if self.class_vectors.shape[1] != self.w_cls.shape[1]:
            raise ValueError("class vector dim does not match W_cls")

    @property
    def d(self) -> int:
        return self.w_ctx.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.vocabulary)

    def _effective_tokens(self, ctx: ContextParams) -> np.ndarray:
        if ctx.mode == MODE_CL_HP:
            if self.hard_tokens is None:
                raise ValueError("cl-hp mode requires hard-prompt tokens")
            if ctx.tokens.shape[0] == 0:
                return self.hard_tokens
            return np.vstack([ctx.tokens, self.hard_tokens])
        return ctx.tokens

    def _check_class(self, class_id: int) -> int:
        if not 0 <= class_id < self.n_classes:
            raise KeyError(f"unknown class id {class_id}")
        return int(class_id)

    def raw(self, class_id: int, ctx: ContextParams) -> np.ndarray:
        class_id = self._check_class(class_id)
        tokens = self._effective_tokens(ctx)
        return self.w_ctx @ tokens.mean(axis=0) + self.w_cls @ self.class_vectors[class_id]

    def encode(self, class_id: int, ctx: ContextParams) -> np.ndarray:
        return l2_normalize(self.raw(class_id, ctx))

    def encode_all(self, ctx: ContextParams) -> np.ndarray:
        """All class embeddings at once, (C, d)."""
        tokens = self._effective_tokens(ctx)
        raw = self.class_vectors @ self.w_cls.T + self.w_ctx @ tokens.mean(axis=0)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero-norm text embedding")
        return raw / norms

    def encode_vjp(self, class_id: int, ctx: ContextParams,
                   upstream: np.ndarray) -> np.ndarray:
        """d<tau_c(ctx), upstream>/d(ctx.tokens), normalization included."""
        upstream = as_float64(upstream)
        if upstream.shape != (self.d,):
            raise ValueError(f"upstream must have dimension {self.d}")
        class_id = self._check_class(class_id)
        n_learn = ctx.tokens.shape[0]
        if n_learn == 0:
            return np.zeros_like(ctx.tokens)
        tokens = self._effective_tokens(ctx)
        h = self.w_ctx @ tokens.mean(axis=0) + self.w_cls @ self.class_vectors[class_id]
        norm = float(np.linalg.norm(h))
        if norm == 0.0:
            raise DegenerateInputError("zero-norm text embedding")
        tau = h / norm
        g_h = (upstream - tau * float(tau @ upstream)) / norm
        row = (self.w_ctx.T @ g_h) / tokens.shape[0]
        return np.tile(row, (n_learn, 1))


def finite_diff_vjp(text_encoder, class_id: int, ctx: ContextParams,
                    upstream: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d<tau_c, upstream>/d(tokens).

    Works against any backend that only exposes encode(); costs two forward
    passes per context-token entry.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    upstream = as_float64(upstream)
    grad = np.zeros_like(ctx.tokens)
    base = ctx.tokens
    for r in range(base.shape[0]):
        for c in range(base.shape[1]):
            plus = base.copy()
            plus[r, c] += h
            minus = base.copy()
            minus[r, c] -= h
            f_plus = float(text_encoder.encode(class_id, ctx.with_tokens(plus)) @ upstream)
            f_minus = float(text_encoder.encode(class_id, ctx.with_tokens(minus)) @ upstream)
            grad[r, c] = (f_plus - f_minus) / (2.0 * h)
    return grad


def similarity(z: np.ndarray, tau: np.ndarray, beta: float) -> float:
    """Temperature-scaled cosine score for unit-norm embeddings."""
    z = as_float64(z)
    tau = as_float64(tau)
    if z.shape != tau.shape:
        raise ValueError(f"embedding dimension mismatch: {z.shape} vs {tau.shape}")
    return float(beta * (z @ tau))


def score_matrix(view_embs: np.ndarray, text_embs: np.ndarray,
                 beta: float) -> np.ndarray:
    """(N, C) score matrix beta * <z_i, tau_c> from stacked embeddings."""
    return beta * (as_float64(view_embs) @ as_float64(text_embs).T)


def make_toy_vocabulary(names: list[str], d_cls: int, vocab_seed: int = 0,
                        templates: list[str] | None = None) -> ClassVocabulary:
    """Vocabulary whose class vectors are hash-seeded pseudo-embeddings."""
    rows = []
    for name in names:
        gen = RngStream(seed=vocab_seed,
                        stream_id=stable_hash64(f"class:{name}")).generator()
        rows.append(gen.normal(0.0, 1.0 / np.sqrt(d_cls), size=d_cls))
    class_tokens = np.stack(rows)[:, None, :]
    return ClassVocabulary(names=list(names), class_tokens=class_tokens,
                           templates=list(templates or []))


def make_toy_text_encoder(vocabulary: ClassVocabulary, d: int, d_token: int,
                          rng: RngStream, ctx_gain: float = 1.0,
                          template: str = "a photo of a") -> ToyTextEncoder:
    """Random toy text encoder over an existing vocabulary.

    ctx_gain scales the context block of the weight matrix, i.e. how far a
    unit move of the mean context token displaces the raw text embedding.
    """
    gen = rng.generator()
    d_cls = vocabulary.class_tokens.shape[2]
    w_ctx = ctx_gain * gen.normal(0.0, 1.0 / np.sqrt(d_token), size=(d, d_token))
    w_cls = gen.normal(0.0, 1.0 / np.sqrt(d_cls), size=(d, d_cls))
    hard = np.stack([token_embedding(w, d_token) for w in template.split()]) \
        if template else None
    return ToyTextEncoder(w_ctx, w_cls, vocabulary, hard_tokens=hard)


def make_planted_text_encoder(names: list[str], targets: np.ndarray,
                              d_token: int, rng: RngStream,
                              base_ctx: ContextParams, ctx_gain: float = 1.0,
                              target_scale: float = 1.0,
                              template: str = "a photo of a") -> ToyTextEncoder:
    """Toy text encoder built so tau_c(base_ctx) hits given unit targets exactly.

    Picks W_cls = I and back-solves each class vector; the context block
    stays a random map, so the encoder remains smooth and adaptable in ctx.
    """
    targets = as_float64(targets)
    d = targets.shape[1]
    gen = rng.generator()
    w_ctx = ctx_gain * gen.normal(0.0, 1.0 / np.sqrt(d_token), size=(d, d_token))
    hard = np.stack([token_embedding(w, d_token) for w in template.split()]) \
        if template else None
    if base_ctx.mode == MODE_CL_HP and hard is not None:
        eff = np.vstack([base_ctx.tokens, hard]) if base_ctx.tokens.shape[0] \
            else hard
    else:
        eff = base_ctx.tokens
    ctx_term = w_ctx @ eff.mean(axis=0)
    class_vectors = target_scale * targets - ctx_term[None, :]
    vocab = ClassVocabulary(names=list(names),
                            class_tokens=class_vectors[:, None, :])
    return ToyTextEncoder(w_ctx, np.eye(d), vocab, hard_tokens=hard)
