"""Portable-graph backend: pretrained encoders exported as TorchScript plus a
binary class-token table, wired behind the same encode() surface as the toy
backend.

The class-token table ("FCLE") is little-endian: magic "FCLE", u32 version,
u32 class count, u32 tokens-per-class, u32 token dim, then float32 row-major
data. Text graphs take embedding-level inputs (context tokens stacked on the
precomputed class tokens), so the context stays an external optimization
variable; gradients go through the finite-difference VJP.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .encoders import ContextParams, MODE_CL_HP
from .numerics import as_float64, l2_normalize

FCLE_MAGIC = b"FCLE"
FCLE_VERSION = 1


def write_class_table(path: str, table: np.ndarray) -> None:
    """Write a (C, tokens_per_class, d_token) array as an FCLE file."""
    table = np.asarray(table, dtype=np.float32)
    if table.ndim != 3:
        raise ValueError("class table must be (C, tokens_per_class, d_token)")
    c, t, d = table.shape
    with open(path, "wb") as f:
        f.write(FCLE_MAGIC)
        f.write(struct.pack("<IIII", FCLE_VERSION, c, t, d))
        f.write(table.astype("<f4").tobytes(order="C"))


def read_class_table(path: str) -> np.ndarray:
    """Read an FCLE file back into a float64 (C, T, d_token) array."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FCLE_MAGIC:
            raise ValueError(f"not a class-token table: bad magic {magic!r}")
        version, c, t, d = struct.unpack("<IIII", f.read(16))
        if version != FCLE_VERSION:
            raise ValueError(f"unsupported table version {version}")
        payload = f.read(c * t * d * 4)
        if len(payload) != c * t * d * 4:
            raise ValueError("class-token table truncated")
        data = np.frombuffer(payload, dtype="<f4").reshape(c, t, d)
    return data.astype(np.float64)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class GraphVisualEncoder:
    """TorchScript vision graph; computes in float32, returns float64."""

    def __init__(self, module, image_size: int, d: int):
        self.module = module
        self.image_size = image_size
        self.d = d
        self.image_shape = (image_size, image_size, 3)

    def encode(self, img: np.ndarray) -> np.ndarray:
        return self.encode_batch(np.asarray(img)[None])[0]

    def encode_batch(self, imgs: np.ndarray) -> np.ndarray:
        import torch

        imgs = as_float64(imgs)
        if imgs.shape[1:] != self.image_shape:
            raise ValueError(
                f"graph backend expects {self.image_shape} images, got "
                f"{imgs.shape[1:]}")
        batch = torch.from_numpy(np.ascontiguousarray(
            imgs.transpose(0, 3, 1, 2))).float()
        with torch.no_grad():
            out = self.module(batch).numpy().astype(np.float64)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return out / norms


class GraphTextEncoder:
    """TorchScript text graph over embedding-level token inputs."""

    def __init__(self, module, class_tokens: np.ndarray, class_names: list[str],
                 hard_tokens: np.ndarray | None = None):
        self.module = module
        self.class_tokens = as_float64(class_tokens)    # (C, T, d_token)
        self.class_names = list(class_names)
        self.hard_tokens = None if hard_tokens is None else as_float64(hard_tokens)

    @property
    def n_classes(self) -> int:
        return self.class_tokens.shape[0]

    def _token_stack(self, class_id: int, ctx: ContextParams) -> np.ndarray:
        if not 0 <= class_id < self.n_classes:
            raise KeyError(f"unknown class id {class_id}")
        parts = []
        if ctx.mode == MODE_CL_HP:
            if ctx.tokens.shape[0]:
                parts.append(ctx.tokens)
            if self.hard_tokens is None:
                raise ValueError("cl-hp mode requires exported hard tokens")
            parts.append(self.hard_tokens)
        else:
            parts.append(ctx.tokens)
        parts.append(self.class_tokens[class_id])
        return np.vstack(parts)

    def encode(self, class_id: int, ctx: ContextParams) -> np.ndarray:
        import torch

        stack = self._token_stack(class_id, ctx)
        with torch.no_grad():
            out = self.module(torch.from_numpy(stack).float()[None])
        return l2_normalize(out[0].numpy().astype(np.float64))


def load_graph_backend(manifest_path: str):
    """Load the exported artifacts named by a manifest, verifying checksums.

    Returns (visual_encoder, text_encoder, class_names, base_ctx, meta).
    """
    import torch

    with open(manifest_path) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(name):
        path = manifest[name]
        return path if os.path.isabs(path) else os.path.join(base, path)

    for name, expected in manifest.get("checksums", {}).items():
        path = os.path.join(base, name)
        actual = sha256_file(path)
        if actual != expected:
            raise ValueError(
                f"checksum mismatch for {name}: expected {expected}, got {actual}")

    vision = torch.jit.load(resolve("vision_graph"), map_location="cpu")
    text = torch.jit.load(resolve("text_graph"), map_location="cpu")
    vision.eval()
    text.eval()
    class_tokens = read_class_table(resolve("class_table"))
    if class_tokens.shape[0] != len(manifest["class_names"]):
        raise ValueError("class table row count does not match class names")

    hard = manifest.get("base_context_tokens")
    hard_arr = None if hard is None else np.asarray(hard, dtype=np.float64)
    visual_encoder = GraphVisualEncoder(vision, int(manifest["image_size"]),
                                        int(manifest["d"]))
    text_encoder = GraphTextEncoder(text, class_tokens,
                                    manifest["class_names"],
                                    hard_tokens=hard_arr)
    base_ctx = ContextParams(tokens=hard_arr.copy()) if hard_arr is not None \
        else ContextParams(tokens=np.zeros((0, class_tokens.shape[2])))
    return visual_encoder, text_encoder, manifest["class_names"], base_ctx, manifest
