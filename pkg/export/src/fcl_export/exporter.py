"""Export a dual-encoder checkpoint into the engine's portable artifacts.

Writes a TorchScript vision graph, a TorchScript embedding-input text graph,
the binary class-token table, and a JSON manifest carrying dimensions,
template list, base context tokens, and a SHA-256 checksum per artifact
(verified again by the engine on load). Everything is staged in a temporary
directory and round-trip-verified against the source model before being
moved into place, so a failed export leaves no partial artifacts behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile

import numpy as np
import torch

from .fcle import read_table, write_table
from .models import DualEncoder
from .tokenizer import class_token_table, embed_words

DEFAULT_TEMPLATES = [
    "itap of a",
    "a bad photo of the",
    "a origami",
    "a photo of the large",
    "a in a video game",
    "art of the",
    "a photo of the small",
]

ROUND_TRIP_COSINE = 0.9999
ARTIFACTS = ("vision_graph", "text_graph", "class_table")


class ExportError(RuntimeError):
    """Export or verification failure; no artifacts were left behind."""


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonicalize_archive(path: str) -> None:
    """Rewrite a TorchScript zip deterministically.

    torch.jit.save embeds a random serialization id plus caller stack traces
    in the .debug_pkl members, so two saves of identical graphs differ.
    Dropping the optional debug members, pinning the id, and rebuilding the
    archive with fixed timestamps makes re-exports bit-identical; the graphs
    load and execute unchanged (verified downstream before finalizing).
    """
    import zipfile

    members = []
    with zipfile.ZipFile(path) as src:
        for info in src.infolist():
            if info.filename.endswith(".debug_pkl"):
                continue
            data = src.read(info.filename)
            if info.filename.endswith(".data/serialization_id"):
                data = b"0" * len(data)
            members.append((info.filename, data))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as dst:
        for name, data in sorted(members):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            dst.writestr(info, data)


def _trace_graphs(model: DualEncoder, stage: str, n_ctx: int,
                  tokens_per_class: int) -> dict:
    # tracing runs in a fresh interpreter: TorchScript mangles type names
    # with a process-global counter, and only a clean process guarantees the
    # same bytes for the same inputs no matter what was traced earlier
    import subprocess
    import sys

    ckpt = os.path.join(stage, "source.ckpt")
    torch.save({"hyperparams": model.hyperparams(),
                "state_dict": model.state_dict()}, ckpt)
    proc = subprocess.run(
        [sys.executable, "-m", "fcl_export.trace_worker", ckpt, stage,
         str(n_ctx), str(tokens_per_class)],
        capture_output=True, text=True)
    os.remove(ckpt)
    if proc.returncode != 0:
        raise ExportError(f"graph tracing failed:\n{proc.stderr}")
    return {"vision_graph": "vision.pt", "text_graph": "text.pt"}


def _verify_round_trip(model: DualEncoder, stage: str, manifest: dict,
                       rng: np.random.Generator) -> None:
    """Reload the staged artifacts and compare against the source model."""
    vision = torch.jit.load(os.path.join(stage, manifest["vision_graph"]))
    text = torch.jit.load(os.path.join(stage, manifest["text_graph"]))
    table = read_table(os.path.join(stage, manifest["class_table"]))
    base_ctx = np.asarray(manifest["base_context_tokens"])

    n_classes = table.shape[0]
    check = rng.choice(n_classes, size=min(10, n_classes), replace=False)
    for c in check:
        if manifest["token_order"] == "context-first":
            stack = np.vstack([base_ctx, table[c]])
        else:
            stack = np.vstack([table[c], base_ctx])
        with torch.no_grad():
            exported = text(torch.from_numpy(stack).float()[None])[0].numpy()
            source = model.text(torch.from_numpy(stack).float()[None])[0].numpy()
        cosine = float(exported @ source)
        if cosine < ROUND_TRIP_COSINE:
            raise ExportError(
                f"text round-trip cosine {cosine:.6f} below "
                f"{ROUND_TRIP_COSINE} for class {c}")

    size = model.image_size
    images = rng.uniform(0, 1, size=(4, 3, size, size)).astype(np.float32)
    with torch.no_grad():
        exported = vision(torch.from_numpy(images)).numpy()
        source = model.visual(torch.from_numpy(images)).numpy()
    cosines = np.sum(exported * source, axis=1)
    if cosines.min() < ROUND_TRIP_COSINE:
        raise ExportError(
            f"vision round-trip cosine {cosines.min():.6f} below "
            f"{ROUND_TRIP_COSINE}")


def export(model: DualEncoder, model_id: str, class_names: list[str],
           templates: list[str] | None, out_dir: str,
           tokens_per_class: int = 4, context_template: str = "a photo of a",
           token_order: str = "context-first") -> dict:
    """Write all artifacts plus manifest.json into out_dir; returns the
    manifest. Verification failure aborts without partial artifacts."""
    if not class_names:
        raise ExportError("at least one class name is required")
    if len(set(class_names)) != len(class_names):
        raise ExportError("class names must be unique")
    if token_order not in ("context-first", "class-first"):
        raise ExportError(f"unknown token order {token_order!r}")
    templates = list(templates) if templates else list(DEFAULT_TEMPLATES)

    os.makedirs(out_dir, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".export-", dir=out_dir)
    try:
        names = _trace_graphs(model, stage,
                              n_ctx=len(context_template.split()),
                              tokens_per_class=tokens_per_class)
        table = class_token_table(class_names, model.d_token, tokens_per_class)
        write_table(os.path.join(stage, "classes.fcle"), table)
        names["class_table"] = "classes.fcle"

        base_ctx = embed_words(context_template, model.d_token,
                               len(context_template.split()))
        manifest = {
            "model": model_id,
            "d": model.d,
            "d_token": model.d_token,
            "tokens_per_class": tokens_per_class,
            "image_size": model.image_size,
            **names,
            "class_names": list(class_names),
            "templates": templates,
            "context_template": context_template,
            "token_order": token_order,
            "base_context_tokens": [[float(v) for v in row]
                                    for row in base_ctx],
        }
        _verify_round_trip(model, stage, manifest,
                           np.random.Generator(np.random.Philox(key=7)))

        manifest["checksums"] = {
            manifest[key]: sha256_file(os.path.join(stage, manifest[key]))
            for key in ARTIFACTS}
        with open(os.path.join(stage, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")

        for key in ARTIFACTS:
            os.replace(os.path.join(stage, manifest[key]),
                       os.path.join(out_dir, manifest[key]))
        os.replace(os.path.join(stage, "manifest.json"),
                   os.path.join(out_dir, "manifest.json"))
        return manifest
    except ExportError:
        raise
    except Exception as exc:
        raise ExportError(f"export failed: {type(exc).__name__}: {exc}") from exc
    finally:
        shutil.rmtree(stage, ignore_errors=True)
