"""Subprocess entry point that traces and saves the two graphs.

TorchScript mangles type names with a process-global counter, so tracing in
a long-lived process yields different bytes depending on what was traced
before. Running each export's tracing in a fresh interpreter pins the
counter to zero and makes re-exports bit-identical.
"""

from __future__ import annotations

import sys

import torch

from .exporter import _canonicalize_archive
from .models import DualEncoder


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    checkpoint, stage, n_ctx, tokens_per_class = \
        argv[0], argv[1], int(argv[2]), int(argv[3])
    payload = torch.load(checkpoint, map_location="cpu", weights_only=True)
    model = DualEncoder(**payload["hyperparams"])
    model.load_state_dict(payload["state_dict"])
    model.eval()

    size = model.image_size
    vision_example = torch.zeros(2, 3, size, size)
    text_example = torch.zeros(2, n_ctx + tokens_per_class, model.d_token)
    with torch.no_grad():
        torch.jit.trace(model.visual, vision_example).save(f"{stage}/vision.pt")
        torch.jit.trace(model.text, text_example).save(f"{stage}/text.pt")
    _canonicalize_archive(f"{stage}/vision.pt")
    _canonicalize_archive(f"{stage}/text.pt")
    return 0


if __name__ == "__main__":
    sys.exit(main())
