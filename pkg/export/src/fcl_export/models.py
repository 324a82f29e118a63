"""Reference dual-encoder architecture and checkpoint helpers.

The text tower takes embedding-level token matrices, never token ids: the
engine optimizes context-token embeddings directly, so the exported graph
must accept them as inputs. Checkpoints are plain torch state dicts plus the
hyperparameters needed to rebuild the module; `make_checkpoint` builds a
seeded random instance, which stands in for a converted pretrained model in
environments without one.
"""

from __future__ import annotations

import torch


class VisionTower(torch.nn.Module):
    def __init__(self, d: int, image_size: int, width: int = 32):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image size must be divisible by the patch stride")
        self.stem = torch.nn.Conv2d(3, width, kernel_size=8, stride=8)
        self.pool = torch.nn.AdaptiveAvgPool2d(2)
        self.proj = torch.nn.Linear(width * 4, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.gelu(self.stem(x))
        h = torch.flatten(self.pool(h), 1)
        out = self.proj(h)
        return out / out.norm(dim=1, keepdim=True)


class TextTower(torch.nn.Module):
    def __init__(self, d: int, d_token: int, hidden: int = 64):
        super().__init__()
        self.embed = torch.nn.Linear(d_token, hidden)
        self.proj = torch.nn.Linear(hidden, d)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.gelu(self.embed(tokens))
        pooled = h.mean(dim=1)
        out = self.proj(pooled)
        return out / out.norm(dim=1, keepdim=True)


class DualEncoder(torch.nn.Module):
    def __init__(self, d: int, d_token: int, image_size: int):
        super().__init__()
        self.d = d
        self.d_token = d_token
        self.image_size = image_size
        self.visual = VisionTower(d, image_size)
        self.text = TextTower(d, d_token)

    def hyperparams(self) -> dict:
        return {"d": self.d, "d_token": self.d_token,
                "image_size": self.image_size}


def make_checkpoint(path: str, d: int = 64, d_token: int = 16,
                    image_size: int = 224, seed: int = 0) -> DualEncoder:
    torch.manual_seed(seed)
    model = DualEncoder(d, d_token, image_size).eval()
    torch.save({"hyperparams": model.hyperparams(),
                "state_dict": model.state_dict()}, path)
    return model


def load_checkpoint(model_id: str) -> DualEncoder:
    """Resolve a model identifier to an instantiated dual encoder.

    "toy:<seed>:<d>:<d_token>:<image_size>" builds a seeded random instance;
    anything else is treated as a checkpoint path written by make_checkpoint
    (or a converter producing the same layout).
    """
    if model_id.startswith("toy:"):
        parts = model_id.split(":")
        if len(parts) != 5:
            raise ValueError(
                "toy model ids look like toy:<seed>:<d>:<d_token>:<image_size>")
        seed, d, d_token, size = (int(p) for p in parts[1:])
        torch.manual_seed(seed)
        return DualEncoder(d, d_token, size).eval()
    payload = torch.load(model_id, map_location="cpu", weights_only=True)
    model = DualEncoder(**payload["hyperparams"])
    model.load_state_dict(payload["state_dict"])
    return model.eval()
