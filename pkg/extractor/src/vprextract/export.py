"""Dense feature-map extraction from images with a CNN backbone.

Runs a torchvision classification backbone up to a named intermediate layer
and exports one (H x W x C tensor, H x W attention map) record per image in
the VPRD format.  No trained attention head is involved: the attention
stand-in is the per-location L2 energy of the feature tensor, which is
enough to drive keypoint detection downstream for plumbing validation and
qualitative runs.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision import transforms

from .vprd import write_dense_file

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"}

# classification-backbone normalization constants
_MEAN = [0.485, 0.456, 0.406]
_STD = [0.229, 0.224, 0.225]

_BACKBONES = {
    "vgg16": models.vgg16,
    "vgg19": models.vgg19,
    "resnet18": models.resnet18,
}


class ConfigError(ValueError):
    """The extractor configuration does not match the chosen backbone."""


@dataclasses.dataclass(frozen=True)
class ExtractorConfig:
    """Backbone, tap point, and preprocessing for one export run.

    `layer` names a submodule of the backbone (dotted path, for example
    "features.23" for the fourth pooling stage of vgg16).  `weights` is
    "pretrained", "random" (seeded, deterministic), or "auto" (pretrained
    when available, otherwise the seeded fallback).
    """

    backbone: str = "vgg16"
    layer: str = "features.23"
    image_size: int = 224
    batch_size: int = 8
    weights: str = "auto"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.backbone not in _BACKBONES:
            raise ConfigError(
                f"unknown backbone {self.backbone!r}, have {sorted(_BACKBONES)}"
            )
        if self.weights not in ("auto", "pretrained", "random"):
            raise ConfigError(f"weights must be auto|pretrained|random, not {self.weights!r}")
        if self.image_size < 32 or self.batch_size < 1:
            raise ConfigError("image_size must be >= 32 and batch_size >= 1")


def _load_backbone(cfg: ExtractorConfig) -> torch.nn.Module:
    factory = _BACKBONES[cfg.backbone]
    if cfg.weights in ("auto", "pretrained"):
        try:
            model = factory(weights="DEFAULT")
            return model
        except Exception as exc:
            if cfg.weights == "pretrained":
                raise ConfigError(f"pretrained weights unavailable: {exc}") from exc
            print(
                f"note: pretrained weights unavailable ({type(exc).__name__}); "
                f"falling back to seeded random initialization",
                file=sys.stderr,
            )
    torch.manual_seed(cfg.seed)
    return factory(weights=None)


def build_feature_module(cfg: ExtractorConfig) -> torch.nn.Module:
    """The backbone truncated right after the configured layer."""
    model = _load_backbone(cfg)
    names = [name for name, _ in model.named_modules() if name]
    if cfg.layer not in names:
        raise ConfigError(
            f"layer {cfg.layer!r} does not exist in {cfg.backbone!r}"
        )
    tap = dict(model.named_modules())[cfg.layer]
    module = _Truncated(model, tap)
    module.eval()
    return module


class _Truncated(torch.nn.Module):
    """Runs the wrapped model but stops at the tap layer via a hook."""

    def __init__(self, model: torch.nn.Module, tap: torch.nn.Module):
        super().__init__()
        self.model = model
        self._tap = tap

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        captured: list[torch.Tensor] = []

        def hook(_module, _inputs, output):
            captured.append(output)
            raise _StopForward

        handle = self._tap.register_forward_hook(hook)
        try:
            self.model(x)
        except _StopForward:
            pass
        finally:
            handle.remove()
        return captured[0]


class _StopForward(Exception):
    pass


def _preprocess(cfg: ExtractorConfig) -> transforms.Compose:
    return transforms.Compose(
        [
            transforms.Resize((cfg.image_size, cfg.image_size)),
            transforms.ToTensor(),
            transforms.Normalize(mean=_MEAN, std=_STD),
        ]
    )


def list_images(image_dir: str | Path) -> list[Path]:
    paths = [
        p
        for p in sorted(Path(image_dir).iterdir())
        if p.suffix.lower() in IMAGE_SUFFIXES
    ]
    return paths


def iter_dense_records(
    image_dir: str | Path, cfg: ExtractorConfig
) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
    """Yield (image_id, tensor HxWxC, attention HxW) per readable image."""
    module = build_feature_module(cfg)
    prep = _preprocess(cfg)
    paths = list_images(image_dir)
    batch: list[tuple[str, torch.Tensor]] = []

    def flush():
        if not batch:
            return
        stacked = torch.stack([t for _, t in batch])
        with torch.no_grad():
            feats = module(stacked)  # (B, C, H, W)
        arrays = feats.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)
        for (image_id, _), tensor in zip(batch, arrays):
            attention = np.linalg.norm(tensor, axis=2).astype(np.float32)
            yield image_id, tensor, attention
        batch.clear()

    for path in paths:
        try:
            with Image.open(path) as img:
                tensor = prep(img.convert("RGB"))
        except Exception as exc:
            print(f"skipping unreadable image {path.name}: {exc}", file=sys.stderr)
            continue
        batch.append((path.name, tensor))
        if len(batch) >= cfg.batch_size:
            yield from flush()
    yield from flush()


def export_dense(image_dir: str | Path, cfg: ExtractorConfig, out_path: str | Path) -> int:
    """Export all readable images under `image_dir` to a VPRD file.

    Returns the number of exported records.  Output is deterministic for
    fixed model weights and inputs.
    """
    count = write_dense_file(out_path, iter_dense_records(image_dir, cfg))
    return count
