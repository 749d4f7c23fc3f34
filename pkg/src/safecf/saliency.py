"""Grad-CAM saliency maps used to guide and constrain the generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from safecf.errors import ConfigError, InvalidTargetError, NumericalError
from safecf.greybox import GreyBoxClassifier, capture

EPS = 1e-8
MODES = ("current", "target", "max")


@dataclass
class SaliencyMap:
    values: np.ndarray
    source_class: int
    source_layer: str


def normalize_maps(maps: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Scale each ``(H, W)`` map in a batch so its max is 1; near-empty maps become 0."""
    peak = maps.flatten(1).amax(dim=1).view(-1, 1, 1)
    safe = torch.where(peak > eps, peak, torch.ones_like(peak))
    return torch.where(peak > eps, maps / safe, torch.zeros_like(maps)).clamp_(0.0, 1.0)


def cam_from_capture(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """Rectified, gradient-weighted channel sum; shape ``(N, h, w)``, not normalized."""
    weights = gradients.mean(dim=(2, 3), keepdim=True)
    return F.relu((weights * activations).sum(dim=1))


def grad_cam(
    model: GreyBoxClassifier,
    x: torch.Tensor,
    target_class: int | torch.Tensor,
    layer: str | None = None,
) -> torch.Tensor:
    """Batched Grad-CAM. Returns ``(N, H, W)`` maps in [0, 1]."""
    layer = layer or model.capture_layer
    if x.dim() == 3:
        x = x.unsqueeze(0)
    acts, grads = capture(model, x, layer, target_class)
    if acts.dim() != 4:
        raise ConfigError(f"layer {layer!r} is not spatial (activation shape {tuple(acts.shape)})")
    if not torch.isfinite(grads).all():
        raise NumericalError(f"non-finite gradients at layer {layer!r}")
    cam = cam_from_capture(acts, grads)
    h, w = x.shape[2], x.shape[3]
    if cam.shape[1:] != (h, w):
        cam = F.interpolate(cam[:, None], size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return normalize_maps(cam)


def saliency_map(model: GreyBoxClassifier, image: torch.Tensor, target_class: int) -> SaliencyMap:
    """Single-image convenience wrapper around :func:`grad_cam`."""
    values = grad_cam(model, image, int(target_class))[0].cpu().numpy()
    return SaliencyMap(values, int(target_class), model.capture_layer)


def saliency_for_training(
    model: GreyBoxClassifier,
    x: torch.Tensor,
    y: torch.Tensor,
    y_target: torch.Tensor,
    mode: str = "current",
) -> torch.Tensor:
    """Saliency fed to the generator.

    ``current`` explains the model's own label, ``target`` the requested label
    and ``max`` takes the elementwise maximum of both, renormalized.
    """
    if mode not in MODES:
        raise ConfigError(f"saliency mode must be one of {MODES}, got {mode!r}")
    y = torch.as_tensor(y, dtype=torch.long)
    y_target = torch.as_tensor(y_target, dtype=torch.long)
    if bool((y == y_target).any()):
        raise InvalidTargetError("target label must differ from the current label")
    if mode == "current":
        return grad_cam(model, x, y)
    if mode == "target":
        return grad_cam(model, x, y_target)
    return normalize_maps(torch.maximum(grad_cam(model, x, y), grad_cam(model, x, y_target)))


def overlay(image: np.ndarray, saliency: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend a heatmap of ``saliency`` (H, W) over ``image`` (H, W, 3); floats in [0, 1]."""
    from matplotlib import colormaps

    heat = colormaps[cmap](np.clip(saliency, 0.0, 1.0))[..., :3]
    return np.clip((1.0 - alpha) * image + alpha * heat, 0.0, 1.0)


def save_overlay(image: np.ndarray, saliency: np.ndarray, path: str | Path, alpha: float = 0.5) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blended = overlay(image, saliency, alpha)
    Image.fromarray(np.round(blended * 255).astype(np.uint8)).save(path)
    return path
