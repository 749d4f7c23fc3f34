"""Attention-guided generator and two-headed discriminator.

The generator sees the image, its saliency map and a spatially broadcast
one-hot target label. It predicts ``m`` attention masks (softmax over the mask
axis) and ``m - 1`` content maps. The last mask is the background: it copies
the input through unchanged. Image and saliency are composed together as a
``C + 1`` channel stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from safecf.errors import ConfigError, NumericalError, ShapeError


@dataclass
class GeneratorOutput:
    image: torch.Tensor  # (N, C, H, W)
    saliency: torch.Tensor  # (N, H, W)
    attention: torch.Tensor  # (N, m, H, W)
    content: torch.Tensor  # (N, m - 1, C + 1, H, W)


def compose(
    stack: torch.Tensor, attention: torch.Tensor, content: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend content maps and the input stack with the attention masks.

    ``stack`` is ``(N, C + 1, H, W)`` (image channels then saliency). Returns
    the composed image ``(N, C, H, W)`` and saliency ``(N, H, W)``.
    """
    n, k, h, w = stack.shape
    m = attention.shape[1]
    if attention.shape != (n, m, h, w) or m < 2:
        raise ShapeError(f"attention shape {tuple(attention.shape)} does not fit stack {tuple(stack.shape)}")
    if content.shape != (n, m - 1, k, h, w):
        raise ShapeError(f"expected content shape {(n, m - 1, k, h, w)}, got {tuple(content.shape)}")
    out = (content * attention[:, : m - 1, None]).sum(dim=1) + stack * attention[:, m - 1 : m]
    return out[:, : k - 1], out[:, k - 1]


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(
        self,
        image_channels: int = 3,
        num_classes: int = 2,
        num_masks: int = 2,
        base_channels: int = 16,
        n_down: int = 2,
        n_res: int = 4,
    ):
        super().__init__()
        if num_masks < 2:
            raise ConfigError("num_masks must be >= 2 (foreground + background)")
        self.config = dict(
            image_channels=image_channels,
            num_classes=num_classes,
            num_masks=num_masks,
            base_channels=base_channels,
            n_down=n_down,
            n_res=n_res,
        )
        self.image_channels = image_channels
        self.num_classes = num_classes
        self.num_masks = num_masks
        self.n_down = n_down

        in_ch = image_channels + 1 + num_classes
        layers: list[nn.Module] = [
            nn.Conv2d(in_ch, base_channels, 7, 1, 3, bias=False),
            nn.InstanceNorm2d(base_channels, affine=True),
            nn.ReLU(),
        ]
        ch = base_channels
        for _ in range(n_down):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.ReLU(),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(n_res)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(),
            ]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.attention_head = nn.Conv2d(ch, num_masks, 7, 1, 3)
        self.content_head = nn.Conv2d(ch, (num_masks - 1) * (image_channels + 1), 7, 1, 3)

    def masks(self, x: torch.Tensor, s: torch.Tensor, y_target: torch.Tensor):
        """Attention masks and content maps for a batch."""
        n, _, h, w = x.shape
        onehot = F.one_hot(y_target.long(), self.num_classes).to(x.dtype)
        label_planes = onehot[:, :, None, None].expand(n, self.num_classes, h, w)
        feat = self.body(torch.cat([x, s[:, None], label_planes], dim=1))
        attention = torch.softmax(self.attention_head(feat), dim=1)
        content = torch.sigmoid(self.content_head(feat)).view(
            n, self.num_masks - 1, self.image_channels + 1, h, w
        )
        return attention, content

    def forward(self, x: torch.Tensor, s: torch.Tensor, y_target: torch.Tensor) -> GeneratorOutput:
        attention, content = self.masks(x, s, y_target)
        image, saliency = compose(torch.cat([x, s[:, None]], dim=1), attention, content)
        return GeneratorOutput(image, saliency, attention, content)

    @torch.no_grad()
    def saturate_background(self, strength: float = 1e3) -> None:
        """Force the background mask to 1 everywhere, making G the identity."""
        self.attention_head.weight.zero_()
        self.attention_head.bias.zero_()
        self.attention_head.bias[-1] = strength


def generate(
    G: Generator, x: torch.Tensor, s: torch.Tensor, y_target: torch.Tensor | int
) -> GeneratorOutput:
    """Checked entry point around ``G(x, s, y_target)``."""
    if x.dim() != 4 or x.shape[1] != G.image_channels:
        raise ShapeError(f"expected (N, {G.image_channels}, H, W) images, got {tuple(x.shape)}")
    n, _, h, w = x.shape
    if s.shape != (n, h, w):
        raise ShapeError(f"expected saliency shape {(n, h, w)}, got {tuple(s.shape)}")
    factor = 2**G.n_down
    if h % factor or w % factor:
        raise ShapeError(f"image size {(h, w)} must be divisible by {factor}")
    y_target = torch.as_tensor(y_target, dtype=torch.long)
    if y_target.dim() == 0:
        y_target = y_target.expand(n)
    if bool(((y_target < 0) | (y_target >= G.num_classes)).any()):
        raise ConfigError(f"target label outside [0, {G.num_classes})")
    return G(x, s, y_target)


class Discriminator(nn.Module):
    """Shared strided conv trunk with a patch critic head and a classifier head.

    No normalization layers: the gradient penalty is defined per sample.
    """

    def __init__(
        self,
        image_channels: int = 3,
        num_classes: int = 2,
        image_size: tuple[int, int] = (64, 64),
        base_channels: int = 16,
        n_layers: int = 4,
    ):
        super().__init__()
        h, w = image_size
        factor = 2**n_layers
        if h % factor or w % factor:
            raise ConfigError(f"image size {image_size} must be divisible by {factor}")
        self.config = dict(
            image_channels=image_channels,
            num_classes=num_classes,
            image_size=list(image_size),
            base_channels=base_channels,
            n_layers=n_layers,
        )
        self.image_channels = image_channels
        self.image_size = (h, w)
        self.num_classes = num_classes
        layers: list[nn.Module] = []
        in_ch, ch = image_channels, base_channels
        for _ in range(n_layers):
            layers += [nn.Conv2d(in_ch, ch, 4, 2, 1), nn.LeakyReLU(0.01)]
            in_ch, ch = ch, ch * 2
        self.trunk = nn.Sequential(*layers)
        self.src_head = nn.Conv2d(in_ch, 1, 3, 1, 1)
        self.cls_head = nn.Conv2d(in_ch, num_classes, (h // factor, w // factor), bias=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(src scores (N,), class logits (N, d))``."""
        feat = self.trunk(x)
        return self.src_head(feat).mean(dim=(1, 2, 3)), self.cls_head(feat).flatten(1)

    def src(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    def cls_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(x)[1], dim=1)


def discriminate(D: Discriminator, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Checked forward pass returning ``(src (N,), class probabilities (N, d))``."""
    c = D.image_channels
    h, w = D.image_size
    if image.dim() != 4 or tuple(image.shape[1:]) != (c, h, w):
        raise ShapeError(f"expected images of shape (N, {c}, {h}, {w}), got {tuple(image.shape)}")
    src, logits = D(image)
    if not (torch.isfinite(src).all() and torch.isfinite(logits).all()):
        raise NumericalError("discriminator produced non-finite activations")
    return src, torch.softmax(logits, dim=1)


def save_network(net: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.pt`` weights plus a ``<path>.json`` descriptor of the constructor config."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), path.with_suffix(".pt"))
    desc = {"type": type(net).__name__, "config": net.config, **(extra or {})}
    path.with_suffix(".json").write_text(json.dumps(desc, indent=2))
    return path.with_suffix(".pt")


def load_network(path: str | Path) -> nn.Module:
    path = Path(path).with_suffix("")
    for p in (path.with_suffix(".pt"), path.with_suffix(".json")):
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint file: {p}")
    desc = json.loads(path.with_suffix(".json").read_text())
    cls = {"Generator": Generator, "Discriminator": Discriminator}[desc["type"]]
    config = dict(desc["config"])
    if "image_size" in config:
        config["image_size"] = tuple(config["image_size"])
    net = cls(**config)
    net.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    net.eval()
    return net
