"""The classifier under explanation.

The grey-box contract is deliberately small: the model returns logits, every
named stage can be read out, and the gradient of any class logit with respect
to a stage activation can be taken. Nothing else about the architecture is
assumed by the rest of the package.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from safecf.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassProbabilities:
    probs: np.ndarray
    predicted: int


class GlobalAvgPool(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(2, 3))


class GreyBoxClassifier(nn.Module):
    """A classifier built from an ordered list of named stages.

    The last stage must map to ``num_classes`` logits. ``input_shape`` is
    ``(H, W, C)``; tensors passed to the model are batched ``(N, C, H, W)``.
    """

    def __init__(
        self,
        stages: Sequence[tuple[str, nn.Module]],
        num_classes: int,
        input_shape: tuple[int, int, int],
        capture_layer: str | None = None,
        arch: dict | None = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
        self.stages = nn.ModuleDict(OrderedDict(stages))
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        names = list(self.stages.keys())
        self.capture_layer = capture_layer or names[-1]
        if self.capture_layer not in self.stages:
            raise ConfigError(f"capture_layer {self.capture_layer!r} not in {names}")
        # Architecture description, kept so checkpoints can be rebuilt.
        self.arch = arch
        self.train_seed: int | None = None

    @property
    def layer_names(self) -> list[str]:
        return list(self.stages.keys())

    def check_input(self, x: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(
                f"expected images of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages.values():
            x = stage(x)
        return x

    def forward_with(self, x: torch.Tensor, layer: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(logits, activation of layer)`` from one forward pass."""
        if layer not in self.stages:
            raise ConfigError(f"unknown layer {layer!r}; valid layers: {self.layer_names}")
        act = None
        for name, stage in self.stages.items():
            x = stage(x)
            if name == layer:
                act = x
        return x, act

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Input of the final stage, used as an embedding for realism metrics."""
        names = self.layer_names
        for name in names[:-1]:
            x = self.stages[name](x)
        return x.flatten(1)


def build_toy_greybox(
    num_classes: int = 2,
    input_shape: tuple[int, int, int] = (64, 64, 3),
    channels: Sequence[int] = (16, 32, 64, 64),
    strides: Sequence[int] = (2, 2, 1, 1),
    seed: int | None = None,
) -> GreyBoxClassifier:
    """Four conv stages, global average pooling and a linear head.

    The default strides leave the last stage at 1/4 of the input resolution,
    fine enough for Grad-CAM to resolve small objects.
    """
    if len(channels) != len(strides):
        raise ConfigError("channels and strides must have the same length")
    if seed is not None:
        torch.manual_seed(seed)
    stages = []
    in_ch = input_shape[2]
    for i, (ch, stride) in enumerate(zip(channels, strides), start=1):
        stages.append(
            (f"stage{i}", nn.Sequential(nn.Conv2d(in_ch, ch, 3, stride, 1), nn.ReLU()))
        )
        in_ch = ch
    stages.append(("pool", GlobalAvgPool()))
    stages.append(("head", nn.Linear(in_ch, num_classes)))
    arch = {
        "kind": "toy",
        "channels": list(channels),
        "strides": list(strides),
    }
    return GreyBoxClassifier(
        stages, num_classes, input_shape, capture_layer=f"stage{len(channels)}", arch=arch
    )


def predict(model: GreyBoxClassifier, batch: torch.Tensor) -> list[ClassProbabilities]:
    model.check_input(batch)
    with torch.no_grad():
        probs = F.softmax(model(batch), dim=1).cpu().numpy()
    return [ClassProbabilities(p, int(np.argmax(p))) for p in probs]


def predict_labels(model: GreyBoxClassifier, batch: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax labels for a (possibly large) batch, computed in chunks."""
    model.check_input(batch)
    out = []
    with torch.no_grad():
        for i in range(0, batch.shape[0], batch_size):
            out.append(model(batch[i : i + batch_size]).argmax(dim=1))
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def capture(
    model: GreyBoxClassifier,
    x: torch.Tensor,
    layer: str,
    target_class: int | torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Activations of ``layer`` and the gradient of the target logit w.r.t. them.

    ``target_class`` is either one label for the whole batch or one per sample.
    Samples are independent, so the gradient of the summed target logits gives
    each sample its own gradient. Parameter ``.grad`` buffers are not touched.
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    model.check_input(x)
    if layer not in model.stages:
        raise ConfigError(f"unknown layer {layer!r}; valid layers: {model.layer_names}")
    n = x.shape[0]
    target = torch.as_tensor(target_class, dtype=torch.long, device=x.device)
    if target.dim() == 0:
        target = target.expand(n)
    if target.shape != (n,):
        raise ShapeError(f"expected {n} target labels, got shape {tuple(target.shape)}")
    if bool(((target < 0) | (target >= model.num_classes)).any()):
        raise ConfigError(f"target class outside [0, {model.num_classes})")

    with torch.enable_grad():
        # input requires grad so frozen models still build a graph through act
        logits, act = model.forward_with(x.detach().requires_grad_(True), layer)
        score = logits.gather(1, target[:, None]).sum()
        grads = None
        if score.requires_grad and act.requires_grad:
            (grads,) = torch.autograd.grad(score, act, allow_unused=True)
        if grads is None:
            grads = torch.zeros_like(act)
    return act.detach(), grads.detach()


@dataclass
class GreyBoxTrainConfig:
    epochs: int = 6
    learning_rate: float = 2e-3
    batch_size: int = 32
    seed: int = 0
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)


@dataclass
class GreyBoxHistory:
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)


def accuracy(model: GreyBoxClassifier, images: torch.Tensor, labels: torch.Tensor) -> float:
    pred = predict_labels(model, images)
    return float((pred == labels).float().mean())


def train_greybox(
    train_images: torch.Tensor,
    train_labels: torch.Tensor,
    config: GreyBoxTrainConfig,
    val_images: torch.Tensor | None = None,
    val_labels: torch.Tensor | None = None,
    num_classes: int | None = None,
    negatives: torch.Tensor | None = None,
) -> tuple[GreyBoxClassifier, GreyBoxHistory]:
    """Train a toy grey-box from scratch.

    Without ``negatives`` this is plain softmax cross-entropy. With
    ``negatives`` (images containing no class object) every logit is trained
    as a one-vs-rest sigmoid, and negatives are labelled "none of the
    classes". That stops a two-class model from explaining one class purely
    by the absence of the other, which would leave its Grad-CAM maps with no
    positive evidence. Prediction is always the softmax over the logits.
    """
    train_labels = train_labels.long()
    classes = torch.unique(train_labels)
    if classes.numel() < 2:
        raise ConfigError("training set must contain at least 2 classes")
    num_classes = num_classes or int(train_labels.max()) + 1
    _, c, h, w = train_images.shape
    model = build_toy_greybox(
        num_classes, (h, w, c), config.channels, config.strides, seed=config.seed
    )
    model.train_seed = config.seed
    history = GreyBoxHistory()
    if config.epochs <= 0:
        return model, history

    one_vs_rest = negatives is not None and negatives.shape[0] > 0
    images, labels = train_images, train_labels
    if one_vs_rest:
        images = torch.cat([train_images, negatives])
        labels = torch.cat([train_labels, torch.full((negatives.shape[0],), -1, dtype=torch.long)])

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = images.shape[0]
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        total, correct, loss_sum = 0, 0, 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            xb, yb = images[idx], labels[idx]
            logits = model(xb)
            if one_vs_rest:
                targets = F.one_hot(yb.clamp_min(0), num_classes).float() * (yb >= 0)[:, None]
                loss = F.binary_cross_entropy_with_logits(logits, targets)
            else:
                loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite grey-box loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            labelled = yb >= 0
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb)[labelled].sum())
            total += int(labelled.sum())
        model.eval()
        history.train_loss.append(loss_sum / n)
        history.train_accuracy.append(correct / total)
        if val_images is not None and val_labels is not None:
            history.val_accuracy.append(accuracy(model, val_images, val_labels.long()))
        logger.info(
            "greybox epoch %d: loss %.4f train acc %.4f val acc %s",
            epoch + 1,
            history.train_loss[-1],
            history.train_accuracy[-1],
            history.val_accuracy[-1] if history.val_accuracy else "n/a",
        )
    model.eval()
    return model, history


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_greybox(model: GreyBoxClassifier, path: str | Path) -> Path:
    """Write ``<path>.pt`` weights and a ``<path>.json`` descriptor."""
    if model.arch is None:
        raise ConfigError("only models built by build_toy_greybox can be checkpointed")
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path.with_suffix(".pt"))
    descriptor = {
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "layers": model.layer_names,
        "capture_layer": model.capture_layer,
        "seed": model.train_seed,
        "arch": model.arch,
    }
    path.with_suffix(".json").write_text(json.dumps(descriptor, indent=2))
    return path.with_suffix(".pt")


def load_greybox(path: str | Path) -> GreyBoxClassifier:
    path = Path(path).with_suffix("")
    for p in (path.with_suffix(".pt"), path.with_suffix(".json")):
        if not p.exists():
            raise FileNotFoundError(f"missing grey-box checkpoint file: {p}")
    desc = json.loads(path.with_suffix(".json").read_text())
    arch = desc["arch"]
    model = build_toy_greybox(
        desc["num_classes"], tuple(desc["input_shape"]), arch["channels"], arch["strides"]
    )
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    model.capture_layer = desc["capture_layer"]
    model.train_seed = desc.get("seed")
    return freeze(model)
