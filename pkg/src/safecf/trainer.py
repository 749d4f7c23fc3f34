"""Alternating critic / generator training.

Each iteration updates the discriminator once; every ``n_critic``-th iteration
the generator is updated on the same batch. The grey-box classifier is frozen
for the whole run and only supplies labels and saliency maps.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch

from safecf.data import ImageSet, grid_row, load_batches, save_grid
from safecf.errors import ConfigError, NumericalError
from safecf.greybox import GreyBoxClassifier, freeze
from safecf.losses import (
    LossBundle,
    LossWeights,
    classification_loss,
    fuse_loss,
    gradient_penalty,
    interpolate,
    reconstruction_loss,
    total_d,
    total_g,
)
from safecf.models import Discriminator, Generator, save_network
from safecf.saliency import MODES, saliency_for_training

logger = logging.getLogger(__name__)

CLASS_LABEL_SOURCES = ("target", "greybox")


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    n_critic: int = 5
    epochs: int = 10
    batch_size: int = 16
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    saliency_mode: str = "current"
    checkpoint_interval: int = 1000
    sample_interval: int = 0
    betas: tuple[float, float] = (0.5, 0.999)
    # False reproduces the generator objective without the cycle term
    include_rec: bool = True
    # "target": D_cls(x') scored against y'; "greybox": against M(x')
    generator_class_label: str = "target"
    num_masks: int = 2
    g_base_channels: int = 16
    g_n_down: int = 2
    g_n_res: int = 4
    d_base_channels: int = 16
    d_n_layers: int = 4

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.image_size = tuple(self.image_size)
        self.betas = tuple(self.betas)
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.saliency_mode not in MODES:
            raise ConfigError(f"saliency_mode must be one of {MODES}")
        if self.generator_class_label not in CLASS_LABEL_SOURCES:
            raise ConfigError(f"generator_class_label must be one of {CLASS_LABEL_SOURCES}")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        if isinstance(values.get("loss_weights"), dict):
            lw_known = {f.name for f in fields(LossWeights)}
            bad = sorted(set(values["loss_weights"]) - lw_known)
            if bad:
                raise ConfigError(f"unknown loss_weights keys: {bad}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchContext:
    """Per-batch quantities shared by the critic and generator steps."""

    x: torch.Tensor
    y: torch.Tensor
    y_target: torch.Tensor
    s: torch.Tensor


@dataclass
class StepRecord:
    step: int
    epoch: int
    losses: LossBundle


@dataclass
class TrainingState:
    generator: Generator
    discriminator: Discriminator
    greybox: GreyBoxClassifier
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainingConfig
    rng: torch.Generator
    n: int = 0
    step: int = 0
    epoch: int = 0
    d_updates: int = 0
    g_updates: int = 0
    last_gp: float = 0.0
    history: list[StepRecord] = field(default_factory=list)
    context: BatchContext | None = None


def build_networks(config: TrainingConfig, image_channels: int, num_classes: int) -> tuple[Generator, Discriminator]:
    G = Generator(
        image_channels,
        num_classes,
        config.num_masks,
        config.g_base_channels,
        config.g_n_down,
        config.g_n_res,
    )
    D = Discriminator(
        image_channels, num_classes, config.image_size, config.d_base_channels, config.d_n_layers
    )
    return G, D


def init_state(config: TrainingConfig, greybox: GreyBoxClassifier) -> TrainingState:
    torch.manual_seed(config.seed)
    h, w, c = greybox.input_shape
    if (h, w) != config.image_size:
        raise ConfigError(f"grey-box input size {(h, w)} differs from image_size {config.image_size}")
    G, D = build_networks(config, c, greybox.num_classes)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.learning_rate, betas=config.betas)
    rng = torch.Generator().manual_seed(config.seed)
    return TrainingState(G, D, freeze(greybox), opt_g, opt_d, config, rng)


def sample_targets(y: torch.Tensor, num_classes: int, rng: torch.Generator) -> torch.Tensor:
    """Complement label for two classes, otherwise a uniformly drawn different class."""
    if num_classes == 2:
        return 1 - y
    offset = torch.randint(1, num_classes, y.shape, generator=rng)
    return (y + offset) % num_classes


def prepare_batch(state: TrainingState, images: torch.Tensor) -> BatchContext:
    M = state.greybox
    with torch.no_grad():
        y = M(images).argmax(dim=1)
    y_target = sample_targets(y, M.num_classes, state.rng)
    s = saliency_for_training(M, images, y, y_target, state.config.saliency_mode)
    return BatchContext(images, y, y_target, s)


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def discriminator_objective(
    state: TrainingState, ctx: BatchContext, alpha: torch.Tensor
) -> tuple[torch.Tensor, LossBundle]:
    G, D, w = state.generator, state.discriminator, state.config.loss_weights
    with torch.no_grad():
        x_fake = G(ctx.x, ctx.s, ctx.y_target).image
    # one pass over the real batch feeds both heads
    src_real, logits_real = D(ctx.x)
    loss_real, loss_fake = src_real.mean(), D.src(x_fake).mean()
    cls_real = classification_loss(torch.softmax(logits_real, dim=1), ctx.y)
    gp = gradient_penalty(D.src, interpolate(ctx.x, x_fake, alpha).x_hat)
    total = total_d(loss_real, loss_fake, cls_real, gp, w)
    bundle = LossBundle(
        loss_real=_scalar(loss_real),
        loss_fake=_scalar(loss_fake),
        adv_d=_scalar(loss_real - loss_fake),
        gp=_scalar(gp),
        cls_real=_scalar(cls_real),
        total_d=_scalar(total),
    )
    return total, bundle


def discriminator_step(
    state: TrainingState, images: torch.Tensor, alpha: torch.Tensor | None = None
) -> LossBundle:
    """One Adam update of the discriminator; caches the batch context for the generator."""
    ctx = prepare_batch(state, images)
    state.context = ctx
    if alpha is None:
        alpha = torch.rand(images.shape[0], generator=state.rng, dtype=images.dtype)
    total, bundle = discriminator_objective(state, ctx, alpha)
    state.opt_d.zero_grad(set_to_none=True)
    total.backward()
    state.opt_d.step()
    state.last_gp = bundle.gp
    state.n += 1
    state.d_updates += 1
    return bundle


def generator_objective(state: TrainingState, ctx: BatchContext) -> tuple[torch.Tensor, LossBundle]:
    G, D, M = state.generator, state.discriminator, state.greybox
    cfg = state.config
    out = G(ctx.x, ctx.s, ctx.y_target)
    src_fake, logits_fake = D(out.image)
    adv_g = src_fake.mean()
    if cfg.generator_class_label == "target":
        label = ctx.y_target
    else:
        with torch.no_grad():
            label = M(out.image).argmax(dim=1)
    cls_fake = classification_loss(torch.softmax(logits_fake, dim=1), label)
    back = G(out.image, out.saliency, ctx.y)
    rec = reconstruction_loss(ctx.x, ctx.s, back.image, back.saliency)
    fuse = fuse_loss(ctx.x, out.image, ctx.s)
    # penalty value carried over from the critic step; constant w.r.t. G
    gp = state.last_gp
    total = total_g(adv_g, cls_fake, gp, rec, fuse, cfg.loss_weights, include_rec=cfg.include_rec)
    bundle = LossBundle(
        gp=_scalar(gp),
        adv_g=_scalar(adv_g),
        cls_fake=_scalar(cls_fake),
        rec=_scalar(rec),
        fuse=_scalar(fuse),
        total_g=_scalar(total),
    )
    return total, bundle


def generator_step(state: TrainingState) -> LossBundle:
    """One Adam update of the generator on the batch of the last critic step."""
    if state.n < state.config.n_critic or state.context is None:
        raise ConfigError(
            f"generator step requested after {state.n} critic steps (needs {state.config.n_critic})"
        )
    D = state.discriminator
    D.requires_grad_(False)
    try:
        total, bundle = generator_objective(state, state.context)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
    finally:
        D.requires_grad_(True)
    state.n = 0
    state.g_updates += 1
    return bundle


def train_iteration(state: TrainingState, images: torch.Tensor) -> LossBundle:
    bundle = discriminator_step(state, images)
    if state.n >= state.config.n_critic:
        bundle = bundle.merge(generator_step(state))
    state.history.append(StepRecord(state.step, state.epoch, bundle))
    state.step += 1
    return bundle


def epoch_means(history: list[StepRecord], name: str) -> list[float]:
    """Mean of one loss field per epoch, skipping steps where it was not computed."""
    per_epoch: dict[int, list[float]] = {}
    for rec in history:
        value = getattr(rec.losses, name)
        if value is not None:
            per_epoch.setdefault(rec.epoch, []).append(value)
    return [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]


class TrainResult(NamedTuple):
    generator: Generator
    discriminator: Discriminator
    history: list[StepRecord]
    state: TrainingState


def save_checkpoint(state: TrainingState, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    shape = list(state.greybox.input_shape)
    save_network(state.generator, directory / "generator", {"input_shape": shape})
    save_network(state.discriminator, directory / "discriminator", {"input_shape": shape})
    meta = {"step": state.step, "epoch": state.epoch, "config": state.config.to_dict()}
    (directory / "state.json").write_text(json.dumps(meta, indent=2))
    return directory


def _save_samples(state: TrainingState, ctx: BatchContext, path: Path, rows: int = 4) -> None:
    with torch.no_grad():
        fake = state.generator(ctx.x[:rows], ctx.s[:rows], ctx.y_target[:rows]).image
    q = ctx.x[:rows].permute(0, 2, 3, 1).numpy()
    f = fake.permute(0, 2, 3, 1).numpy()
    s = ctx.s[:rows].numpy()
    save_grid([grid_row(q[i], s[i], f[i]) for i in range(len(q))], path)


def train(
    config: TrainingConfig,
    data: ImageSet,
    greybox: GreyBoxClassifier,
    output_dir: str | Path | None = None,
    on_step: Callable[[TrainingState, LossBundle], None] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Run ``config.epochs`` passes over ``data``.

    With ``output_dir`` set, writes ``losses.csv``, periodic checkpoints under
    ``checkpoints/`` and the final networks under ``final/``. A non-finite loss
    saves the current (last finite) weights to ``last/`` and re-raises.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    state = init_state(config, greybox)
    out = Path(output_dir) if output_dir else None
    writer = log_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        log_file = open(out / "losses.csv", "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "epoch", *LossBundle.field_names()])

    start = time.time()
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            for batch in load_batches(data, config.batch_size, seed=config.seed + epoch, shuffle=True):
                if max_steps is not None and state.step >= max_steps:
                    break
                try:
                    bundle = train_iteration(state, batch.images)
                except NumericalError:
                    if out:
                        save_checkpoint(state, out / "last")
                    raise
                if writer:
                    row = bundle.as_dict()
                    writer.writerow([state.step - 1, epoch, *("" if row[k] is None else row[k] for k in LossBundle.field_names())])
                if out and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                    save_checkpoint(state, out / "checkpoints" / f"step_{state.step:07d}")
                if out and config.sample_interval and state.step % config.sample_interval == 0:
                    _save_samples(state, state.context, out / "samples" / f"step_{state.step:07d}.png")
                if on_step:
                    on_step(state, bundle)
            rec = epoch_means(state.history, "rec")
            logger.info(
                "epoch %d done: step %d, g updates %d, rec %s, %.0fs",
                epoch + 1,
                state.step,
                state.g_updates,
                f"{rec[-1]:.4f}" if rec else "n/a",
                time.time() - start,
            )
    finally:
        if log_file:
            log_file.close()
    if out:
        save_checkpoint(state, out / "final")
    state.generator.eval()
    state.discriminator.eval()
    return TrainResult(state.generator, state.discriminator, state.history, state)
