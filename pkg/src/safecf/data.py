"""Toy driving scenes, dataset manifests, batching and image I/O.

A toy scene is a textured road-like background with one traffic-light disc.
A green disc means GO and a red disc means STOP, so the region the classifier
should rely on is known exactly and stored as a mask next to each image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from safecf.errors import ConfigError, DataError, ShapeError

CLASS_NAMES = ("STOP", "GO")
STOP, GO = 0, 1

DISC_COLORS = {
    "green": np.array([0.15, 0.78, 0.25]),
    "red": np.array([0.82, 0.14, 0.14]),
}
COLOR_JITTER = 0.06


def label_for_color(color: str) -> int:
    if color not in DISC_COLORS:
        raise ConfigError(f"unknown disc color {color!r}")
    return GO if color == "green" else STOP


@dataclass
class ToyScene:
    image: np.ndarray  # (H, W, 3) uint8
    disc_center: tuple[int, int]
    disc_radius: int
    disc_color: str
    mask: np.ndarray  # (H, W) bool

    @property
    def label(self) -> int:
        return label_for_color(self.disc_color)


def disc_mask(size: tuple[int, int], center: tuple[int, int], radius: int) -> np.ndarray:
    rows, cols = np.ogrid[: size[0], : size[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius**2


def _background(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    # horizon gradient: sky above a random horizon row, road below
    horizon = rng.uniform(0.3, 0.6) * h
    rows = np.arange(h)[:, None]
    t = 1.0 / (1.0 + np.exp(-(rows - horizon) / (0.06 * h)))
    sky = np.array([0.58, 0.62, 0.70]) + rng.uniform(-0.08, 0.08, 3)
    road = np.array([0.36, 0.35, 0.34]) + rng.uniform(-0.06, 0.06, 3)
    base = (1 - t)[..., None] * sky + t[..., None] * road
    base = np.broadcast_to(base, (h, w, 3))
    # low-frequency colour noise upsampled from a coarse grid
    coarse = torch.from_numpy(rng.normal(0.0, 0.07, (1, 3, 5, 5)))
    lowfreq = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)[0]
    fine = rng.normal(0.0, 0.015, (h, w, 3))
    return base + lowfreq.permute(1, 2, 0).numpy() + fine


def background_images(n: int, seed: int, size: tuple[int, int] = (64, 64)) -> torch.Tensor:
    """``n`` disc-free scenes as a ``(n, 3, H, W)`` float tensor (8-bit quantized)."""
    rng = np.random.default_rng(seed)
    imgs = [np.round(np.clip(_background(rng, size), 0.0, 1.0) * 255) / 255.0 for _ in range(n)]
    if not imgs:
        return torch.empty(0, 3, *size)
    return torch.from_numpy(np.stack(imgs)).float().permute(0, 3, 1, 2).contiguous()


def render_scene(
    rng: np.random.Generator,
    size: tuple[int, int] = (64, 64),
    radius_range: tuple[int, int] = (6, 12),
    color: str | None = None,
) -> ToyScene:
    h, w = size
    r_lo, r_hi = radius_range
    if r_lo < 1 or r_hi < r_lo or 2 * r_hi + 1 > min(h, w):
        raise ConfigError(f"radius range {radius_range} does not fit image size {size}")
    color = color or ("green" if rng.random() < 0.5 else "red")
    radius = int(rng.integers(r_lo, r_hi + 1))
    center = (int(rng.integers(radius, h - radius)), int(rng.integers(radius, w - radius)))
    img = _background(rng, size)
    mask = disc_mask(size, center, radius)
    disc_rgb = DISC_COLORS[color] + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
    img[mask] = disc_rgb
    img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return ToyScene(img, center, radius, color, mask)


def recolor(scene: ToyScene, color: str) -> ToyScene:
    """Same scene with the disc repainted in ``color``."""
    img = scene.image.copy()
    img[scene.mask] = np.round(DISC_COLORS[color] * 255).astype(np.uint8)
    return ToyScene(img, scene.disc_center, scene.disc_radius, color, scene.mask.copy())


@dataclass
class ManifestEntry:
    id: str
    image: str
    label: int | None = None
    mask: str | None = None


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    image_size: tuple[int, int]
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        payload = {
            "split": self.split,
            "image_size": list(self.image_size),
            "class_names": list(self.class_names),
            "entries": [e.__dict__ for e in self.entries],
        }
        path.write_text(json.dumps(payload, indent=1))
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    return DatasetManifest(
        split=raw["split"],
        entries=[ManifestEntry(**e) for e in raw["entries"]],
        image_size=tuple(raw["image_size"]),
        class_names=list(raw["class_names"]),
        root=path.parent,
    )


def generate_toy_dataset(
    n: int,
    seed: int,
    out: str | Path,
    split: str = "train",
    size: tuple[int, int] = (64, 64),
    radius_range: tuple[int, int] = (6, 12),
) -> DatasetManifest:
    """Render ``n`` scenes under ``<out>/<split>/{images,masks}/`` with a manifest."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    split_dir = Path(out) / split
    try:
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {split_dir}: {exc}") from exc

    rng = np.random.default_rng(seed)
    # balanced classes: exactly n // 2 of one colour, the odd one out decided by the rng
    colors = np.array(["green", "red"] * (n // 2 + 1))[:n]
    rng.shuffle(colors)
    entries = []
    width = max(5, len(str(n - 1)))
    for i, color in enumerate(colors):
        scene = render_scene(rng, size, radius_range, str(color))
        name = f"{i:0{width}d}.png"
        Image.fromarray(scene.image).save(split_dir / "images" / name)
        Image.fromarray(scene.mask.astype(np.uint8) * 255).save(split_dir / "masks" / name)
        entries.append(ManifestEntry(f"{split}-{i:0{width}d}", f"images/{name}", scene.label, f"masks/{name}"))
    manifest = DatasetManifest(split, entries, tuple(size), list(CLASS_NAMES), split_dir)
    manifest.save()
    return manifest


def encode_png(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    import io

    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def read_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode an RGB image to float32 ``(H, W, 3)`` in [0, 1], optionally resized to ``(H, W)``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            return np.asarray(im) > 127
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


@dataclass
class ImageSet:
    """Decoded images held in memory as a ``(N, C, H, W)`` float tensor."""

    ids: list[str]
    images: torch.Tensor
    labels: torch.Tensor | None = None
    masks: torch.Tensor | None = None
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index: Sequence[int] | torch.Tensor) -> "ImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageSet(
            [self.ids[i] for i in index.tolist()],
            self.images[index],
            None if self.labels is None else self.labels[index],
            None if self.masks is None else self.masks[index],
            self.class_names,
        )


def load_images(manifest: DatasetManifest, size: tuple[int, int] | None = None) -> ImageSet:
    size = tuple(size or manifest.image_size)
    if not manifest.entries:
        raise ConfigError(f"manifest for split {manifest.split!r} is empty")
    images, masks, labels = [], [], []
    have_masks = all(e.mask for e in manifest.entries)
    have_labels = all(e.label is not None for e in manifest.entries)
    for e in manifest.entries:
        images.append(read_image(manifest.resolve(e.image), size))
        if have_masks:
            masks.append(read_mask(manifest.resolve(e.mask), size))
        if have_labels:
            labels.append(e.label)
    return ImageSet(
        [e.id for e in manifest.entries],
        torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous(),
        torch.tensor(labels, dtype=torch.long) if have_labels else None,
        torch.from_numpy(np.stack(masks)) if have_masks else None,
        list(manifest.class_names),
    )


@dataclass
class Batch:
    ids: list[str]
    images: torch.Tensor
    labels: torch.Tensor | None
    masks: torch.Tensor | None


def load_batches(
    data: DatasetManifest | ImageSet,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    size: tuple[int, int] | None = None,
) -> Iterator[Batch]:
    """Yield batches in a seed-determined order (manifest order when not shuffling)."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if isinstance(data, DatasetManifest):
        data = load_images(data, size)
    n = len(data)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        sub = data.subset(order[i : i + batch_size])
        yield Batch(sub.ids, sub.images, sub.labels, sub.masks)


# --- figure grids -----------------------------------------------------------

GRID_PAD = 2


def diff_map(query: np.ndarray, counterfactual: np.ndarray) -> np.ndarray:
    """Per-pixel max-over-channels absolute change, ``(H, W)``."""
    if query.shape != counterfactual.shape:
        raise ShapeError(f"shape mismatch: {query.shape} vs {counterfactual.shape}")
    return np.abs(query.astype(np.float64) - counterfactual.astype(np.float64)).max(axis=-1)


def heatmap(values: np.ndarray, cmap: str = "inferno") -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[cmap](np.clip(values, 0.0, 1.0))[..., :3]


def grid_row(query: np.ndarray, saliency: np.ndarray, counterfactual: np.ndarray) -> tuple[np.ndarray, ...]:
    """Query | saliency overlay | counterfactual | change heatmap, all ``(H, W, 3)``."""
    from safecf.saliency import overlay

    return (query, overlay(query, saliency), counterfactual, heatmap(diff_map(query, counterfactual)))


def save_grid(rows: Sequence[Sequence[np.ndarray]], path: str | Path, pad: int = GRID_PAD) -> np.ndarray:
    """Tile rows of equally sized ``(H, W, 3)`` float panels into a PNG.

    The canvas is ``r * H + (r + 1) * pad`` pixels high.
    """
    if not rows:
        raise ConfigError("save_grid needs at least one row")
    h, w = rows[0][0].shape[:2]
    ncols = max(len(r) for r in rows)
    for row in rows:
        for panel in row:
            if panel.shape[:2] != (h, w):
                raise ShapeError(f"panel shape {panel.shape[:2]} differs from {(h, w)}")
    canvas = np.ones((len(rows) * h + (len(rows) + 1) * pad, ncols * w + (ncols + 1) * pad, 3))
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            top, left = pad + i * (h + pad), pad + j * (w + pad)
            canvas[top : top + h, left : left + w] = panel[..., :3]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(canvas)).save(path)
    return canvas
