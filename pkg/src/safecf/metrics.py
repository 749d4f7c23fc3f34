"""Counterfactual quality and distributional realism metrics.

Per-pair metrics work on images in [0, 1]. FID, KID and IS are computed on
features from a pluggable :class:`EmbeddingProvider`; by default that is the
grey-box classifier's pooled features, so absolute values are only
comparable between runs that use the same embedding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from safecf.errors import InvalidTargetError, ShapeError, UndefinedMetricError
from safecf.greybox import GreyBoxClassifier, predict_labels
from safecf.saliency import grad_cam

DEFAULT_TAU = 0.05


@dataclass
class CFPair:
    query: np.ndarray  # (H, W, C)
    counterfactual: np.ndarray
    query_label: int
    target_label: int
    achieved_label: int
    id: str = ""

    def __post_init__(self):
        if self.target_label == self.query_label:
            raise InvalidTargetError(f"pair {self.id!r}: target label equals query label")
        if self.query.shape != self.counterfactual.shape:
            raise ShapeError(f"pair {self.id!r}: {self.query.shape} vs {self.counterfactual.shape}")


@dataclass
class MetricsReport:
    validity: float
    proximity: float
    sparsity: float
    fid: float
    kid: float
    inception_score: float
    n_pairs: int
    lpips: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _nonempty(pairs: Sequence[CFPair], name: str) -> None:
    if len(pairs) == 0:
        raise UndefinedMetricError(f"{name} is undefined for an empty set of pairs")


def validity(pairs: Sequence[CFPair]) -> float:
    _nonempty(pairs, "validity")
    return sum(p.achieved_label == p.target_label for p in pairs) / len(pairs)


def pair_proximity(p: CFPair) -> float:
    return float(np.mean(np.abs(p.query.astype(np.float64) - p.counterfactual)))


def pair_sparsity(p: CFPair, tau: float = DEFAULT_TAU) -> float:
    change = np.abs(p.query.astype(np.float64) - p.counterfactual).max(axis=-1)
    return float(np.mean(change > tau))


def proximity(pairs: Sequence[CFPair]) -> float:
    """Mean absolute per-pixel change, averaged over pairs. Lower is better."""
    _nonempty(pairs, "proximity")
    return float(np.mean([pair_proximity(p) for p in pairs]))


def sparsity(pairs: Sequence[CFPair], tau: float = DEFAULT_TAU) -> float:
    """Fraction of pixels whose largest channel change exceeds ``tau``, averaged over pairs."""
    _nonempty(pairs, "sparsity")
    if not tau > 0:
        raise UndefinedMetricError(f"tau must be > 0, got {tau}")
    return float(np.mean([pair_sparsity(p, tau) for p in pairs]))


def _check_features(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("feature sets must be 2-D (samples, dim)")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise UndefinedMetricError("each feature set needs at least 2 samples")
    return a, b


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    The trace of ``(S_r S_f)^(1/2)`` is taken from the eigenvalues of the
    symmetric product ``S_r^(1/2) S_f S_r^(1/2)``, negative ones clamped to 0.
    """
    a, b = _check_features(real_features, fake_features)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T / a.shape[1] + 1.0) ** 3


def kid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Unbiased squared MMD with a cubic polynomial kernel.

    Equal-sized sets use the paired U-statistic, which is exactly zero when the
    two sets are identical; otherwise the cross term averages all pairs.
    """
    a, b = _check_features(real_features, fake_features)
    m, n = a.shape[0], b.shape[0]
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    term_a = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_b = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    if m == n:
        cross = (k_ab.sum() - np.trace(k_ab)) / (m * (m - 1))
    else:
        cross = k_ab.mean()
    return float(term_a + term_b - 2.0 * cross)


def inception_score(class_probs: np.ndarray | Sequence) -> float:
    """``exp(mean KL(p(y|x) || p(y)))`` with the marginal taken over the set."""
    p = np.asarray([getattr(c, "probs", c) for c in class_probs], dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise UndefinedMetricError("inception score needs a nonempty (n, d) probability array")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


class EmbeddingProvider(Protocol):
    def features(self, images: torch.Tensor) -> np.ndarray: ...

    def class_probs(self, images: torch.Tensor) -> np.ndarray: ...


class GreyBoxEmbedding:
    """Pooled grey-box features for FID/KID and its softmax for IS."""

    def __init__(self, model: GreyBoxClassifier, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def _chunks(self, images: torch.Tensor, fn: Callable) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, images.shape[0], self.batch_size):
                out.append(fn(images[i : i + self.batch_size]).double().numpy())
        return np.concatenate(out)

    def features(self, images: torch.Tensor) -> np.ndarray:
        return self._chunks(images, self.model.features)

    def class_probs(self, images: torch.Tensor) -> np.ndarray:
        return self._chunks(images, lambda x: torch.softmax(self.model(x), dim=1))


# Perceptual-distance slot (e.g. LPIPS); no default implementation is shipped.
PerceptualDistance = Callable[[torch.Tensor, torch.Tensor], np.ndarray]


class Explainer(Protocol):
    def __call__(self, x: torch.Tensor, s: torch.Tensor, y_target: torch.Tensor) -> torch.Tensor: ...


class IdentityExplainer:
    """Returns the query unchanged; a floor for every metric."""

    def __call__(self, x, s, y_target):
        return x.clone()


class GeneratorExplainer:
    def __init__(self, generator):
        self.generator = generator

    def __call__(self, x, s, y_target):
        with torch.no_grad():
            return self.generator(x, s, y_target).image


@dataclass
class Evaluation:
    report: MetricsReport
    pairs: list[CFPair]
    saliency: np.ndarray  # (N, H, W) maps the explainer was given


def evaluate(
    explainer: Explainer,
    greybox: GreyBoxClassifier,
    images: torch.Tensor,
    embedding: EmbeddingProvider | None = None,
    seed: int = 0,
    batch_size: int = 64,
    ids: Sequence[str] | None = None,
    tau: float = DEFAULT_TAU,
    perceptual: PerceptualDistance | None = None,
) -> Evaluation:
    """Generate one counterfactual per image and score the whole set."""
    from safecf.trainer import sample_targets

    if images.shape[0] == 0:
        raise UndefinedMetricError("evaluation set is empty")
    embedding = embedding or GreyBoxEmbedding(greybox)
    rng = torch.Generator().manual_seed(seed)
    y = predict_labels(greybox, images)
    y_target = sample_targets(y, greybox.num_classes, rng)
    fakes, maps = [], []
    for i in range(0, images.shape[0], batch_size):
        xb = images[i : i + batch_size]
        sb = grad_cam(greybox, xb, y[i : i + batch_size])
        fakes.append(explainer(xb, sb, y_target[i : i + batch_size]).clamp(0.0, 1.0))
        maps.append(sb)
    fake = torch.cat(fakes)
    achieved = predict_labels(greybox, fake)
    ids = list(ids) if ids is not None else [str(i) for i in range(images.shape[0])]
    q_np = images.permute(0, 2, 3, 1).double().numpy()
    f_np = fake.permute(0, 2, 3, 1).double().numpy()
    pairs = [
        CFPair(q_np[i], f_np[i], int(y[i]), int(y_target[i]), int(achieved[i]), ids[i])
        for i in range(len(ids))
    ]
    real_feat = embedding.features(images)
    fake_feat = embedding.features(fake)
    report = MetricsReport(
        validity=validity(pairs),
        proximity=proximity(pairs),
        sparsity=sparsity(pairs, tau),
        fid=fid(real_feat, fake_feat),
        kid=kid(real_feat, fake_feat),
        inception_score=inception_score(embedding.class_probs(fake)),
        n_pairs=len(pairs),
        lpips=None if perceptual is None else float(np.mean(perceptual(images, fake))),
    )
    return Evaluation(report, pairs, torch.cat(maps).numpy())


def write_report(report: MetricsReport | dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict() if isinstance(report, MetricsReport) else report
    path.write_text(json.dumps(payload, indent=2))
    return path


def write_pairs_csv(pairs: Sequence[CFPair], path: str | Path, tau: float = DEFAULT_TAU) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "query_label", "target", "achieved", "proximity", "sparsity"])
        for p in pairs:
            w.writerow([p.id, p.query_label, p.target_label, p.achieved_label, pair_proximity(p), pair_sparsity(p, tau)])
    return path


def mean_reports(reports: Sequence[MetricsReport]) -> dict:
    keys = [k for k in MetricsReport.__dataclass_fields__ if k not in ("n_pairs", "lpips")]
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}


def change_inside_outside(pairs: Sequence[CFPair], saliency: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Mean per-pixel change inside (``s >= threshold``) and outside the salient region.

    Pixel means are taken per pair and then averaged over pairs that have both
    regions.
    """
    inside, outside = [], []
    for p, s in zip(pairs, saliency):
        change = np.abs(p.query - p.counterfactual).mean(axis=-1)
        region = s >= threshold
        if region.any() and (~region).any():
            inside.append(change[region].mean())
            outside.append(change[~region].mean())
    if not inside:
        raise UndefinedMetricError("no pair has both salient and non-salient pixels")
    return float(np.mean(inside)), float(np.mean(outside))
