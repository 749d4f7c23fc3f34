import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

import oracles
from conftest import tiny_greybox
from safecf.errors import ConfigError, ShapeError
from safecf.greybox import (
    GlobalAvgPool,
    GreyBoxClassifier,
    GreyBoxTrainConfig,
    build_toy_greybox,
    capture,
    load_greybox,
    predict,
    predict_labels,
    save_greybox,
    train_greybox,
)


class Sum(nn.Module):
    def forward(self, x):
        return x.sum(dim=(1, 2, 3))[:, None].repeat(1, 2) * torch.tensor([1.0, 0.0])


def test_zero_head_gives_uniform():
    gb = tiny_greybox(num_classes=3)
    with torch.no_grad():
        gb.stages["head"].weight.zero_()
        gb.stages["head"].bias.zero_()
    for p in predict(gb, torch.rand(4, 3, 8, 8)):
        assert np.allclose(p.probs, 1 / 3, atol=1e-6)


def test_duplicate_in_batch_identical():
    gb = tiny_greybox()
    x = torch.rand(1, 3, 8, 8)
    a, b = predict(gb, torch.cat([x, x]))
    assert np.array_equal(a.probs, b.probs) and a.predicted == b.predicted


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=20, deadline=None)
def test_probs_normalized(seed, d):
    gb = tiny_greybox(num_classes=d, seed=seed)
    x = torch.rand(3, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
    for p in predict(gb, x):
        assert abs(p.probs.sum() - 1) <= 1e-5
        assert 0 <= p.predicted < d


def test_wrong_shape_rejected():
    gb = tiny_greybox(size=8)
    with pytest.raises(ShapeError, match=r"\(N, 3, 8, 8\)"):
        predict(gb, torch.rand(2, 3, 8, 9))


def test_capture_sum_logit_all_ones():
    gb = GreyBoxClassifier([("act", nn.Identity()), ("head", Sum())], 2, (2, 2, 1), capture_layer="act")
    acts, grads = capture(gb, torch.rand(1, 1, 2, 2), "act", 0)
    assert acts.shape == grads.shape
    assert torch.equal(grads, torch.ones_like(grads))


def test_capture_ignored_layer_zero():
    gb = GreyBoxClassifier([("act", nn.Identity()), ("head", Sum())], 2, (2, 2, 1), capture_layer="act")
    _, grads = capture(gb, torch.rand(1, 1, 2, 2), "act", 1)
    assert torch.equal(grads, torch.zeros_like(grads))


def test_capture_unknown_layer_lists_names():
    gb = tiny_greybox()
    with pytest.raises(ConfigError, match="stage1"):
        capture(gb, torch.rand(1, 3, 8, 8), "nope", 0)


def test_capture_bad_target():
    with pytest.raises(ConfigError):
        capture(tiny_greybox(), torch.rand(1, 3, 8, 8), "stage2", 2)


def test_capture_matches_finite_differences():
    gb = tiny_greybox(size=4, channels=(2, 3), dtype=torch.float64)
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    acts, grads = capture(gb, x, "stage1", 1)
    rest = [gb.stages[n] for n in ("stage2", "pool", "head")]

    def logit(flat):
        a = torch.from_numpy(flat).view_as(acts)
        for m in rest:
            a = m(a)
        return float(a[0, 1])

    with torch.no_grad():
        fd = oracles.central_difference(logit, acts.flatten().numpy(), 1e-6)
    got = grads.flatten().numpy()
    assert np.linalg.norm(got - fd) <= 1e-3 * np.linalg.norm(fd)


def test_capture_is_read_only():
    gb = tiny_greybox()
    x = torch.rand(3, 3, 8, 8)
    before = predict_labels(gb, x), [p.probs for p in predict(gb, x)]
    capture(gb, x, "stage2", 1)
    after = predict_labels(gb, x), [p.probs for p in predict(gb, x)]
    assert torch.equal(before[0], after[0])
    assert all(np.array_equal(a, b) for a, b in zip(before[1], after[1]))
    assert all(p.grad is None for p in gb.parameters())


def _toy_data(n=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, 8, 8, generator=g) * 0.2
    y = torch.arange(n) % 2
    x[y == 1, 0] += 0.7
    x[y == 0, 1] += 0.7
    return x, y


def test_train_zero_epochs_returns_init():
    x, y = _toy_data()
    cfg = GreyBoxTrainConfig(epochs=0, seed=3, channels=(4, 4), strides=(1, 1))
    trained, hist = train_greybox(x, y, cfg)
    fresh = build_toy_greybox(2, (8, 8, 3), (4, 4), (1, 1), seed=3)
    for a, b in zip(trained.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)
    assert hist.train_loss == []


def test_train_seeded_and_learns():
    x, y = _toy_data()
    cfg = GreyBoxTrainConfig(epochs=5, learning_rate=1e-2, batch_size=16, seed=1, channels=(4, 4), strides=(2, 1))
    a, ha = train_greybox(x, y, cfg, x, y)
    b, hb = train_greybox(x, y, cfg, x, y)
    assert ha.val_accuracy == hb.val_accuracy
    assert ha.val_accuracy[-1] >= 0.95


def test_train_with_negatives():
    x, y = _toy_data()
    neg = torch.rand(16, 3, 8, 8) * 0.2
    cfg = GreyBoxTrainConfig(epochs=5, learning_rate=1e-2, batch_size=16, seed=1, channels=(4, 4), strides=(2, 1))
    _, hist = train_greybox(x, y, cfg, x, y, negatives=neg)
    assert hist.val_accuracy[-1] >= 0.95


def test_single_class_rejected():
    x, _ = _toy_data()
    with pytest.raises(ConfigError):
        train_greybox(x, torch.zeros(64, dtype=torch.long), GreyBoxTrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    gb = build_toy_greybox(3, (16, 16, 3), (4, 4, 8, 8), seed=0)
    gb.train_seed = 7
    save_greybox(gb, tmp_path / "m")
    loaded = load_greybox(tmp_path / "m")
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(predict_labels(gb, x), predict_labels(loaded, x))
    assert torch.allclose(gb(x), loaded(x))
    assert loaded.train_seed == 7 and loaded.capture_layer == "stage4"
    assert not any(p.requires_grad for p in loaded.parameters())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_greybox(tmp_path / "absent")


def test_features_are_pool_output():
    gb = tiny_greybox()
    x = torch.rand(2, 3, 8, 8)
    assert torch.allclose(gb.stages["head"](gb.features(x)), gb(x))
    assert isinstance(gb.stages["pool"], GlobalAvgPool)
