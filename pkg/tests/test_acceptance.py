"""End-to-end acceptance checks on the toy disc task.

Each test appends one PASS/FAIL line to ``conftest.ACCEPTANCE_LINES``; the
lines are printed in the terminal summary. The module-scoped fixtures build
the datasets, train the grey-box once and train two explainers (fuse weight
1 and 0) that share everything else. Expect roughly 15 minutes on one CPU.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import scipy.ndimage
import torch

import oracles
from conftest import ACCEPTANCE_LINES
from safecf import losses, metrics
from safecf.data import background_images, generate_toy_dataset, load_images
from safecf.greybox import GreyBoxClassifier, GreyBoxTrainConfig, train_greybox
from safecf.losses import LossWeights
from safecf.metrics import CFPair, GeneratorExplainer, change_inside_outside, evaluate
from safecf.saliency import grad_cam
from safecf.trainer import TrainingConfig, epoch_means, train
from test_gradients import TOLERANCE, gradient_penalty_error, generator_loss_error
from test_saliency import hand_model

README = Path(__file__).resolve().parent.parent / "README.md"

# Explainer settings used for both acceptance runs; only lambda_fuse differs.
EXPLAINER = dict(
    epochs=10,
    learning_rate=4e-4,
    g_base_channels=8,
    g_n_res=2,
    seed=0,
)
LAMBDA_CLS = 10.0
TRAIN_BUDGET_S = 30 * 60


def report(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    splits = {"gb_train": (2000, 1), "gb_val": (500, 2), "train": (2500, 3), "test": (500, 4)}
    return {name: load_images(generate_toy_dataset(n, seed, root, split=name)) for name, (n, seed) in splits.items()}


@pytest.fixture(scope="module")
def greybox(toy):
    tr, va = toy["gb_train"], toy["gb_val"]
    model, history = train_greybox(
        tr.images, tr.labels, GreyBoxTrainConfig(), va.images, va.labels, negatives=background_images(1000, 11)
    )
    return model, history.val_accuracy[-1]


def run_explainer(toy, greybox, lambda_fuse):
    model, _ = greybox
    cfg = TrainingConfig(loss_weights=LossWeights(lambda_cls=LAMBDA_CLS, lambda_fuse=lambda_fuse), **EXPLAINER)
    start = time.time()
    result = train(cfg, toy["train"], model)
    seconds = time.time() - start
    ev = evaluate(GeneratorExplainer(result.generator), model, toy["test"].images)
    return {"result": result, "seconds": seconds, "eval": ev}


@pytest.fixture(scope="module")
def safe_run(toy, greybox):
    return run_explainer(toy, greybox, 1.0)


@pytest.fixture(scope="module")
def ablation_run(toy, greybox):
    return run_explainer(toy, greybox, 0.0)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def oracle_errors(n_cases=100):
    """Worst relative error per operation over ``n_cases`` random inputs."""
    rng = np.random.default_rng(0)
    worst = {}

    def note(name, a, b):
        worst[name] = max(worst.get(name, 0.0), rel_err(float(a), float(b)))

    for _ in range(n_cases):
        n, c, h, w = 2, 3, 3, 4
        x = rng.random((n, c, h, w))
        x_cf = rng.random((n, c, h, w))
        s = rng.random((n, h, w))
        x_rec, s_rec = rng.random((n, c, h, w)), rng.random((n, h, w))
        alpha = float(rng.random())
        t = {k: torch.from_numpy(v) for k, v in dict(x=x, x_cf=x_cf, s=s, x_rec=x_rec, s_rec=s_rec).items()}

        got = losses.interpolate(t["x"], t["x_cf"], alpha).x_hat.numpy().ravel()
        want = oracles.interpolate(x.ravel().tolist(), x_cf.ravel().tolist(), alpha)
        for a, b in zip(got, want):
            note("interpolate", a, b)

        probs = rng.dirichlet(np.ones(3), size=4)
        labels = rng.integers(0, 3, size=4)
        note(
            "classification_loss",
            losses.classification_loss(torch.from_numpy(probs), torch.from_numpy(labels)),
            oracles.classification_loss(probs.tolist(), labels.tolist()),
        )
        note(
            "reconstruction_loss",
            losses.reconstruction_loss(t["x"], t["s"], t["x_rec"], t["s_rec"]),
            oracles.reconstruction_loss(x.ravel().tolist(), s.ravel().tolist(), x_rec.ravel().tolist(), s_rec.ravel().tolist()),
        )
        note("fuse_loss", losses.fuse_loss(t["x"], t["x_cf"], t["s"]), oracles.fuse_loss(x.tolist(), x_cf.tolist(), s.tolist()))

        # critic f(x) = <W, x> has input gradient W for every sample
        weight = torch.from_numpy(rng.normal(size=(c, h, w)))
        gp = losses.gradient_penalty(lambda z: (z * weight).sum(dim=(1, 2, 3)), t["x"].clone())
        note("gradient_penalty", gp, oracles.linear_critic_penalty([weight.ravel().tolist()] * n))

        # adversarial terms are plain means of critic scores
        real, fake = losses.adversarial_d(lambda z: z.sum(dim=(1, 2, 3)), t["x"], t["x_cf"])
        note("adversarial_real", real, oracles.mean(x.sum(axis=(1, 2, 3))))
        note("adversarial_fake", fake, oracles.mean(x_cf.sum(axis=(1, 2, 3))))

        w_ = LossWeights(**dict(zip(("lambda_cls", "lambda_gp", "lambda_rec", "lambda_fuse"), rng.random(4))))
        parts = rng.normal(size=5)
        note("total_d", losses.total_d(*map(torch.tensor, parts[:4]), w_),
             -parts[0] + parts[1] + w_.lambda_cls * parts[2] + w_.lambda_gp * parts[3])
        note("total_g", losses.total_g(*map(torch.tensor, parts), w_),
             -parts[0] + w_.lambda_cls * parts[1] + w_.lambda_gp * parts[2] + w_.lambda_rec * parts[3] + w_.lambda_fuse * parts[4])

        q = rng.random((4, 4, 3))
        f = np.where(rng.random((4, 4, 3)) < 0.5, q, rng.random((4, 4, 3)))
        pairs = [CFPair(q, f, 0, 1, int(rng.integers(0, 2)))]
        note("proximity", metrics.proximity(pairs), oracles.proximity([(q, f)]))
        note("sparsity", metrics.sparsity(pairs, 0.05), oracles.sparsity([(q, f)], 0.05))
        note("validity", metrics.validity(pairs), float(pairs[0].achieved_label == 1))

        a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)) + rng.normal(size=3)
        note("fid", metrics.fid(a, b), oracles.fid(a, b))
        note("kid", metrics.kid(a, b), oracles.kid(a, b))
        note("kid_unequal", metrics.kid(a, b[:6]), oracles.kid(a, b[:6]))
        p = rng.dirichlet(np.ones(4), size=6)
        note("inception_score", metrics.inception_score(p), oracles.inception_score(p.tolist()))
    return worst


def test_criterion_1_oracle_suite():
    start = time.time()
    worst = oracle_errors(100)
    seconds = time.time() - start
    bad = {k: v for k, v in worst.items() if v > 1e-6}
    ok = not bad and seconds < 60
    report(1, ok, f"{len(worst)} operations x 100 cases, worst rel err {max(worst.values()):.1e}, {seconds:.1f}s")
    assert not bad, bad
    assert seconds < 60


def test_criterion_2_gradient_checks():
    start = time.time()
    errors = [gradient_penalty_error(seed) for seed in range(2)]
    errors += [generator_loss_error(seed, num_classes=d) for seed in range(2) for d in (2, 3)]
    seconds = time.time() - start
    ok = max(errors) <= TOLERANCE and seconds < 300
    report(2, ok, f"worst rel err {max(errors):.1e} over {len(errors)} checks, {seconds:.0f}s")
    assert max(errors) <= TOLERANCE
    assert seconds < 300


def saliency_mass_inside(model: GreyBoxClassifier, images, masks, labels, radius=4):
    maps = torch.cat([grad_cam(model, images[i : i + 50], labels[i : i + 50]) for i in range(0, len(images), 50)])
    fractions = []
    for m, mask in zip(maps.numpy(), masks.numpy()):
        dilated = scipy.ndimage.distance_transform_edt(mask == 0) <= radius
        total = m.sum()
        fractions.append(m[dilated].sum() / total if total > 0 else 0.0)
    return np.array(fractions)


def test_criterion_3_grad_cam(toy, greybox):
    act = torch.tensor([[[[2.0, -1.0], [0.0, 1.0]]]])
    linear = grad_cam(hand_model(act), torch.rand(1, 1, 2, 2), 0)
    constant = grad_cam(hand_model(act, constant=True), torch.rand(1, 1, 2, 2), 0)
    hand_ok = torch.equal(linear[0], torch.tensor([[1.0, 0.0], [0.0, 0.5]])) and torch.equal(constant, torch.zeros_like(constant))

    model, val_acc = greybox
    va = toy["gb_val"]
    fractions = saliency_mass_inside(model, va.images[:200], va.masks[:200], va.labels[:200])
    share = float((fractions >= 0.6).mean())
    ok = hand_ok and val_acc >= 0.95 and share >= 0.7
    report(3, ok, f"hand cases {'ok' if hand_ok else 'wrong'}, val acc {val_acc:.3f}, localized {share:.1%} of 200")
    assert hand_ok
    assert val_acc >= 0.95
    assert share >= 0.7


def test_criterion_4_toy_reproduction(safe_run, ablation_run):
    r_safe, r_abl = safe_run["eval"].report, ablation_run["eval"].report
    rec = epoch_means(safe_run["result"].history, "rec")
    rec_ratio = rec[-1] / rec[0]
    n = len(safe_run["eval"].pairs)
    ok = (
        n == 500
        and safe_run["seconds"] <= TRAIN_BUDGET_S
        and r_safe.validity >= 0.8
        and r_safe.sparsity < r_abl.sparsity
        and rec_ratio <= 0.5
    )
    report(
        4,
        ok,
        f"validity {r_safe.validity:.3f}, sparsity {r_safe.sparsity:.3f} vs ablation {r_abl.sparsity:.3f}, "
        f"rec ratio {rec_ratio:.2f}, train {safe_run['seconds'] / 60:.1f} min",
    )
    assert n == 500
    assert safe_run["seconds"] <= TRAIN_BUDGET_S
    assert r_safe.validity >= 0.8
    assert r_safe.sparsity < r_abl.sparsity
    assert rec_ratio <= 0.5


def test_criterion_5_change_concentrated_in_saliency(safe_run):
    ev = safe_run["eval"]
    inside, outside = change_inside_outside(ev.pairs, ev.saliency)
    ratio = inside / outside
    report(5, ratio >= 2, f"mean change inside {inside:.4f}, outside {outside:.4f}, ratio {ratio:.2f}")
    assert ratio >= 2


def test_criterion_6_schedule(toy, greybox):
    model, _ = greybox
    before = {k: v.clone() for k, v in model.state_dict().items()}
    seen = {"d": 0, "g": 0}

    def count(state, bundle):
        seen["d"] += bundle.total_d is not None
        seen["g"] += bundle.total_g is not None

    cfg = TrainingConfig(epochs=10, g_base_channels=4, g_n_res=1, d_base_channels=4)
    result = train(cfg, toy["train"], model, on_step=count, max_steps=100)
    unchanged = all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    ok = seen == {"d": 100, "g": 20} and result.state.g_updates == 20 and unchanged
    report(6, ok, f"{seen['d']} critic steps, {seen['g']} generator updates, grey-box {'unchanged' if unchanged else 'CHANGED'}")
    assert seen == {"d": 100, "g": 20}
    assert result.state.g_updates == 20
    assert unchanged


def test_criterion_7_scope_statement_and_identity_sets():
    text = README.read_text().lower()
    documented = "not reproduced" in text and all(k in text for k in ("fid", "lpips", "kid", "inception", "steex", "octet"))
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(50, 6))
    fid_self = metrics.fid(feats, feats)
    kid_dup = metrics.kid(feats, feats.copy())
    p = rng.dirichlet(np.ones(3))
    is_same = metrics.inception_score(np.tile(p, (20, 1)))
    identity_ok = abs(fid_self) < 1e-8 and abs(kid_dup) <= 1e-6 and abs(is_same - 1.0) < 1e-12
    ok = documented and identity_ok
    report(7, ok, f"scope documented: {documented}, fid(S,S)={fid_self:.1e}, kid dup={kid_dup:.1e}, IS={is_same:.6f}")
    assert documented
    assert identity_ok
