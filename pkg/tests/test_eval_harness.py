import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from dajat.attacks import AttackSpec
from dajat.data_augment import synth_dataset
from dajat.dualbn_model import named_state
from dajat.eval_harness import (SANITY_CHECKS, CheckVerdict, default_suite, evaluate,
                                loss_surface_grid, loss_vs_epsilon_curve,
                                masking_sanity_checks)
from dajat.losses import cross_entropy

from conftest import tiny_model

EPS = 8 / 255


@pytest.fixture(scope="module")
def data():
    return synth_dataset(32, 4, seed=0, size=8)


@pytest.fixture(scope="module")
def model():
    return tiny_model(bn_variant="single").eval()


class FlatLogits(nn.Module):
    """Depends on the input only through a zeroed term, so the gradient is 0."""

    def __init__(self, num_classes=4):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x, tag="base"):
        anchor = x.reshape(len(x), -1).sum(dim=1, keepdim=True) * 0.0
        return anchor + torch.linspace(0.0, 1.0, self.num_classes)


# ---------------------------------------------------------------------------
# evaluate


def test_default_suite_contents():
    suite = default_suite(EPS)
    assert set(suite) == {"fgsm", "pgd-20", "pgd-100", "pgd-20-ll"}
    assert suite["fgsm"].steps == 1 and suite["fgsm"].zero_init
    assert suite["fgsm"].resolved_step_size() == EPS
    assert suite["pgd-100"].steps == 100
    assert suite["pgd-20-ll"].target_mode == "least_likely"


def test_evaluate_reports_every_requested_attack(model, data):
    suite = {"fgsm": default_suite(EPS)["fgsm"],
             "pgd-5": AttackSpec(epsilon=EPS, steps=5)}
    report = evaluate(model, data, suite, np.random.default_rng(0))
    assert 0.0 <= report.clean_accuracy <= 100.0
    assert set(report.attack_accuracies) == {"fgsm", "pgd-5"}
    for name in suite:
        assert 0.0 <= report.attack_accuracies[name] <= 100.0
        assert math.isfinite(report.attack_mean_loss[name])
    assert report.sweep == [] and report.verdicts == []


def test_evaluate_black_box_needs_a_reference(model, data):
    suite = {"bb-fgsm": default_suite(EPS)["fgsm"]}
    without = evaluate(model, data, suite, np.random.default_rng(0))
    assert without.attack_accuracies == {}
    with_ref = evaluate(model, data, suite, np.random.default_rng(0),
                        reference_model=model)
    assert set(with_ref.attack_accuracies) == {"bb-fgsm"}
    assert math.isnan(with_ref.attack_mean_loss["bb-fgsm"])


def test_evaluate_leaves_the_model_untouched(model, data):
    before = named_state(model)
    model.train()
    evaluate(model, data, default_suite(EPS), np.random.default_rng(0))
    assert model.training
    model.eval()
    after = named_state(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_evaluate_rejects_empty_dataset(model, data):
    with pytest.raises(ValueError):
        evaluate(model, data.take(np.arange(0)), {}, np.random.default_rng(0))


def test_deterministic_attacks_are_batching_invariant(model, data):
    suite = {"fgsm": default_suite(EPS)["fgsm"]}
    small = evaluate(model, data, suite, np.random.default_rng(0), batch_size=5)
    large = evaluate(model, data, suite, np.random.default_rng(0), batch_size=128)
    assert small.clean_accuracy == large.clean_accuracy
    # percent bookkeeping round-trips through /100 per batch
    assert small.attack_accuracies["fgsm"] == pytest.approx(
        large.attack_accuracies["fgsm"], abs=1e-5)
    assert small.attack_mean_loss["fgsm"] == pytest.approx(
        large.attack_mean_loss["fgsm"], rel=1e-6)


# ---------------------------------------------------------------------------
# epsilon curve


def test_loss_curve_zero_radius_matches_clean(model, data):
    rows = loss_vs_epsilon_curve(model, data, [0.0, EPS], np.random.default_rng(0))
    assert [row["epsilon"] for row in rows] == [0.0, EPS]
    report = evaluate(model, data, {}, np.random.default_rng(0))
    assert rows[0]["pgd7_accuracy"] == report.clean_accuracy
    with torch.no_grad():
        from dajat.dualbn_model import as_label_tensor, as_model_input

        clean_ce = float(cross_entropy(model(as_model_input(data), tag="base"),
                                       as_label_tensor(data)))
    assert rows[0]["fgsm_mean_loss"] == pytest.approx(clean_ce, rel=1e-5)
    assert all(math.isfinite(row["fgsm_mean_loss"]) for row in rows)


def test_loss_curve_rejects_bad_grids(model, data):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        loss_vs_epsilon_curve(model, data, [EPS, 0.0], rng)
    with pytest.raises(ValueError):
        loss_vs_epsilon_curve(model, data, [-EPS, 0.0, EPS], rng)


# ---------------------------------------------------------------------------
# loss surface


def test_surface_grid_geometry(model, data):
    image, label = data.pixels[0], int(data.labels[0])
    grid = loss_surface_grid(model, image, label, radius=EPS, resolution=5,
                             rng=np.random.default_rng(0))
    assert grid.loss.shape == (5, 5)
    assert np.array_equal(grid.offsets, np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) * EPS)
    assert not grid.gradient_fallback

    d1 = torch.from_numpy(grid.direction_grad)
    d2 = torch.from_numpy(grid.direction_ortho)
    assert float(d1.norm()) == pytest.approx(1.0, abs=1e-5)
    assert float(d2.norm()) == pytest.approx(1.0, abs=1e-5)
    assert abs(float((d1 * d2).sum())) < 1e-5

    from dajat.dualbn_model import as_label_tensor, as_model_input

    with torch.no_grad():
        center = float(cross_entropy(model(as_model_input(image), tag="base"),
                                     as_label_tensor(np.asarray([label]))))
    assert grid.loss[2, 2] == pytest.approx(center, abs=1e-7)


def test_surface_grid_is_seeded(model, data):
    image, label = data.pixels[1], int(data.labels[1])
    a = loss_surface_grid(model, image, label, EPS, 3, np.random.default_rng(3))
    b = loss_surface_grid(model, image, label, EPS, 3, np.random.default_rng(3))
    assert np.array_equal(a.loss, b.loss)
    assert np.array_equal(a.direction_ortho, b.direction_ortho)


def test_surface_grid_falls_back_on_zero_gradient(data):
    grid = loss_surface_grid(FlatLogits(), data.pixels[0], 0, EPS, 3,
                             np.random.default_rng(0))
    assert grid.gradient_fallback
    assert float(np.linalg.norm(grid.direction_grad)) == pytest.approx(1.0, abs=1e-5)
    assert np.allclose(grid.loss, grid.loss[0, 0])


def test_surface_grid_validates_resolution(model, data):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        loss_surface_grid(model, data.pixels[0], 0, EPS, 4, rng)
    with pytest.raises(ValueError):
        loss_surface_grid(model, data.pixels[0], 0, EPS, 1, rng)


def test_surface_grid_restores_training_mode(model, data):
    model.train()
    loss_surface_grid(model, data.pixels[0], 0, EPS, 3, np.random.default_rng(0))
    assert model.training
    model.eval()


# ---------------------------------------------------------------------------
# masking checklist


def test_verdict_lines():
    assert CheckVerdict("foo", True, "all good").line() == "PASS foo: all good"
    assert CheckVerdict("foo", False, "nope").line() == "FAIL foo: nope"
    assert CheckVerdict("foo", None, "n/a", skipped=True).line() == "SKIP foo: n/a"


def test_sanity_checklist_always_returns_six_verdicts(model, data):
    verdicts = masking_sanity_checks(model, None, data, np.random.default_rng(0),
                                     epsilon=EPS, samples=16, saturation_samples=8)
    assert [v.name for v in verdicts] == list(SANITY_CHECKS)
    assert verdicts[0].skipped and verdicts[0].passed is None
    assert verdicts[0].line().startswith("SKIP")
    for verdict in verdicts[1:]:
        assert not verdict.skipped
        assert isinstance(verdict.passed, bool)
        assert verdict.detail


def test_sanity_checklist_runs_transfer_with_reference(model, data):
    verdicts = masking_sanity_checks(model, model, data, np.random.default_rng(0),
                                     epsilon=EPS, samples=16, saturation_samples=8)
    assert not verdicts[0].skipped
    assert "black-box" in verdicts[0].detail
    # self-transfer is exactly the white-box attack, so the check must pass
    assert verdicts[0].passed
