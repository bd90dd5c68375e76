"""Evaluation suites: accuracy tables, epsilon sweeps, loss-vs-radius curves,
loss-surface grids, and the gradient-masking sanity checklist.

Everything here is read-only on the model and deterministic given the seed.
Accuracies are percentages in [0, 100].
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import (AttackSpec, classification_accuracy, fgsm_attack, pgd_attack,
                      sweep_rows, transfer_attack)
from .dualbn_model import as_label_tensor, as_model_input
from .losses import cross_entropy


@dataclass
class EvalReport:
    clean_accuracy: float
    attack_accuracies: dict = field(default_factory=dict)
    attack_mean_loss: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)


@dataclass
class CheckVerdict:
    name: str
    passed: bool | None
    detail: str
    skipped: bool = False

    def line(self) -> str:
        status = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return f"{status} {self.name}: {self.detail}"


def _batches(batch, size: int):
    for lo in range(0, len(batch), size):
        yield batch.take(np.arange(lo, min(lo + size, len(batch))))


def _attack_accuracy(model, dataset, spec: AttackSpec, rng, batch_size: int = 128):
    """(accuracy %, mean CE loss) of the attack over the dataset, batched."""
    correct = 0
    loss_sum = 0.0
    for part in _batches(dataset, batch_size):
        if spec.loss_kind == "kl":
            from .attacks import kl_attack

            result = kl_attack(model, part, "base", spec, rng)
        else:
            result = pgd_attack(model, part, part.labels, spec, rng)
        acc = classification_accuracy(model, result.x_adv, part.labels)
        correct += acc / 100.0 * len(part)
        x = result.x_adv
        with torch.no_grad():
            loss = cross_entropy(model(x, tag="base"), as_label_tensor(part), reduce=False)
        loss_sum += float(loss.sum())
    return 100.0 * correct / len(dataset), loss_sum / len(dataset)


def default_suite(epsilon: float) -> dict:
    return {
        "fgsm": AttackSpec(epsilon=epsilon, steps=1, step_size=epsilon,
                           loss_kind="ce", zero_init=True),
        "pgd-20": AttackSpec(epsilon=epsilon, steps=20, loss_kind="ce"),
        "pgd-100": AttackSpec(epsilon=epsilon, steps=100, loss_kind="ce"),
        "pgd-20-ll": AttackSpec(epsilon=epsilon, steps=20, loss_kind="ce",
                                target_mode="least_likely"),
    }


def evaluate(model, dataset, suite: dict, rng: np.random.Generator,
             reference_model=None, batch_size: int = 128) -> EvalReport:
    """Clean accuracy plus one entry per named attack spec in the suite.

    Suite keys starting with "bb-" run as black-box transfers from
    reference_model (skipped if none is given). Model state is untouched.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    report = EvalReport(clean_accuracy=classification_accuracy(model, dataset, dataset.labels))
    for name, spec in suite.items():
        if name.startswith("bb-"):
            if reference_model is None:
                continue
            result = transfer_attack(reference_model, model, dataset, dataset.labels,
                                     spec, rng)
            report.attack_accuracies[name] = result.black_box_accuracy
            report.attack_mean_loss[name] = math.nan
        else:
            acc, mean_loss = _attack_accuracy(model, dataset, spec, rng, batch_size)
            report.attack_accuracies[name] = acc
            report.attack_mean_loss[name] = mean_loss
    model.train(was_training)
    return report


def loss_vs_epsilon_curve(model, dataset, eps_grid, rng: np.random.Generator,
                          batch_size: int = 128) -> list:
    """Per radius: mean CE at the FGSM point and PGD-7 robust accuracy."""
    if list(eps_grid) != sorted(float(e) for e in eps_grid) or float(eps_grid[0]) < 0:
        raise ValueError("epsilon grid must ascend from a non-negative radius")
    rows = []
    for eps in eps_grid:
        eps = float(eps)
        fgsm_loss = 0.0
        for part in _batches(dataset, batch_size):
            result = fgsm_attack(model, part, part.labels, eps)
            fgsm_loss += float(np.sum(result.final_loss))
        spec = AttackSpec(epsilon=eps, steps=7, loss_kind="ce")
        acc, _ = _attack_accuracy(model, dataset, spec, rng, batch_size)
        rows.append({"epsilon": eps, "fgsm_mean_loss": fgsm_loss / len(dataset),
                     "pgd7_accuracy": acc})
    return rows


@dataclass
class SurfaceGrid:
    offsets: np.ndarray  # signed multipliers along each direction
    loss: np.ndarray  # resolution x resolution CE values
    direction_grad: np.ndarray
    direction_ortho: np.ndarray
    gradient_fallback: bool = False


def loss_surface_grid(model, image, label, radius: float, resolution: int,
                      rng: np.random.Generator) -> SurfaceGrid:
    """CE over x + a*d1 + b*d2. d1 follows the input gradient, d2 is a random
    unit direction orthogonalized against d1; the center cell is the clean point.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError(f"resolution must be odd and >= 3, got {resolution}")
    x = as_model_input(image)
    y = as_label_tensor(np.asarray([int(label)]))
    was_training = model.training
    model.eval()
    x_req = x.detach().requires_grad_(True)
    loss = cross_entropy(model(x_req, tag="base"), y)
    (grad,) = torch.autograd.grad(loss, x_req)
    gnorm = float(grad.norm())
    fallback = gnorm < 1e-12
    if fallback:
        d1 = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
        d1 = d1 / d1.norm()
    else:
        d1 = grad / gnorm
    d2 = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
    d2 = d2 - (d2 * d1).sum() * d1
    d2 = d2 / d2.norm()

    half = resolution // 2
    offsets = (np.arange(resolution) - half) * (radius / half)
    grid = np.zeros((resolution, resolution))
    with torch.no_grad():
        for i, a in enumerate(offsets):
            for j, b in enumerate(offsets):
                point = x + float(a) * d1 + float(b) * d2
                grid[i, j] = float(cross_entropy(model(point, tag="base"), y))
    model.train(was_training)
    return SurfaceGrid(offsets, grid, d1.numpy(), d2.numpy(), fallback)


SANITY_CHECKS = ("black_box_weaker", "more_steps_stronger", "pgd_beats_fgsm",
                 "step_saturation", "epsilon_monotone", "large_epsilon_zero")


def masking_sanity_checks(model, reference_model, dataset, rng: np.random.Generator,
                          epsilon: float = 8 / 255, samples: int = 512,
                          saturation_samples: int = 256, slack: float = 0.25,
                          saturation_tol: float = 0.3) -> list:
    """Six gradient-masking verdicts; always returns all six, some may skip.

    1. black-box (transfer) FGSM no stronger than white-box FGSM
    2. PGD-100 no weaker than PGD-20
    3. PGD-20 no weaker than FGSM
    4. PGD-500 vs PGD-1000 accuracy gap within saturation_tol points
    5. robust accuracy non-increasing over an epsilon sweep (one small
       inversion tolerated)
    6. accuracy collapses to ~0 at the top of the sweep
    """
    subset = dataset.take(np.arange(min(len(dataset), samples)))
    verdicts = []

    fgsm_spec = AttackSpec(epsilon=epsilon, steps=1, step_size=epsilon,
                           loss_kind="ce", zero_init=True)
    fgsm_acc, _ = _attack_accuracy(model, subset, fgsm_spec, rng)
    if reference_model is None:
        verdicts.append(CheckVerdict(SANITY_CHECKS[0], None,
                                     "no reference model for transfer", skipped=True))
    else:
        transfer = transfer_attack(reference_model, model, subset, subset.labels,
                                   fgsm_spec, rng)
        ok = transfer.black_box_accuracy >= transfer.white_box_accuracy - slack
        verdicts.append(CheckVerdict(
            SANITY_CHECKS[0], ok,
            f"black-box {transfer.black_box_accuracy:.2f}% vs white-box "
            f"{transfer.white_box_accuracy:.2f}% (slack {slack})"))

    acc20, _ = _attack_accuracy(model, subset,
                                AttackSpec(epsilon=epsilon, steps=20), rng)
    acc100, _ = _attack_accuracy(model, subset,
                                 AttackSpec(epsilon=epsilon, steps=100), rng)
    verdicts.append(CheckVerdict(
        SANITY_CHECKS[1], acc100 <= acc20 + slack,
        f"PGD-100 {acc100:.2f}% vs PGD-20 {acc20:.2f}% (slack {slack})"))
    verdicts.append(CheckVerdict(
        SANITY_CHECKS[2], acc20 <= fgsm_acc + slack,
        f"PGD-20 {acc20:.2f}% vs FGSM {fgsm_acc:.2f}% (slack {slack})"))

    sat = dataset.take(np.arange(min(len(dataset), saturation_samples)))
    acc500, _ = _attack_accuracy(model, sat, AttackSpec(epsilon=epsilon, steps=500), rng)
    acc1000, _ = _attack_accuracy(model, sat, AttackSpec(epsilon=epsilon, steps=1000), rng)
    verdicts.append(CheckVerdict(
        SANITY_CHECKS[3], abs(acc500 - acc1000) <= saturation_tol,
        f"PGD-500 {acc500:.2f}% vs PGD-1000 {acc1000:.2f}% (tol {saturation_tol})"))

    grid = [0.0, epsilon / 2, epsilon, 2 * epsilon, 4 * epsilon, 0.5]
    rows = sweep_rows(model, subset, subset.labels, grid, steps=20, restarts=1, rng=rng)
    accs = [row["accuracy"] for row in rows]
    inversions = sum(1 for a, b in zip(accs, accs[1:]) if b > a + slack)
    verdicts.append(CheckVerdict(
        SANITY_CHECKS[4], inversions == 0,
        f"accuracies over eps {['%.2f' % a for a in accs]}, inversions beyond "
        f"slack {slack}: {inversions}"))
    verdicts.append(CheckVerdict(
        SANITY_CHECKS[5], accs[-1] <= 1.0,
        f"accuracy at eps={grid[-1]} is {accs[-1]:.2f}% (threshold 1.0%)"))
    return verdicts
