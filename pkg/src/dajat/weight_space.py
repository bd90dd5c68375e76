"""Weight-space smoothing: adversarial weight perturbation with a per-layer
relative-norm budget, and exponential moving-average weight tracking.

The perturbation for layer l is capped at gamma * ||theta_l||_2. Only
trainable parameters participate; BN running statistics are buffers and are
never perturbed or averaged. Removal restores the exact pre-apply bytes, so
training never drifts from perturbation round-off.
"""

import copy
from dataclasses import dataclass, field

import numpy as np
import torch


class PerturbationError(ValueError):
    """Negative budget or perturbation misaligned with the model."""


@dataclass
class WeightPerturbation:
    """Per-parameter deltas keyed by parameter name, plus the budget used."""

    deltas: dict
    gamma: float
    _snapshots: list = field(default_factory=list, repr=False)

    def layer_norms(self) -> dict:
        return {name: float(d.norm()) for name, d in self.deltas.items()}


def _trainable(model) -> dict:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def project_perturbation(model, pert: WeightPerturbation, slack: float = 1e-6) -> None:
    """Scale each layer's delta onto the gamma ball; feasible layers untouched."""
    params = _trainable(model)
    with torch.no_grad():
        for name, delta in pert.deltas.items():
            if name not in params:
                raise PerturbationError(f"perturbation names unknown parameter {name!r}")
            bound = pert.gamma * float(params[name].norm())
            norm = float(delta.norm())
            if norm > bound * (1.0 + slack):
                delta.mul_(bound / norm if norm > 0 else 0.0)


def awp_perturb(model, loss_evaluator, gamma: float, ascent_steps: int = 1) -> WeightPerturbation:
    """Ascend the evaluator's loss in weight space, then project per layer.

    loss_evaluator: zero-argument callable returning the scalar loss at the
    model's current parameters. The model's parameters are bit-identical on
    return; the caller applies the perturbation explicitly.
    """
    if gamma < 0:
        raise PerturbationError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0:
        return WeightPerturbation({}, 0.0)
    params = _trainable(model)
    originals = {name: p.detach().clone() for name, p in params.items()}
    norms = {name: float(p.detach().norm()) for name, p in params.items()}
    pert = WeightPerturbation({name: torch.zeros_like(p) for name, p in params.items()}, gamma)
    try:
        for step in range(ascent_steps):
            if step > 0:
                apply_perturbation(model, pert)
            loss = loss_evaluator()
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            if step > 0:
                remove_perturbation(model, pert)
            with torch.no_grad():
                for (name, _), grad in zip(params.items(), grads):
                    if grad is None:
                        continue
                    gnorm = float(grad.norm())
                    if gnorm > 0 and norms[name] > 0:
                        pert.deltas[name].add_(grad, alpha=gamma * norms[name] / gnorm)
        project_perturbation(model, pert)
    finally:
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(originals[name])
    return pert


def apply_perturbation(model, pert: WeightPerturbation) -> None:
    """Add deltas in place; pushes a byte-exact snapshot for the matching remove."""
    params = _trainable(model)
    snapshot = {}
    with torch.no_grad():
        for name, delta in pert.deltas.items():
            if name not in params or params[name].shape != delta.shape:
                raise PerturbationError(f"perturbation misaligned at {name!r}")
            snapshot[name] = params[name].detach().clone()
            params[name].add_(delta)
    pert._snapshots.append(snapshot)


def remove_perturbation(model, pert: WeightPerturbation) -> None:
    """Restore the parameters captured by the matching apply, bit-exactly."""
    if pert.deltas and not pert._snapshots:
        raise PerturbationError("remove_perturbation without a matching apply")
    if not pert.deltas:
        return
    snapshot = pert._snapshots.pop()
    params = _trainable(model)
    with torch.no_grad():
        for name, saved in snapshot.items():
            params[name].copy_(saved)


class AveragedModel:
    """Exponential moving average of a model's trainable parameters."""

    def __init__(self, model, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise PerturbationError(f"decay must be in [0,1], got {decay}")
        self.decay = decay
        self.num_updates = 0
        self.shadow = {name: p.detach().clone() for name, p in model.named_parameters()}

    def update(self, model, decay: float | None = None) -> None:
        d = self.decay if decay is None else decay
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name not in self.shadow:
                    raise PerturbationError(f"shadow missing parameter {name!r}")
                if d == 0.0:
                    self.shadow[name].copy_(p.detach())
                else:
                    self.shadow[name].mul_(d).add_(p.detach(), alpha=1.0 - d)
        self.num_updates += 1

    def materialize(self, model):
        """Copy of the model carrying shadow parameters and the live buffers."""
        avg = copy.deepcopy(model)
        with torch.no_grad():
            for name, p in avg.named_parameters():
                p.copy_(self.shadow[name])
        return avg

    def state(self) -> dict:
        return {name: t.detach().cpu().numpy().astype(np.float32)
                for name, t in self.shadow.items()}

    def load_state(self, state: dict, num_updates: int) -> None:
        for name in self.shadow:
            if name not in state:
                raise PerturbationError(f"averaged state missing {name!r}")
            self.shadow[name].copy_(torch.from_numpy(state[name].copy()))
        self.num_updates = num_updates


def ema_update(avg: AveragedModel, model, decay: float | None = None) -> None:
    avg.update(model, decay)
