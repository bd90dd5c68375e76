"""Input-space attacks: the KL-maximizing k-step attack used during training,
FGSM, PGD with restarts and targeted modes, and black-box transfer.

Attacks run the model in eval mode (no BN statistics drift), never touch
parameters, and draw every random number from the caller's numpy Generator,
so a fixed seed reproduces adversarial batches bit-for-bit. Pixel range and
the L-inf ball are enforced on every returned batch.
"""

import contextlib
from dataclasses import dataclass

import numpy as np
import torch

from .dualbn_model import as_model_input, as_label_tensor
from .losses import cross_entropy, kl_div, softmax_probs

TARGET_MODES = ("untargeted", "least_likely", "random_class")
LOSS_KINDS = ("kl", "ce")


class AttackError(ValueError):
    """Invalid attack specification or incompatible models."""


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    steps: int = 20
    step_size: float | None = None
    restarts: int = 1
    loss_kind: str = "ce"
    target_mode: str = "untargeted"
    init_noise_sigma: float = 0.001
    reinit_per_step: bool = False
    zero_init: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise AttackError(f"steps must be >= 0, got {self.steps}")
        if self.restarts < 1:
            raise AttackError(f"restarts must be >= 1, got {self.restarts}")
        if self.loss_kind not in LOSS_KINDS:
            raise AttackError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.target_mode not in TARGET_MODES:
            raise AttackError(f"target_mode must be one of {TARGET_MODES}")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.loss_kind == "kl":
            return self.epsilon  # 2-step attack convention: step size equals the radius
        return 2.5 * self.epsilon / max(self.steps, 1)


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    achieved_radius: np.ndarray
    final_loss: np.ndarray

    def __post_init__(self):
        lo, hi = float(self.x_adv.min()), float(self.x_adv.max())
        if lo < 0.0 or hi > 1.0:
            raise AttackError(f"adversarial pixels outside [0,1]: [{lo}, {hi}]")


@contextlib.contextmanager
def _eval_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield
    finally:
        model.train(was_training)


def _to_tensor(rng_array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(rng_array.astype(np.float32))


def kl_attack(model, batch, tag: str, spec: AttackSpec, rng: np.random.Generator) -> AttackResult:
    """Maximize KL(f(x) || f(x+delta)) by signed gradient steps on delta.

    The clean softmax is a constant during differentiation. delta starts as
    init_noise_sigma * standard normal (redrawn each step under
    reinit_per_step), is clamped to the epsilon ball after every step, and the
    result is clamped to valid pixels.
    """
    if spec.loss_kind != "kl":
        raise AttackError(f"kl_attack needs loss_kind='kl', got {spec.loss_kind!r}")
    x = as_model_input(batch)
    eps = spec.epsilon
    alpha = spec.resolved_step_size()
    with _eval_mode(model):
        with torch.no_grad():
            p_clean = softmax_probs(model(x, tag=tag)).detach()
        noise = _to_tensor(rng.standard_normal(tuple(x.shape)) * spec.init_noise_sigma)
        delta = noise.clamp(-eps, eps)
        for step in range(spec.steps):
            if spec.reinit_per_step and step > 0:
                noise = _to_tensor(rng.standard_normal(tuple(x.shape)) * spec.init_noise_sigma)
                delta = noise.clamp(-eps, eps)
            delta = delta.detach().requires_grad_(True)
            divergence = kl_div(p_clean, softmax_probs(model(x + delta, tag=tag)),
                                reduce=False).sum()
            (grad,) = torch.autograd.grad(divergence, delta)
            with torch.no_grad():
                delta = (delta + alpha * grad.sign()).clamp(-eps, eps)
        x_adv = (x + delta).clamp(0.0, 1.0).detach()
        with torch.no_grad():
            final = kl_div(p_clean, softmax_probs(model(x_adv, tag=tag)), reduce=False)
    radius = (x_adv - x).abs().amax(dim=tuple(range(1, x.ndim)))
    return AttackResult(x_adv, radius.numpy(), final.numpy())


def _pick_targets(logits: torch.Tensor, y: torch.Tensor, mode: str,
                  rng: np.random.Generator) -> torch.Tensor | None:
    if mode == "untargeted":
        return None
    if mode == "least_likely":
        return logits.argmin(dim=-1)
    draws = rng.integers(0, logits.shape[-1] - 1, size=len(y))
    targets = torch.from_numpy(draws.astype(np.int64))
    targets = targets + (targets >= y).long()  # uniform over wrong labels
    return targets


def pgd_attack(model, batch, labels, spec: AttackSpec, rng: np.random.Generator,
               tag: str = "base") -> AttackResult:
    """Multi-step sign-gradient CE attack with restarts; keeps the worst case.

    Untargeted runs ascend CE on the true label; targeted runs descend CE on
    the target (least-likely or uniformly random wrong class, chosen from the
    clean logits). Accuracy is always measured against the true labels, so a
    sample is kept when it flips the prediction, with attack loss as the
    tie-break.
    """
    if spec.loss_kind != "ce":
        raise AttackError(f"pgd_attack needs loss_kind='ce', got {spec.loss_kind!r}")
    x = as_model_input(batch)
    y = as_label_tensor(labels)
    eps = spec.epsilon
    alpha = spec.resolved_step_size()
    with _eval_mode(model):
        with torch.no_grad():
            clean_logits = model(x, tag=tag)
        targets = _pick_targets(clean_logits, y, spec.target_mode, rng)
        best_adv = x.clone()
        best_obj = torch.full((len(y),), -np.inf)
        best_hit = torch.zeros(len(y), dtype=torch.bool)
        for _ in range(spec.restarts):
            if spec.zero_init:
                delta = torch.zeros_like(x)
            else:
                delta = _to_tensor(rng.uniform(-eps, eps, size=tuple(x.shape)))
            delta = (x + delta).clamp(0.0, 1.0) - x
            for _ in range(spec.steps):
                delta = delta.detach().requires_grad_(True)
                logits = model(x + delta, tag=tag)
                if targets is None:
                    objective = cross_entropy(logits, y, reduce=False).sum()
                else:
                    objective = -cross_entropy(logits, targets, reduce=False).sum()
                (grad,) = torch.autograd.grad(objective, delta)
                with torch.no_grad():
                    delta = (delta + alpha * grad.sign()).clamp(-eps, eps)
                    delta = (x + delta).clamp(0.0, 1.0) - x
            x_try = (x + delta).clamp(0.0, 1.0).detach()
            with torch.no_grad():
                logits = model(x_try, tag=tag)
                if targets is None:
                    obj = cross_entropy(logits, y, reduce=False)
                    hit = logits.argmax(dim=-1) != y
                else:
                    obj = -cross_entropy(logits, targets, reduce=False)
                    hit = logits.argmax(dim=-1) != y
            better = (hit & ~best_hit) | ((hit == best_hit) & (obj > best_obj))
            best_adv[better] = x_try[better]
            best_obj[better] = obj[better]
            best_hit[better] = hit[better]
        with torch.no_grad():
            final = cross_entropy(model(best_adv, tag=tag), y, reduce=False)
    radius = (best_adv - x).abs().amax(dim=tuple(range(1, x.ndim)))
    return AttackResult(best_adv, radius.numpy(), final.numpy())


def fgsm_attack(model, batch, labels, epsilon: float, tag: str = "base") -> AttackResult:
    """Single signed-gradient step of size epsilon from the clean input."""
    if epsilon < 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    x = as_model_input(batch)
    y = as_label_tensor(labels)
    with _eval_mode(model):
        x_req = x.detach().requires_grad_(True)
        loss = cross_entropy(model(x_req, tag=tag), y, reduce=False).sum()
        (grad,) = torch.autograd.grad(loss, x_req)
        x_adv = (x + epsilon * grad.sign()).clamp(0.0, 1.0).detach()
        with torch.no_grad():
            final = cross_entropy(model(x_adv, tag=tag), y, reduce=False)
    radius = (x_adv - x).abs().amax(dim=tuple(range(1, x.ndim)))
    return AttackResult(x_adv, radius.numpy(), final.numpy())


def classification_accuracy(model, batch, labels, tag: str = "base") -> float:
    """Percentage of correct eval-mode predictions."""
    x = as_model_input(batch)
    y = as_label_tensor(labels)
    with _eval_mode(model), torch.no_grad():
        preds = model(x, tag=tag).argmax(dim=-1)
    return 100.0 * float((preds == y).float().mean())


@dataclass
class TransferResult:
    black_box_accuracy: float
    white_box_accuracy: float


def transfer_attack(source_model, target_model, batch, labels, spec: AttackSpec,
                    rng: np.random.Generator) -> TransferResult:
    """Craft on the source, evaluate on the target; report next to white box."""
    x = as_model_input(batch)
    y = as_label_tensor(labels)
    with torch.no_grad(), _eval_mode(source_model), _eval_mode(target_model):
        src_logits = source_model(x[:1], tag="base")
        tgt_logits = target_model(x[:1], tag="base")
    if src_logits.shape != tgt_logits.shape:
        raise AttackError(f"model outputs disagree: {src_logits.shape} vs {tgt_logits.shape}")

    def craft(model):
        if spec.loss_kind == "kl":
            return kl_attack(model, x, "base", spec, rng).x_adv
        return pgd_attack(model, x, y, spec, rng).x_adv

    adv_from_source = craft(source_model)
    black_box = classification_accuracy(target_model, adv_from_source, y)
    adv_from_target = craft(target_model)
    white_box = classification_accuracy(target_model, adv_from_target, y)
    return TransferResult(black_box, white_box)


def sweep_rows(model, batch, labels, eps_grid, steps: int, restarts: int,
               rng: np.random.Generator, target_mode: str = "untargeted") -> list:
    """One PGD evaluation per epsilon: rows for the sweep CSV."""
    rows = []
    for eps in eps_grid:
        spec = AttackSpec(epsilon=float(eps), steps=steps, restarts=restarts,
                          loss_kind="ce", target_mode=target_mode)
        result = pgd_attack(model, batch, labels, spec, rng)
        accuracy = classification_accuracy(model, result.x_adv, labels)
        rows.append({
            "epsilon": float(eps),
            "steps": steps,
            "restarts": restarts,
            "mode": target_mode,
            "accuracy": accuracy,
            "mean_loss": float(np.mean(result.final_loss)),
        })
    return rows
