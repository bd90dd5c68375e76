"""End-to-end training loops for the two methods, sharing one epoch engine.

Per batch the engine builds tagged views, attacks each view under its BN tag
with the KL attack at the epoch's radius, optionally perturbs weights (AWP) on
the base-view TRADES loss, takes one SGD step at the perturbed weights, then
removes the perturbation and updates the EMA shadow. The ascending-epsilon
method is the T=0 / single-BN instance of the same engine, which keeps the
two training paths numerically identical where they should be.

All randomness flows through one checkpointed numpy Generator, so a resumed
run replays the uninterrupted one exactly.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackSpec, classification_accuracy, kl_attack, pgd_attack
from .core_config import ConfigError, TrainConfig, attack_steps_at, epsilon_at, lr_at
from .data_augment import AugmentPolicy, ImageBatch, default_policy, make_views
from .dualbn_model import (ArchiveError, DualBN2d, ModelSpec, as_label_tensor,
                           as_model_input, build_model, load_named_state, named_state,
                           read_tensor_archive, write_tensor_archive)
from .losses import dajat_loss, trades_loss
from .weight_space import (AveragedModel, apply_perturbation, awp_perturb,
                           ema_update, remove_perturbation)

CHECKPOINT_KIND = "train-state"


class TrainingAbort(RuntimeError):
    """Non-finite loss or other unrecoverable condition mid-training."""


@dataclass
class TrainState:
    config: TrainConfig
    model: object
    ema: AveragedModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0
    best_metric: float = -1.0
    best_epoch: int = 0
    num_classes: int = 10
    label: str = "acat"


@dataclass
class TrainResult:
    state: TrainState
    metrics: list
    last_path: str | None = None
    best_path: str | None = None


class MetricsWriter:
    """Newline-delimited JSON records with a provenance header line."""

    def __init__(self, path, provenance: dict | None = None):
        self.path = path
        mode = "a" if provenance is None else "w"
        self._fh = open(path, mode, encoding="utf-8")
        if provenance is not None:
            self.append({"kind": "provenance", **provenance})

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _bn_param_ids(model) -> set:
    ids = set()
    for module in model.modules():
        if isinstance(module, DualBN2d):
            ids.update(id(p) for p in module.parameters())
    return ids


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    """SGD with momentum; weight decay skips BN parameters unless configured."""
    bn_ids = _bn_param_ids(model)
    decayed, plain = [], []
    for p in model.parameters():
        (plain if (id(p) in bn_ids and not config.decay_bn_params) else decayed).append(p)
    groups = [{"params": decayed, "weight_decay": config.weight_decay},
              {"params": plain, "weight_decay": 0.0}]
    return torch.optim.SGD(groups, lr=config.lr_max, momentum=config.momentum)


def _param_names(model) -> dict:
    return {id(p): name for name, p in model.named_parameters()}


def save_checkpoint(state: TrainState, path) -> None:
    """Parameters, both BN sets, EMA shadow, momentum buffers, RNG, progress."""
    tensors = {}
    for name, array in named_state(state.model).items():
        tensors[f"model/{name}"] = array
    for name, array in state.ema.state().items():
        tensors[f"ema/{name}"] = array
    names = _param_names(state.model)
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                tensors[f"opt_momentum/{names[id(p)]}"] = (
                    buf.detach().cpu().numpy().astype(np.float32))
    meta = {
        "kind": CHECKPOINT_KIND,
        "label": state.label,
        "epoch": state.epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "num_classes": state.num_classes,
        "bn_variant": state.model.bn_variant,
        "ema_num_updates": state.ema.num_updates,
        "config": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
    }
    write_tensor_archive(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = read_tensor_archive(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ArchiveError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    spec = ModelSpec(conv_channels=config.channel_list(),
                     num_classes=meta["num_classes"], bn_variant=config.bn_variant)
    model = build_model(spec, config.seed)
    model_state = {name[len("model/"):]: arr for name, arr in tensors.items()
                   if name.startswith("model/")}
    load_named_state(model, model_state)
    ema = AveragedModel(model, config.ema_decay)
    ema.load_state({name[len("ema/"):]: arr for name, arr in tensors.items()
                    if name.startswith("ema/")}, meta["ema_num_updates"])
    optimizer = make_optimizer(model, config)
    names = _param_names(model)
    for group in optimizer.param_groups:
        for p in group["params"]:
            key = f"opt_momentum/{names[id(p)]}"
            if key in tensors:
                optimizer.state[p] = {
                    "momentum_buffer": torch.from_numpy(tensors[key].copy())}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(config=config, model=model, ema=ema, optimizer=optimizer,
                      rng=rng, epoch=meta["epoch"], best_metric=meta["best_metric"],
                      best_epoch=meta["best_epoch"], num_classes=meta["num_classes"],
                      label=meta["label"])


def train_acat(config: TrainConfig, dataset: ImageBatch, out_dir=None,
               policy: AugmentPolicy | None = None, resume_from=None,
               stop_after: int | None = None) -> TrainResult:
    """Ascending-radius 2-step TRADES training with AWP and weight averaging.

    Single augmentation pipeline: requires views=0 and bn_variant='single'.
    """
    if config.views != 0:
        raise ConfigError("acat trains on the base pipeline only; set views=0")
    if config.bn_variant != "single":
        raise ConfigError("acat uses one BN set; set bn_variant='single'")
    return _run(config, dataset, "acat", out_dir, policy, resume_from, stop_after)


def train_dajat(config: TrainConfig, dataset: ImageBatch, out_dir=None,
                policy: AugmentPolicy | None = None, resume_from=None,
                stop_after: int | None = None) -> TrainResult:
    """Joint training on one base view plus `views` policy-augmented views."""
    label = f"dajat(Base,{config.views}*AA)"
    return _run(config, dataset, label, out_dir, policy, resume_from, stop_after)


def _run(config, dataset, label, out_dir, policy, resume_from, stop_after=None) -> TrainResult:
    if policy is None and config.views > 0:
        policy = default_policy()
    num_classes = int(dataset.labels.max()) + 1

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.label != label:
            raise ConfigError(f"checkpoint was trained as {state.label!r}, not {label!r}")
        mismatched = [key for key, value in state.config.to_dict().items()
                      if config.to_dict()[key] != value]
        if mismatched:
            raise ConfigError(
                f"config differs from checkpoint on {mismatched}; a resumed run "
                "keeps its original settings (stop_after bounds this session instead)")
        config = state.config
    else:
        spec = ModelSpec(conv_channels=config.channel_list(), num_classes=num_classes,
                         bn_variant=config.bn_variant)
        model = build_model(spec, config.seed)
        state = TrainState(config=config, model=model,
                           ema=AveragedModel(model, config.ema_decay),
                           optimizer=make_optimizer(model, config),
                           rng=np.random.default_rng(config.seed),
                           num_classes=num_classes, label=label)

    writer = None
    last_path = best_path = None
    if out_dir is not None:
        import pathlib

        out_dir = pathlib.Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        last_path = out_dir / "checkpoints" / "last.ckpt"
        best_path = out_dir / "checkpoints" / "best.ckpt"
        metrics_path = out_dir / "metrics.ndjson"
        # resuming into a directory with history appends; anything else starts
        # a fresh file with a provenance header
        appending = (resume_from is not None and metrics_path.exists()
                     and metrics_path.stat().st_size > 0)
        provenance = None if appending else {
            "label": label, "seed": config.seed, "config": config.to_dict(),
            "attack_structure": _attack_structure(config),
            "version": _package_version(),
        }
        writer = MetricsWriter(metrics_path, provenance)

    # fixed validation split: held-out tail of a seed-determined permutation
    split_rng = np.random.default_rng(config.seed)
    order = split_rng.permutation(len(dataset))
    n_val = min(config.val_split, len(dataset) // 10)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if n_val == 0:
        val_idx = order[:min(len(dataset), 256)]
    val = dataset.take(val_idx)
    train = dataset.take(train_idx) if n_val > 0 else dataset
    quick = val.take(np.arange(min(len(val), config.quick_eval_samples)))

    end_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    metrics = []
    try:
        for epoch in range(state.epoch + 1, end_epoch + 1):
            record = _train_epoch(state, train, val, quick, epoch, policy, writer)
            metrics.append(record)
            if writer is not None:
                writer.append(record)
            state.epoch = epoch
            if record["select_accuracy"] > state.best_metric:
                state.best_metric = record["select_accuracy"]
                state.best_epoch = epoch
                if best_path is not None:
                    save_checkpoint(state, best_path)
            if last_path is not None:
                save_checkpoint(state, last_path)
        if last_path is not None and not metrics:
            save_checkpoint(state, last_path)  # no epochs left, still leave a copy
    finally:
        if writer is not None:
            writer.close()
    return TrainResult(state=state, metrics=metrics,
                       last_path=str(last_path) if last_path else None,
                       best_path=str(best_path) if best_path else None)


def _train_epoch(state, train, val, quick, epoch, policy, writer) -> dict:
    config = state.config
    start = time.monotonic()
    eps = epsilon_at(epoch, config.epochs, config.epsilon_max)
    lr = lr_at(epoch, config.epochs, config.lr_max)
    steps = attack_steps_at(epoch, config.step_schedule())
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    model, rng = state.model, state.rng
    attack_spec = AttackSpec(epsilon=eps, steps=steps, step_size=eps, loss_kind="kl",
                             reinit_per_step=config.reinit_attack_noise)
    weights = config.view_weights()
    order = rng.permutation(len(train))
    sums = {"loss": 0.0, "ce": 0.0, "kl": 0.0, "jsd": 0.0}
    batches = 0
    attacks_run = 0
    model.train()
    for lo in range(0, len(train), config.batch_size):
        batch = train.take(order[lo:lo + config.batch_size])
        tagged = make_views(batch, config.views, policy, config.pad, rng)
        y = as_label_tensor(batch)
        views = [(as_model_input(vb), tag) for vb, tag in tagged.views]
        advs = []
        for x_view, tag in views:
            result = kl_attack(model, x_view, tag, attack_spec, rng)
            advs.append((result.x_adv, tag))
            attacks_run += 1

        pert = awp_perturb(
            model,
            lambda: trades_loss(model, views[0][0], advs[0][0], y,
                                config.beta, tag="base").total,
            config.gamma_awp)
        apply_perturbation(model, pert)
        breakdown = dajat_loss(model, views, advs, y, config.beta,
                               config.lambda_js, view_weights=weights)
        if not torch.isfinite(breakdown.total):
            if writer is not None:
                writer.append({"kind": "abort", "epoch": epoch, "batch": batches,
                               "loss": float(breakdown.total.detach())})
            raise TrainingAbort(f"non-finite loss at epoch {epoch}, batch {batches}")
        state.optimizer.zero_grad()
        breakdown.total.backward()
        remove_perturbation(model, pert)
        state.optimizer.step()
        ema_update(state.ema, model)

        for key, value in breakdown.scalars().items():
            sums[key] += value
        batches += 1
    model.eval()

    clean_acc = classification_accuracy(model, val, val.labels)
    quick_spec = AttackSpec(epsilon=config.epsilon_max, steps=7, loss_kind="ce")
    quick_adv = pgd_attack(model, quick, quick.labels, quick_spec, rng)
    robust_acc = classification_accuracy(model, quick_adv.x_adv, quick.labels)
    select_spec = AttackSpec(epsilon=config.epsilon_max, steps=20, loss_kind="ce")
    select_adv = pgd_attack(model, val, val.labels, select_spec, rng)
    select_acc = classification_accuracy(model, select_adv.x_adv, val.labels)

    return {
        "kind": "epoch",
        "epoch": epoch,
        "epsilon": eps,
        "lr": lr,
        "attack_steps": steps,
        "attack_structure": _attack_structure(config),
        "attacks_run": attacks_run,
        "loss": sums["loss"] / max(batches, 1),
        "ce": sums["ce"] / max(batches, 1),
        "kl": sums["kl"] / max(batches, 1),
        "jsd": sums["jsd"] / max(batches, 1),
        "clean_accuracy": clean_acc,
        "robust_accuracy": robust_acc,
        "select_accuracy": select_acc,
        "seconds": time.monotonic() - start,
    }


def _attack_structure(config: TrainConfig) -> str:
    schedule = config.step_schedule()
    base = schedule if isinstance(schedule, int) else schedule.steps_at(1)
    return f"{base} + {config.views * base}"


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("dajat")
    except Exception:
        return "unknown"
