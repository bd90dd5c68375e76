"""Command-line surface: train, eval, sweep, analyze-bn, analyze-aug,
loss-surface, sanity, plot.

Every command writes under one output directory with a fixed layout:
<out>/{config.snapshot, metrics.ndjson, checkpoints/, reports/, plots/}.
Exit codes: 0 success, 1 usage error (nothing written), 2 runtime abort.
"""

import argparse
import csv
import dataclasses
import json
import pathlib
import sys

import numpy as np

from .core_config import ConfigError, TrainConfig
from .data_augment import (AugmentPolicy, DataFormatError, ImageBatch, PolicyError,
                           apply_policy, base_augment, default_policy, histogram_mse,
                           load_cifar10_binary, load_cifar10_dir, patch_mse,
                           synth_dataset)
from .dualbn_model import ArchiveError, RoutingError, bn_cosine_similarity
from .eval_harness import (evaluate, loss_surface_grid, masking_sanity_checks,
                           loss_vs_epsilon_curve)
from .attacks import AttackError, AttackSpec, sweep_rows
from .training import TrainingAbort, load_checkpoint, train_acat, train_dajat

RUNTIME_ERRORS = (ConfigError, DataFormatError, PolicyError, ArchiveError,
                  RoutingError, AttackError, TrainingAbort, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fraction(text: str) -> float:
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def resolve_data(text: str) -> ImageBatch:
    """Dataset argument: 'synth[:k=v,...]', a .bin file, or a directory of them."""
    if text == "synth" or text.startswith("synth:"):
        params = {"n": 2000, "k": 10, "noise": 0.08, "seed": 0}
        if ":" in text:
            for part in text.split(":", 1)[1].split(","):
                key, _, value = part.partition("=")
                if key not in params:
                    raise UsageError(f"unknown synth parameter {key!r}")
                params[key] = float(value) if key == "noise" else int(value)
        return synth_dataset(params["n"], params["k"], params["seed"], params["noise"])
    path = pathlib.Path(text)
    if not path.exists():
        raise UsageError(f"dataset path {text!r} does not exist")
    try:
        return load_cifar10_dir(path) if path.is_dir() else load_cifar10_binary(path)
    except DataFormatError as exc:
        raise UsageError(str(exc)) from exc


def _resolve_policy(arg) -> AugmentPolicy:
    if arg is None:
        return default_policy()
    try:
        return AugmentPolicy.from_file(arg)
    except (OSError, PolicyError) as exc:
        raise UsageError(f"cannot load policy {arg!r}: {exc}") from exc


def _outdirs(out: str, *subdirs: str) -> pathlib.Path:
    root = pathlib.Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for sub in subdirs:
        (root / sub).mkdir(exist_ok=True)
    return root


def _write_csv(path, rows: list, fieldnames: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _load_ckpt(path: str):
    ckpt = pathlib.Path(path)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {path!r} does not exist")
    return load_checkpoint(ckpt)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------------------
# train


def _add_config_flags(sub) -> None:
    for f in dataclasses.fields(TrainConfig):
        sub.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                         default=None, metavar=f.type if isinstance(f.type, str)
                         else f.type.__name__)


def _build_config(args) -> TrainConfig:
    try:
        if args.resume is not None:
            if not pathlib.Path(args.resume).exists():
                raise UsageError(f"resume checkpoint {args.resume!r} does not exist")
            from .dualbn_model import read_tensor_archive

            _, meta = read_tensor_archive(args.resume)
            config = TrainConfig.from_dict(meta["config"])
        elif args.config is not None:
            text = pathlib.Path(args.config).read_text(encoding="utf-8")
            config = TrainConfig.from_text(text)
        else:
            config = TrainConfig()
        overrides = {}
        for pair in args.set or []:
            key, sep, value = pair.partition("=")
            if not sep:
                raise UsageError(f"--set expects key=value, got {pair!r}")
            overrides[key] = value
        for f in dataclasses.fields(TrainConfig):
            value = getattr(args, f"cfg_{f.name}")
            if value is not None:
                overrides[f.name] = value
        merged = config.with_overrides(overrides)
        if args.resume is not None and merged != config:
            changed = [key for key, value in merged.to_dict().items()
                       if config.to_dict()[key] != value]
            raise UsageError(f"--resume continues the original run; cannot change "
                             f"{changed} (use --stop-after to bound this session)")
        return merged
    except (ConfigError, ArchiveError, OSError) as exc:
        raise UsageError(str(exc)) from exc


def run_train(args) -> int:
    config = _build_config(args)
    dataset = resolve_data(args.data)
    policy = _resolve_policy(args.policy) if (config.views > 0 or args.policy) else None
    if config.method == "acat" and config.views != 0:
        raise UsageError("acat trains on the base pipeline only; set --views 0")
    if config.method == "acat" and config.bn_variant != "single":
        raise UsageError("acat uses one BN set; set --bn-variant single")

    out = _outdirs(args.out, "checkpoints", "reports", "plots")
    (out / "config.snapshot").write_text(config.to_text(), encoding="utf-8")
    trainer = train_acat if config.method == "acat" else train_dajat
    try:
        result = trainer(config, dataset, out_dir=out, policy=policy,
                         resume_from=args.resume, stop_after=args.stop_after)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    if result.metrics:
        last = result.metrics[-1]
        print(f"{result.state.label}: epoch {result.state.epoch}/{config.epochs}, "
              f"clean {last['clean_accuracy']:.2f}%, "
              f"robust {last['robust_accuracy']:.2f}%, "
              f"best epoch {result.state.best_epoch}")
    else:
        print(f"{result.state.label}: checkpoint already at epoch "
              f"{result.state.epoch}/{config.epochs}, nothing to train")
    return 0


# ---------------------------------------------------------------------------
# eval / sweep


def _suite_from_names(names: str, epsilon: float) -> dict:
    suite = {}
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        if name == "clean":
            continue  # always reported
        if name == "fgsm" or name == "bb-fgsm":
            suite[name] = AttackSpec(epsilon=epsilon, steps=1, step_size=epsilon,
                                     loss_kind="ce", zero_init=True)
            continue
        parts = name.split("-")
        if parts[0] != "pgd":
            raise UsageError(f"unknown attack name {name!r}")
        try:
            steps = int(parts[1])
        except (IndexError, ValueError) as exc:
            raise UsageError(f"unknown attack name {name!r}") from exc
        target_mode = "untargeted"
        restarts = 1
        for extra in parts[2:]:
            if extra == "ll":
                target_mode = "least_likely"
            elif extra == "rand":
                target_mode = "random_class"
            elif extra.startswith("r") and extra[1:].isdigit():
                restarts = int(extra[1:])
            else:
                raise UsageError(f"unknown attack modifier {extra!r} in {name!r}")
        suite[name] = AttackSpec(epsilon=epsilon, steps=steps, restarts=restarts,
                                 loss_kind="ce", target_mode=target_mode)
    return suite


def run_eval(args) -> int:
    state = _load_ckpt(args.ckpt)
    model = state.ema.materialize(state.model) if args.use_ema else state.model
    reference = _load_ckpt(args.reference_ckpt).model if args.reference_ckpt else None
    dataset = resolve_data(args.data)
    if args.samples:
        dataset = dataset.take(np.arange(min(len(dataset), args.samples)))
    suite = _suite_from_names(args.attacks, _fraction(args.epsilon))
    if any(n.startswith("bb-") for n in suite) and reference is None:
        raise UsageError("black-box attacks need --reference-ckpt")

    out = _outdirs(args.out, "reports")
    rng = np.random.default_rng(args.seed)
    report = evaluate(model, dataset, suite, rng, reference_model=reference)
    rows = [{"attack": "clean", "accuracy": report.clean_accuracy, "mean_loss": ""}]
    for name in suite:
        rows.append({"attack": name,
                     "accuracy": report.attack_accuracies.get(name, ""),
                     "mean_loss": report.attack_mean_loss.get(name, "")})
    _write_csv(out / "reports" / "eval.csv", rows, ["attack", "accuracy", "mean_loss"])
    for row in rows:
        acc = row["accuracy"]
        print(f"{row['attack']:>12}: {acc if acc == '' else f'{acc:.2f}%'}")
    return 0


def run_sweep(args) -> int:
    state = _load_ckpt(args.ckpt)
    dataset = resolve_data(args.data)
    if args.samples:
        dataset = dataset.take(np.arange(min(len(dataset), args.samples)))
    try:
        grid = [_fraction(e) for e in args.eps_grid.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse --eps-grid: {exc}") from exc
    out = _outdirs(args.out, "reports")
    rng = np.random.default_rng(args.seed)
    rows = sweep_rows(state.model, dataset, dataset.labels, grid,
                      steps=args.steps, restarts=args.restarts, rng=rng,
                      target_mode=args.target_mode)
    _write_csv(out / "reports" / "sweep.csv", rows,
               ["epsilon", "steps", "restarts", "mode", "accuracy", "mean_loss"])
    for row in rows:
        print(f"eps={row['epsilon']:.5f} steps={row['steps']} acc={row['accuracy']:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# analytics


def run_analyze_bn(args) -> int:
    state = _load_ckpt(args.ckpt)
    rows = bn_cosine_similarity(state.model)  # RoutingError on single-BN -> exit 2
    out = _outdirs(args.out, "reports", "plots")
    _write_csv(out / "reports" / "bn_cosine.csv", rows,
               ["layer", "mean", "var", "scale", "shift"])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(rows))
    for series in ("mean", "var", "scale", "shift"):
        ax.plot(xs, [row[series] for row in rows], marker="o", label=series)
    ax.set_xticks(xs, [row["layer"] for row in rows], rotation=45, ha="right")
    ax.set_ylabel("cosine similarity")
    ax.set_ylim(-1.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "plots" / "bn_cosine.png")
    plt.close(fig)
    print(f"{len(rows)} BN layers analyzed")
    return 0


def run_analyze_aug(args) -> int:
    dataset = resolve_data(args.data)
    policy = _resolve_policy(args.policy)
    n = min(len(dataset), args.samples)
    patch_n = min(n, args.patch_samples)
    rng = np.random.default_rng(args.seed)
    hist = {"control": [], "base": [], "policy": []}
    patch = {"control": [], "base": [], "policy": []}
    for i in range(n):
        original = dataset.pixels[i]
        one = dataset.take(np.asarray([i]))
        base_view = base_augment(one, args.pad, rng).pixels[0]
        policy_view = apply_policy(original, policy, rng)
        hist["control"].append(histogram_mse(original, original))
        hist["base"].append(histogram_mse(base_view, original))
        hist["policy"].append(histogram_mse(policy_view, original))
        if i < patch_n:
            patch["control"].append(patch_mse(original, original))
            patch["base"].append(patch_mse(base_view, original))
            patch["policy"].append(patch_mse(policy_view, original))
    rows = []
    for metric, data in (("histogram_mse", hist), ("patch_mse", patch)):
        for pair in ("control", "base", "policy"):
            values = np.asarray(data[pair])
            rows.append({"pair": pair, "metric": metric,
                         "mean": float(values.mean()), "std": float(values.std()),
                         "count": len(values)})
    out = _outdirs(args.out, "reports")
    _write_csv(out / "reports" / "aug_distance.csv", rows,
               ["pair", "metric", "mean", "std", "count"])
    for row in rows:
        print(f"{row['metric']:>14} {row['pair']:>8}: "
              f"{row['mean']:.2f} +/- {row['std']:.2f} (n={row['count']})")
    return 0


def run_loss_surface(args) -> int:
    state = _load_ckpt(args.ckpt)
    dataset = resolve_data(args.data)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} outside dataset of {len(dataset)}")
    rng = np.random.default_rng(args.seed)
    grid = loss_surface_grid(state.model, dataset.pixels[args.index],
                             int(dataset.labels[args.index]), _fraction(args.radius),
                             args.resolution, rng)
    out = _outdirs(args.out, "reports", "plots")
    rows = []
    for i, a in enumerate(grid.offsets):
        for j, b in enumerate(grid.offsets):
            rows.append({"along_gradient": a, "along_orthogonal": b,
                         "loss": grid.loss[i, j]})
    _write_csv(out / "reports" / "loss_surface.csv", rows,
               ["along_gradient", "along_orthogonal", "loss"])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.contourf(grid.offsets, grid.offsets, grid.loss.T, levels=20)
    fig.colorbar(mesh, ax=ax, label="cross-entropy")
    ax.set_xlabel("along gradient direction")
    ax.set_ylabel("along orthogonal direction")
    fig.tight_layout()
    fig.savefig(out / "plots" / "loss_surface.png")
    plt.close(fig)
    if grid.gradient_fallback:
        print("note: zero input gradient; used two random directions")
    print(f"center loss {grid.loss[args.resolution // 2, args.resolution // 2]:.4f}")
    return 0


def run_sanity(args) -> int:
    state = _load_ckpt(args.ckpt)
    reference = _load_ckpt(args.reference_ckpt).model if args.reference_ckpt else None
    dataset = resolve_data(args.data)
    rng = np.random.default_rng(args.seed)
    verdicts = masking_sanity_checks(state.model, reference, dataset, rng,
                                     epsilon=_fraction(args.epsilon),
                                     samples=args.samples)
    out = _outdirs(args.out, "reports")
    lines = [v.line() for v in verdicts]
    (out / "reports" / "sanity.txt").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")
    for line in lines:
        print(line)
    return 0


# ---------------------------------------------------------------------------
# plot


def run_plot(args) -> int:
    sources = [s for s in (args.metrics, args.sweep, args.bn_report) if s is not None]
    if len(sources) != 1:
        raise UsageError("pass exactly one of --metrics, --sweep, --bn-report")
    src = pathlib.Path(sources[0])
    if not src.exists():
        raise UsageError(f"input file {src} does not exist")
    out = _outdirs(args.out, "plots")
    plt = _plt()
    if args.metrics:
        records = []
        for line in src.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(json.loads(line))
        epochs = [r for r in records if r.get("kind") == "epoch"]
        if not epochs:
            print("no epoch records to plot", file=sys.stderr)
            return 2
        xs = [r["epoch"] for r in epochs]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, [r["clean_accuracy"] for r in epochs], label="clean")
        ax.plot(xs, [r["robust_accuracy"] for r in epochs], label="robust (quick)")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "plots" / "accuracy.png")
        plt.close(fig)
        fig, ax = plt.subplots(figsize=(6, 4))
        for series in ("loss", "ce", "kl", "jsd"):
            ax.plot(xs, [r[series] for r in epochs], label=series)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "plots" / "loss.png")
        plt.close(fig)
        print(f"plotted {len(epochs)} epochs")
        return 0
    with open(src, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print(f"{src} holds no data rows", file=sys.stderr)
        return 2
    fig, ax = plt.subplots(figsize=(6, 4))
    if args.sweep:
        ax.plot([float(r["epsilon"]) for r in rows],
                [float(r["accuracy"]) for r in rows], marker="o")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("accuracy (%)")
        name = "sweep.png"
    else:
        xs = np.arange(len(rows))
        for series in ("mean", "var", "scale", "shift"):
            ax.plot(xs, [float(r[series]) for r in rows], marker="o", label=series)
        ax.set_xticks(xs, [r["layer"] for r in rows], rotation=45, ha="right")
        ax.set_ylabel("cosine similarity")
        ax.legend()
        name = "bn_cosine.png"
    fig.tight_layout()
    fig.savefig(out / "plots" / name)
    plt.close(fig)
    print(f"plotted {len(rows)} rows")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dajat", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    train = sub.add_parser("train", help="run a training loop")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--config", default=None)
    train.add_argument("--set", action="append", metavar="KEY=VALUE")
    train.add_argument("--policy", default=None)
    train.add_argument("--resume", default=None)
    train.add_argument("--stop-after", type=int, default=None,
                       help="pause after this epoch; resume later with --resume")
    _add_config_flags(train)
    train.set_defaults(func=run_train)

    ev = sub.add_parser("eval", help="accuracy under an attack suite")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--attacks", default="fgsm,pgd-20,pgd-100")
    ev.add_argument("--epsilon", default="8/255")
    ev.add_argument("--samples", type=int, default=0)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--reference-ckpt", default=None)
    ev.add_argument("--use-ema", action="store_true")
    ev.set_defaults(func=run_eval)

    sw = sub.add_parser("sweep", help="accuracy over an epsilon grid")
    sw.add_argument("--ckpt", required=True)
    sw.add_argument("--data", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--eps-grid", default="0,2/255,4/255,8/255,16/255,32/255")
    sw.add_argument("--steps", type=int, default=20)
    sw.add_argument("--restarts", type=int, default=1)
    sw.add_argument("--target-mode", default="untargeted")
    sw.add_argument("--samples", type=int, default=512)
    sw.add_argument("--seed", type=int, default=0)
    sw.set_defaults(func=run_sweep)

    bn = sub.add_parser("analyze-bn", help="cosine similarity of the two BN sets")
    bn.add_argument("--ckpt", required=True)
    bn.add_argument("--out", required=True)
    bn.set_defaults(func=run_analyze_bn)

    aug = sub.add_parser("analyze-aug", help="augmentation distance statistics")
    aug.add_argument("--data", required=True)
    aug.add_argument("--out", required=True)
    aug.add_argument("--samples", type=int, default=500)
    aug.add_argument("--patch-samples", type=int, default=64)
    aug.add_argument("--pad", type=int, default=4)
    aug.add_argument("--policy", default=None)
    aug.add_argument("--seed", type=int, default=0)
    aug.set_defaults(func=run_analyze_aug)

    surf = sub.add_parser("loss-surface", help="loss grid around one sample")
    surf.add_argument("--ckpt", required=True)
    surf.add_argument("--data", required=True)
    surf.add_argument("--out", required=True)
    surf.add_argument("--index", type=int, default=0)
    surf.add_argument("--radius", default="16/255")
    surf.add_argument("--resolution", type=int, default=21)
    surf.add_argument("--seed", type=int, default=0)
    surf.set_defaults(func=run_loss_surface)

    san = sub.add_parser("sanity", help="gradient-masking checklist")
    san.add_argument("--ckpt", required=True)
    san.add_argument("--data", required=True)
    san.add_argument("--out", required=True)
    san.add_argument("--reference-ckpt", default=None)
    san.add_argument("--epsilon", default="8/255")
    san.add_argument("--samples", type=int, default=512)
    san.add_argument("--seed", type=int, default=0)
    san.set_defaults(func=run_sanity)

    plot = sub.add_parser("plot", help="render metrics or report files")
    plot.add_argument("--metrics", default=None)
    plot.add_argument("--sweep", default=None)
    plot.add_argument("--bn-report", default=None)
    plot.add_argument("--out", required=True)
    plot.set_defaults(func=run_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
