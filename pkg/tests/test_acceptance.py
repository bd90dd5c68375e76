"""Acceptance gate: one test per shipped guarantee.

Each test records a single verdict line with its measured values and then
asserts; the lines come out in the terminal summary after the run, so the
pytest log always carries every criterion's PASS/FAIL regardless of output
capture. The desk-scale experiments train on the bundled synthetic stand-in
unless DAJAT_CIFAR10 points at a directory of CIFAR-10 .bin batches.
"""

import math
import os
import time

import numpy as np
import pytest
import torch

from dajat.attacks import AttackSpec, classification_accuracy, sweep_rows
from dajat.core_config import TrainConfig, attack_steps_at, epsilon_at, lr_at
from dajat.data_augment import (base_augment, default_policy, apply_policy,
                                histogram_mse, load_cifar10_binary, load_cifar10_dir,
                                synth_dataset)
from dajat.dualbn_model import (as_label_tensor, as_model_input, inference_forward,
                                named_state)
from dajat.eval_harness import evaluate
from dajat.losses import cross_entropy, dajat_loss, jsd, kl_div, softmax_probs, trades_loss
from dajat.training import load_checkpoint, save_checkpoint, train_acat, train_dajat
from dajat.weight_space import apply_perturbation, awp_perturb, remove_perturbation

from conftest import ACCEPTANCE_LINES, tiny_batch, tiny_model
from test_dualbn_model import PlainNet, _randomize_aux
from test_losses import (_inputs, analytic_grads, fd_model, flat_params,
                         grad_rel_error, numeric_grad)

EPS = 8 / 255


def _verdict(num, name, passed, detail):
    tag = "PASS" if passed else "FAIL"
    line = f"[acceptance] {num:02d} {name}: {tag} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, f"criterion {num} {name}: {detail}"


# ---------------------------------------------------------------------------
# desk-scale fixtures, shared by criteria 7-9


DESK = dict(epochs=30, lr_max=0.1, batch_size=128, channels="8,16,32",
            attack_steps="2", epsilon_max=EPS, pad=4, val_split=1000,
            quick_eval_samples=512)
SEEDS = (0, 1, 2)


def _desk_dataset(n, offset, fallback_seed):
    root = os.environ.get("DAJAT_CIFAR10")
    if root:
        path = os.fspath(root)
        data = (load_cifar10_dir(path) if os.path.isdir(path)
                else load_cifar10_binary(path))
        return data.take(np.arange(offset, offset + n))
    return synth_dataset(n, 10, seed=fallback_seed)


@pytest.fixture(scope="module")
def desk_train():
    return _desk_dataset(5000, 0, fallback_seed=0)


@pytest.fixture(scope="module")
def desk_test():
    return _desk_dataset(1024, 5000, fallback_seed=123)


def _train_runs(trainer, config_for_seed, dataset, out_root):
    runs = {}
    for seed in SEEDS:
        start = time.monotonic()
        result = trainer(config_for_seed(seed), dataset,
                         out_dir=out_root / f"seed{seed}")
        runs[seed] = (result, time.monotonic() - start)
    return runs


@pytest.fixture(scope="module")
def acat_runs(desk_train, tmp_path_factory):
    return _train_runs(
        train_acat,
        lambda s: TrainConfig(method="acat", views=0, bn_variant="single",
                              beta=8.0, seed=s, **DESK),
        desk_train, tmp_path_factory.mktemp("acc-acat"))


@pytest.fixture(scope="module")
def dajat_split_runs(desk_train, tmp_path_factory):
    return _train_runs(
        train_dajat,
        lambda s: TrainConfig(method="dajat", views=2, bn_variant="split_both",
                              beta=9.0, lambda_js=2.0, seed=s, **DESK),
        desk_train, tmp_path_factory.mktemp("acc-dajat-split"))


@pytest.fixture(scope="module")
def dajat_single_runs(desk_train, tmp_path_factory):
    return _train_runs(
        train_dajat,
        lambda s: TrainConfig(method="dajat", views=2, bn_variant="single",
                              beta=9.0, lambda_js=2.0, seed=s, **DESK),
        desk_train, tmp_path_factory.mktemp("acc-dajat-single"))


def _pgd20_accuracy(model, dataset, seed=0):
    report = evaluate(model, dataset, {"pgd-20": AttackSpec(epsilon=EPS, steps=20)},
                      np.random.default_rng(seed))
    return report.attack_accuracies["pgd-20"]


# ---------------------------------------------------------------------------
# 1. schedule exactness


def test_criterion_01_schedule_exactness():
    start = time.monotonic()
    epochs, eps_max, lr_max = 110, EPS, 0.2
    worst = 0.0
    for epoch in range(1, epochs + 1):
        want_eps = epoch * eps_max / epochs
        want_lr = 0.5 * lr_max * (1.0 + math.cos((epoch - 1) / epochs * math.pi))
        for got, want in ((epsilon_at(epoch, epochs, eps_max), want_eps),
                          (lr_at(epoch, epochs, lr_max), want_lr)):
            worst = max(worst, abs(got - want) / max(abs(want), 1e-300))
    bands = TrainConfig(attack_steps="1-50:2,51-100:3,101-110:4").step_schedule()
    exact_bands = all(attack_steps_at(e, bands) == (2 if e <= 50 else 3 if e <= 100 else 4)
                      for e in range(1, 111))
    elapsed = time.monotonic() - start
    _verdict(1, "schedule-exactness",
             worst <= 1e-12 and exact_bands and elapsed < 1.0,
             f"max rel err {worst:.2e}, bands exact {exact_bands}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. loss-gradient oracle


def test_criterion_02_loss_gradient_oracle():
    start = time.monotonic()
    model = fd_model(bn_variant="split_both")
    assert sum(p.numel() for p in model.parameters()) <= 200
    x, x_adv, y = _inputs(model)
    x2, x2_adv, _ = _inputs(model, seed=1)
    params = flat_params(model)

    closures = {
        "ce": lambda: cross_entropy(model(x, tag="base"), y),
        "kl": lambda: kl_div(softmax_probs(model(x, tag="base")),
                             softmax_probs(model(x_adv, tag="base"))),
        "jsd": lambda: jsd([softmax_probs(model(x, tag="base")),
                            softmax_probs(model(x2, tag="complex"))]),
        "dajat": lambda: dajat_loss(model, [(x, "base"), (x2, "complex")],
                                    [(x_adv, "base"), (x2_adv, "complex")], y,
                                    beta=6.0, lambda_js=2.0).total,
    }
    for beta in (0.0, 6.0, 9.0):
        closures[f"trades-b{beta:g}"] = (
            lambda b=beta: trades_loss(model, x, x_adv, y, b).total)

    worst = {}
    for name, closure in closures.items():
        analytic = analytic_grads(closure(), params)
        numeric = numeric_grad(lambda: float(closure().detach()), params)
        worst[name] = grad_rel_error(analytic, numeric)
    elapsed = time.monotonic() - start
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    _verdict(2, "loss-gradient-oracle", not bad and elapsed < 60.0,
             f"max rel err {max(worst.values()):.2e} over {sorted(worst)}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. divergence algebra


def test_criterion_03_divergence_algebra():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    ok = True
    for k in (2, 3, 5, 10):
        for _ in range(250):
            p = torch.from_numpy(rng.dirichlet(np.ones(k), size=3))
            q = torch.from_numpy(rng.dirichlet(np.ones(k), size=3))
            kl = float(kl_div(p, q))
            js = float(jsd([p, q]))
            perm = rng.permutation(k)
            ok &= kl >= 0.0
            ok &= -1e-12 <= js <= math.log(k) + 1e-10
            ok &= abs(float(kl_div(p[:, perm], q[:, perm])) - kl) <= 1e-10
            ok &= abs(float(jsd([q, p])) - js) <= 1e-10
            ok &= float(kl_div(p, p)) <= 1e-12

    one_hot = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    uniform = torch.full((1, 2), 0.5, dtype=torch.float64)
    log2_kl = abs(float(kl_div(one_hot, uniform)) - math.log(2.0))
    log2_js = abs(float(jsd([one_hot, one_hot.flip(1)])) - math.log(2.0))
    elapsed = time.monotonic() - start
    _verdict(3, "divergence-algebra",
             ok and log2_kl <= 1e-10 and log2_js <= 1e-10 and elapsed < 10.0,
             f"1000 draws ok {ok}, log2 errs {log2_kl:.1e}/{log2_js:.1e}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. AWP feasibility


def test_criterion_04_awp_feasibility():
    start = time.monotonic()
    gamma = 0.01
    worst_ratio = 0.0
    for seed in range(100):
        model = tiny_model(channels=(2,), num_classes=2, seed=seed)
        batch = tiny_batch(n=4, num_classes=2, size=6, seed=seed)
        x, y = as_model_input(batch), as_label_tensor(batch.labels)
        norms = {name: float(p.detach().norm())
                 for name, p in model.named_parameters() if p.requires_grad}
        pert = awp_perturb(
            model, lambda: cross_entropy(model(x, tag="base"), y), gamma)
        for name, delta in pert.deltas.items():
            bound = gamma * norms[name]
            if bound > 0:
                worst_ratio = max(worst_ratio, float(delta.norm()) / bound)

    model = tiny_model(channels=(2,), num_classes=2, seed=7)
    batch = tiny_batch(n=4, num_classes=2, size=6, seed=7)
    x, y = as_model_input(batch), as_label_tensor(batch.labels)
    model.eval()
    with torch.no_grad():
        before = float(cross_entropy(model(x, tag="base"), y))
    empty = awp_perturb(model, lambda: cross_entropy(model(x, tag="base"), y), 0.0)
    apply_perturbation(model, empty)
    remove_perturbation(model, empty)
    with torch.no_grad():
        after = float(cross_entropy(model(x, tag="base"), y))
    elapsed = time.monotonic() - start
    _verdict(4, "awp-feasibility",
             worst_ratio <= 1.0 + 1e-6 and empty.deltas == {} and before == after
             and elapsed < 60.0,
             f"worst norm ratio {worst_ratio:.9f}, gamma-0 loss delta "
             f"{after - before:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. split-BN isolation


def test_criterion_05_split_bn_isolation():
    start = time.monotonic()
    model = tiny_model(bn_variant="split_both")
    batch = tiny_batch()
    before = inference_forward(model, batch)
    _randomize_aux(model)
    bit_exact = torch.equal(before, inference_forward(model, batch))

    channels, num_classes = (4, 8), 4
    single = tiny_model(bn_variant="single", channels=channels,
                        num_classes=num_classes)
    oracle = PlainNet(channels, num_classes)
    with torch.no_grad():
        for mine, ref in zip(single.convs, oracle.convs):
            ref.weight.copy_(mine.weight)
        for mine, ref in zip(single.bns, oracle.bns):
            ref.weight.copy_(mine.weight_base)
            ref.bias.copy_(mine.bias_base)
            ref.running_mean.copy_(mine.running_mean_base)
            ref.running_var.copy_(mine.running_var_base)
        oracle.head.weight.copy_(single.head.weight)
        oracle.head.bias.copy_(single.head.bias)
    single.train()
    oracle.train()
    worst = 0.0
    with torch.no_grad():
        for step in range(3):
            x = as_model_input(tiny_batch(seed=step))
            worst = max(worst, float((single(x, tag="base") - oracle(x)).abs().max()))
        single.eval()
        oracle.eval()
        x = as_model_input(tiny_batch(seed=9))
        worst = max(worst, float((single(x, tag="base") - oracle(x)).abs().max()))
    elapsed = time.monotonic() - start
    _verdict(5, "split-bn-isolation",
             bit_exact and worst <= 1e-6 and elapsed < 60.0,
             f"aux leak bit-exact {bit_exact}, plain-BN max diff {worst:.2e}, "
             f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. reduction equivalence


def test_criterion_06_reduction_equivalence():
    start = time.monotonic()
    data = synth_dataset(256, 10, seed=0)
    shared = dict(epochs=3, views=0, bn_variant="single", lambda_js=0.0,
                  beta=6.0, lr_max=0.1, batch_size=128, channels="4,8",
                  val_split=32, quick_eval_samples=32, seed=0)
    a = train_acat(TrainConfig(method="acat", **shared), data)
    d = train_dajat(TrainConfig(method="dajat", **shared), data)
    sa, sd = named_state(a.state.model), named_state(d.state.model)
    worst = max(float(np.abs(sa[name] - sd[name]).max()) for name in sa)
    elapsed = time.monotonic() - start
    _verdict(6, "reduction-equivalence", worst <= 1e-6 and elapsed < 300.0,
             f"max param diff {worst:.2e} over 3 epochs / 256 samples, "
             f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. desk-scale ACAT stability


def test_criterion_07_acat_stability(acat_runs, desk_test):
    result, train_seconds = acat_runs[0]
    start = time.monotonic()
    epoch_records = [r for r in result.metrics if r["kind"] == "epoch"]
    last = epoch_records[-1]["select_accuracy"]
    best = result.state.best_metric
    gap = abs(last - best)

    grid = [0.0, 2 / 255, 4 / 255, EPS, 16 / 255, 32 / 255, 0.25, 0.5]
    subset = desk_test.take(np.arange(512))
    rows = sweep_rows(result.state.model, subset, subset.labels, grid,
                      steps=20, restarts=1, rng=np.random.default_rng(0))
    accs = [row["accuracy"] for row in rows]
    inversions = sum(1 for a, b in zip(accs, accs[1:]) if b > a + 0.25)
    elapsed = time.monotonic() - start
    _verdict(7, "acat-stability",
             gap <= 2.0 and last > 0.0 and inversions == 0 and accs[-1] <= 1.0
             and train_seconds <= 1800.0,
             f"last {last:.2f}% best {best:.2f}% gap {gap:.2f}, sweep "
             f"{['%.1f' % a for a in accs]}, train {train_seconds:.0f}s")


# ---------------------------------------------------------------------------
# 8. desk-scale DAJAT direction


def test_criterion_08_dajat_direction(acat_runs, dajat_split_runs,
                                      dajat_single_runs, desk_test):
    subset = desk_test.take(np.arange(512))

    def mean_clean(runs):
        return float(np.mean([classification_accuracy(
            runs[s][0].state.model, desk_test, desk_test.labels) for s in SEEDS]))

    def mean_robust(runs):
        return float(np.mean([_pgd20_accuracy(runs[s][0].state.model, subset)
                              for s in SEEDS]))

    acat_clean = mean_clean(acat_runs)
    split_clean = mean_clean(dajat_split_runs)
    split_robust = mean_robust(dajat_split_runs)
    single_robust = mean_robust(dajat_single_runs)
    total_train = sum(sec for runs in (acat_runs, dajat_split_runs,
                                       dajat_single_runs)
                      for _, sec in runs.values())
    _verdict(8, "dajat-direction",
             split_clean >= acat_clean - 0.5 and split_robust >= single_robust
             and total_train <= 7200.0,
             f"clean dajat {split_clean:.2f}% vs acat {acat_clean:.2f}%, "
             f"robust split {split_robust:.2f}% vs single {single_robust:.2f}%, "
             f"3 seeds, train {total_train:.0f}s")


# ---------------------------------------------------------------------------
# 9. attack orderings


def test_criterion_09_attack_orderings(acat_runs, desk_test):
    start = time.monotonic()
    model = acat_runs[0][0].state.model
    reference = acat_runs[1][0].state.model
    subset = desk_test.take(np.arange(512))
    fgsm = AttackSpec(epsilon=EPS, steps=1, step_size=EPS, loss_kind="ce",
                      zero_init=True)
    suite = {
        "fgsm": fgsm,
        "pgd-20": AttackSpec(epsilon=EPS, steps=20),
        "pgd-100": AttackSpec(epsilon=EPS, steps=100),
        "bb-fgsm": fgsm,
    }
    report = evaluate(model, subset, suite, np.random.default_rng(0),
                      reference_model=reference)
    acc = report.attack_accuracies
    chain = (acc["pgd-100"] <= acc["pgd-20"] + 1e-9
             and acc["pgd-20"] <= acc["fgsm"] + 1e-9
             and acc["fgsm"] <= report.clean_accuracy + 1e-9)
    black_box = acc["bb-fgsm"] >= acc["fgsm"] - 1e-9

    restart_accs = []
    for restarts in (1, 2, 5):
        spec = AttackSpec(epsilon=EPS, steps=20, restarts=restarts)
        # one batch keeps the init stream a shared prefix, so candidate
        # pools nest per sample and accuracy cannot rise with restarts
        rep = evaluate(model, subset, {"pgd": spec}, np.random.default_rng(0),
                       batch_size=len(subset))
        restart_accs.append(rep.attack_accuracies["pgd"])
    monotone = all(b <= a + 1e-9 for a, b in zip(restart_accs, restart_accs[1:]))
    elapsed = time.monotonic() - start
    _verdict(9, "attack-orderings",
             chain and black_box and monotone and elapsed < 900.0,
             f"clean {report.clean_accuracy:.2f} fgsm {acc['fgsm']:.2f} "
             f"pgd20 {acc['pgd-20']:.2f} pgd100 {acc['pgd-100']:.2f} "
             f"bb {acc['bb-fgsm']:.2f}, restarts {restart_accs}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. augmentation-distance ordering


def test_criterion_10_augmentation_distance():
    start = time.monotonic()
    data = synth_dataset(500, 10, seed=7)
    policy = default_policy()
    rng = np.random.default_rng(0)
    base_d, policy_d, control = [], [], []
    for i in range(len(data)):
        original = data.pixels[i]
        base_view = base_augment(data.take(np.asarray([i])), 4, rng).pixels[0]
        policy_view = apply_policy(original, policy, rng)
        control.append(histogram_mse(original, original))
        base_d.append(histogram_mse(base_view, original))
        policy_d.append(histogram_mse(policy_view, original))
    elapsed = time.monotonic() - start
    _verdict(10, "augmentation-distance",
             np.mean(policy_d) > np.mean(base_d) and max(control) == 0.0
             and elapsed < 300.0,
             f"policy {np.mean(policy_d):.1f} > base {np.mean(base_d):.1f}, "
             f"controls all 0: {max(control) == 0.0}, n=500, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 11. persistence


def test_criterion_11_persistence(tmp_path):
    start = time.monotonic()
    data = synth_dataset(256, 10, seed=0)
    config = TrainConfig(method="acat", epochs=3, views=0, bn_variant="single",
                         beta=6.0, lr_max=0.1, batch_size=128, channels="4,8",
                         val_split=32, quick_eval_samples=32, seed=0)

    straight = train_acat(config, data, out_dir=tmp_path / "straight",
                          stop_after=2)
    paused = train_acat(config, data, out_dir=tmp_path / "paused", stop_after=1)
    resumed = train_acat(config, data, out_dir=tmp_path / "paused",
                         resume_from=paused.last_path, stop_after=2)
    sa = named_state(straight.state.model)
    sb = named_state(resumed.state.model)
    resume_diff = max(float(np.abs(sa[name] - sb[name]).max()) for name in sa)

    ckpt_a = tmp_path / "a.ckpt"
    ckpt_b = tmp_path / "b.ckpt"
    save_checkpoint(straight.state, ckpt_a)
    save_checkpoint(load_checkpoint(ckpt_a), ckpt_b)
    round_trip = ckpt_a.read_bytes() == ckpt_b.read_bytes()
    elapsed = time.monotonic() - start
    _verdict(11, "persistence",
             round_trip and resume_diff <= 1e-6 and elapsed < 300.0,
             f"round-trip bitwise {round_trip}, resume max param diff "
             f"{resume_diff:.2e}, {elapsed:.0f}s")
