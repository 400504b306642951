"""Acceptance gate: six criteria, one printed PASS line each.

Run with `pytest tests/test_acceptance.py -v -s`. The qualitative-claim
run (criterion 5) trains 42 fold jobs and dominates the runtime; everything
else finishes in a couple of minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import conv3d_loops, grad_check

from kneedg.cli import fixture_path, main
from kneedg.experiment import (ExperimentConfig, column_stats, generate_to_disk,
                               run_experiment)
from kneedg.gin import GinConfig, augment, sample_gin
from kneedg.losses import ViewBatch, prediction_entropy, supcon_loss
from kneedg.metrics import (paired_t_one_sided, regularized_incomplete_beta, roc_auc,
                            student_t_cdf)
from kneedg.network import Model, NetConfig, NormKind
from kneedg.rng import RngStream
from kneedg.tensor import (RunningStats, Tensor, batch_norm, conv3d, conv3d_raw,
                           global_avg_pool, instance_norm, linear, log_softmax,
                           maxpool3d, relu, softmax)
from kneedg.training import EpochLog, select_checkpoint


# ---------------------------------------------------------------------------
# criterion 1: statistical reproduction from the published per-fold numbers

EXPECTED_MEAN_STD = {
    "baseline_source_val": (0.7392, 0.0293),
    "baseline_target_val": (0.5216, 0.0275),
    "baseline_source_test": (0.7129, 0.0443),
    "baseline_target_test": (0.5287, 0.0317),
    "proposed_source_val": (0.7940, 0.0247),
    "proposed_target_val": (0.6659, 0.0375),
    "proposed_source_test": (0.7412, 0.0290),
    "proposed_target_test": (0.7004, 0.0249),
}
EXPECTED_P = {
    "source_val": 7.375e-3,
    "target_val": 6.665e-6,
    "source_test": 3.109e-2,
    "target_test": 6.046e-8,
}


def test_criterion_1_statistical_reproduction():
    t0 = time.perf_counter()
    stats, pairs = column_stats(fixture_path())
    for name, (mean, std) in EXPECTED_MEAN_STD.items():
        got_mean, got_std = stats[name]
        assert round(got_mean, 4) == mean, f"{name} mean {got_mean:.6f} != {mean}"
        assert round(got_std, 4) == std, f"{name} std {got_std:.6f} != {std}"
    assert len(pairs) == 4
    for name, _, p in pairs:
        expected = EXPECTED_P[name]
        assert abs(p - expected) / expected < 0.05, f"{name} p={p:.3e} not within 5%"
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"\n[criterion 1] PASS: 8 mean/std cells to 4 decimals, "
          f"4 p-values within 5%, {elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------------------
# criterion 2: finite-difference gradient suite, >= 20 seeds

def _away_from_zero(a, margin=0.1):
    return a + margin * np.sign(a) + (a == 0) * margin


def _op_checks(rng):
    x = Tensor(rng.normal(size=(2, 3)), grad_enabled=True)
    y = Tensor(rng.normal(size=(2, 3)) + 2.5, grad_enabled=True)
    grad_check(lambda a, b: ((a * b + a - b) / b).sum(), [x, y], step=1e-4)
    grad_check(lambda a: (a ** 3.0).mean(), [x], step=1e-4)
    m = Tensor(rng.normal(size=(2, 4)), grad_enabled=True)
    n = Tensor(rng.normal(size=(4, 3)), grad_enabled=True)
    grad_check(lambda a, b: (a @ b).sum(), [m, n], step=1e-4)
    p = Tensor(np.abs(rng.normal(size=(2, 3))) + 0.5, grad_enabled=True)
    grad_check(lambda a: (a.log().exp() * a).sum(), [p], step=1e-4)
    grad_check(lambda a: a.reshape((3, 2)).sum(axis=0).mean(), [x], step=1e-4)
    grad_check(lambda a: softmax(a).sum(axis=1, keepdims=False).sum()
               + (log_softmax(a) * Tensor(np.ones((2, 3)))).sum(), [x], step=1e-4)

    xc = Tensor(rng.normal(size=(1, 2, 5, 5, 5)), grad_enabled=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)) * 0.4, grad_enabled=True)
    b = Tensor(rng.normal(size=2), grad_enabled=True)
    grad_check(lambda a, ww, bb: conv3d(a, ww, bb, (2, 2, 2), (1, 1, 1)).sum(),
               [xc, w, b], step=1e-4)
    xp = Tensor(_away_from_zero(rng.normal(size=(1, 2, 4, 4, 4))), grad_enabled=True)
    grad_check(lambda a: maxpool3d(a, (2, 2, 2)).sum(), [xp], step=1e-4)
    grad_check(lambda a: relu(a).sum(), [xp], step=1e-4)

    xn = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), grad_enabled=True)
    gamma = Tensor(rng.normal(size=2) + 2.0, grad_enabled=True)
    beta = Tensor(rng.normal(size=2), grad_enabled=True)
    fixed = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    grad_check(lambda a, g, bb: (batch_norm(a, g, bb, 1e-5, True, RunningStats(2))
                                 * fixed).sum(), [xn, gamma, beta], step=1e-4)
    grad_check(lambda a, g, bb: (instance_norm(a, g, bb, 1e-5) * fixed).sum(),
               [xn, gamma, beta], step=1e-4)
    grad_check(lambda a: global_avg_pool(a).sum(), [xn], step=1e-4)

    xl = Tensor(rng.normal(size=(2, 4)), grad_enabled=True)
    wl = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    bl = Tensor(rng.normal(size=3), grad_enabled=True)
    grad_check(lambda a, ww, bb: linear(a, ww, bb).sum(), [xl, wl, bl], step=1e-4)


def _network_check(seed, norm_kind):
    # 6x6x6 keeps the post-pool spatial extent at 2x2x2; anything smaller
    # collapses to one voxel and instance norm zeroes the whole signal
    cfg = NetConfig(input_shape=(1, 6, 6, 6), stem_channels=2, n_residual_blocks=1,
                    channel_schedule=((2, 1),), norm_kind=norm_kind)
    model = Model(cfg, RngStream(seed, "gradnet"))
    data = np.random.default_rng(seed).normal(size=(1, 1, 6, 6, 6))
    x = Tensor(data, grad_enabled=True)
    target = Tensor(np.array([[1.0, 0.0]]))
    probe = Tensor(np.random.default_rng(seed + 500).normal(size=(1, 2)))

    def loss_fn(inp):
        logits, emb = model.forward(inp, training=True)
        return (log_softmax(logits) * target).sum() * -1.0 + (emb * probe).sum() * 0.1

    leaves = [x] + model.parameters()

    def make_loss(*args):
        for param, arg in zip(model.parameters(), args[1:]):
            param.data = arg.data
        return loss_fn(args[0])

    # A relu or pool argmax can flip inside the central-difference window,
    # which poisons the numeric estimate even though the tape gradient is
    # right. Shrinking the step moves the window off the kink, so accept
    # the first step that agrees; a genuine gradient bug fails at every
    # step size.
    for attempt in (1e-4, 1e-5):
        try:
            grad_check(make_loss, leaves, step=attempt)
            return
        except AssertionError:
            if attempt == 1e-5:
                raise


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    n_seeds = 20
    for seed in range(n_seeds):
        _op_checks(np.random.default_rng(1000 + seed))
        _network_check(seed, NormKind.BATCH if seed % 2 == 0 else NormKind.INSTANCE)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"\n[criterion 2] PASS: op + full-network finite differences over "
          f"{n_seeds} seeds, rel err < 1e-4, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# criterion 3: oracle equivalence

def _supcon_direct(embeddings, labels, tau):
    """Straight transliteration of the loss definition, no stabilization."""
    z = np.asarray(embeddings, dtype=float)
    sim = z @ z.T / tau
    n = len(labels)
    per_anchor = []
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(sim[i, j]) for j in range(n) if j != i)
        terms = [sim[i, j] - math.log(denom) for j in positives]
        per_anchor.append(-sum(terms) / len(positives))
    return sum(per_anchor) / len(per_anchor)


def _auc_by_counting(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def _t_cdf_by_integration(t, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    xs = np.linspace(0.0, abs(t), 1_000_001)
    dens = c * (1.0 + xs ** 2 / df) ** (-(df + 1) / 2)
    half = float(np.trapezoid(dens, xs))
    return 0.5 + half if t >= 0 else 0.5 - half


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(7)
    worst_conv = 0.0
    for stride, padding in (((1, 1, 1), (0, 0, 0)), ((2, 1, 2), (1, 1, 0))):
        x = rng.normal(size=(2, 2, 5, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        ours = conv3d_raw(x, w, b, stride, padding)
        ref = conv3d_loops(x, w, b, stride, padding)
        worst_conv = max(worst_conv, np.abs(ours - ref).max())
    assert worst_conv < 1e-12

    for trial in range(30):
        n = int(rng.integers(4, 21))
        labels = np.zeros(n, dtype=int)
        labels[: n // 2] = 1
        rng.shuffle(labels)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)  # duplicates force tie handling
        assert roc_auc(scores, labels) == _auc_by_counting(scores, labels)

    # three-row case: two aligned same-class rows plus an orthogonal one
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    batch = ViewBatch(embeddings=Tensor(z), class_labels=np.array([0, 0, 1]),
                      image_ids=np.array([0, 1, 2]))
    got = supcon_loss(batch, tau=1.0).item()
    assert abs(got - 0.313262) < 1e-6
    assert abs(got - _supcon_direct(z, [0, 0, 1], 1.0)) < 1e-6
    worst_sup = 0.0
    for trial in range(10):
        m = int(rng.integers(3, 8))
        z = rng.normal(size=(m, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = rng.integers(0, 2, size=m)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        batch = ViewBatch(embeddings=Tensor(z), class_labels=labels,
                          image_ids=np.arange(m))
        got = supcon_loss(batch, tau=0.3).item()
        ref = _supcon_direct(z, labels, 0.3)
        worst_sup = max(worst_sup, abs(got - ref))
    assert worst_sup < 1e-6

    worst_cdf = 0.0
    for t, df in ((0.0, 3), (1.5, 5), (-2.25, 4), (4.0, 3), (0.7, 20), (-0.3, 7)):
        worst_cdf = max(worst_cdf, abs(student_t_cdf(t, df) - _t_cdf_by_integration(t, df)))
    assert worst_cdf < 1e-8
    # closed form I_x(1, b) = 1 - (1-x)^b as an extra anchor
    assert abs(regularized_incomplete_beta(1.0, 3.0, 0.4) - (1 - 0.6 ** 3)) < 1e-12

    print(f"\n[criterion 3] PASS: conv3d max |diff| {worst_conv:.1e}, "
          f"roc_auc exact on 30 trials, supcon within {worst_sup:.1e} "
          f"(incl. 0.313262 case), t CDF within {worst_cdf:.1e}")


# ---------------------------------------------------------------------------
# criterion 4: mechanism invariants

def test_criterion_4_mechanism_invariants():
    rng = RngStream(3, "invariants")
    vol = np.abs(np.random.default_rng(3).normal(size=(6, 8, 8))) + 0.1
    g = sample_gin(rng, GinConfig())
    out = augment(vol, g, 0.0, GinConfig())
    assert out.dtype == vol.dtype and np.array_equal(out, vol)

    # instance-norm nets ignore per-sample affine intensity remaps; eps is
    # set tiny so the mathematical identity is visible at 1e-9
    cfg = NetConfig(input_shape=(1, 6, 8, 8), stem_channels=2, n_residual_blocks=1,
                    channel_schedule=((4, 2),), norm_kind=NormKind.INSTANCE, eps=1e-12)
    model = Model(cfg, RngStream(4, "affine"))
    x = np.random.default_rng(5).normal(size=(2, 1, 6, 8, 8))
    base_logits, _ = model.forward(Tensor(x))
    remapped = x * 3.7 + 1.9
    remap_logits, _ = model.forward(Tensor(remapped))
    affine_dev = np.abs(base_logits.data - remap_logits.data).max()
    assert affine_dev < 1e-9

    batch4 = np.random.default_rng(6).normal(size=(4, 1, 6, 8, 8))
    together, _ = model.forward(Tensor(batch4))
    solo = np.concatenate([model.forward(Tensor(batch4[i:i + 1]))[0].data
                           for i in range(4)])
    comp_dev = np.abs(together.data - solo).max()
    assert comp_dev < 1e-9

    ent = prediction_entropy(np.array([[0.5, 0.5]]))
    ent_dev = abs(ent - math.log(2.0))
    assert ent_dev < 1e-12

    def log(i, acc, ent_):
        return EpochLog(epoch=i, train_loss=1.0, source_val_accuracy=acc,
                        target_val_entropy=ent_, checkpoint_path=f"e{i}")

    logs = [log(0, 0.70, 0.50), log(1, 0.50, 0.10), log(2, 0.72, 0.40)]
    sel = select_checkpoint(logs, 0.65)
    assert sel.epoch_index == 2 and not sel.fallback  # 0.10 entropy is unqualified
    logs = [log(0, 0.70, 0.40), log(1, 0.80, 0.40), log(2, 0.90, 0.40)]
    sel = select_checkpoint(logs, 0.65)
    assert sel.epoch_index == 0 and not sel.fallback  # tie on entropy: earliest
    logs = [log(0, 0.55, 0.20), log(1, 0.60, 0.10), log(2, 0.58, 0.05)]
    sel = select_checkpoint(logs, 0.65)
    assert sel.epoch_index == 1 and sel.fallback  # nothing qualifies: best accuracy

    print(f"\n[criterion 4] PASS: gin alpha=0 bit-exact, affine invariance "
          f"{affine_dev:.1e}, batch-composition {comp_dev:.1e}, uniform entropy "
          f"within {ent_dev:.1e} of ln 2, selection examples hold")


# ---------------------------------------------------------------------------
# criterion 6: determinism of cmd_run (cheap, so it runs before criterion 5)

def _mini_config(out_dir):
    return {
        "schema_version": 1, "seed": 11, "output_dir": str(out_dir),
        "n_folds": 3, "source_val_size": 2,
        "cohort": {"n_pairs": 7, "volume_dims": [6, 8, 8], "n_blobs": 3, "seed": 11},
        "net": {"input_shape": [1, 6, 8, 8], "stem_channels": 2,
                "n_residual_blocks": 1, "channel_schedule": [[4, 2]]},
        "baseline": {"epochs": 2, "batch_size": 4, "lr": 0.05,
                     "loss": {"contrastive_weight": 0.0}, "gin": None,
                     "norm_kind": "batch", "seed": 11},
        "proposed": {"epochs": 2, "batch_size": 4, "lr": 0.05,
                     "loss": {"contrastive_weight": 0.5},
                     "gin": {"views_per_image": 2},
                     "norm_kind": "instance", "seed": 11},
    }


def test_criterion_6_run_determinism(tmp_path):
    t0 = time.perf_counter()
    snapshots = []
    for label, jobs in (("first", 1), ("again", 1), ("parallel", 4)):
        root = tmp_path / label
        root.mkdir()
        cfg = root / "config.json"
        cfg.write_text(json.dumps(_mini_config(root / "out")))
        assert main(["generate", "--config", str(cfg)]) == 0
        assert main(["run", "--config", str(cfg), "--jobs", str(jobs)]) == 0
        snap = {}
        for name in ("baseline/summary.csv", "proposed/summary.csv", "comparison.csv"):
            snap[name] = (root / "out" / name).read_bytes()
        snapshots.append(snap)
    assert snapshots[0] == snapshots[1], "rerun with the same seed differs"
    assert snapshots[0] == snapshots[2], "--jobs 4 differs from --jobs 1"
    print(f"\n[criterion 6] PASS: summary CSVs byte-identical across rerun and "
          f"--jobs 1 vs 4, {time.perf_counter() - t0:.1f} s")


# ---------------------------------------------------------------------------
# criterion 5: qualitative claim reproduction on the synthetic cohort

def _claim_config(seed, out_dir):
    return {
        "schema_version": 1,
        "seed": seed,
        "output_dir": str(out_dir),
        "n_folds": 7,
        "source_val_size": 20,
        "cohort": {
            "n_pairs": 70, "volume_dims": [16, 24, 24],
            "n_blobs": 6, "blob_sigma_range": [2.8, 4.5],
            "effect_magnitude": 1.6, "lesion_sigma": 1.8,
            "source_style": {"exponent_range": [0.9, 1.1],
                             "smooth_sigma": 0.0, "noise_sigma": 0.0},
            "target_style": {"exponent_range": [2.5, 3.5],
                             "smooth_sigma": 0.5, "noise_sigma": 0.02},
            "seed": seed,
        },
        "net": {"input_shape": [1, 16, 24, 24], "stem_channels": 6,
                "n_residual_blocks": 3,
                "channel_schedule": [[12, 2], [12, 1], [24, 2]]},
        "baseline": {"epochs": 16, "batch_size": 4, "lr": 0.03, "momentum": 0.9,
                     "loss": {"contrastive_weight": 0.0}, "gin": None,
                     "norm_kind": "batch", "selection_threshold": 0.6, "seed": seed},
        "proposed": {"epochs": 24, "batch_size": 4, "lr": 0.03, "momentum": 0.9,
                     "loss": {"contrastive_weight": 0.5, "temperature": 0.1},
                     "gin": {"n_layers": 2, "hidden_channels": 2,
                             "kernel": [1, 1, 1], "views_per_image": 2},
                     "norm_kind": "instance", "selection_threshold": 0.6,
                     "seed": seed},
    }


def _pred0_rate(confusion_csv):
    lines = confusion_csv.read_text().splitlines()
    actual0 = lines[1].split(",")
    actual1 = lines[2].split(",")
    tn, fp = int(actual0[1]), int(actual0[2])
    fn, tp = int(actual1[1]), int(actual1[2])
    return (tn + fn) / (tn + fp + fn + tp)


@pytest.mark.slow
def test_criterion_5_qualitative_claim(tmp_path):
    t0 = time.perf_counter()
    seeds = (0, 1, 2)
    baseline_tt, proposed_tt, pred0_rates = [], [], []
    for seed in seeds:
        out = tmp_path / f"seed-{seed}"
        config = ExperimentConfig.from_dict(_claim_config(seed, out))
        generate_to_disk(config)
        results, failures = run_experiment(config, ["baseline", "proposed"], jobs=1)
        assert failures == [], f"seed {seed}: {failures}"
        for row in sorted(results["baseline"], key=lambda r: r["fold"]):
            baseline_tt.append(row["target_test"])
            pred0_rates.append(_pred0_rate(
                out / "baseline" / f"fold-{row['fold']}" / "confusion_target_test.csv"))
        for row in sorted(results["proposed"], key=lambda r: r["fold"]):
            proposed_tt.append(row["target_test"])
    elapsed = time.perf_counter() - t0

    assert len(baseline_tt) == len(proposed_tt) == 21
    gap = float(np.mean(proposed_tt) - np.mean(baseline_tt))
    t_stat, p = paired_t_one_sided(baseline_tt, proposed_tt)
    collapse = max(pred0_rates)

    assert gap >= 0.05, f"target-test gap {gap:.4f} < 0.05"
    assert p < 0.05, f"paired one-sided p {p:.4f} >= 0.05"
    assert collapse > 0.8, f"baseline never collapses to class 0 (max rate {collapse:.2f})"
    assert elapsed < 3600.0, f"runtime {elapsed:.0f} s exceeds 60 min"
    print(f"\n[criterion 5] PASS: target-test gap {gap:.4f} "
          f"(baseline {np.mean(baseline_tt):.4f}, proposed {np.mean(proposed_tt):.4f}), "
          f"t={t_stat:.2f} p={p:.2e} over 21 fold-seed pairs, max baseline "
          f"class-0 rate {collapse:.2f}, {elapsed / 60:.1f} min")
