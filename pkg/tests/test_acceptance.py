"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line and the session ends with a
``acceptance criteria`` summary section. Criteria 8-10 train the default
model for 30 epochs on three pinned seeds (roughly an hour on one core).
Set ``SYNTHGAP_ACCEPTANCE_WORKSPACE`` to keep their workspace between
sessions; by default a fresh temporary workspace is used.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from synthgap.analysis import fit_log_curve
from synthgap.config import ExperimentConfig
from synthgap.data import (
    DatasetSpec,
    Distribution,
    compute_channel_stats,
    generate_dataset,
    normalize,
    open_dataset,
    reduced_count,
    stratified_reduce,
    texture_scramble,
)
from synthgap.model import (
    ArchitectureConfig,
    build_model,
    cosine_head,
    forward,
    freeze_prefix,
    load_checkpoint,
    save_checkpoint,
    set_bn_eval_update,
    snapshot,
)
from synthgap.report import build_report
from synthgap.trainer import TrainConfig, evaluate, gradient_check, lr_at, train
from synthgap.transfer import (
    DataRef,
    ReductionArm,
    Study,
    TransferPlan,
    replay_run,
    run_baselines,
    run_data_reduction_sweep,
    run_transfer_point,
)

from .conftest import TINY_ARCH
from .test_analysis import brute_force_fit

DEFAULT_ARCH = ArchitectureConfig()
U = DEFAULT_ARCH.num_units
DESK_SEEDS = (0, 1, 2)
CORES = os.cpu_count() or 1


def _cores_note(minutes: float, budget: float) -> tuple[bool, str]:
    """The runtime budgets are stated for an 8-core CPU; check them only there."""
    if CORES >= 8:
        return minutes <= budget, f"runtime {minutes:.1f} min (budget {budget:g} min)"
    return True, f"runtime {minutes:.1f} min on {CORES} core(s); {budget:g}-min budget is for 8 cores, not checked"


# ---------------------------------------------------------------------------
# criteria 1-2: surgery on the default architecture


@pytest.fixture(scope="module")
def surgery(tmp_path_factory):
    root = tmp_path_factory.mktemp("surgery")
    common = dict(per_category_train=20, per_category_val=10, seed=41)
    real = generate_dataset(DatasetSpec(**common), root / "real")
    proxy = generate_dataset(DatasetSpec(distribution="proxy", fidelity=0.5, **common), root / "proxy")
    cfg = TrainConfig(epochs=2, batch_size=64, warmup_epochs=0, seed=9, last_k=2)
    pretrained = build_model(DEFAULT_ARCH, 8)
    train(pretrained, proxy, real, TrainConfig(epochs=1, batch_size=64, warmup_epochs=0, seed=8))
    save_checkpoint(pretrained, root / "pretrained")
    return root, real, cfg


def _transfer(surgery, n, run_dir):
    root, real, cfg = surgery
    plan = TransferPlan(
        "synth-to-real", n, str(root / "pretrained"), DataRef(str(real.root)), DataRef(str(real.root), "val"),
        DEFAULT_ARCH, cfg, cfg.seed,
    )
    run_transfer_point(plan, run_dir)
    return snapshot(load_checkpoint(root / "pretrained")), snapshot(load_checkpoint(Path(run_dir) / "checkpoint"))


@pytest.mark.acceptance(1)
def test_surgery_exactness(surgery, tmp_path, verdict):
    start = time.perf_counter()
    bad = []
    for n in range(U + 1):
        before, after = _transfer(surgery, n, tmp_path / f"n{n}")
        if not all(before.unit_equal(after, i) for i in range(n)):
            bad.append(f"N={n}: frozen prefix moved")
        if n < U and not all(not before.unit_equal(after, i) for i in range(n, U)):
            bad.append(f"N={n}: a retrained unit did not change")
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 120
    verdict(ok, f"surgery exact for N=0..{U} ({elapsed:.0f} s, limit 120 s) {'; '.join(bad)}".rstrip())


@pytest.mark.acceptance(2)
def test_degenerate_cases(surgery, tmp_path, verdict):
    root, real, cfg = surgery
    before, probe = _transfer(surgery, U - 1, tmp_path / "probe")
    linear_probe = before.changed_units(probe) == [U - 1]
    _, frozen = _transfer(surgery, U, tmp_path / "all")
    all_frozen = frozen == before
    _transfer(surgery, 0, tmp_path / "zero")
    plain = build_model(DEFAULT_ARCH, cfg.seed)
    train(plain, real, real, cfg, run_dir=tmp_path / "plain")
    same_log = (tmp_path / "zero" / "metrics.csv").read_bytes() == (tmp_path / "plain" / "metrics.csv").read_bytes()
    verdict(
        linear_probe and all_frozen and same_log,
        f"N=U-1 changes head only: {linear_probe}; N=U no-op: {all_frozen}; N=0 log equals plain training: {same_log}",
    )


# ---------------------------------------------------------------------------
# criteria 3-7: closed forms and oracles


@pytest.mark.acceptance(3)
def test_schedule_closed_form(verdict):
    cfg = TrainConfig()
    rng = np.random.default_rng(3)
    worst = 0.0
    for t in rng.uniform(0, cfg.epochs, 1000):
        w, e, lr = cfg.warmup_epochs, cfg.epochs, cfg.base_lr
        expected = lr * t / w if t <= w else lr * 0.5 * (1 + math.cos(math.pi * (t - w) / (e - w)))
        worst = max(worst, abs(lr_at(cfg, t) - expected))
    mid = (cfg.warmup_epochs + cfg.epochs) / 2
    endpoints = (lr_at(cfg, cfg.warmup_epochs), lr_at(cfg, cfg.epochs), lr_at(cfg, mid))
    exact = endpoints == (cfg.base_lr, 0.0, cfg.base_lr / 2)
    verdict(worst <= 1e-12 and exact, f"max |lr - closed form| = {worst:.2e} over 1000 points; endpoints {endpoints}")


@pytest.mark.acceptance(4)
def test_gradient_correctness(verdict):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(4)
    x, y = torch.randn(2, 3, 16, 16, generator=gen), torch.tensor([1, 2])
    full = build_model(ArchitectureConfig(stage_widths=(2, 4), blocks_per_stage=1, num_categories=4), 4)
    for m in full.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(0.1 * torch.randn(m.num_features, generator=gen))
            m.running_var.copy_(0.5 + torch.rand(m.num_features, generator=gen))
    full_err = gradient_check(full, x, y)
    head = build_model(TINY_ARCH, 4)
    freeze_prefix(head, head.num_units - 1)
    head_err = gradient_check(head, x, y)
    elapsed = time.perf_counter() - start
    ok = full_err <= 1e-4 and head_err <= 1e-6 and elapsed < 60
    verdict(ok, f"tiny model {full_err:.2e} (<= 1e-4), linear head {head_err:.2e} (<= 1e-6), {elapsed:.1f} s")


@pytest.mark.acceptance(5)
def test_cosine_head_invariances(verdict):
    gen = torch.Generator().manual_seed(5)
    model = build_model(DEFAULT_ARCH, 5)
    head = model.units[-1]
    maps = torch.randn(16, 128, 4, 4, generator=gen, dtype=torch.float64)
    head.double()
    with torch.no_grad():
        ref = head(maps)
        worst = 0.0
        for scale in (1e-3, 0.5, 7.0, 1e3):
            worst = max(worst, float((head(maps * scale) - ref).abs().max()))
        row_scales = torch.rand(head.weight.shape[0], 1, generator=gen, dtype=torch.float64) * 100 + 1e-2
        original = head.weight.clone()
        head.weight.mul_(row_scales)
        worst = max(worst, float((head(maps) - ref).abs().max()))
        head.weight.copy_(original)
        feats = maps.mean(dim=(2, 3))
        argmaxes = {tuple(cosine_head(feats, head.weight, tau).argmax(1).tolist()) for tau in (0.01, 0.1, 1.0, 10.0)}
    verdict(worst <= 1e-6 and len(argmaxes) == 1, f"max logit change under rescaling {worst:.1e}; argmax stable over tau: {len(argmaxes) == 1}")


@pytest.mark.acceptance(6)
def test_curve_fit_oracle(verdict):
    planted = fit_log_curve([(x, -2.23 * math.log(x) + 85.61) for x in (1, 2, 4, 8)])
    recovered = abs(planted.a + 2.23) < 1e-9 and abs(planted.b - 85.61) < 1e-9 and planted.rms_residual < 1e-9
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        pts = list(zip(rng.uniform(0.2, 64.0, n).tolist(), rng.uniform(0.0, 100.0, n).tolist()))
        fit = fit_log_curve(pts)
        a, b = brute_force_fit(pts)
        worst = max(worst, abs(fit.a - a), abs(fit.b - b))
    verdict(
        recovered and worst < 1e-6,
        f"planted (a, b) = ({planted.a:.12g}, {planted.b:.12g}), rms {planted.rms_residual:.1e}; "
        f"max deviation from brute force {worst:.1e} over 100 instances",
    )


@pytest.mark.acceptance(7)
def test_dataset_contracts(default_real, tmp_path, verdict):
    real = default_real
    identical = generate_dataset(DatasetSpec(distribution="proxy", fidelity=1.0), tmp_path / "proxy1")
    same_bytes = all(
        (real.root / name).read_bytes() == (identical.root / name).read_bytes()
        for name in ("train_images.bin", "train_labels.bin", "val_images.bin", "val_labels.bin")
    )

    counts_ok = True
    per_category = np.bincount(real.labels("train"), minlength=real.num_categories)
    for fraction in (1.0, 0.5, 0.29, 0.25, 0.125, 0.01):
        view = stratified_reduce(real, fraction, seed=7)
        got = np.bincount(view.train_labels(), minlength=real.num_categories)
        counts_ok &= all(g == math.floor(fraction * c + 1e-9) == reduced_count(fraction, c) for g, c in zip(got, per_category))

    multisets_ok = True
    images = real.images("train")
    for i, patch in enumerate((1, 2, 4, 8, 16, 32)):
        img = np.asarray(images[i]).transpose(1, 2, 0)
        out = texture_scramble(img, patch, seed=i)
        for r in range(0, 32, patch):
            for c in range(0, 32, patch):
                a = sorted(map(tuple, img[r : r + patch, c : c + patch].reshape(-1, 3).tolist()))
                b = sorted(map(tuple, out[r : r + patch, c : c + patch].reshape(-1, 3).tolist()))
                multisets_ok &= a == b

    stats = compute_channel_stats(real)
    x = normalize(torch.from_numpy(np.array(images)).double() / 255.0, stats)
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3), unbiased=False)
    norm_ok = bool(mean.abs().max() < 1e-4 and (std - 1).abs().max() < 1e-4)
    verdict(
        same_bytes and counts_ok and multisets_ok and norm_ok,
        f"phi=1 byte-identical: {same_bytes}; reduce counts exact: {counts_ok}; scramble multisets: {multisets_ok}; "
        f"exact normalization max|mu| {float(mean.abs().max()):.1e}, max|sigma-1| {float((std - 1).abs().max()):.1e}",
    )


# ---------------------------------------------------------------------------
# criteria 8-10: pinned-seed desk experiments with the default recipe


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    env = os.environ.get("SYNTHGAP_ACCEPTANCE_WORKSPACE")
    root = Path(env) if env else tmp_path_factory.mktemp("desk")
    studies = {}
    for seed in DESK_SEEDS:
        cfg = ExperimentConfig()
        cfg.seeds.root = seed
        cfg.output.workspace = str(root / f"seed{seed}")
        cfg = cfg.materialize()
        paths = {}
        for dist in (Distribution.REAL, Distribution.PROXY):
            path = cfg.workspace / "datasets" / dist.value
            if not (path / "manifest.json").is_file():
                generate_dataset(cfg.dataset_spec(dist), path)
            paths[dist] = str(path)
        studies[seed] = Study(
            cfg.workspace, paths[Distribution.REAL], paths[Distribution.PROXY], cfg.arch(), cfg.train_config(), seed=seed
        )
    return studies


@pytest.mark.slow
@pytest.mark.acceptance(8)
def test_desk_gap(desk, verdict):
    start = time.perf_counter()
    gaps = []
    for seed, study in desk.items():
        result = run_baselines(study)
        real, synth = result.baseline("real"), result.baseline("synth")
        assert real.ok and synth.ok, f"seed {seed}: baseline failed"
        gaps.append(100 * (real.stats.top1_mean - synth.stats.top1_mean))
    runtime_ok, runtime = _cores_note((time.perf_counter() - start) / 60, 20)
    ok = all(g >= 5 for g in gaps) and runtime_ok
    verdict(ok, f"real - proxy(phi=0.5) top-1 gap per seed: {', '.join(f'{g:.1f}' for g in gaps)} pp (>= 5); {runtime}")


@pytest.mark.slow
@pytest.mark.acceptance(9)
def test_desk_data_reduction(desk, verdict):
    start = time.perf_counter()
    diffs = []
    for seed, study in desk.items():
        result = run_data_reduction_sweep(study, [0.125])
        frozen = result.row("reduce-synthetic-frozen-prefix", "0.125")
        fresh = result.row("reduce-none", "0.125")
        assert frozen.ok and fresh.ok, f"seed {seed}: reduction run failed"
        diffs.append(100 * (frozen.stats.top1_mean - fresh.stats.top1_mean))
    runtime_ok, runtime = _cores_note((time.perf_counter() - start) / 60, 25)
    ok = all(d > 0 for d in diffs) and runtime_ok
    verdict(ok, f"frozen-prefix minus random-init top-1 at 1/8 per seed: {', '.join(f'{d:+.1f}' for d in diffs)} pp (> 0); {runtime}")


@pytest.mark.slow
@pytest.mark.acceptance(10)
def test_reproducibility(desk, tmp_path, verdict):
    study = desk[DESK_SEEDS[0]]
    result = run_data_reduction_sweep(study, [0.125], [ReductionArm.SYNTHETIC_FROZEN_PREFIX])
    replayed = replay_run(result.rows[0].run_dir, tmp_path / "replay")
    build_report(study.workspace)
    first = {p.name: p.read_bytes() for p in (study.workspace / "reports").iterdir()}
    build_report(study.workspace)
    second = {p.name: p.read_bytes() for p in (study.workspace / "reports").iterdir()}
    verdict(
        replayed and first == second,
        f"replayed frozen-prefix 1/8 run: metrics.csv identical {replayed}; report byte-deterministic over {len(first)} files: {first == second}",
    )


@pytest.mark.slow
def test_proxy_trained_matched_distribution_floor(desk):
    """Proxy-trained default models score well on proxy validation data.

    Observed on the pinned seeds: 0.814, 0.782, 0.774; the floor sits just
    below the smallest of them.
    """
    for study in desk.values():
        model = load_checkpoint(study.registry.root / "baseline" / "synth" / "checkpoint")
        assert evaluate(model, open_dataset(study.proxy), ks=(1,)).topk[1] >= 0.77


# ---------------------------------------------------------------------------
# criterion 11


@pytest.mark.acceptance(11)
def test_bn_mode_contract(verdict):
    gen = torch.Generator().manual_seed(11)
    batch = torch.rand(8, 3, 32, 32, generator=gen)
    model = build_model(DEFAULT_ARCH, 11)
    forward(model, batch, "train")  # move running statistics away from their initial values

    set_bn_eval_update(model, False)
    before = snapshot(model)
    forward(model, batch, "eval")
    untouched = snapshot(model) == before

    set_bn_eval_update(model, True)
    forward(model, batch, "eval")
    changed = snapshot(model).changed_units(before)
    verdict(
        untouched and changed == list(range(U - 1)),
        f"disabled: running stats bit-identical {untouched}; enabled: units with updated stats {changed}",
    )

