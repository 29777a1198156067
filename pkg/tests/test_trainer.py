import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from synthgap.data import Augmentation
from synthgap.errors import DivergenceError, ValidationError
from synthgap.model import ArchitectureConfig, build_model, freeze_prefix, snapshot
from synthgap.trainer import (
    ArraySet,
    EpochRecord,
    TrainConfig,
    TrainLog,
    _sgd_step,
    aggregate_last_k,
    evaluate,
    gradient_check,
    lr_at,
    read_metrics_csv,
    topk_accuracy,
    train,
    write_metrics_csv,
)

from .conftest import TINY_ARCH, TINY_TRAIN


def _closed_form_lr(cfg, t):
    w, e = cfg.warmup_epochs, cfg.epochs
    if w > 0 and t <= w:
        return cfg.base_lr * (t / w)
    return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * (t - w) / (e - w)))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.warmup_epochs) == (30, 128, 0.1, 3)
        assert (cfg.momentum, cfg.weight_decay, cfg.last_k) == (0.9, 1e-4, 5)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epochs=10, warmup_epochs=10),
            dict(warmup_epochs=-1),
            dict(base_lr=0.0),
            dict(momentum=1.0),
            dict(momentum=-0.1),
            dict(epochs=-1),
            dict(batch_size=1),
            dict(augmentation="fancy"),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)

    def test_enum_coercion(self):
        assert TrainConfig(augmentation="multicrop").augmentation is Augmentation.MULTICROP


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 3) == 0.1
        assert lr_at(cfg, 30) == 0.0
        assert lr_at(cfg, (3 + 30) / 2) == 0.05

    def test_no_warmup(self):
        cfg = TrainConfig(warmup_epochs=0, epochs=10)
        assert lr_at(cfg, 0) == cfg.base_lr

    @pytest.mark.parametrize("t", [-1e-9, 30.0001])
    def test_out_of_range(self, t):
        with pytest.raises(ValidationError):
            lr_at(TrainConfig(), t)

    @settings(max_examples=60, deadline=None)
    @given(
        epochs=st.integers(2, 200),
        warm_frac=st.floats(0, 0.9),
        lr=st.floats(1e-4, 10),
        u=st.lists(st.floats(0, 1), min_size=1, max_size=20),
    )
    def test_closed_form_and_shape(self, epochs, warm_frac, lr, u):
        cfg = TrainConfig(epochs=epochs, warmup_epochs=warm_frac * epochs, base_lr=lr)
        ts = sorted(x * epochs for x in u)
        for t in ts:
            assert abs(lr_at(cfg, t) - _closed_form_lr(cfg, t)) <= 1e-12 * max(1.0, lr)
        peak = lr_at(cfg, cfg.warmup_epochs)
        assert all(lr_at(cfg, t) <= peak + 1e-15 for t in ts)
        after = [lr_at(cfg, t) for t in ts if t >= cfg.warmup_epochs]
        assert all(a >= b - 1e-15 for a, b in zip(after, after[1:]))

    def test_continuous_at_warmup(self):
        cfg = TrainConfig()
        assert abs(lr_at(cfg, 3 - 1e-9) - lr_at(cfg, 3 + 1e-9)) < 1e-9


class TestSgdStep:
    def test_zero_momentum_matches_plain_gradient_descent(self):
        # f(p) = 0.5 * c * (p - q)^2 ; plain GD: p_k - q = (1 - lr c)^k (p0 - q)
        c, q, p0, lr = 3.0, 1.5, -2.0, 0.1
        cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
        p = torch.tensor([p0], dtype=torch.float64, requires_grad=True)
        buffers = {}
        for k in range(1, 21):
            p.grad = None
            (0.5 * c * (p - q) ** 2).sum().backward()
            _sgd_step([("p", p)], buffers, lr, cfg)
            expected = q + (1 - lr * c) ** k * (p0 - q)
            assert p.item() == pytest.approx(expected, abs=1e-12)

    def test_momentum_and_decay(self):
        cfg = TrainConfig(momentum=0.9, weight_decay=0.5)
        w = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
        b = torch.ones(2, dtype=torch.float64, requires_grad=True)
        buffers = {}
        for _ in range(2):
            w.grad, b.grad = torch.full_like(w, 1.0), torch.full_like(b, 1.0)
            _sgd_step([("w", w), ("b", b)], buffers, 0.1, cfg)
        # step 1: v=1, w=1-0.1*(1+0.5)=0.85, b=0.9 ; step 2: v=1.9, w=0.85-0.1*(1.9+0.425), b=0.9-0.19
        assert torch.allclose(w, torch.full_like(w, 0.85 - 0.1 * (1.9 + 0.425)), atol=1e-15)
        assert torch.allclose(b, torch.full_like(b, 0.71), atol=1e-15)


class TestTopK:
    def test_single_sample_examples(self):
        logits = torch.tensor([[0.1, 0.9, 0.3, 0.2, 0.0, -1.0]])
        assert topk_accuracy(logits, torch.tensor([1]), (1, 5)) == {1: 1.0, 5: 1.0}
        assert topk_accuracy(logits, torch.tensor([3]), (1, 5)) == {1: 0.0, 5: 1.0}

    def test_ties_favour_lower_index(self):
        logits = torch.tensor([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
        assert topk_accuracy(logits, torch.tensor([0, 2]), (1, 2, 3)) == {1: 0.5, 2: 0.5, 3: 1.0}

    def test_hand_built_rows_match_sort_oracle(self):
        logits = torch.tensor(
            [[0.5, 0.1, 0.9, 0.3], [0.2, 0.2, 0.1, 0.0], [-1.0, 2.0, 0.0, 1.5], [0.0, 0.0, 0.0, 0.0]]
        )
        labels = torch.tensor([3, 1, 0, 2])
        # ranks (0-based): 2, 1, 3, 2
        assert topk_accuracy(logits, labels, (1, 2, 3, 4)) == {1: 0.0, 2: 0.25, 3: 0.75, 4: 1.0}

    @settings(max_examples=80, deadline=None)
    @given(
        data=st.lists(st.lists(st.integers(-3, 3), min_size=5, max_size=5), min_size=1, max_size=12),
        label_seed=st.integers(0, 10**6),
    )
    def test_brute_force_oracle(self, data, label_seed):
        logits = torch.tensor(data, dtype=torch.float32)
        labels = torch.as_tensor(np.random.default_rng(label_seed).integers(0, 5, len(data)))
        got = topk_accuracy(logits, labels, range(1, 6))
        for k in range(1, 6):
            hits = 0
            for row, y in zip(data, labels.tolist()):
                order = sorted(range(5), key=lambda c: (-row[c], c))
                hits += y in order[:k]
            assert got[k] == hits / len(data)
        assert all(got[k] <= got[k + 1] for k in range(1, 5))


class TestAggregate:
    def _log(self, values):
        return TrainLog([EpochRecord(i, 0.1, 1.0, v, min(1.0, v + 0.05)) for i, v in enumerate(values)])

    def test_example(self):
        stats = aggregate_last_k(self._log([0.5, 0.88, 0.87, 0.88, 0.87, 0.88]), 5)
        assert stats.top1_mean == pytest.approx(0.876, abs=1e-12)
        assert stats.top1_std == pytest.approx(math.sqrt(0.000024), abs=1e-12)
        assert round(stats.top1_std, 4) == 0.0049

    def test_k_one_and_constant(self):
        log = self._log([0.1, 0.3, 0.3, 0.3])
        assert aggregate_last_k(log, 1).top1_mean == 0.3 and aggregate_last_k(log, 1).top1_std == 0.0
        assert aggregate_last_k(log, 3).top1_std == 0.0

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValidationError):
            aggregate_last_k(self._log([0.1, 0.2, 0.3, 0.4]), k)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.data())
    def test_mean_in_window(self, values, data):
        k = data.draw(st.integers(1, len(values)))
        s = aggregate_last_k(self._log(values), k)
        window = values[-k:]
        assert min(window) - 1e-12 <= s.top1_mean <= max(window) + 1e-12
        assert s.top1_std >= 0


class TestMetricsCsv:
    def test_round_trip_is_exact(self, tmp_path):
        log = TrainLog([EpochRecord(0, 0.1 / 3, 2.302585092994046, 0.1234567891, 0.5), EpochRecord(1, 0.0, 1e-17, 1.0, 1.0)])
        write_metrics_csv(log, tmp_path / "m.csv")
        assert read_metrics_csv(tmp_path / "m.csv") == log
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,val_top1,val_top5"


def _toy_separable(n=64, seed=0):
    """Two categories: bright-red vs bright-blue images with noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.integers(0, 60, size=(n, 3, 32, 32)).astype(np.uint8)
    images[labels == 0, 0] += 180
    images[labels == 1, 2] += 180
    return ArraySet(images, labels.astype(np.int64), 2)


class TestTrain:
    def test_zero_epochs(self, small_pair):
        real, _ = small_pair
        model = build_model(TINY_ARCH, 0)
        before = snapshot(model)
        log = train(model, real, real, TrainConfig(epochs=0))
        assert len(log) == 0 and snapshot(model) == before

    def test_all_frozen_is_noop_but_logs(self, small_pair):
        real, _ = small_pair
        model = build_model(TINY_ARCH, 0)
        freeze_prefix(model, model.num_units)
        before = snapshot(model)
        log = train(model, real, real, TINY_TRAIN)
        assert snapshot(model) == before and len(log) == 2

    def test_log_invariants_and_determinism(self, small_pair):
        real, proxy = small_pair
        logs = []
        for _ in range(2):
            model = build_model(TINY_ARCH, 7)
            logs.append(train(model, proxy, real, TINY_TRAIN))
        assert logs[0] == logs[1]
        for r in logs[0].records:
            assert 0 <= r.val_top1 <= r.val_top5 <= 1
        assert logs[0].column("lr") == [lr_at(TINY_TRAIN, e) for e in range(2)]

    def test_multicrop_and_exact_normalization(self, small_pair):
        real, _ = small_pair
        cfg = TrainConfig(epochs=1, batch_size=48, warmup_epochs=0, augmentation="multicrop", normalization="exact")
        log = train(build_model(TINY_ARCH, 0), real, real, cfg)
        assert len(log) == 1 and math.isfinite(log.records[0].train_loss)

    def test_loss_decreases_on_separable_toy(self):
        data = _toy_separable()
        arch = ArchitectureConfig(stage_widths=(4, 8), blocks_per_stage=1, num_categories=2)
        cfg = TrainConfig(epochs=5, batch_size=16, base_lr=0.05, warmup_epochs=0, augmentation="none", seed=1)
        log = train(build_model(arch, 1), data, data, cfg)
        losses = log.column("train_loss")
        assert losses[-1] < losses[0]
        assert log.records[-1].val_top1 == 1.0

    def test_category_mismatch(self, small_pair):
        real, _ = small_pair
        arch = ArchitectureConfig(stage_widths=(4, 8), blocks_per_stage=1, num_categories=5)
        with pytest.raises(ValidationError, match="categories"):
            train(build_model(arch, 0), real, real, TINY_TRAIN)

    def test_empty_data(self):
        empty = ArraySet(np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, np.int64), 4)
        with pytest.raises(ValidationError, match="empty"):
            train(build_model(TINY_ARCH, 0), empty, empty, TINY_TRAIN)

    def test_divergence_names_epoch(self, small_pair):
        real, _ = small_pair
        model = build_model(TINY_ARCH, 0)
        with torch.no_grad():
            model.units[0].conv.weight.fill_(float("nan"))
        with pytest.raises(DivergenceError, match="epoch 0"):
            train(model, real, real, TINY_TRAIN)

    def test_evaluate_rejects_large_k(self, small_pair):
        real, _ = small_pair
        with pytest.raises(ValidationError):
            evaluate(build_model(TINY_ARCH, 0), real, ks=(1, 5))


class TestGradientCheck:
    def _batch(self, seed=0, n=2, size=16):
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(n, 3, size, size, generator=gen), torch.tensor([0, 3, 1, 2][:n])

    def test_linear_head(self):
        model = build_model(TINY_ARCH, 0)
        freeze_prefix(model, model.num_units - 1)
        x, y = self._batch()
        assert gradient_check(model, x, y) < 1e-6

    def test_full_tiny_model_with_running_stats(self):
        arch = ArchitectureConfig(stage_widths=(2, 4), blocks_per_stage=1, num_categories=4)
        model = build_model(arch, 1)
        gen = torch.Generator().manual_seed(5)
        for m in model.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(0.1 * torch.randn(m.num_features, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.num_features, generator=gen))
        assert sum(p.numel() for p in model.parameters()) <= 5000
        x, y = self._batch(n=2)
        assert gradient_check(model, x, y) < 1e-4

    def test_zero_input_zero_head_is_finite(self):
        model = build_model(TINY_ARCH, 0)
        freeze_prefix(model, model.num_units - 1)
        with torch.no_grad():
            model.units[-1].weight.zero_()
        err = gradient_check(model, torch.zeros(2, 3, 16, 16), torch.tensor([0, 1]))
        assert math.isfinite(err)

    def test_rejects_large_inputs(self):
        with pytest.raises(ValidationError):
            gradient_check(build_model(ArchitectureConfig(), 0), *self._batch())
        model = build_model(TINY_ARCH, 0)
        freeze_prefix(model, model.num_units - 1)
        with pytest.raises(ValidationError):
            gradient_check(model, torch.zeros(5, 3, 16, 16), torch.zeros(5, dtype=torch.long))


def test_itertools_rank_oracle_exhaustive():
    """Every permutation of 4 distinct logits: top-k hit iff label rank < k."""
    for perm in itertools.permutations(range(4)):
        logits = torch.tensor([perm], dtype=torch.float32)
        for label in range(4):
            rank = sorted(range(4), key=lambda c: -perm[c]).index(label)
            got = topk_accuracy(logits, torch.tensor([label]), (1, 2, 3, 4))
            assert got == {k: float(rank < k) for k in (1, 2, 3, 4)}
