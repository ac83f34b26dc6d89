import math

import numpy as np
import pytest
import torch

from config.pipeline import TrainConfig
from core import training
from core.chemgraph import MolecularDataset, random_split
from core.diffnet import collate_graphs, forward_batch, init_params
from core.errors import DataError, DomainError, NumericError, TrainingDivergence
from core.losses import LossWeights, gaussian_nll, interpolated_loss
from core.models import TrainingLog, TrainingLogRow
from core.training import (
    batch_loss,
    batch_loss_and_gradient,
    evaluate_batch,
    fit_target_scaler,
    interpolated_point_losses,
    lambda_schedule,
    load_training_log,
    member_summary,
    nll_point,
    save_training_log,
    train_member,
)
from core.synthetic import make_synthetic_dataset

from tests.conftest import make_record


class TestPointLosses:
    def test_nll_values(self):
        assert nll_point(0.0, 0.0, 1.0) == pytest.approx(0.9189385, abs=1e-6)
        assert nll_point(0.0, 0.0, 1.0, include_constant=False) == pytest.approx(0.0)
        assert nll_point(1.0, 0.0, 1.0) == pytest.approx(1.4189385, abs=1e-6)

    @pytest.mark.parametrize("var", [0.0, -1.0, math.inf])
    def test_nll_domain(self, var):
        with pytest.raises(DomainError):
            nll_point(0.0, 0.0, var)

    def test_nll_minimised_at_squared_error(self):
        values = [nll_point(2.0, 0.0, v) for v in (2.0, 4.0, 8.0)]
        assert values[1] < values[0] and values[1] < values[2]

    def test_interpolated_half(self):
        losses = interpolated_point_losses(np.array([1.0]), np.array([0.0]), np.array([1.0]), 0.5)
        assert losses[0] == pytest.approx(1.2094693, abs=1e-6)

    def test_interpolated_endpoints(self):
        y, mu, var = np.array([3.0, -1.0]), np.array([1.0, 0.0]), np.array([2.0, 0.5])
        np.testing.assert_allclose(interpolated_point_losses(y, mu, var, 1.0), (y - mu) ** 2)
        expected = [nll_point(a, b, c) for a, b, c in zip(y, mu, var)]
        np.testing.assert_allclose(interpolated_point_losses(y, mu, var, 0.0), expected)

    def test_interpolated_lambda_range(self):
        with pytest.raises(DomainError):
            interpolated_point_losses(np.zeros(1), np.zeros(1), np.ones(1), 1.5)

    @pytest.mark.parametrize("variance", [0.01, 0.7, 3.0])
    def test_variance_attenuates_mean_gradient(self, variance):
        y = torch.tensor([1.3], dtype=torch.float64)
        grads = []
        for v in (variance, 2.0 * variance):
            mean = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
            loss = interpolated_loss(y, mean, torch.tensor([v], dtype=torch.float64), LossWeights.from_lambda(0.0))
            loss.sum().backward()
            grads.append(float(mean.grad[0]))
        assert grads[0] == pytest.approx(-(1.3 - 0.4) / variance, abs=1e-10)
        assert abs(grads[1] / grads[0] - 0.5) <= 1e-10

    def test_nll_gradient_matches_closed_form(self):
        y = torch.tensor([0.2, -1.0], dtype=torch.float64)
        mean = torch.tensor([0.5, 0.5], dtype=torch.float64, requires_grad=True)
        variance = torch.tensor([0.25, 4.0], dtype=torch.float64)
        gaussian_nll(y, mean, variance).sum().backward()
        np.testing.assert_allclose(mean.grad.numpy(), ((mean - y) / variance).detach().numpy(), atol=1e-12)


class TestLambdaSchedule:
    @pytest.mark.parametrize(
        "step, expected",
        [(0, 1.0), (9, 1.0), (10, 1.0), (15, 0.5), (19, 0.1), (20, 0.0), (500, 0.0)],
    )
    def test_values(self, step, expected):
        config = TrainConfig(max_steps=30, warmup_steps=10, interp_steps=10)
        assert lambda_schedule(step, config) == pytest.approx(expected)

    def test_no_ramp(self):
        config = TrainConfig(max_steps=30, warmup_steps=5, interp_steps=0)
        assert lambda_schedule(4, config) == 1.0
        assert lambda_schedule(5, config) == 0.0

    def test_non_increasing(self):
        config = TrainConfig(max_steps=100, warmup_steps=20, interp_steps=50)
        values = [lambda_schedule(s, config) for s in range(100)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_schedule_must_fit(self):
        with pytest.raises(ValueError):
            TrainConfig(max_steps=10, warmup_steps=8, interp_steps=8)


class TestBatchLoss:
    def test_matches_gradient_variant(self, tiny_net, water):
        graphs = [MolecularDataset((water,)).graphs(tiny_net.cutoff)[0]]
        params = init_params(tiny_net, seed=0)
        loss = batch_loss(params, graphs, 0.3, tiny_net, include_constant=False)
        value, grad = batch_loss_and_gradient(params, graphs, 0.3, tiny_net)
        assert value == pytest.approx(loss)
        assert len(grad) == len(params)
        assert torch.isfinite(grad.values).all()

    def test_constant_offset(self, tiny_net, water):
        graphs = MolecularDataset((water,)).graphs(tiny_net.cutoff)
        params = init_params(tiny_net, seed=0)
        with_constant = batch_loss(params, graphs, 0.0, tiny_net)
        without = batch_loss(params, graphs, 0.0, tiny_net, include_constant=False)
        assert with_constant - without == pytest.approx(0.5 * math.log(2 * math.pi))

    def test_missing_target(self, tiny_net):
        record = make_record("u", (1, 1), [[0, 0, 0], [0.74, 0, 0]])
        graphs = MolecularDataset((record,)).graphs(tiny_net.cutoff)
        with pytest.raises(DataError):
            batch_loss(init_params(tiny_net, 0), graphs, 0.5, tiny_net)

    def test_empty_batch(self, tiny_net):
        with pytest.raises(DataError):
            batch_loss(init_params(tiny_net, 0), [], 0.5, tiny_net)


class TestTrainMember:
    def test_zero_steps(self, synthetic, small_net):
        dataset, split = synthetic
        params, log = train_member(dataset, split, small_net, TrainConfig(max_steps=0, warmup_steps=0, interp_steps=0))
        assert torch.equal(params.values, init_params(small_net, small_net.seed).values)
        assert log.rows == []

    def test_short_run(self, synthetic, small_net, quick_train):
        dataset, split = synthetic
        params, log = train_member(dataset, split, small_net, quick_train)
        assert [row.step for row in log.rows] == [10, 20, 30, 40, 50, 60]
        assert [row.lam for row in log.rows][:2] == [1.0, 1.0]
        assert log.steps_run == 60
        assert not log.stopped_early
        assert log.best_val_nll == min(row.val_nll for row in log.rows)
        assert torch.isfinite(params.values).all()

    def test_reproducible(self, synthetic, small_net, quick_train):
        dataset, split = synthetic
        config = quick_train.model_copy(update={"max_steps": 20, "warmup_steps": 10, "interp_steps": 10})
        first, _ = train_member(dataset, split, small_net, config)
        second, _ = train_member(dataset, split, small_net, config)
        assert torch.equal(first.values, second.values)

    def test_shuffle_seed_matters(self, synthetic, small_net, quick_train):
        dataset, split = synthetic
        config = quick_train.model_copy(update={"max_steps": 20, "warmup_steps": 10, "interp_steps": 10})
        first, _ = train_member(dataset, split, small_net, config)
        second, _ = train_member(dataset, split, small_net, config.model_copy(update={"seed": 1}))
        assert not torch.equal(first.values, second.values)

    def test_patience_after_warmup(self, synthetic, small_net, monkeypatch):
        dataset, split = synthetic
        monkeypatch.setattr(training, "evaluate_batch", lambda *args, **kwargs: (1.0, 0.5))
        config = TrainConfig(max_steps=10, warmup_steps=0, interp_steps=0, eval_every=1, patience=2, batch_size=8)
        _, log = train_member(dataset, split, small_net, config)
        assert log.stopped_early
        assert log.steps_run == 3
        assert log.best_step == 1

    def test_no_patience_during_warmup(self, synthetic, small_net, monkeypatch):
        dataset, split = synthetic
        monkeypatch.setattr(training, "evaluate_batch", lambda *args, **kwargs: (1.0, 0.5))
        config = TrainConfig(max_steps=6, warmup_steps=6, interp_steps=0, eval_every=1, patience=1, batch_size=8)
        _, log = train_member(dataset, split, small_net, config)
        assert not log.stopped_early
        assert log.steps_run == 6

    def test_divergence(self, synthetic, small_net, monkeypatch):
        dataset, split = synthetic

        def explode(*args, **kwargs):
            raise NumericError("non-finite activation", layer="readout")

        monkeypatch.setattr(training, "forward_batch", explode)
        config = TrainConfig(max_steps=10, warmup_steps=0, interp_steps=0, eval_every=3, batch_size=8)
        with pytest.raises(TrainingDivergence) as info:
            train_member(dataset, split, small_net, config)
        assert torch.equal(info.value.params.values, init_params(small_net, small_net.seed).values)
        assert info.value.log.steps_run == 3

    def test_returns_best_validation_params(self, synthetic, small_net, quick_train):
        dataset, split = synthetic
        scaler = fit_target_scaler(dataset.graphs(small_net.cutoff, split.train_ids))
        val_batch = collate_graphs(dataset.graphs(small_net.cutoff, split.val_ids), small_net)
        params, log = train_member(dataset, split, small_net, quick_train, scaler=scaler)
        val_nll, _ = evaluate_batch(params, val_batch, small_net, scaler)
        assert val_nll == pytest.approx(log.best_val_nll, rel=1e-9)
        assert val_nll <= log.rows[-1].val_nll + 1e-9

    @pytest.mark.slow
    def test_sine_with_constant_noise(self, small_net):
        dataset = make_synthetic_dataset(1000, seed=0, function="sinx", noise=0.1)
        split = random_split(dataset.ids, (600, 200), seed=0)
        config = TrainConfig(
            max_steps=3000, warmup_steps=1000, interp_steps=1000, batch_size=32, lr0=1e-3, eval_every=100, patience=10,
        )
        scaler = fit_target_scaler(dataset.graphs(small_net.cutoff, split.train_ids))
        params, _ = train_member(dataset, split, small_net, config, scaler=scaler)

        val_batch = collate_graphs(dataset.graphs(small_net.cutoff, split.val_ids), small_net)
        with torch.no_grad():
            mean, variance = forward_batch(params, val_batch, small_net, scaler)
        rmse = float(torch.sqrt(((val_batch.targets - mean) ** 2).mean()))
        mean_sigma = float(torch.sqrt(variance).mean())
        assert rmse < 0.2
        assert 0.05 <= mean_sigma <= 0.2

    def test_requires_validation(self, synthetic, small_net, quick_train):
        dataset, split = synthetic
        no_val = split.__class__(split.train_ids, (), split.test_ids, split.seed)
        with pytest.raises(DataError):
            train_member(dataset, no_val, small_net, quick_train)


class TestTrainingLog:
    def test_csv(self, tmp_path):
        log = TrainingLog()
        log.append(TrainingLogRow(10, 1.0, 1e-3, 0.25, 1.5, 0.2))
        log.append(TrainingLogRow(20, 0.5, 9e-4, 0.20, 1.2, 0.15))
        loaded = load_training_log(save_training_log(log, tmp_path / "log.csv"))
        assert [row.step for row in loaded.rows] == [10, 20]
        assert loaded.rows[1].lam == 0.5
        assert loaded.best_step == 20
        assert loaded.best_val_nll == pytest.approx(1.2)

    def test_summary_without_evaluation(self):
        summary = member_summary(TrainingLog())
        assert summary["best_val_nll"] is None
