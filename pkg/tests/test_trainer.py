"""Trainer: losses, Adam, short training loops, reproducibility."""

import numpy as np
import pytest

from matchformer import matcher as M
from matchformer import tensor as T
from matchformer.data import make_pair, gt_coarse_labels
from matchformer.model import MatchModel
from matchformer.tensor import Tensor
from matchformer.trainer import (AdamState, EmptyAssignmentError, TrainConfig,
                                 adam_step, coarse_loss, config_from_dict,
                                 fine_loss, holdout_precision, train_toy)

TINY = dict(channels=(8, 8, 8, 16), coarse_channels=8, fine_channels=8,
            fusion_channels=8)


def tiny_config(**kw):
    return TrainConfig(steps=kw.pop("steps", 3), seed=kw.pop("seed", 0),
                       **{**TINY, **kw})


class TestCoarseLoss:
    def test_perfect_probabilities_give_zero(self):
        probs = Tensor(np.eye(4))
        labels = np.arange(4)
        assert float(coarse_loss(probs, labels).data) == 0.0

    def test_e_inverse_gives_one(self):
        probs = Tensor(np.full((3, 3), np.exp(-1.0)))
        labels = np.arange(3)
        assert abs(float(coarse_loss(probs, labels).data) - 1.0) < 1e-12

    def test_unlabeled_cells_ignored(self):
        probs = Tensor(np.array([[1.0, 0.0], [0.0, 1e-30]]))
        labels = np.array([0, -1])
        assert float(coarse_loss(probs, labels).data) == 0.0

    def test_empty_assignment_raises(self):
        with pytest.raises(EmptyAssignmentError):
            coarse_loss(Tensor(np.eye(2)), np.array([-1, -1]))

    def test_floor_prevents_infinite_loss(self):
        probs = Tensor(np.zeros((2, 2)))
        loss = float(coarse_loss(probs, np.array([0, 1])).data)
        assert np.isfinite(loss) and loss <= -np.log(1e-12) + 1e-9

    def test_gradient_through_dual_softmax(self):
        rng = np.random.default_rng(0)
        labels = np.array([1, 0, 2, -1])

        def fn(s):
            return coarse_loss(M.dual_softmax(s), labels)

        rep = T.fd_check(fn, Tensor(rng.normal(size=(4, 3))), tol=1e-3)
        assert rep.passed, rep.max_rel_err


class TestFineLoss:
    def test_perfect_offsets_give_zero(self):
        off = Tensor(np.array([[0.5, -0.25], [1.0, 2.0]]))
        assert float(fine_loss(off, off.data.copy()).data) == 0.0

    def test_unit_x_error_gives_one(self):
        pred = Tensor(np.array([[1.0, 0.0], [2.0, 3.0]]))
        gt = pred.data - np.array([1.0, 0.0])
        assert abs(float(fine_loss(pred, gt).data) - 1.0) < 1e-12

    def test_gradient_reaches_fine_maps(self):
        rng = np.random.default_rng(1)
        fine_a = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        fine_b = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        centers = np.array([[3, 3], [4, 4]])
        offs = M.fine_offsets(fine_a, fine_b, centers, centers, radius=2, tau=0.05)
        T.backward(fine_loss(offs, np.array([[0.5, 0.5], [-0.5, 0.0]])))
        assert fine_a.grad is not None and np.abs(fine_a.grad).sum() > 0
        assert fine_b.grad is not None and np.abs(fine_b.grad).sum() > 0


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState.for_params([p])
        before = p.data.copy()
        adam_step([p], state, lr=0.1)
        assert np.array_equal(p.data, before)

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = AdamState.for_params([p])
        adam_step([p], state, lr=0.1)
        assert abs(p.data[0] + 0.1) < 1e-8  # bias-corrected ratio is 1

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState.for_params([p])
        for _ in range(500):
            p.grad = 2.0 * p.data
            adam_step([p], state, lr=0.05)
        assert abs(p.data[0]) < 1e-3

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.zeros(2)
        with pytest.raises(T.ShapeError):
            adam_step([p], AdamState.for_params([p]), lr=0.1)


class TestTrainToy:
    def test_zero_steps_returns_initialization(self, tmp_path):
        cfg = tiny_config(steps=0)
        result = train_toy(cfg, checkpoint_path=tmp_path / "ckpt.txt")
        fresh = MatchModel(cfg.model_config(), seed=cfg.seed)
        for (_, a), (_, b) in zip(result.model.named_parameters(),
                                  fresh.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_bit_reproducible(self):
        runs = []
        for _ in range(2):
            result = train_toy(tiny_config(steps=3))
            runs.append(np.concatenate([p.data.reshape(-1)
                                        for p in result.model.parameters()]))
        assert np.array_equal(runs[0], runs[1])

    def test_every_parameter_gets_gradient_within_ten_steps(self):
        # both loss terms active: the fine head only feeds the fine loss
        cfg = tiny_config(steps=0)
        model = MatchModel(cfg.model_config(), seed=0)
        params = dict(model.named_parameters())
        touched = {name: False for name in params}
        centers = np.array([[3, 3], [4, 4]])
        for step in range(10):
            sample = make_pair(1_000_003 * cfg.seed + step, 64, 64)
            labels = gt_coarse_labels(sample.h_mat, (64, 64), model.cfg.coarse_stride)
            ca, fa, cb, fb = model.forward_pair(Tensor(sample.image_a[None, None]),
                                                Tensor(sample.image_b[None, None]))
            probs = M.dual_softmax(M.coarse_scores(ca, cb, tau=0.1))
            offs = M.fine_offsets(fa, fb, centers, centers, radius=2, tau=0.05)
            loss = T.add(coarse_loss(probs, labels),
                         T.mul(fine_loss(offs, np.zeros((2, 2))), 0.25))
            T.backward(loss)
            for name, p in params.items():
                if p.grad is not None and np.abs(p.grad).max() > 0:
                    touched[name] = True
            model.zero_grad()
        dead = [n for n, ok in touched.items() if not ok]
        assert dead == [], f"dead parameters: {dead[:6]}"

    def test_metrics_log_format(self, tmp_path):
        path = tmp_path / "metrics.csv"
        train_toy(tiny_config(steps=2), log_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss_coarse,loss_fine,precision"
        assert len(lines) == 3

    def test_loss_finite_every_step(self):
        result = train_toy(tiny_config(steps=5))
        assert all(np.isfinite(row[1]) for row in result.metrics)

    def test_holdout_precision_in_unit_interval(self):
        result = train_toy(tiny_config(steps=2))
        assert 0.0 <= result.holdout_precision <= 1.0


class TestTrainConfig:
    def test_invalid_lr_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)

    def test_both_weights_zero_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_coarse=0.0, lambda_fine=0.0)

    def test_config_from_dict_roundtrip(self):
        cfg = config_from_dict({"steps": "7", "lr": "0.001", "attention": "sea",
                                "channels": "8 8 8 16", "schedule": "sequential"})
        assert cfg.steps == 7 and cfg.lr == 0.001 and cfg.attention == "sea"
        assert cfg.model_config().stages[0].cross_flags == (False, False, False)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            config_from_dict({"leerning_rate": "0.1"})

    @pytest.mark.parametrize("name", ["self_only", "cross_only", "sequential",
                                      "interleaving"])
    def test_named_schedules_run_end_to_end(self, name):
        result = train_toy(tiny_config(steps=1, schedule=name))
        assert len(result.metrics) == 1

    def test_std_pe_ablation_runs_end_to_end(self):
        result = train_toy(tiny_config(steps=1, patch_embed="std"))
        assert len(result.metrics) == 1
