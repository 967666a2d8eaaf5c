"""Loss, optimizer, metrics, and the training loop."""

import numpy as np
import pytest

from spodnet import autodiff as ad
from spodnet import core, datagen, models, training
from spodnet.autodiff import Tape, Tensor
from spodnet.core import LayerConfig
from spodnet.training import (AdamState, MetricsRow, TrainConfig, adam_step,
                              evaluate, f1_support, mse_loss, nmse,
                              offdiag_density, spectral_trace, train)


def _dataset(p=10, n=50, num=8, alpha=0.9, seed=42):
    return datagen.build_dataset(
        datagen.GenConfig(p=p, n=n, num=num, alpha=alpha, seed=seed))


class TestMseLoss:
    def test_zero_at_truth(self):
        t = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert mse_loss(Tensor(t), t).item() == 0.0

    def test_identity_offset(self):
        t = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert mse_loss(Tensor(t + np.eye(2)), t).item() == pytest.approx(2.0)

    def test_gradient_is_two_times_residual(self):
        truth = np.array([[1.0, 0.0], [0.0, 1.0]])
        pred = ad.parameter([[2.0, 0.5], [0.5, 3.0]])
        with Tape():
            ad.backward(mse_loss(pred, truth))
        assert np.allclose(pred.grad, 2.0 * (pred.data - truth))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        cfg = TrainConfig(lr=0.1, epochs=1)
        p = ad.parameter([1.0, -2.0, 3.0])
        g = np.array([0.5, -1.5, 2.0])
        state = AdamState.for_params([p])
        before = p.data.copy()
        adam_step([p], [g], state, cfg)
        step = p.data - before
        assert np.allclose(step, -cfg.lr * np.sign(g), atol=cfg.lr * 1e-4)

    def test_zero_gradient_keeps_params(self):
        cfg = TrainConfig(lr=0.1, epochs=1)
        p = ad.parameter([1.0, 2.0])
        state = AdamState.for_params([p])
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state, cfg)
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_none_gradient_counts_as_zero(self):
        cfg = TrainConfig(lr=0.1, epochs=1)
        p = ad.parameter([1.0])
        state = AdamState.for_params([p])
        adam_step([p], [None], state, cfg)
        assert np.array_equal(p.data, [1.0])

    def test_quadratic_bowl_converges(self):
        cfg = TrainConfig(lr=0.1, epochs=1)
        p = ad.parameter([1.0])
        state = AdamState.for_params([p])
        for _ in range(200):
            adam_step([p], [p.data.copy()], state, cfg)  # grad of 0.5 x^2
        assert abs(p.data[0]) < 1e-2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)


class TestNmse:
    def test_perfect_predictions(self):
        t = np.eye(3)
        assert nmse([t], [t]) == 0.0

    def test_zero_prediction_is_one(self):
        t = np.array([[2.0, 1.0], [1.0, 3.0]])
        assert nmse([np.zeros((2, 2))], [t]) == 1.0

    def test_doubled_truth_is_one(self):
        t = np.array([[2.0, 1.0], [1.0, 3.0]])
        assert nmse([2.0 * t], [t]) == pytest.approx(1.0)

    def test_zero_norm_truth_rejected(self):
        with pytest.raises(ValueError):
            nmse([np.eye(2)], [np.zeros((2, 2))])

    def test_orthogonal_conjugation_invariance(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        pred = rng.standard_normal((6, 6))
        truth = rng.standard_normal((6, 6)) + 3 * np.eye(6)
        a = nmse([pred], [truth])
        b = nmse([q @ pred @ q.T], [q @ truth @ q.T])
        assert abs(a - b) <= 1e-10


class TestF1Support:
    def test_identical_supports(self):
        t = np.array([[1.0, 0.5], [0.5, 1.0]])
        assert f1_support(t, t) == 1.0

    def test_empty_prediction_on_nonempty_truth(self):
        truth = np.array([[1.0, 0.5], [0.5, 1.0]])
        assert f1_support(np.eye(2), truth) == 0.0

    def test_confusion_matrix_arithmetic(self):
        truth = np.zeros((3, 3))
        truth[0, 1] = truth[1, 0] = 1.0
        np.fill_diagonal(truth, 1.0)
        pred = truth.copy()
        pred[0, 2] = pred[2, 0] = 0.5
        # precision 1/2, recall 1 -> F1 = 2/3
        assert f1_support(pred, truth) == pytest.approx(2.0 / 3.0)

    def test_both_supports_empty(self):
        assert f1_support(np.eye(4), np.eye(4)) == 1.0

    def test_transpose_invariance(self):
        rng = np.random.default_rng(1)
        pred = rng.standard_normal((5, 5))
        truth = np.where(rng.random((5, 5)) < 0.5, 0.0, 1.0)
        truth = np.triu(truth) + np.triu(truth, 1).T
        assert f1_support(pred, truth) == f1_support(pred.T, truth.T)

    def test_zero_tol_counts_exact_zeros(self):
        truth = np.eye(3)
        pred = np.eye(3)
        pred[0, 1] = pred[1, 0] = 1e-9  # below tolerance: treated as zero
        assert f1_support(pred, truth) == 1.0


class TestDensity:
    def test_diagonal_matrix_has_zero_density(self):
        assert offdiag_density(np.diag([1.0, 2.0, 3.0])) == 0.0

    def test_full_matrix(self):
        assert offdiag_density(np.ones((3, 3))) == 1.0


class TestTrain:
    def test_smoke_run_improves(self):
        ds = _dataset(num=12)
        params = models.init_params("ubg", 10, seed=0)
        cfg = TrainConfig(lr=1e-2, batch_size=4, epochs=5, seed=1)
        history = train(params, ds.entries[:8], ds.entries[8:], cfg,
                        LayerConfig())
        assert len(history) == 5
        assert history[-1].train_mse <= history[0].train_mse
        assert all(row.min_eig > 0.0 for row in history)

    def test_zero_lr_freezes_everything(self):
        ds = _dataset(num=6)
        params = models.init_params("ubg", 10, seed=0)
        before = [t.data.copy() for t in params.tensors()]
        cfg = TrainConfig(lr=0.0, batch_size=3, epochs=3, seed=1)
        history = train(params, ds.entries[:4], ds.entries[4:], cfg,
                        LayerConfig())
        for t, b in zip(params.tensors(), before):
            assert np.array_equal(t.data, b)
        assert all(row.test_nmse == history[0].test_nmse for row in history)

    def test_zero_epochs(self):
        ds = _dataset(num=4)
        params = models.init_params("ubg", 10, seed=0)
        before = [t.data.copy() for t in params.tensors()]
        history = train(params, ds.entries[:2], ds.entries[2:],
                        TrainConfig(lr=1e-2, epochs=0), LayerConfig())
        assert history == []
        for t, b in zip(params.tensors(), before):
            assert np.array_equal(t.data, b)

    def test_pinned_seed_is_bitwise_reproducible(self):
        ds = _dataset(num=6)

        def run():
            params = models.init_params("ubg", 10, seed=0)
            history = train(params, ds.entries[:4], ds.entries[4:],
                            TrainConfig(lr=1e-2, batch_size=2, epochs=2,
                                        seed=9), LayerConfig())
            return params, history

        p1, h1 = run()
        p2, h2 = run()
        for a, b in zip(p1.tensors(), p2.tensors()):
            assert a.data.tobytes() == b.data.tobytes()
        assert h1 == h2


class TestEvaluate:
    def test_schema_and_spd_flags(self):
        ds = _dataset(num=3)
        params = models.init_params("ubg", 10, seed=0)
        report = evaluate(params, ds.entries, LayerConfig())
        assert len(report["samples"]) == 3
        for row in report["samples"]:
            for key in ("sample_id", "nmse", "f1", "min_eig", "cond",
                        "density", "spd"):
                assert key in row
            assert row["spd"]
        assert report["aggregates"]["all_spd"]


class TestSpectralTrace:
    def test_identity_updates_trace(self):
        snapshots = [np.eye(4)] * 5
        rows = spectral_trace(snapshots)
        assert rows == [(i, 1.0, 1.0, 1.0) for i in range(5)]

    def test_collects_one_event_per_update(self):
        ds = _dataset(num=1)
        params = models.init_params("ubg", 10, seed=0)
        events = training.collect_update_events(params, ds.entries[0].s,
                                                LayerConfig(num_layers=2))
        assert len(events) == 2 * 10
        rows = spectral_trace([ev.theta_after for ev in events])
        assert all(row[1] > 0.0 for row in rows)


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow(0, 1.5, 0.25, 0.5, 0.01, 100.0, 0.3),
            MetricsRow(1, 1.25, 0.2, 0.6, 0.02, 90.0, 0.25)]
    path = tmp_path / "metrics.csv"
    training.write_metrics_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_mse,test_nmse,test_f1,min_eig,max_cond,mean_density"
    assert len(lines) == 3
    assert lines[1].split(",")[1] == repr(1.5)
