"""Optimizer, early-stopping, and training-driver tests.

The Adam checks compare against a straight-line re-implementation of the
textbook recursion; the trainer checks run tiny models end to end.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qckt.data import SynthConfig, gen_synthetic, preprocess
from qckt.errors import ConfigError, TrainingError
from qckt.model import Batch, ModelConfig, Parameters, VARIANTS, batch_loss_and_grads
from qckt.training import (
    DEFAULT_DIM_GRID,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_LR_GRID,
    AdamState,
    EarlyStopping,
    TrainConfig,
    adam_step,
    clip_gradients,
    grid_search,
    run_ablation,
    run_cv,
    train,
)


def adam_oracle(theta0, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam recursion, one fresh array per step."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trajectory = []
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        trajectory.append(theta.copy())
    return trajectory


class TestAdamStep:
    def test_first_step_magnitude_is_lr(self):
        cfg = TrainConfig(lr=0.1)
        for g in (1.0, 2.0, 1000.0, -3.5):
            params = {"theta": np.array([4.0])}
            state = AdamState(params)
            adam_step(params, {"theta": np.array([g])}, state, cfg)
            step = 4.0 - params["theta"][0]
            assert_allclose(abs(step), 0.1, rtol=1e-6)
            assert np.sign(step) == np.sign(g)

    def test_zero_gradient_leaves_params_unchanged(self):
        cfg = TrainConfig(lr=0.1)
        params = {"w": np.array([1.0, -2.0, 0.5])}
        state = AdamState(params)
        for _ in range(5):
            adam_step(params, {"w": np.zeros(3)}, state, cfg)
        assert np.array_equal(params["w"], np.array([1.0, -2.0, 0.5]))

    def test_quadratic_converges_near_zero(self):
        # minimize theta^2 from theta = 1 with lr 0.1 for 100 steps
        cfg = TrainConfig(lr=0.1)
        params = {"theta": np.array(1.0)}
        state = AdamState(params)
        grads_seen = []
        for _ in range(100):
            grads_seen.append(2.0 * params["theta"].copy())
            adam_step(params, {"theta": grads_seen[-1]}, state, cfg)
        assert abs(float(params["theta"])) < 0.05
        oracle = adam_oracle(1.0, grads_seen, lr=0.1)
        assert_allclose(float(params["theta"]), float(oracle[-1]), rtol=1e-13)

    def test_matches_oracle_on_random_tensors(self):
        rng = np.random.default_rng(7)
        cfg = TrainConfig(lr=3e-3)
        for _ in range(20):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
            theta0 = rng.normal(size=shape)
            grads_seq = [rng.normal(size=shape) for _ in range(6)]
            params = {"w": theta0.copy()}
            state = AdamState(params)
            for g in grads_seq:
                adam_step(params, {"w": g}, state, cfg)
            oracle = adam_oracle(theta0, grads_seq, lr=3e-3)
            assert_allclose(params["w"], oracle[-1], rtol=1e-12, atol=1e-15)

    def test_shared_step_counter(self):
        cfg = TrainConfig(lr=0.1)
        params = {"a": np.array([1.0]), "b": np.array([1.0])}
        state = AdamState(params)
        adam_step(params, {"a": np.array([1.0]), "b": np.array([1.0])}, state, cfg)
        assert state.t == 1

    def test_nonfinite_gradient_raises_with_name(self):
        cfg = TrainConfig(lr=0.1)
        params = {"a": np.array([1.0]), "bad_one": np.array([1.0])}
        state = AdamState(params)
        grads = {"a": np.array([1.0]), "bad_one": np.array([np.nan])}
        with pytest.raises(TrainingError, match="bad_one"):
            adam_step(params, grads, state, cfg)

    def test_rejects_negative_lr(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1e-3)
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)


class TestClipGradients:
    def test_below_threshold_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_gradients(grads, 5.0)
        assert_allclose(norm, 0.5)
        assert np.array_equal(clipped["a"], grads["a"])

    def test_scales_to_max_norm(self):
        rng = np.random.default_rng(3)
        grads = {"a": rng.normal(size=(4, 3)) * 10.0, "b": rng.normal(size=7) * 10.0}
        clipped, norm = clip_gradients(grads, 5.0)
        assert norm > 5.0
        new_norm = np.sqrt(sum(float((g * g).sum()) for g in clipped.values()))
        assert_allclose(new_norm, 5.0, rtol=1e-12)
        # direction preserved
        assert_allclose(clipped["a"] / grads["a"], 5.0 / norm, rtol=1e-12)

    def test_disabled_by_zero_or_none(self):
        grads = {"a": np.array([100.0])}
        for flag in (0.0, None):
            clipped, _ = clip_gradients(grads, flag)
            assert np.array_equal(clipped["a"], grads["a"])


class TestEarlyStopping:
    def test_scripted_trace_stops_at_best_plus_patience(self):
        # AUC 0.6, then 0.7 forever: best epoch 2, last trained epoch 12
        stopper = EarlyStopping(patience=10)
        trace = [0.6] + [0.7] * 30
        ran = 0
        for epoch, value in enumerate(trace, start=1):
            ran = epoch
            if not stopper.update(epoch, value):
                break
        assert stopper.best_epoch == 2
        assert ran == 12

    def test_equal_value_is_not_improvement(self):
        stopper = EarlyStopping(patience=2)
        assert stopper.update(1, 0.8)
        assert stopper.update(2, 0.8)
        assert not stopper.update(3, 0.8)
        assert stopper.best_epoch == 1

    def test_improvement_resets_window(self):
        stopper = EarlyStopping(patience=3)
        values = [0.5, 0.6, 0.55, 0.65, 0.6, 0.6, 0.6]
        survived = [stopper.update(e, v) for e, v in enumerate(values, start=1)]
        assert stopper.best_epoch == 4
        assert survived == [True, True, True, True, True, True, False]


def tiny_dataset(students=30, questions=12, kcs=5, seed=11):
    cfg = SynthConfig(
        students=students,
        questions=questions,
        kcs=kcs,
        seq_len=(6, 12),
        seed=seed,
    )
    ds, _ = gen_synthetic(cfg)
    return preprocess(ds)


class TestTrain:
    def setup_method(self):
        self.ds = tiny_dataset()
        self.train_seqs = self.ds.sequences[:22]
        self.valid_seqs = self.ds.sequences[22:]
        self.mcfg = ModelConfig(n_questions=12, n_kcs=5, dim=4, lambda_aux=1.0)

    def test_report_bookkeeping(self):
        tcfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=4, seed=3)
        report = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        assert report.epochs_run == 4
        assert len(report.train_losses) == 4
        assert len(report.valid_aucs) == 4
        assert report.best_epoch == int(np.argmax(report.valid_aucs)) + 1
        assert_allclose(report.best_valid_auc, max(report.valid_aucs))
        assert report.best_params.config == self.mcfg
        assert report.total_updates == 4 * 3  # ceil(22 / 8) batches per epoch

    def test_lr_zero_is_bit_identical_to_init(self):
        tcfg = TrainConfig(lr=0.0, batch_size=8, max_epochs=3, seed=5)
        report = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        init = Parameters.init(self.mcfg, seed=(5, 0, 0))
        for name, arr in init.items():
            assert np.array_equal(report.best_params[name], arr), name

    def test_deterministic_given_seed(self):
        tcfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=3, seed=9)
        r1 = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        r2 = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        assert r1.train_losses == r2.train_losses
        assert r1.valid_aucs == r2.valid_aucs
        for name, arr in r1.best_params.items():
            assert np.array_equal(arr, r2.best_params[name])

    def test_fold_changes_the_run(self):
        tcfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=2, seed=9)
        r0 = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        r1 = train(self.mcfg, replace_fold(tcfg, 1), self.train_seqs, self.valid_seqs)
        assert r0.train_losses != r1.train_losses

    def test_early_stop_arithmetic_in_real_run(self):
        tcfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=40, patience=3, seed=1)
        report = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        if report.stop_reason == "early_stop":
            assert report.epochs_run == report.best_epoch + 3
        else:
            assert report.epochs_run == 40

    def test_loss_nonincreasing_first_10_steps_small_lr(self):
        # fixed batch, lr 1e-4: each Adam step must not increase the loss
        params = Parameters.init(self.mcfg, seed=(2, 0, 0))
        batch = Batch(self.train_seqs[:10])
        cfg = TrainConfig(lr=1e-4)
        state = AdamState(params)
        losses = []
        for _ in range(10):
            loss, grads = batch_loss_and_grads(params, batch, self.mcfg)
            losses.append(loss)
            adam_step(params.tensors, grads, state, cfg)
        for earlier, later in zip(losses, losses[1:]):
            assert later <= earlier + 1e-12

    def test_stop_at_train_loss(self):
        mcfg = ModelConfig(n_questions=12, n_kcs=5, dim=8, lambda_aux=0.0)
        tcfg = TrainConfig(
            lr=1e-2,
            batch_size=64,
            max_epochs=500,
            patience=500,
            seed=4,
            stop_at_train_loss=0.55,
            max_updates=400,
        )
        report = train(mcfg, tcfg, self.train_seqs[:10], self.valid_seqs[:4])
        assert report.stop_reason == "train_loss"
        assert report.total_updates < 400

    def test_max_updates_cap(self):
        tcfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=100, seed=4, max_updates=5)
        report = train(self.mcfg, tcfg, self.train_seqs, self.valid_seqs)
        assert report.stop_reason == "max_updates"
        assert report.total_updates == 5


def replace_fold(cfg, fold):
    from dataclasses import replace

    return replace(cfg, fold=fold)


class TestRunCv:
    def setup_method(self):
        self.ds = tiny_dataset(students=24, seed=21)
        self.mcfg = ModelConfig(n_questions=12, n_kcs=5, dim=4)
        self.tcfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=2, seed=13)

    def test_fold_metrics_and_aggregates(self):
        cv = run_cv(self.ds, self.mcfg, self.tcfg, k=3)
        assert [f.fold for f in cv.folds] == [0, 1, 2]
        aucs = [f.test_auc for f in cv.folds]
        assert_allclose(cv.mean_auc, np.mean(aucs))
        assert_allclose(cv.std_auc, np.std(aucs))
        assert all(0.0 <= a <= 1.0 for a in aucs)
        rows = cv.rows()
        assert rows[-2]["fold"] == "mean" and rows[-1]["fold"] == "std"

    def test_deterministic(self):
        a = run_cv(self.ds, self.mcfg, self.tcfg, k=2)
        b = run_cv(self.ds, self.mcfg, self.tcfg, k=2)
        assert a.mean_auc == b.mean_auc
        assert a.mean_acc == b.mean_acc

    def test_parallel_jobs_match_serial(self):
        serial = run_cv(self.ds, self.mcfg, self.tcfg, k=2, jobs=1)
        parallel = run_cv(self.ds, self.mcfg, self.tcfg, k=2, jobs=2)
        assert serial.mean_auc == parallel.mean_auc
        assert [f.test_auc for f in serial.folds] == [f.test_auc for f in parallel.folds]


class TestGridSearch:
    def setup_method(self):
        self.ds = tiny_dataset(students=20, seed=33)
        self.mcfg = ModelConfig(n_questions=12, n_kcs=5, dim=4)
        self.tcfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=1, seed=2)

    def test_default_grid_has_30_cells(self, monkeypatch):
        import qckt.training as tr

        seen = []

        def fake_cell(args):
            lam, lr, dim = args[4]
            seen.append((lam, lr, dim))
            return {"lambda": lam, "lr": lr, "d": dim, "valid_auc": 0.5}

        monkeypatch.setattr(tr, "_run_cell", fake_cell)
        result = tr.grid_search(self.ds, self.mcfg, self.tcfg)
        assert len(result.table) == 30
        assert len(set(seen)) == 30
        assert len(DEFAULT_LAMBDA_GRID) * len(DEFAULT_LR_GRID) * len(DEFAULT_DIM_GRID) == 30

    def test_tie_break_prefers_small_d_large_lambda_large_lr(self, monkeypatch):
        import qckt.training as tr

        def fake_cell(args):
            lam, lr, dim = args[4]
            return {"lambda": lam, "lr": lr, "d": dim, "valid_auc": 0.5}

        monkeypatch.setattr(tr, "_run_cell", fake_cell)
        result = tr.grid_search(self.ds, self.mcfg, self.tcfg)
        assert result.best == {"lambda": 2.0, "lr": 1e-3, "d": 64, "valid_auc": 0.5}

    def test_small_real_grid_trains_and_picks_max(self):
        result = grid_search(
            self.ds, self.mcfg, self.tcfg, lambdas=[0.0, 1.0], lrs=[1e-2], dims=[4]
        )
        assert len(result.table) == 2
        best_auc = max(r["valid_auc"] for r in result.table)
        assert result.best["valid_auc"] == best_auc

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigError):
            grid_search(self.ds, self.mcfg, self.tcfg, lambdas=[], lrs=[1e-3], dims=[4])


class TestRunAblation:
    def test_all_variants_share_folds(self):
        ds = tiny_dataset(students=20, seed=42)
        mcfg = ModelConfig(n_questions=12, n_kcs=5, dim=4)
        tcfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=1, seed=6)
        report = run_ablation(ds, mcfg, tcfg, k=2)
        assert set(report.per_variant) == set(VARIANTS)
        for cv in report.per_variant.values():
            assert len(cv.folds) == 2
        rows = report.rows()
        assert {r["variant"] for r in rows} == set(VARIANTS)
        assert all("mean_auc" in r and "std_auc" in r for r in rows)
