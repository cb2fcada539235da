"""Training, prediction and gradient checks for the surrogate."""

import numpy as np
import pytest

from soilmpc import datagen as dg
from soilmpc import lstm
from soilmpc.errors import Diverged, ShapeMismatch


def synthetic_dataset(n=80, lag=2, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    recs = []
    x = -400.0
    for t in range(n):
        u = float(rng.uniform(0, 8)) if t % 3 == 0 else 0.0
        r = float(rng.uniform(0, 4)) if rng.random() < 0.3 else 0.0
        et0 = float(rng.uniform(1, 3))
        kc = float(rng.uniform(0.5, 0.9))
        xv = constant if constant is not None else x
        recs.append(dg.DailyRecord(day=t, x=xv, u_irrig=u, rain=r, et0=et0, kc=kc))
        # mildly nonlinear toy dynamics for the head
        x = x + 2.5 * u + 1.5 * r - 6.0 * kc * et0 * (1 + x / 1500.0)
    return dg.build_supervised(recs, lag=lag)


def tiny_model(dataset, hidden=4, seed=3):
    return lstm.new_model(dataset, hidden=hidden, n_layers=1, seed=seed)


def make_window(model, rng):
    return rng.uniform(0, 1, size=model.window_shape)


class TestPrediction:
    def test_same_window_same_output(self):
        ds = synthetic_dataset()
        model = tiny_model(ds)
        rng = np.random.default_rng(0)
        w = make_window(model, rng)
        assert lstm.predict_one_step(model, w) == lstm.predict_one_step(model, w)

    def test_rejects_bad_window_shape(self):
        ds = synthetic_dataset()
        model = tiny_model(ds)
        with pytest.raises(ShapeMismatch):
            lstm.predict_one_step(model, np.zeros((2, 5)))

    def test_single_step_recursion_equals_one_step(self):
        ds = synthetic_dataset()
        model = tiny_model(ds)
        w = make_window(model, np.random.default_rng(1))
        seq = lstm.predict_recursive(model, w, np.empty((0, 4)))
        assert seq.shape == (1,)
        assert seq[0] == lstm.predict_one_step(model, w)

    def test_three_step_recursion_matches_manual_unroll(self):
        ds = synthetic_dataset()
        model = tiny_model(ds)
        rng = np.random.default_rng(2)
        w = make_window(model, rng)
        future = rng.uniform(0, 1, size=(2, 4))
        seq = lstm.predict_recursive(model, w, future)

        cur = w.copy()
        manual = []
        for k in range(3):
            pred_mm = lstm.predict_one_step(model, cur)
            manual.append(pred_mm)
            if k < 2:
                nxt = np.roll(cur, -1, axis=0)
                nxt[-1, 0] = model.stats.normalize_head(pred_mm)
                nxt[-1, 1:] = future[k]
                cur = nxt
        assert np.allclose(seq, manual, rtol=0, atol=1e-9)


class TestInputGradient:
    def test_matches_finite_differences(self):
        ds = synthetic_dataset()
        model = tiny_model(ds, hidden=5, seed=9)
        rng = np.random.default_rng(4)
        w = make_window(model, rng)
        future = rng.uniform(0, 1, size=(4, 4))
        jac = lstm.input_gradient(model, w, future)

        span_u = model.stats.spans[1]
        h = 1e-5 * span_u  # mm-space step
        n = 5
        fd = np.zeros((n, n))
        for k in range(n):
            for sgn, buf in ((1, None), (-1, None)):
                pass
            wp, wm = w.copy(), w.copy()
            fp, fm = future.copy(), future.copy()
            if k == 0:
                wp[-1, 1] += h / span_u
                wm[-1, 1] -= h / span_u
            else:
                fp[k - 1, 0] += h / span_u
                fm[k - 1, 0] -= h / span_u
            fd[:, k] = (lstm.predict_recursive(model, wp, fp)
                        - lstm.predict_recursive(model, wm, fm)) / (2 * h)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(jac - fd) / scale) < 1e-4

    def test_future_inputs_cannot_affect_past_predictions(self):
        ds = synthetic_dataset()
        model = tiny_model(ds, seed=11)
        rng = np.random.default_rng(5)
        jac = lstm.input_gradient(model, make_window(model, rng),
                                  rng.uniform(0, 1, size=(5, 4)))
        upper = np.triu(jac, k=1)
        assert np.array_equal(upper, np.zeros_like(upper))

    def test_zeroed_irrigation_column_kills_gradient(self):
        ds = synthetic_dataset()
        model = tiny_model(ds, seed=13)
        model.layers[0].wx[:, 1] = 0.0
        rng = np.random.default_rng(6)
        jac = lstm.input_gradient(model, make_window(model, rng), np.empty((0, 4)))
        assert jac.shape == (1, 1)
        assert jac[0, 0] == 0.0


class TestParameterGradients:
    def test_bptt_matches_central_differences(self):
        ds = synthetic_dataset(n=40, lag=2)
        model = tiny_model(ds, hidden=4, seed=21)
        X, y, _ = ds.split("train")
        X, y = X[:10], y[:10]
        _, grads = lstm._mse_and_grads(model, X, y)
        params = lstm._param_arrays(model)
        h = 1e-5
        worst = 0.0
        for p, g in zip(params, grads):
            flat_p = p.ravel()
            flat_g = g.ravel()
            for j in range(flat_p.size):
                orig = flat_p[j]
                flat_p[j] = orig + h
                model.b_y = float(params[-1][0])
                up, _ = lstm._forward_stack(model, X)
                flat_p[j] = orig - h
                model.b_y = float(params[-1][0])
                dn, _ = lstm._forward_stack(model, X)
                flat_p[j] = orig
                model.b_y = float(params[-1][0])
                fd = (np.mean((up - y) ** 2) - np.mean((dn - y) ** 2)) / (2 * h)
                denom = max(abs(fd), 1e-6)
                worst = max(worst, abs(flat_g[j] - fd) / denom)
        assert worst < 1e-4


class TestTraining:
    def test_constant_series_is_learned_quickly(self):
        ds = synthetic_dataset(n=60, constant=-321.0)
        cfg = lstm.TrainConfig(hidden=4, max_epochs=200, patience=200, seed=1,
                               learning_rate=0.03)
        result = lstm.train(ds, cfg)
        assert result.best_val < 1e-6
        X, y, _ = ds.split("test")
        pred = lstm.predict_one_step(result.model, X[0])
        assert pred == pytest.approx(-321.0, abs=1.0)

    def test_same_seed_reproduces_loss_history(self):
        ds = synthetic_dataset(n=60)
        cfg = lstm.TrainConfig(hidden=4, max_epochs=8, patience=8, seed=17)
        a = lstm.train(ds, cfg)
        b = lstm.train(ds, cfg)
        assert a.history == b.history

    def test_returned_model_has_best_recorded_validation_loss(self):
        ds = synthetic_dataset(n=80)
        cfg = lstm.TrainConfig(hidden=4, max_epochs=30, patience=30, seed=2)
        result = lstm.train(ds, cfg)
        vals = [v for _, _, v in result.history]
        assert result.best_val == min(vals)
        X_val, y_val, _ = ds.split("val")
        assert lstm._val_mse(result.model, X_val, y_val) == pytest.approx(result.best_val)

    def test_divergence_is_reported(self):
        ds = synthetic_dataset(n=60)
        ds.records[10, 1] = np.nan  # poisoned record
        cfg = lstm.TrainConfig(hidden=4, max_epochs=5, patience=5, seed=3)
        with pytest.raises(Diverged):
            lstm.train(ds, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            lstm.TrainConfig(learning_rate=0.0)


class TestSerialization:
    def test_round_trip_predictions_bit_identical(self, tmp_path):
        ds = synthetic_dataset()
        cfg = lstm.TrainConfig(hidden=4, max_epochs=5, patience=5, seed=5)
        model = lstm.train(ds, cfg).model
        rng = np.random.default_rng(8)
        windows = [make_window(model, rng) for _ in range(5)]
        before = [lstm.predict_one_step(model, w) for w in windows]
        path = tmp_path / "model.json"
        model.save(path)
        loaded = lstm.LstmModel.load(path)
        after = [lstm.predict_one_step(loaded, w) for w in windows]
        assert before == after

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = synthetic_dataset()
        model = tiny_model(ds)
        model.save(tmp_path / "a.json")
        model.save(tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
