import math

import numpy as np
import pytest

from pseudolab import model
from pseudolab.model import OptimizerConfig
from pseudolab.tensor import SeededRng, ShapeError

D = 64  # 8x8 grids


def make_state(dropout=0.0, seed=0, k=2):
    return model.init_classifier(D, k, dropout_rate=dropout, seed=seed)


def random_batch(rng, n=6, k=2):
    x = rng.gaussian((n, D))
    t = np.zeros((n, k), np.float32)
    t[np.arange(n), (rng.uniform((n,)) * k).astype(int)] = 1.0
    return x, t


class TestForward:
    def test_zero_dropout_train_equals_eval(self):
        st = make_state(dropout=0.0)
        x = SeededRng(1).gaussian((4, D))
        lt, pt = model.forward(st, x, mode="train", rng=SeededRng(2))
        le, pe = model.forward(st, x, mode="eval")
        assert np.array_equal(lt, le) and np.array_equal(pt, pe)

    def test_prob_rows_sum_to_one(self):
        st = make_state(dropout=0.3, seed=3)
        x = SeededRng(4).gaussian((8, D), sigma=2.0)
        _, p = model.forward(st, x, mode="train", rng=SeededRng(5))
        assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-6)

    def test_eval_deterministic(self):
        st = make_state(dropout=0.5, seed=6)
        x = SeededRng(7).gaussian((5, D))
        _, p1 = model.forward(st, x, mode="eval")
        _, p2 = model.forward(st, x, mode="eval")
        assert np.array_equal(p1, p2)

    def test_mc_dropout_forces_mask_in_eval(self):
        st = make_state(dropout=0.5, seed=8)
        x = SeededRng(9).gaussian((16, D))
        _, p1 = model.forward(st, x, mode="eval", rng=SeededRng(10), mc_dropout=True)
        _, p2 = model.forward(st, x, mode="eval", rng=SeededRng(11), mc_dropout=True)
        assert not np.array_equal(p1, p2)

    def test_shape_mismatch(self):
        st = make_state()
        with pytest.raises(ShapeError):
            model.forward(st, np.zeros((2, D + 1), np.float32))

    def test_missing_rng_raises(self):
        st = make_state(dropout=0.3)
        with pytest.raises(ValueError):
            model.forward(st, np.zeros((2, D), np.float32), mode="train")


class TestBceLoss:
    def test_perfect_prediction_near_zero(self):
        p = np.array([[1.0 - 1e-7, 1e-7]], np.float32)
        t = np.array([[1.0, 0.0]], np.float32)
        loss, _ = model.bce_loss(p, t)
        assert 0.0 <= loss < 1e-6

    def test_half_probability_is_ln2(self):
        p = np.array([[0.5, 0.5]], np.float32)
        t = np.array([[1.0, 0.0]], np.float32)
        loss, _ = model.bce_loss(p, t)
        assert abs(loss - math.log(2)) < 1e-6

    def test_ignored_entries_contribute_nothing(self):
        p = np.array([[0.9, 0.1], [0.2, 0.8]], np.float32)
        t = np.array([[1.0, 0.0], [0.0, 0.0]], np.float32)
        loss_with, grad_with = model.bce_loss(p, t)
        loss_solo, _ = model.bce_loss(p[:1], t[:1])
        assert abs(loss_with - loss_solo) < 1e-7
        assert np.all(grad_with[1] == 0)

    def test_all_ignored_is_exactly_zero(self):
        p = np.full((3, 2), 0.5, np.float32)
        t = np.zeros((3, 2), np.float32)
        loss, grad = model.bce_loss(p, t)
        assert loss == 0.0
        assert not grad.any()

    def test_negative_target_direction(self):
        p = np.array([[0.3, 0.7]], np.float32)
        t = np.array([[0.0, -1.0]], np.float32)
        loss, _ = model.bce_loss(p, t)
        assert abs(loss - (-math.log(0.3))) < 1e-5

    def test_gradient_matches_finite_differences(self):
        rng = SeededRng(42)
        z = rng.gaussian((4, 2), sigma=1.5).astype(np.float64)
        t = np.array([[1, 0], [0, 1], [-1, 0], [0, 0]], np.float32)

        def loss_of(zv):
            e = np.exp(zv - zv.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            return model.bce_loss(p, t)[0]

        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        _, dz = model.bce_loss(p, t)
        eps = 1e-3
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                zp = z.copy()
                zp[i, j] += eps
                zm = z.copy()
                zm[i, j] -= eps
                fd = (loss_of(zp) - loss_of(zm)) / (2 * eps)
                assert abs(fd - dz[i, j]) < 1e-4 * max(1.0, abs(fd))


def loss_only(state, x, t, mask=None):
    _, probs = model.forward(state, x, mode="eval", dropout_mask=mask, mc_dropout=mask is not None)
    return model.bce_loss(probs, t)[0]


class TestLayerGradients:
    @pytest.mark.parametrize("draw", [0, 1, 2])
    def test_every_layer_matches_central_differences(self, draw):
        rng = SeededRng(100 + draw)
        st = make_state(seed=200 + draw)
        st.params = {k: v.astype(np.float64) for k, v in st.params.items()}
        x, t = random_batch(rng)
        x = x.astype(np.float64)
        _, grads = model.loss_and_grads(st, x, t)
        eps = 1e-3
        for name in model.PARAM_ORDER:
            flat = st.params[name].reshape(-1)
            g = grads[name].reshape(-1)
            fd = np.zeros_like(g)
            for pos in range(flat.size):
                old = flat[pos]
                flat[pos] = old + eps
                lp = loss_only(st, x, t)
                flat[pos] = old - eps
                lm = loss_only(st, x, t)
                flat[pos] = old
                fd[pos] = (lp - lm) / (2 * eps)
            denom = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12)
            assert np.linalg.norm(fd - g) / denom < 1e-4, f"layer {name} draw {draw}"

    def test_gradient_through_fixed_dropout_mask(self):
        rng = SeededRng(300)
        st = make_state(dropout=0.3, seed=301)
        st.params = {k: v.astype(np.float64) for k, v in st.params.items()}
        x, t = random_batch(rng, n=4)
        x = x.astype(np.float64)
        mask = model.make_dropout_mask(SeededRng(302), (4, model.HIDDEN[1]), 0.3, dtype=np.float64)
        _, grads = model.loss_and_grads(st, x, t, dropout_mask=mask)
        flat = st.params["w2"].reshape(-1)
        eps = 1e-3
        for pos in (0, 97, 1111):
            old = flat[pos]
            flat[pos] = old + eps
            lp = loss_only(st, x, t, mask)
            flat[pos] = old - eps
            lm = loss_only(st, x, t, mask)
            flat[pos] = old
            fd = (lp - lm) / (2 * eps)
            an = grads["w2"].reshape(-1)[pos]
            assert abs(fd - an) < 1e-4 * max(1.0, abs(fd))


class TestSgd:
    def test_zero_grads_fixed_point(self):
        st = make_state(seed=0)
        before = {k: v.copy() for k, v in st.params.items()}
        grads = {k: np.zeros_like(v) for k, v in st.params.items()}
        cfg = OptimizerConfig(epochs=10, weight_decay=0.0)
        model.sgd_step(st, grads, cfg, epoch=0)
        for k in before:
            assert np.array_equal(st.params[k], before[k])

    def test_milestone_decay_from_paper_schedule(self):
        cfg = OptimizerConfig(epochs=200, milestones=(120, 160), lr=0.01, gamma=0.1)
        assert abs(model.effective_lr(cfg, 130) - 0.001) < 1e-12
        assert abs(model.effective_lr(cfg, 0) - 0.01) < 1e-12
        assert abs(model.effective_lr(cfg, 119) - 0.01) < 1e-12
        assert abs(model.effective_lr(cfg, 120) - 0.001) < 1e-12
        assert abs(model.effective_lr(cfg, 160) - 0.0001) < 1e-12

    def test_lr_non_increasing(self):
        cfg = OptimizerConfig(epochs=50, milestones=(10, 20, 30), lr=0.05, gamma=0.5)
        lrs = [model.effective_lr(cfg, e) for e in range(50)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_hand_computed_two_step_trajectory(self):
        # w0=1, lr=0.1, momentum=0.9, wd=0; grads 0.5 then 0.25:
        # v1=0.5,  w1=1-0.05=0.95;  v2=0.9*0.5+0.25=0.7,  w2=0.95-0.07=0.88
        st = make_state(seed=1)
        st.params = {"w1": np.array([1.0], np.float32)}
        st.momentum = {"w1": np.zeros(1, np.float32)}
        cfg = OptimizerConfig(epochs=5, lr=0.1, momentum=0.9, weight_decay=0.0)
        order_backup = model.PARAM_ORDER
        try:
            model.PARAM_ORDER = ("w1",)
            model.sgd_step(st, {"w1": np.array([0.5], np.float32)}, cfg, epoch=0)
            assert abs(float(st.params["w1"][0]) - 0.95) < 1e-7
            model.sgd_step(st, {"w1": np.array([0.25], np.float32)}, cfg, epoch=0)
            assert abs(float(st.params["w1"][0]) - 0.88) < 1e-7
        finally:
            model.PARAM_ORDER = order_backup

    def test_weight_decay_enters_momentum(self):
        st = make_state(seed=2)
        w = st.params["w1"].copy()
        grads = {k: np.zeros_like(v) for k, v in st.params.items()}
        cfg = OptimizerConfig(epochs=5, lr=0.1, momentum=0.0, weight_decay=0.5)
        model.sgd_step(st, grads, cfg, epoch=0)
        assert np.allclose(st.params["w1"], w - 0.1 * 0.5 * w, atol=1e-7)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=10, milestones=(5, 5))
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=10, milestones=(12,))
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=10, lr=0.0)
        with pytest.raises(ValueError):
            OptimizerConfig(epochs=10, gamma=0.0)


class TestTrain:
    def test_epochs_zero_returns_unchanged(self):
        st = make_state(seed=3)
        before = {k: v.copy() for k, v in st.params.items()}
        x, t = random_batch(SeededRng(4), n=10)
        cfg = OptimizerConfig(epochs=0)
        model.train(st, x, t, cfg, SeededRng(5))
        for k in before:
            assert np.array_equal(st.params[k], before[k])

    def test_same_seed_identical_final_weights(self):
        x, t = random_batch(SeededRng(6), n=30)
        cfg = OptimizerConfig(epochs=5, milestones=(3,))
        outs = []
        for _ in range(2):
            st = make_state(dropout=0.3, seed=7)
            model.train(st, x, t, cfg, SeededRng(8))
            outs.append(st)
        for k in outs[0].params:
            assert np.array_equal(outs[0].params[k], outs[1].params[k])

    def test_history_records_per_epoch(self):
        x, t = random_batch(SeededRng(9), n=20)
        st = make_state(seed=10)
        hist = []
        model.train(st, x, t, OptimizerConfig(epochs=4), SeededRng(11), history=hist)
        assert len(hist) == 4
        assert all(len(row) == 3 for row in hist)

    def test_empty_training_set_rejected(self):
        st = make_state()
        with pytest.raises(ValueError):
            model.train(st, np.zeros((0, D), np.float32), np.zeros((0, 2), np.float32), OptimizerConfig(epochs=1), SeededRng(1))

    def test_separable_data_reaches_99(self):
        from pseudolab import dataset

        data = dataset.synth_generate([100, 100], snr_range=(8, 8), seed=13, grid_shape=(8, 8), noise_sigma=0.0)
        x = model.flatten_grids(data.grids)
        t = model.targets_from_labels(data.labels, 2)
        st = make_state(dropout=0.0, seed=14)
        model.train(st, x, t, OptimizerConfig(epochs=50, milestones=(30, 40)), SeededRng(15))
        acc = float((model.predict_probs(st, x).argmax(axis=1) == data.labels).mean())
        assert acc >= 0.99


class TestDropoutMask:
    def test_zero_fraction_and_scaling(self):
        rate = 0.3
        mask = model.make_dropout_mask(SeededRng(16), (10_000,), rate)
        frac = float((mask == 0).mean())
        sigma = math.sqrt(rate * (1 - rate) / 10_000)
        assert abs(frac - rate) <= 3 * sigma
        survivors = np.unique(mask[mask > 0])
        assert np.allclose(survivors, 1.0 / (1 - rate), atol=1e-6)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        st = make_state(dropout=0.25, seed=17)
        x, t = random_batch(SeededRng(18), n=16)
        model.train(st, x, t, OptimizerConfig(epochs=3), SeededRng(19))
        path = tmp_path / "model.ckpt"
        model.save_checkpoint(st, path)
        back = model.load_checkpoint(path)
        for k in st.params:
            assert np.array_equal(st.params[k], back.params[k])
            assert np.array_equal(st.momentum[k], back.momentum[k])
        assert back.dropout_rate == st.dropout_rate
        assert back.seed == st.seed
        assert back.epochs_trained == st.epochs_trained

    def test_save_is_deterministic(self, tmp_path):
        st = make_state(seed=20)
        model.save_checkpoint(st, tmp_path / "a.ckpt")
        model.save_checkpoint(st, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated_checkpoint_rejected(self, tmp_path):
        st = make_state(seed=21)
        model.save_checkpoint(st, tmp_path / "c.ckpt")
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-40])
        with pytest.raises(ValueError):
            model.load_checkpoint(tmp_path / "c.ckpt")

    def test_non_checkpoint_rejected(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            model.load_checkpoint(tmp_path / "junk")
