import math

import numpy as np
import pytest

from adld import losses as L
from adld import tensor as T
from adld.tensor import Tensor

import oracles


def rand_maps(b, n, d, seed, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=(b, n, d, d)).astype(np.float32)


def rand_labels(b, n, d, seed):
    return np.random.default_rng(seed + 9000).integers(1, d * d + 1, size=(b, n))


class TestLandmarkClsLoss:
    def test_saturated_maps_give_zero(self):
        d = 4
        labels = rand_labels(2, 3, d, 0)
        maps = np.full((2, 3, d, d), -200.0, dtype=np.float32)
        for b in range(2):
            for i in range(3):
                y = labels[b, i] - 1
                maps[b, i, y // d, y % d] = 200.0
        loss = L.landmark_cls_loss(Tensor(maps), labels)
        assert loss.item() <= 1e-6

    def test_uniform_maps_give_log_classes(self):
        d = 4
        maps = np.zeros((2, 3, d, d), dtype=np.float32)
        labels = rand_labels(2, 3, d, 1)
        loss = L.landmark_cls_loss(Tensor(maps), labels)
        assert loss.item() == pytest.approx(math.log(16), abs=1e-6)

    def test_matches_loop_oracle(self):
        for seed in range(20):
            maps = rand_maps(2, 3, 4, seed)
            labels = rand_labels(2, 3, 4, seed)
            got = L.landmark_cls_loss(Tensor(maps), labels).item()
            want = oracles.landmark_cls_oracle(maps.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-6)

    def test_bad_label_rejected(self):
        maps = rand_maps(1, 2, 4, 0)
        with pytest.raises(ValueError, match="outside"):
            L.landmark_cls_loss(Tensor(maps), np.array([[0, 5]]))
        with pytest.raises(ValueError, match="outside"):
            L.landmark_cls_loss(Tensor(maps), np.array([[17, 5]]))

    def test_gradient(self):
        maps = Tensor(rand_maps(1, 2, 3, 3))
        labels = rand_labels(1, 2, 3, 3)
        err = T.finite_diff_check(lambda m: L.landmark_cls_loss(m, labels), maps)
        assert err < 1e-2  # softmax CE is curved; loose bound, exact check below

    def test_gradient_is_softmax_minus_onehot(self):
        maps = Tensor(rand_maps(2, 3, 4, 5), requires_grad=True)
        labels = rand_labels(2, 3, 4, 5)
        with T.Tape() as tape:
            T.backward(L.landmark_cls_loss(maps, labels), tape)
        x = maps.data.astype(np.float64)
        e = np.exp(x - x.max(axis=(2, 3), keepdims=True))
        p = e / e.sum(axis=(2, 3), keepdims=True)
        onehot = np.zeros_like(p).reshape(2, 3, 16)
        for b in range(2):
            for i in range(3):
                onehot[b, i, labels[b, i] - 1] = 1
        want = (p.reshape(2, 3, 16) - onehot) / 6.0
        assert np.abs(maps.grad.reshape(2, 3, 16) - want).max() < 1e-6


class TestLandmarkAdvLosses:
    def test_one_hot_raw_maps_zero_d_loss(self):
        d = 4
        labels = rand_labels(2, 3, d, 10)
        maps = np.zeros((2, 3, d, d), dtype=np.float32)
        for b in range(2):
            for i in range(3):
                y = labels[b, i] - 1
                maps[b, i, y // d, y % d] = 1.0
        assert L.landmark_adv_d_loss(Tensor(maps), labels).item() == 0.0

    def test_zero_maps_d_loss_is_inverse_cells(self):
        d = 4
        labels = rand_labels(2, 3, d, 11)
        maps = np.zeros((2, 3, d, d), dtype=np.float32)
        assert L.landmark_adv_d_loss(Tensor(maps), labels).item() == pytest.approx(1.0 / 16, abs=1e-7)

    def test_uniform_raw_maps_zero_e_loss(self):
        d = 4
        maps = np.full((2, 3, d, d), 1.0 / 16, dtype=np.float32)
        assert L.landmark_adv_e_loss(Tensor(maps)).item() == pytest.approx(0.0, abs=1e-9)

    def test_zero_maps_e_loss(self):
        d = 4
        maps = np.zeros((1, 2, d, d), dtype=np.float32)
        assert L.landmark_adv_e_loss(Tensor(maps)).item() == pytest.approx((1.0 / 16) ** 2, abs=1e-9)

    def test_match_loop_oracles(self):
        for seed in range(20):
            maps = rand_maps(2, 3, 4, seed + 50)
            labels = rand_labels(2, 3, 4, seed + 50)
            got = L.landmark_adv_d_loss(Tensor(maps), labels).item()
            want = oracles.landmark_adv_d_oracle(maps.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-6)
            got = L.landmark_adv_e_loss(Tensor(maps)).item()
            want = oracles.landmark_adv_e_oracle(maps.tolist())
            assert got == pytest.approx(want, abs=1e-6)

    def test_adversarial_minimizers(self):
        # d-loss is uniquely minimized by the one-hot target map
        d = 3
        labels = np.array([[5]])
        onehot = np.zeros((1, 1, d, d), dtype=np.float32)
        onehot[0, 0, 1, 1] = 1.0
        base = L.landmark_adv_d_loss(Tensor(onehot), labels).item()
        assert base == 0.0
        rng = np.random.default_rng(0)
        for _ in range(20):
            delta = rng.normal(scale=0.1, size=onehot.shape).astype(np.float32)
            assert L.landmark_adv_d_loss(Tensor(onehot + delta), labels).item() > 0
        # gradient is zero exactly at the minimizer
        t = Tensor(onehot.copy(), requires_grad=True)
        with T.Tape() as tape:
            T.backward(L.landmark_adv_d_loss(t, labels), tape)
        assert np.abs(t.grad).max() == 0.0
        # e-loss is uniquely minimized by the constant 1/d^2 map
        uniform = np.full((1, 1, d, d), 1.0 / 9, dtype=np.float32)
        assert L.landmark_adv_e_loss(Tensor(uniform)).item() == pytest.approx(0.0, abs=1e-12)
        for _ in range(20):
            delta = rng.normal(scale=0.1, size=uniform.shape).astype(np.float32)
            assert L.landmark_adv_e_loss(Tensor(uniform + delta)).item() > 0

    def test_gradients(self):
        # map values bounded away from the per-cell targets keep every
        # gradient component above the float32 finite-difference noise floor
        rng = np.random.default_rng(7)
        raw = rng.uniform(0.3, 0.8, size=(1, 2, 3, 3)).astype(np.float32)
        raw *= np.where(rng.integers(0, 2, raw.shape) == 0, -1.0, 1.0).astype(np.float32)
        labels = rand_labels(1, 2, 3, 7)
        assert T.finite_diff_check(lambda m: L.landmark_adv_d_loss(m, labels), Tensor(raw.copy())) < 1e-3
        assert T.finite_diff_check(L.landmark_adv_e_loss, Tensor(raw.copy())) < 1e-3

    def test_gradients_closed_form(self):
        maps = Tensor(rand_maps(2, 3, 4, 7), requires_grad=True)
        labels = rand_labels(2, 3, 4, 7)
        with T.Tape() as tape:
            T.backward(L.landmark_adv_d_loss(maps, labels), tape)
        x = maps.data.astype(np.float64)
        onehot = np.zeros((2, 3, 16))
        for b in range(2):
            for i in range(3):
                onehot[b, i, labels[b, i] - 1] = 1
        want = 2.0 * (x.reshape(2, 3, 16) - onehot) / (2 * 3 * 16)
        assert np.abs(maps.grad.reshape(2, 3, 16) - want).max() < 1e-7
        maps.zero_grad()
        with T.Tape() as tape:
            T.backward(L.landmark_adv_e_loss(maps), tape)
        want = 2.0 * (x - 1.0 / 16) / (2 * 3 * 16)
        assert np.abs(maps.grad - want).max() < 1e-7


class TestAUWeights:
    def test_equal_rates_give_uniform(self):
        t = L.compute_au_weights([0.3] * 5)
        assert np.allclose(t.weight_array, 0.2)

    def test_table_rates_fixture(self):
        rates = [0.184, 0.146, 0.198, 0.44, 0.54, 0.342]
        t = L.compute_au_weights(rates)
        want = oracles.au_weight_oracle(rates)
        assert np.allclose(t.weight_array, want, atol=1e-12)
        assert np.allclose(t.weight_array, [0.2229, 0.2809, 0.2071, 0.0932, 0.0760, 0.1199], atol=5e-4)
        assert t.weight_array.sum() == pytest.approx(1.0, abs=1e-6)

    def test_sum_is_one_randomized(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            rates = rng.uniform(0.01, 1.0, size=rng.integers(1, 10))
            assert L.compute_au_weights(rates).weight_array.sum() == pytest.approx(1.0, abs=1e-6)

    def test_zero_rate_rejected(self):
        with pytest.raises(L.ConfigurationError):
            L.compute_au_weights([0.5, 0.0])
        with pytest.raises(L.ConfigurationError):
            L.compute_au_weights([0.5, 1.5])


class TestAUDetectionLoss:
    def test_half_probability_single_au(self):
        loss = L.au_detection_loss(Tensor(np.zeros((1, 1), dtype=np.float32)), np.array([[1]]), np.array([1.0]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_saturated_logits_near_zero(self):
        logits = np.array([[20.0, -20.0]], dtype=np.float32)
        labels = np.array([[1, 0]])
        loss = L.au_detection_loss(Tensor(logits), labels, np.array([0.5, 0.5]))
        assert loss.item() < 1e-8

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for seed in range(20):
            logits = rng.normal(scale=2, size=(3, 4)).astype(np.float32)
            labels = rng.integers(0, 2, size=(3, 4))
            w = oracles.au_weight_oracle(rng.uniform(0.05, 0.9, 4).tolist())
            got = L.au_detection_loss(Tensor(logits), labels, np.array(w)).item()
            want = oracles.au_detection_oracle(logits.tolist(), labels.tolist(), w)
            assert got == pytest.approx(want, abs=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5)).astype(np.float32)
        labels = rng.integers(0, 2, size=(4, 5))
        w = oracles.au_weight_oracle(rng.uniform(0.05, 0.9, 5).tolist())
        base = L.au_detection_loss(Tensor(logits), labels, np.array(w)).item()
        for _ in range(10):
            perm = rng.permutation(5)
            permuted = L.au_detection_loss(Tensor(logits[:, perm]), labels[:, perm], np.array(w)[perm]).item()
            assert permuted == pytest.approx(base, abs=1e-6)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError, match="not in"):
            L.au_detection_loss(Tensor(np.zeros((1, 2), dtype=np.float32)), np.array([[0, 2]]), np.array([0.5, 0.5]))

    def test_gradient(self):
        rng = np.random.default_rng(7)
        logits = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
        labels = rng.integers(0, 2, size=(2, 3))
        w = np.array(oracles.au_weight_oracle([0.2, 0.5, 0.8]))
        assert T.finite_diff_check(lambda s: L.au_detection_loss(s, labels, w), logits) < 1e-3


class TestFeatureAdvLosses:
    def test_perfect_discriminator(self):
        d_loss, _ = L.feature_adv_losses(
            Tensor(np.ones((3, 1), dtype=np.float32)), Tensor(np.zeros((3, 1), dtype=np.float32))
        )
        assert d_loss.item() == 0.0

    def test_perfect_generator(self):
        _, g_loss = L.feature_adv_losses(
            Tensor(np.zeros((3, 1), dtype=np.float32)), Tensor(np.ones((3, 1), dtype=np.float32))
        )
        assert g_loss.item() == 0.0

    def test_d_loss_gradient_never_reaches_generator(self):
        # the d-side fake score is computed on a stop_gradient'ed feature, so
        # d_loss trains the discriminator but not the generator
        rng = np.random.default_rng(0)
        gen_param = Tensor(rng.normal(size=(1, 4)).astype(np.float32), requires_grad=True)
        disc_w = Tensor(rng.normal(size=(1, 4)).astype(np.float32), requires_grad=True)
        disc_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        real_feat = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        with T.Tape() as tape:
            fake_feat = T.elementwise_sum([real_feat, T.concat_batch(gen_param, T.concat_batch(gen_param, gen_param))])
            real_score = T.linear(real_feat, disc_w, disc_b)
            fake_score = T.linear(T.stop_gradient(fake_feat), disc_w, disc_b)
            d_loss, _ = L.feature_adv_losses(real_score, fake_score)
            T.backward(d_loss, tape)
        assert gen_param.grad is None, "generator must not receive d_loss gradient"
        assert disc_w.grad is not None and np.abs(disc_w.grad).max() > 0

    def test_g_loss_trains_generator_through_frozen_discriminator(self):
        rng = np.random.default_rng(1)
        gen_param = Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        disc_w = Tensor(rng.normal(size=(1, 4)).astype(np.float32), requires_grad=True)
        disc_b = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        with T.Tape() as tape:
            fake_score = T.linear(gen_param, T.stop_gradient(disc_w), T.stop_gradient(disc_b))
            _, g_loss = L.feature_adv_losses(Tensor(np.ones((3, 1), dtype=np.float32)), fake_score)
            T.backward(g_loss, tape)
        assert gen_param.grad is not None
        assert disc_w.grad is None

    def test_values(self):
        r = np.array([[0.3], [0.7]], dtype=np.float32)
        f = np.array([[0.2], [0.4]], dtype=np.float32)
        d_loss, g_loss = L.feature_adv_losses(Tensor(r), Tensor(f))
        want_d = (((0.3 - 1) ** 2 + (0.7 - 1) ** 2) / 2) + ((0.2**2 + 0.4**2) / 2)
        want_g = ((0.2 - 1) ** 2 + (0.4 - 1) ** 2) / 2
        assert d_loss.item() == pytest.approx(want_d, abs=1e-6)
        assert g_loss.item() == pytest.approx(want_g, abs=1e-6)


class TestReconLosses:
    def test_identical_is_zero(self):
        x = Tensor(np.random.default_rng(2).normal(size=(1, 4, 3, 3)).astype(np.float32))
        assert L.self_recon_loss(x, Tensor(x.data.copy())).item() == 0.0
        assert L.cross_cycle_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_constant_offset(self):
        x = np.zeros((1, 2, 2, 2), dtype=np.float32)
        y = np.full_like(x, -0.75)
        assert L.self_recon_loss(Tensor(x), Tensor(y)).item() == pytest.approx(0.75)

    def test_symmetry(self):
        a = Tensor(np.random.default_rng(3).normal(size=(2, 3)).astype(np.float32))
        b = Tensor(np.random.default_rng(4).normal(size=(2, 3)).astype(np.float32))
        assert L.cross_cycle_loss(a, b).item() == L.cross_cycle_loss(b, a).item()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
            b = rng.normal(size=(2, 3, 2, 2)).astype(np.float32)
            got = L.self_recon_loss(Tensor(a), Tensor(b)).item()
            want = oracles.l1_mean_oracle(a.tolist(), b.tolist())
            assert got == pytest.approx(want, abs=1e-6)


class TestTotalObjective:
    @staticmethod
    def scalar(v):
        return Tensor(np.float32(v))

    def test_zero_parts(self):
        parts = {k: self.scalar(0.0) for k in L.TERM_ORDER}
        assert L.total_objective(parts, L.LossWeights()).item() == 0.0

    def test_unit_parts_default_weights(self):
        parts = {k: self.scalar(1.0) for k in L.TERM_ORDER}
        total = L.total_objective(parts, L.LossWeights())
        assert total.item() == pytest.approx(1 + 0.6 + 400 + 1.2 + 3 + 40, abs=1e-3)

    def test_linearity_in_single_part(self):
        base = {k: self.scalar(1.0) for k in L.TERM_ORDER}
        w = L.LossWeights()
        t0 = L.total_objective(dict(base), w).item()
        base["recon"] = self.scalar(3.0)
        t1 = L.total_objective(base, w).item()
        assert t1 - t0 == pytest.approx(2 * 3.0, abs=1e-4)

    def test_missing_parts_allowed(self):
        total = L.total_objective({"au": self.scalar(2.0)}, L.LossWeights())
        assert total.item() == pytest.approx(2.0)

    def test_nonfinite_part_names_term(self):
        parts = {"au": self.scalar(1.0), "recon": self.scalar(float("nan"))}
        with pytest.raises(L.DivergenceError, match="recon"):
            L.total_objective(parts, L.LossWeights())

    def test_gradient_routes_weights(self):
        parts = {k: Tensor(np.float32(1.0), requires_grad=True) for k in L.TERM_ORDER}
        with T.Tape() as tape:
            T.backward(L.total_objective(parts, L.LossWeights()), tape)
        assert parts["au"].grad == pytest.approx(1.0)
        assert parts["landmark"].grad == pytest.approx(0.6)
        assert parts["adv_landmark"].grad == pytest.approx(400.0)
        assert parts["adv_feature"].grad == pytest.approx(1.2)
        assert parts["recon"].grad == pytest.approx(3.0)
        assert parts["cycle"].grad == pytest.approx(40.0)


def test_all_losses_nonnegative_and_finite():
    rng = np.random.default_rng(9)
    for seed in range(10):
        maps = Tensor(rand_maps(2, 3, 4, seed + 400, scale=3.0))
        labels = rand_labels(2, 3, 4, seed + 400)
        assert L.landmark_cls_loss(maps, labels).item() >= 0
        assert L.landmark_adv_d_loss(maps, labels).item() >= 0
        assert L.landmark_adv_e_loss(maps).item() >= 0
        logits = Tensor(rng.normal(scale=5, size=(2, 3)).astype(np.float32))
        lab = rng.integers(0, 2, size=(2, 3))
        v = L.au_detection_loss(logits, lab, np.full(3, 1 / 3)).item()
        assert v >= 0 and np.isfinite(v)
