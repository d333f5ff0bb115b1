import numpy as np
import pytest

from adld import losses as L
from adld import networks as nets
from adld import synthdata as sd
from adld import tensor as T
from adld import training as tr
from adld.tensor import Tensor


def tiny_config(mode="adld", **kw):
    defaults = dict(
        mode=mode, image_size=32, au_count=3, au_set="bp4d6", width_scale=0.25,
        batch_size=2, epochs=1, iters_per_epoch=2, seed=5,
    )
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


def tiny_records(domain, count, seed=11, l=32):
    recs = []
    for i in range(count):
        rec = sd.build_sample(domain, i, seed, l, flip_rate=0.25)
        rec.aus = rec.aus[:3]
        if rec.pseudo_aus is not None:
            rec.pseudo_aus = rec.pseudo_aus[:3]
        recs.append(rec)
    return recs


@pytest.fixture(scope="module")
def datasets():
    return tiny_records("source", 8), tiny_records("target", 8, seed=12)


def tiny_batches(datasets, config):
    rng = np.random.default_rng(0)
    src, tgt = datasets
    bs = tr.make_batch(src, range(config.batch_size), config.image_size, rng)
    bt = tr.make_batch(tgt, range(config.batch_size), config.image_size, rng)
    return bs, bt


class TestAdam:
    def test_zero_grads_no_change(self):
        p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        opt = tr.Adam(0.1, 0.9, 0.999)
        opt.update({"p": p})
        assert np.array_equal(p.data, [1.0, 2.0])

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)  # f(x) = x
        opt = tr.Adam(0.1, 0.9, 0.999)
        opt.update({"p": p})
        assert p.data[0] == pytest.approx(-0.1, abs=1e-6)

    def test_quadratic_convergence_matches_scalar_reference(self):
        # independent scalar-loop Adam on f(x, y) = (x-3)^2 + 2*(y+1)^2
        import math

        def scalar_adam(steps):
            x = [0.0, 0.0]
            m = [0.0, 0.0]
            v = [0.0, 0.0]
            lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
            for t in range(1, steps + 1):
                g = [2 * (x[0] - 3.0), 4 * (x[1] + 1.0)]
                for i in range(2):
                    m[i] = b1 * m[i] + (1 - b1) * g[i]
                    v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
                    mh = m[i] / (1 - b1**t)
                    vh = v[i] / (1 - b2**t)
                    x[i] -= lr * mh / (math.sqrt(vh) + eps)
            return x

        p = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        opt = tr.Adam(0.05, 0.9, 0.999)
        for _ in range(200):
            g = np.array([2 * (p.data[0] - 3.0), 4 * (p.data[1] + 1.0)], dtype=np.float32)
            p.grad = g
            opt.update({"p": p})
            p.grad = None
        ref = scalar_adam(200)
        assert np.abs(p.data - np.array(ref)).max() < 1e-3
        assert np.linalg.norm(p.data - np.array([3.0, -1.0])) < np.linalg.norm([3.0, 1.0]) * 0.5

    def test_nan_grad_raises(self):
        p = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        p.grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(L.DivergenceError):
            tr.Adam(0.1, 0.9, 0.999).update({"p": p})

    def test_clip(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        p.grad = np.array([30.0, 40.0, 0.0], dtype=np.float32)  # norm 50
        norm = tr.clip_gradients({"p": p}, 10.0)
        assert norm == pytest.approx(50.0)
        assert np.linalg.norm(p.grad) == pytest.approx(10.0, abs=1e-4)


class TestLrSchedule:
    def test_ten_epoch_factors(self):
        want = [1, 1, 1, 1, 1, 0.8, 0.6, 0.4, 0.2, 0.2]
        got = [tr.lr_at(e, 1.0, 10) for e in range(1, 11)]
        assert got == pytest.approx(want)

    def test_examples(self):
        assert tr.lr_at(3, 2e-4) == pytest.approx(2e-4)
        assert tr.lr_at(8, 1.0) == pytest.approx(0.4)
        assert tr.lr_at(10, 1.0) == pytest.approx(0.2)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            tr.lr_at(0, 1.0)
        with pytest.raises(ValueError):
            tr.lr_at(11, 1.0)


class TestModeGraph:
    def test_bi_s_terms(self):
        spec = tr.build_mode_graph("bi_s")
        assert spec.terms == frozenset({"a_src", "l_src"})
        assert set(spec.modules) == {"e_f", "f_a", "f_l"}

    def test_b_net_terms(self):
        spec = tr.build_mode_graph("b_net")
        assert spec.terms == frozenset({"a_src", "a_lat", "l_src", "l_tgt", "l_lat_s", "l_lat_t"})
        assert "d_l" not in spec.modules and "d_f_s" not in spec.modules

    def test_adld_has_all_term_families(self):
        spec = tr.build_mode_graph("adld")
        assert {"a_src", "a_lat", "l_src", "l_tgt", "recon", "cycle", "adl", "adf"} <= spec.terms
        assert set(spec.modules) == set(nets.ALL_MODULES)

    def test_zero_lambda_prunes(self):
        w = L.LossWeights(lambda_ad_l=0.0)
        spec = tr.build_mode_graph("b_net_r_cc_adl", w)
        assert "adl" not in spec.terms
        assert "d_l" not in spec.modules

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown mode"):
            tr.build_mode_graph("sota")

    def test_ui_modes_use_pseudo(self):
        assert tr.build_mode_graph("ui_t").uses_pseudo
        assert tr.build_mode_graph("adld_full").uses_pseudo
        assert not tr.build_mode_graph("adld").uses_pseudo


def changed_subnets(params_before, trainer):
    changed = set()
    for name in trainer.params.names():
        if not np.array_equal(params_before[name], trainer.params[name].data):
            changed.add(name.split(".")[0])
    return changed


class TestReachability:
    @pytest.mark.parametrize(
        "mode,expected",
        [
            ("bi_s", {"e_f", "f_a", "f_l"}),
            ("bi_st", {"e_f", "f_a", "f_l"}),
            ("ui_t", {"e_f", "f_a", "f_l"}),
            ("ui_st", {"e_f", "f_a", "f_l"}),
            ("b_net", {"e_f", "e_t", "g", "f_l", "f_a"}),
            ("b_net_r", {"e_f", "e_t", "g", "f_l", "f_a"}),
            ("b_net_r_cc", {"e_f", "e_t", "g", "f_l", "f_a"}),
            ("b_net_r_cc_adl", {"e_f", "e_t", "g", "f_l", "f_a", "d_l"}),
            ("adld", set(nets.ALL_MODULES)),
            ("adld_full", set(nets.ALL_MODULES)),
        ],
    )
    def test_parameter_reachability(self, datasets, mode, expected):
        cfg = tiny_config(mode)
        w_src = tr.compute_label_weights(datasets[0], "aus")
        w_tgt = tr.compute_label_weights(datasets[1], "pseudo_aus")
        trainer = tr.Trainer(cfg, source_weights=w_src, target_weights=w_tgt)
        before = {n: trainer.params[n].data.copy() for n in trainer.params.names()}
        bs, bt = tiny_batches(datasets, cfg)
        spec = tr.build_mode_graph(mode)
        needs_src = bool(spec.terms & {"a_src", "l_src"}) or len(spec.modules) > 3
        trainer.step(bs if needs_src else None, bt if mode != "bi_s" else None)
        assert changed_subnets(before, trainer) == expected


class TestGradientRouting:
    def test_texture_adversarial_never_reaches_encoder(self, datasets):
        # with only the landmark-adversarial e-side active, e_f must not move
        cfg = tiny_config("adld")
        w_src = tr.compute_label_weights(datasets[0], "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        bs, bt = tiny_batches(datasets, cfg)
        P = trainer.params
        with T.Tape() as tape:
            xs = nets.encode_rich(bs.images, P)
            xt = nets.encode_rich(bt.images, P)
            z_t = nets.encode_texture(T.stop_gradient(T.concat_batch(xs, xt)), P)
            e_maps = nets.discriminate_landmarks(z_t, P, frozen=True)
            loss = L.landmark_adv_e_loss(e_maps)
            T.backward(loss, tape)
        assert all(P[n].grad is None for n in P.subnet("e_f"))
        assert all(P[n].grad is None for n in P.subnet("d_l"))
        assert any(P[n].grad is not None for n in P.subnet("e_t"))

    def test_frozen_latent_landmark_loss_keeps_f_l_fixed(self, datasets):
        """With the latent landmark term as the only f_l-touching loss, f_l
        parameters stay bitwise identical after the step."""
        src, tgt = datasets
        cfg = tiny_config("b_net")
        w_src = tr.compute_label_weights(src, "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        # keep only the latent landmark constraints active
        trainer.mode = tr.ModeSpec(
            trainer.mode.modules, frozenset({"l_lat_s", "l_lat_t"}), False, "latent"
        )
        before = {n: trainer.params[n].data.copy() for n in trainer.params.subnet("f_l")}
        bs, bt = tiny_batches(datasets, cfg)
        trainer.step(bs, bt)
        for n in before:
            assert np.array_equal(before[n], trainer.params[n].data), n

    def test_au_only_touches_encoder_and_detector(self, datasets):
        cfg = tiny_config("bi_s")
        w_src = tr.compute_label_weights(datasets[0], "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        trainer.mode = tr.ModeSpec(trainer.mode.modules, frozenset({"a_src"}), False, "raw")
        before = {n: trainer.params[n].data.copy() for n in trainer.params.names()}
        bs, _ = tiny_batches(datasets, cfg)
        trainer.step(bs, None)
        assert changed_subnets(before, trainer) == {"e_f", "f_a"}

    def test_discriminator_step_isolated_from_generators(self, datasets):
        cfg = tiny_config("adld")
        w_src = tr.compute_label_weights(datasets[0], "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        trainer.mode = tr.ModeSpec(trainer.mode.modules, frozenset({"adl", "adf"}), False, "latent")
        before = {n: trainer.params[n].data.copy() for n in trainer.params.names()}
        bs, bt = tiny_batches(datasets, cfg)
        trainer.step(bs, bt)
        changed = changed_subnets(before, trainer)
        # discriminators move in the d-step; the e-side term moves e_t, and the
        # g-side term reaches g plus the landmark path (f_l, e_f); the AU
        # detector has no adversarial involvement at all
        assert {"d_l", "d_f_s", "d_f_t", "e_t", "g"} <= changed
        assert "f_a" not in changed

    def test_main_backward_leaves_no_gradients_on_discriminators(self, datasets):
        # frozen discriminator forwards in the main step must not accumulate
        # gradients on discriminator parameters
        cfg = tiny_config("adld")
        w_src = tr.compute_label_weights(datasets[0], "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        bs, bt = tiny_batches(datasets, cfg)
        captured = {}
        original = trainer.opt_main_b.update

        def spy(named, lr_factor=1.0):
            for prefix in ("d_l", "d_f_s", "d_f_t"):
                for n in trainer.params.subnet(prefix):
                    captured[n] = trainer.params[n].grad
            return original(named, lr_factor)

        trainer.opt_main_b.update = spy
        trainer.step(bs, bt)
        assert captured and all(g is None for g in captured.values())


class TestTraceEquality:
    def test_zero_adl_equals_b_net_r_cc(self, datasets):
        src, tgt = datasets
        base = tiny_config("b_net_r_cc")
        pruned = tiny_config("b_net_r_cc_adl", weights=L.LossWeights(lambda_ad_l=0.0))
        logs = []
        for cfg in (base, pruned):
            w_src = tr.compute_label_weights(src, "aus")
            trainer = tr.Trainer(cfg, source_weights=w_src)
            rng = np.random.default_rng(3)
            bs = tr.make_batch(src, range(cfg.batch_size), cfg.image_size, rng)
            bt = tr.make_batch(tgt, range(cfg.batch_size), cfg.image_size, rng)
            rows = [trainer.step(bs, bt) for _ in range(3)]
            logs.append(rows)
        for a, b in zip(*logs):
            for col in tr.CSV_COLUMNS:
                if a.get(col) is not None or b.get(col) is not None:
                    assert a[col] == b[col], col


class TestTrainLoop:
    def test_csv_columns_and_active_terms(self, tmp_path, datasets):
        src, tgt = datasets
        cfg = tiny_config("b_net_r")
        tr.train(cfg, src, tgt, tmp_path / "run")
        rows = tr.read_metrics(tmp_path / "run" / "metrics.csv")
        assert len(rows) == cfg.epochs * cfg.iters_per_epoch
        active = {k for k, v in rows[0].items() if v is not None}
        expected = {"iter", "epoch", "lr_A", "lr_B", "L_a_src", "L_a_lat",
                    "L_l_src", "L_l_tgt", "L_l_lat_s", "L_l_lat_t", "L_r_s", "L_r_t", "total"}
        assert active == expected

    def test_deterministic_metrics(self, tmp_path, datasets):
        src, tgt = datasets
        cfg = tiny_config("adld", epochs=1, iters_per_epoch=3)
        tr.train(cfg, src, tgt, tmp_path / "a")
        tr.train(cfg, src, tgt, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_checkpoint_resume_equivalence(self, tmp_path, datasets):
        src, tgt = datasets
        cfg = tiny_config("adld", epochs=2, iters_per_epoch=2)
        tr.train(cfg, src, tgt, tmp_path / "full")
        full = tr.read_metrics(tmp_path / "full" / "metrics.csv")
        # run one epoch, then resume from its checkpoint
        cfg1 = tiny_config("adld", epochs=1, iters_per_epoch=2)
        tr.train(cfg1, src, tgt, tmp_path / "part")
        cfg2 = tiny_config("adld", epochs=2, iters_per_epoch=2)
        tr.train(cfg2, src, tgt, tmp_path / "part2", resume=tmp_path / "part" / "checkpoint_ep1")
        resumed = tr.read_metrics(tmp_path / "part2" / "metrics.csv")
        tail_full = [r for r in full if r["epoch"] == 2]
        assert len(resumed) == len(tail_full)
        for a, b in zip(tail_full, resumed):
            for col in tr.CSV_COLUMNS:
                assert a[col] == b[col], col

    def test_divergence_aborts_with_named_term(self, datasets, tmp_path):
        src, tgt = datasets
        cfg = tiny_config("b_net", epochs=1, iters_per_epoch=1)
        w_src = tr.compute_label_weights(src, "aus")
        trainer = tr.Trainer(cfg, source_weights=w_src)
        name = trainer.params.subnet("g")[0]
        trainer.params[name].data[...] = np.nan
        bs, bt = tiny_batches(datasets, cfg)
        with pytest.raises(L.DivergenceError):
            trainer.step(bs, bt)

    def test_smoke_losses_finite(self, tmp_path, datasets):
        src, tgt = datasets
        cfg = tiny_config("adld", epochs=1, iters_per_epoch=8)
        tr.train(cfg, src, tgt, tmp_path / "smoke")
        rows = tr.read_metrics(tmp_path / "smoke" / "metrics.csv")
        assert all(np.isfinite(r["total"]) for r in rows)
