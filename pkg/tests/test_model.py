import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from patchlora import model, preprocess as pp
from patchlora.data import PM25
from patchlora.exceptions import ContractError, DimensionError
from patchlora.tensor import Tensor, backward, no_grad, reduce
from patchlora.train import loss

TINY = dict(d_model=8, n_layers=1, n_heads=2, d_ff=16, lookback=8, patch_len=4, stride=2, n_vars=3,
            horizon=3, rank=2, alpha=2.0, dropout=0.0)


def windows(cfg, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(5.0, 2.0, size=(n, cfg.lookback, cfg.n_vars))


def randomize_adapters(bundle, seed=0):
    rng = np.random.default_rng(seed)
    for ad in bundle.adapters.values():
        ad.Y.data[:] = rng.normal(0, 0.1, size=ad.Y.shape)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ContractError):
            model.ModelConfig(d_model=10, n_heads=4)

    def test_round_trip(self):
        cfg = model.ModelConfig(rank=8, seed=3)
        assert model.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_desk_patches(self):
        assert model.ModelConfig().n_patches == 4


class TestCounts:
    def test_desk_analytic(self):
        cfg = model.ModelConfig(rank=8)
        D, L, F, N, P, d, h, r = 64, 2, 128, 4, 24, 10, 24, 8
        block = 2 * 2 * D + (D * 3 * D + 3 * D) + (D * D + D) + (D * F + F) + (F * D + D)
        backbone = L * block + 2 * D
        adapters = r * (N + D) + r * (D + h)
        trainable = (P * d * D + D) + N * D + (D * D + D) + h + adapters
        total = backbone + trainable + D * h
        c = model.count_parameters(cfg)
        assert c["trainable"] == trainable
        assert c["adapter"] == adapters
        assert c["frozen"] == backbone + D * h
        assert c["total"] == total
        assert model.build(cfg).counts() == c

    def test_counts_match_built_tensors(self):
        b = model.build(model.ModelConfig(rank=4))
        c = b.counts()
        assert c["trainable"] == sum(b[n].size for n in b.trainable)
        assert c["frozen"] == sum(b[n].size for n in b.frozen)
        assert b.adapter_param_count() == c["adapter"]

    def test_full_scale_without_building(self):
        cfg = model.ModelConfig.full_scale()
        c = model.count_parameters(cfg)
        assert cfg.d_model == 768 and cfg.n_layers == 6 and cfg.rank == 32
        assert c["adapter"] == 32 * (4 + 768) + 32 * (768 + 24)
        # a small fraction, but not the 124M-denominator figure
        assert 0.001 < model.adapter_fraction(cfg) < 0.005

    def test_fraction_linear_in_rank(self):
        f = {r: model.adapter_fraction(model.ModelConfig(rank=r)) for r in (4, 8, 16, 32, 64)}
        for r in f:
            assert f[r] / f[4] == pytest.approx(r / 4, rel=1e-12)

    def test_partition_disjoint_and_complete(self):
        cfg = model.ModelConfig(rank=4)
        frozen, trainable = model.partition(cfg)
        assert not set(frozen) & set(trainable)
        assert set(frozen) | set(trainable) == set(model.parameter_shapes(cfg))
        assert all(n in frozen for n in model.backbone_shapes(cfg))

    @pytest.mark.parametrize("flag", [True, False])
    def test_pos_base_flag(self, flag):
        _, trainable = model.partition(model.ModelConfig(train_pos_base=flag))
        assert ("pos.base" in trainable) == flag

    def test_unadapted_twin_trains_output_map(self):
        _, trainable = model.partition(model.ModelConfig(use_lora=False))
        assert "head.out.weight" in trainable
        assert not any(".lora." in n for n in trainable)


class TestBuild:
    def test_deterministic(self):
        a = model.build(model.ModelConfig(**TINY, seed=5))
        b = model.build(model.ModelConfig(**TINY, seed=5))
        assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.params)

    def test_seed_changes_weights(self):
        a = model.build(model.ModelConfig(**TINY, seed=5))
        b = model.build(model.ModelConfig(**TINY, seed=6))
        assert a["proj.weight"].data.tobytes() != b["proj.weight"].data.tobytes()

    def test_fresh_adapters_are_zero(self):
        b = model.build(model.ModelConfig(**TINY))
        for ad in b.adapters.values():
            assert not ad.Y.data.any()

    def test_backbone_from_weights(self):
        cfg = model.ModelConfig(**TINY)
        src = model.build(cfg.replace(seed=9))
        b = model.build(cfg, backbone=src.backbone_state())
        for n, arr in src.backbone_state().items():
            assert b[n].data.tobytes() == arr.tobytes()

    def test_backbone_missing_tensor(self):
        cfg = model.ModelConfig(**TINY)
        state = dict(model.build(cfg).backbone_state())
        state.pop("backbone.ln_f.gamma")
        with pytest.raises(ContractError):
            model.build(cfg, backbone=state)


class TestForward:
    def test_init_equivalence(self):
        cfg = model.ModelConfig(rank=8, dropout=0.0)
        w = windows(cfg, 3)
        a, _ = model.forward(model.build(cfg), w)
        b, _ = model.forward(model.build(cfg.replace(use_lora=False)), w)
        assert np.max(np.abs(a.data - b.data)) <= 1e-12

    @pytest.mark.parametrize("horizon", [24, 36, 48, 60])
    def test_output_shape(self, horizon):
        cfg = model.ModelConfig(horizon=horizon, rank=4)
        b = model.build(cfg)
        pred, stats = model.forward(b, windows(cfg, 1)[0])
        assert pred.shape == (horizon,)
        assert stats.mu.shape == (cfg.n_vars,)
        assert model.forward(b, windows(cfg, 2))[0].shape == (2, horizon)

    def test_inference_deterministic(self):
        cfg = model.ModelConfig(**TINY)
        b = model.build(cfg)
        w = windows(cfg)
        assert model.forward(b, w)[0].data.tobytes() == model.forward(b, w)[0].data.tobytes()

    def test_dropout_only_in_train_mode(self):
        cfg = model.ModelConfig(**{**TINY, "dropout": 0.5})
        b = model.build(cfg)
        w = windows(cfg)
        infer = model.forward(b, w)[0].data
        trained = model.forward(b, w, train_mode=True, rng=np.random.default_rng(0))[0].data
        assert not np.allclose(infer, trained)

    def test_single_token_pooling(self):
        cfg = model.ModelConfig(**{**TINY, "patch_len": 8})
        assert cfg.n_patches == 1
        b = model.build(cfg)
        randomize_adapters(b)
        w = windows(cfg, 2)
        with no_grad():
            h0, _ = model.embed(b, w)
            hl = model.backbone_forward(b, h0)
            direct = model.head_forward(b, hl[:, 0, :]).data
            pred = model.forward(b, w)[0].data
        np.testing.assert_array_equal(pred, direct)

    def test_causal_mask(self):
        cfg = model.ModelConfig(**{**TINY, "lookback": 10})
        assert cfg.n_patches == 4
        b = model.build(cfg.replace(backbone_std=0.5))
        h0 = np.random.default_rng(1).normal(size=(1, 4, cfg.d_model))
        with no_grad():
            base = model.backbone_forward(b, Tensor(h0)).data
            for j in range(4):
                bumped = h0.copy()
                bumped[0, j] += np.linspace(-1.0, 1.0, cfg.d_model)
                out = model.backbone_forward(b, Tensor(bumped)).data
                changed = np.abs(out - base).max(axis=-1)[0] > 1e-12
                assert not changed[:j].any()
                assert changed[j:].all()

    def test_no_mask_mixes_everything(self):
        cfg = model.ModelConfig(**{**TINY, "lookback": 10, "causal_mask": False, "backbone_std": 0.5})
        b = model.build(cfg)
        h0 = np.random.default_rng(1).normal(size=(1, 4, cfg.d_model))
        bumped = h0.copy()
        bumped[0, 3] += np.linspace(-1.0, 1.0, cfg.d_model)
        with no_grad():
            d = np.abs(model.backbone_forward(b, Tensor(bumped)).data - model.backbone_forward(b, Tensor(h0)).data)
        assert (d.max(axis=-1)[0] > 1e-12).all()

    def test_head_linear_in_y_out(self):
        cfg = model.ModelConfig(**TINY)
        b = model.build(cfg)
        u = Tensor(np.random.default_rng(2).normal(size=(3, cfg.d_model)))
        y = b.adapters[model.OUT_ADAPTER].Y
        with no_grad():
            base = model.head_forward(b, u).data
            y.data[:] = np.random.default_rng(3).normal(size=y.shape)
            once = model.head_forward(b, u).data - base
            y.data *= 2.0
            twice = model.head_forward(b, u).data - base
        assert np.max(np.abs(twice - 2.0 * once)) < 1e-10

    def test_wrong_window_shape(self):
        cfg = model.ModelConfig(**TINY)
        with pytest.raises(DimensionError, match="input"):
            model.forward(model.build(cfg), np.zeros((cfg.lookback + 1, cfg.n_vars)))

    def test_predict_raw_matches_manual_affine(self):
        cfg = model.ModelConfig(**TINY)
        b = model.build(cfg)
        randomize_adapters(b)
        w = windows(cfg, 1)[0]
        pred, stats = model.forward(b, w)
        manual = pred.data * stats.sigma[PM25] + stats.mu[PM25]
        assert model.predict_raw(b, w).tobytes() == manual.tobytes()

    def test_predict_raw_constant_window(self):
        cfg = model.ModelConfig(**TINY)
        w = np.full((cfg.lookback, cfg.n_vars), 42.0)
        raw = model.predict_raw(model.build(cfg), w)
        # sigma collapses to eps, so predictions stay within a hair of the level
        assert np.all(np.abs(raw - 42.0) < 1e-3)

    def test_predict_normalized_batches(self):
        cfg = model.ModelConfig(**TINY)
        b = model.build(cfg)
        w = windows(cfg, 7)
        full, _ = model.predict_normalized(b, w, batch_size=256)
        small, _ = model.predict_normalized(b, w, batch_size=3)
        np.testing.assert_allclose(full, small, rtol=0, atol=1e-14)


class TestGradients:
    def test_only_trainable_get_grads(self):
        cfg = model.ModelConfig(**TINY)
        b = model.build(cfg)
        randomize_adapters(b)
        w = windows(cfg)
        pred, _ = model.forward(b, w, train_mode=True)
        backward(loss(pred, Tensor(np.zeros(pred.shape))))
        for n in b.frozen:
            assert b[n].grad is None
        for n in b.trainable:
            assert b[n].grad is not None

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        cfg = model.ModelConfig(**TINY, seed=seed)
        b = model.build(cfg)
        randomize_adapters(b, seed)
        w = windows(cfg, 3, seed)
        target = np.random.default_rng(seed + 100).normal(size=(3, cfg.horizon))

        def objective():
            with no_grad():
                pred, _ = model.forward(b, w)
                return loss(pred, Tensor(target)).item()

        pred, _ = model.forward(b, w)
        backward(loss(pred, Tensor(target)))
        for name in b.trainable:
            p = b[name]
            orig = p.data.copy()

            def at(x):
                p.data[...] = x
                return objective()

            num = numeric_grad(at, orig.copy())
            p.data[...] = orig
            assert rel_error(p.grad, num) < 1e-4, name


def test_normalization_round_trip():
    rng = np.random.default_rng(0)
    w = rng.normal(10, 3, size=(36, 10))
    target = rng.normal(10, 3, size=24)
    nw = pp.normalize_window(w)
    back = pp.denormalize_pm25(pp.normalize_target(target, nw.mu, nw.sigma, PM25), nw.mu, nw.sigma, PM25)
    assert np.max(np.abs(back - target)) < 1e-9


def test_mean_pool_reduces_tokens():
    x = Tensor(np.arange(24.0).reshape(1, 4, 6))
    np.testing.assert_array_equal(reduce("mean", x, axis=1).data, x.data.mean(axis=1))
