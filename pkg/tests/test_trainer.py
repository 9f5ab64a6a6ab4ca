import numpy as np
import pytest

import csgrid.trainer as trainer_mod
from csgrid.autodiff import encoder_forward
from csgrid.datagen import SyntheticConfig, gen_dataset
from csgrid.errors import ConfigError, TrainingDivergedError
from csgrid.lscm import default_beam_pattern
from csgrid.model import quantize
from csgrid.trainer import (TrainConfig, init_codebook, load_model, pretrain_encoder, save_model, train,
                            validate)

FAST = dict(pretrain_epochs=20, epochs=40, width=32)


@pytest.fixture(scope="module")
def toy():
    A = default_beam_pattern(4, 2, 4, 4)
    ds = gen_dataset(SyntheticConfig(K=4, N=16, L=2, samples_per_grid=50, s=0.1, seed=1), A)
    return ds, A


class TestConfig:
    def test_scheme_names(self):
        assert TrainConfig.for_scheme("pida").scheme == "pida"
        assert TrainConfig.for_scheme("naive").scheme == "naive"
        cfg = TrainConfig.for_scheme("1010")
        assert (cfg.pretrain, cfg.kmeans_init, cfg.detached, cfg.asynchronous) == (True, False, True, False)
        with pytest.raises(ConfigError):
            TrainConfig.for_scheme("fast")

    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(pretrain_epochs=10, epochs=5).validate()
        with pytest.raises(ConfigError):
            TrainConfig(val_fraction=0.6).validate()
        with pytest.raises(ConfigError):
            TrainConfig(w2=-1.0).validate()


class TestSchemes:
    def test_pida_keeps_codebook_active(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", pretrain_epochs=100, epochs=200, width=64, seed=1), ds, A)
        assert res.post_init_active_ratio == 1.0
        assert res.final_active_ratio >= 0.95
        log = res.log.column("active_ratio")
        assert np.all((log >= 0) & (log <= 1))

    def test_naive_collapses(self, toy):
        ds, A = toy
        pida = train(TrainConfig.for_scheme("pida", pretrain_epochs=100, epochs=200, width=64, seed=1), ds, A)
        naive = train(TrainConfig.for_scheme("naive", pretrain_epochs=100, epochs=200, width=64, seed=1), ds, A)
        assert naive.final_active_ratio <= pida.final_active_ratio - 0.25

    def test_log_lengths(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        assert len(res.pretrain_log) == 20 and len(res.log) == 20
        naive = train(TrainConfig.for_scheme("naive", **FAST), ds, A)
        assert len(naive.pretrain_log) == 0 and len(naive.log) == 40

    def test_detached_blocks_l2_into_encoder(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", trace=True, **FAST), ds, A)
        assert all(t["l2_encoder_grad_norm"] == 0.0 for t in res.log.trace)
        coupled = train(TrainConfig.for_scheme("1100", trace=True, **FAST), ds, A)
        assert any(t["l2_encoder_grad_norm"] > 0.0 for t in coupled.log.trace)

    def test_asynchronous_uses_updated_encoder(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", trace=True, **FAST), ds, A)
        for t in res.log.trace:
            assert t["assignment_digest"] == t["post_step_digest"]
        sync = train(TrainConfig.for_scheme("1110", trace=True, **FAST), ds, A)
        assert all(t["assignment_digest"] is None for t in sync.log.trace)

    def test_codebook_stays_sparse(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", trace=True, **FAST), ds, A)
        assert all(t["max_support"] <= 2 and t["min_center"] >= 0 for t in res.log.trace)

    def test_zero_quantization_weight_freezes_codebook(self, toy):
        ds, A = toy
        init = train(TrainConfig.for_scheme("pida", w2=0.0, pretrain_epochs=20, epochs=20, width=32), ds, A)
        later = train(TrainConfig.for_scheme("pida", w2=0.0, pretrain_epochs=20, epochs=40, width=32), ds, A)
        assert init.codebook.xi.tobytes() == later.codebook.xi.tobytes()

    def test_determinism(self, toy):
        ds, A = toy
        a = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        b = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        assert a.log.payload() == b.log.payload()
        assert a.pretrain_log.to_csv() == b.pretrain_log.to_csv()
        assert a.log.to_csv() == b.log.to_csv()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_minibatch_mode(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", batch_size=64, **FAST), ds, A)
        assert len(res.log) == 20 and 0 <= res.final_active_ratio <= 1

    def test_nonfinite_loss_aborts(self, toy, monkeypatch):
        ds, A = toy
        real = trainer_mod.reconstruction_loss

        def broken(x, A_, y, floor):
            loss, g = real(x, A_, y, floor)
            return float("nan"), g

        monkeypatch.setattr(trainer_mod, "reconstruction_loss", broken)
        with pytest.raises(TrainingDivergedError) as info:
            train(TrainConfig.for_scheme("naive", **FAST), ds, A)
        assert info.value.epoch == 0
        assert "W0" in info.value.diagnostics


class TestPretrain:
    def test_best_checkpoint_not_worse_than_first_epoch(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        vals = res.pretrain_log.column("val_l1")
        assert vals.min() <= vals[0]

    def test_returns_lowest_validation_snapshot(self, toy):
        ds, A = toy
        cfg = TrainConfig.for_scheme("pida", **FAST)
        rng = np.random.default_rng(0)
        y = ds.rsrp_dbm
        shift, scale, out = trainer_mod.encoder_scaling(y, A)
        params = trainer_mod.init_encoder(A.M, A.N, rng, 32, 6, shift, scale, out)
        best, log, _ = pretrain_encoder(cfg, y[:150], y[150:], A, params, rng)
        assert validate(best, None, y[150:], A)[0] == pytest.approx(log.column("val_l1").min(), abs=1e-12)


class TestCodebookInit:
    def test_single_grid_is_mean(self, rng):
        X = rng.random((10, 4))
        np.testing.assert_allclose(init_codebook(X, 1, 4).xi[0], X.mean(axis=0))

    def test_distinct_points(self, rng):
        X = rng.random((3, 5))
        cb = init_codebook(np.repeat(X, 4, axis=0), 3, 5)
        assert sorted(map(tuple, cb.xi)) == sorted(map(tuple, X))

    def test_too_few_samples(self, rng):
        with pytest.raises(ConfigError):
            init_codebook(rng.random((2, 3)), 3, 1)


class TestValidate:
    def test_idempotent_and_pure(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        before = {k: v.copy() for k, v in res.params.named().items()}
        y = ds.rsrp_dbm
        first = validate(res.params, res.codebook, y, A, unit=res.unit)
        second = validate(res.params, res.codebook, y, A, unit=res.unit)
        assert first == second
        for k, v in res.params.named().items():
            assert v.tobytes() == before[k].tobytes()

    def test_matches_direct_evaluation(self, toy):
        ds, A = toy
        res = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
        x, _ = encoder_forward(res.params, ds.rsrp_dbm)
        _, ratio = validate(res.params, res.codebook, ds.rsrp_dbm, A, unit=res.unit)
        a = quantize(res.codebook, x / res.unit)
        assert ratio == np.count_nonzero(a.counts) / a.K


def test_model_roundtrip(toy, tmp_path):
    ds, A = toy
    res = train(TrainConfig.for_scheme("pida", **FAST), ds, A)
    save_model(tmp_path / "m.ckpt", res)
    params, cb, unit, enc, cbs = load_model(tmp_path / "m.ckpt")
    assert cb.xi.tobytes() == res.codebook.xi.tobytes() and unit == res.unit
    assert encoder_forward(params, ds.rsrp_dbm)[0].tobytes() == encoder_forward(res.params, ds.rsrp_dbm)[0].tobytes()
    assert enc.t == res.encoder_state.t and cbs.t == res.codebook_state.t
