"""Adam, batching, dataset loading, checkpoint round-trips and resume determinism."""

import numpy as np
import pytest

from coattreg.errors import DataError, NumericError, ShapeError, UsageError
from coattreg.network import NetworkConfig, RegistrationNet, init_params
from coattreg.phantom import generate_gt_pair
from coattreg.tensor import Tensor
from coattreg.train import (
    Adam,
    TrainConfig,
    aggregate,
    batch_indices,
    load_checkpoint,
    load_cases,
    save_checkpoint,
    train,
    train_step,
    training_samples,
)
from coattreg.volio import Volume, write_volume

TINY = NetworkConfig(in_shape=(16, 16, 8), stem_channels=(2, 4), att_channels=4, unet_depth=1,
                     unet_channels=(4, 4), seed=3)


def _reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


@pytest.fixture(scope="module")
def tiny_samples():
    cases = [generate_gt_pair(s, shape=TINY.in_shape) for s in range(2)]
    return training_samples(cases)


class TestAdam:
    def test_matches_reference_updates(self, f64):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        grads = [np.array([0.5, -1.0]), np.array([0.2, 3.0]), np.array([-0.7, 0.1])]
        for g in grads:
            p.grad = g.copy()
            opt.step()
        expected = [_reference_adam(p0, [g[i] for g in grads], 0.1) for i, p0 in enumerate([1.0, -2.0])]
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_first_step_moves_by_learning_rate(self, f64):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-4)
        p.grad = np.array([3.0, -0.01])
        opt.step()
        np.testing.assert_allclose(p.data, [-1e-4, 1e-4], rtol=1e-5)

    def test_state_roundtrip(self, f64):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([1.0, 2.0, 3.0])
        opt.step()
        other = Adam({"p": Tensor(np.ones(3), requires_grad=True)})
        other.load_state(opt.state_tensors(), opt.step_count)
        np.testing.assert_array_equal(other.m["p"], opt.m["p"])
        assert other.step_count == 1

    def test_state_validation(self):
        opt = Adam({"p": Tensor(np.ones(3), requires_grad=True)})
        with pytest.raises(DataError):
            opt.load_state({}, 0)
        with pytest.raises(ShapeError):
            opt.load_state({"opt.m.p": np.zeros(2), "opt.v.p": np.zeros(2)}, 0)


class TestConfigAndBatches:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch, cfg.lambda_sim, cfg.lambda_kl, cfg.prior_lambda) == (1e-4, 2, 20.0, 0.1, 10.0)

    @pytest.mark.parametrize("kwargs", [{"iters": 0}, {"batch": 0}, {"lr": 0.0}])
    def test_validation(self, kwargs):
        with pytest.raises(UsageError):
            TrainConfig(**kwargs)

    def test_epochs_visit_every_sample_once(self):
        n, batch = 10, 2
        for epoch in range(3):
            seen = [i for it in range(epoch * 5, epoch * 5 + 5) for i in batch_indices(it, n, batch, seed=4)]
            assert sorted(seen) == list(range(n))

    def test_batches_depend_on_seed_only(self):
        assert batch_indices(7, 12, 2, 1) == batch_indices(7, 12, 2, 1)
        assert [batch_indices(i, 12, 2, 1) for i in range(6)] != [batch_indices(i, 12, 2, 2) for i in range(6)]

    def test_both_directions(self):
        case = generate_gt_pair(0, shape=(16, 16, 8))
        (m0, f0), (m1, f1) = training_samples([case])
        assert m0 is case.moving.data and f0 is case.fixed.data
        assert m1 is case.fixed.data and f1 is case.moving.data

    def test_aggregate_population_sd(self):
        recs = [{k: v for k in ("lvbp_dice", "lvm_dice", "rv_dice", "avg_dice", "hd_mm", "foldings", "jacobian_min")}
                for v in (1.0, 3.0)]
        agg = aggregate(recs)
        assert agg["avg_dice"] == {"mean": 2.0, "sd": 1.0}


class TestLoadCases:
    def _write_case(self, root, k, labels=True):
        d = root / f"case_{k}"
        d.mkdir()
        case = generate_gt_pair(k, shape=(16, 16, 8))
        write_volume(case.moving, d / "moving")
        write_volume(case.fixed, d / "fixed")
        if labels:
            stacked = np.stack([case.moving_labels.labels, case.fixed_labels.labels]).astype(np.float32)
            write_volume(Volume(stacked, case.moving.spacing_mm), d / "labels")

    def test_numeric_order(self, tmp_path):
        for k in (10, 2, 1):
            self._write_case(tmp_path, k)
        cases = load_cases(tmp_path, with_labels=True)
        assert [c.name for c in cases] == ["case_1", "case_2", "case_10"]
        assert cases[0].moving_labels.labels.dtype.kind == "i"

    def test_missing_labels_names_case(self, tmp_path):
        self._write_case(tmp_path, 0, labels=False)
        with pytest.raises(DataError, match="case_0"):
            load_cases(tmp_path, with_labels=True)

    def test_missing_image_names_case(self, tmp_path):
        self._write_case(tmp_path, 5)
        (tmp_path / "case_5" / "fixed.raw").unlink()
        with pytest.raises(DataError, match="case_5"):
            load_cases(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_cases(tmp_path)


class TestTraining:
    def test_zero_weights_first_record_is_identity_ncc(self, tiny_samples):
        from coattreg.losses import ncc_loss

        net = RegistrationNet(TINY, init_params(TINY, "zeros"))
        cfg = TrainConfig(iters=1, seed=0)
        record = next(train(net, tiny_samples, cfg))
        idx = batch_indices(0, len(tiny_samples), cfg.batch, cfg.seed)
        expected = np.mean([ncc_loss(tiny_samples[i][0], tiny_samples[i][1]).item() for i in idx])
        assert record["iter"] == 1
        assert record["ncc"] == pytest.approx(expected, rel=1e-5)

    def test_resume_equivalence(self, tmp_path, tiny_samples):
        cfg = TrainConfig(iters=3, seed=11)
        net = RegistrationNet(TINY, init_params(TINY))
        list(train(net, tiny_samples, cfg, checkpoint_path=tmp_path / "full"))

        net2 = RegistrationNet(TINY, init_params(TINY))
        list(train(net2, tiny_samples, TrainConfig(iters=2, seed=11), checkpoint_path=tmp_path / "part"))
        resumed, tensors, meta = load_checkpoint(tmp_path / "part", TINY)
        adam = Adam(resumed.params, cfg.lr)
        adam.load_state(tensors, meta["iteration"])
        list(train(resumed, tiny_samples, cfg, adam=adam, start_iter=meta["iteration"],
                   checkpoint_path=tmp_path / "resumed"))
        for ext in (".json", ".bin"):
            assert (tmp_path / f"full{ext}").read_bytes() == (tmp_path / f"resumed{ext}").read_bytes()

    def test_checkpoint_rejects_other_shape(self, tmp_path):
        net = RegistrationNet(TINY, init_params(TINY))
        save_checkpoint(tmp_path / "c", net, None, {"iteration": 0})
        other = NetworkConfig(in_shape=(32, 32, 8), stem_channels=(2, 4), att_channels=4, unet_depth=1,
                              unet_channels=(4, 4))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "c", other)

    def test_checkpoint_missing_tensor(self, tmp_path):
        from coattreg.volio import checkpoint_load, checkpoint_save

        net = RegistrationNet(TINY, init_params(TINY))
        save_checkpoint(tmp_path / "c", net, None, {"iteration": 0})
        tensors, meta = checkpoint_load(tmp_path / "c")
        del tensors["head.mu.bias"]
        checkpoint_save(tmp_path / "c", tensors, meta)
        with pytest.raises(DataError, match="head.mu.bias"):
            load_checkpoint(tmp_path / "c")

    def test_non_finite_loss_is_numeric_error(self, tiny_samples):
        net = RegistrationNet(TINY, init_params(TINY))
        net.params["head.mu.bias"].data[:] = np.nan
        with pytest.raises(NumericError):
            train_step(net, Adam(net.params), tiny_samples[:2], TrainConfig().weights, 0, 0)

    def test_too_few_samples(self, tiny_samples):
        net = RegistrationNet(TINY, init_params(TINY))
        with pytest.raises(DataError):
            next(train(net, tiny_samples[:1], TrainConfig(batch=2)))

    def test_training_descends(self):
        cases = [generate_gt_pair(s) for s in range(8)]
        config = NetworkConfig(seed=0)
        net = RegistrationNet(config, init_params(config))
        losses = [r["loss"] for r in train(net, training_samples(cases), TrainConfig(iters=200, seed=0))]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])
