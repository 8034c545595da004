import math

import numpy as np
import pytest

from caggnet.autograd import Tape, backward
from caggnet.models import ModelConfig, ParamStore, build_caggnet
from caggnet.tensor_core import Tensor4, TensorError
from caggnet.train import (
    AdamState,
    EarlyStopper,
    FocalLossConfig,
    TrainingDiverged,
    adam_step,
    bce_loss,
    focal_loss,
    make_loss,
    traced_bce_loss,
    traced_focal_loss,
    train_loop,
)


def prob_map(data):
    return Tensor4(np.asarray(data, dtype=np.float64))


class TestBceLoss:
    def test_uniform_half_is_ln2(self):
        pred = prob_map(np.full((1, 1, 4, 4), 0.5))
        target = prob_map((np.arange(16).reshape(1, 1, 4, 4) % 2).astype(float))
        assert abs(bce_loss(pred, target) - math.log(2.0)) < 1e-12

    def test_perfect_prediction_near_zero(self):
        target = prob_map([[[[0.0, 1.0], [1.0, 0.0]]]])
        assert bce_loss(target, target) < 1e-6

    def test_single_pixel_hand_value(self):
        # -ln(0.9) for p = 0.9, y = 1
        loss = bce_loss(prob_map([[[[0.9]]]]), prob_map([[[[1.0]]]]))
        assert abs(loss - 0.10536051565782628) < 1e-15

    def test_non_binary_target_rejected(self):
        with pytest.raises(TensorError, match="binary"):
            bce_loss(prob_map([[[[0.5]]]]), prob_map([[[[0.5]]]]))


class TestFocalLoss:
    def test_gamma0_alpha_half_is_half_bce(self, rng):
        cfg = FocalLossConfig(alpha=0.5, gamma=0.0)
        for _ in range(50):
            pred = prob_map(rng.uniform(0.02, 0.98, size=(1, 1, 5, 5)))
            target = prob_map((rng.random((1, 1, 5, 5)) < 0.5).astype(float))
            fl = focal_loss(pred, target, cfg)
            ref = 0.5 * bce_loss(pred, target)
            assert abs(fl - ref) <= 1e-9 * abs(ref)

    def test_confident_correct_prediction_near_zero(self):
        cfg = FocalLossConfig(alpha=0.25, gamma=2.0, clamp_eps=1e-7)
        pred = prob_map(np.full((1, 1, 2, 2), 1.0 - 1e-7))
        target = prob_map(np.ones((1, 1, 2, 2)))
        assert focal_loss(pred, target, cfg) < 1e-12

    def test_hand_value(self):
        # alpha (1-p)^gamma (-ln p) = 0.25 * 0.25 * ln 2 at p = 0.5, y = 1
        cfg = FocalLossConfig(alpha=0.25, gamma=2.0)
        loss = focal_loss(prob_map([[[[0.5]]]]), prob_map([[[[1.0]]]]), cfg)
        assert abs(loss - 0.25 * 0.25 * math.log(2.0)) < 1e-15
        assert abs(loss - 0.043321698784996581) < 1e-15

    def test_monotone_decreasing_in_pt(self):
        cfg = FocalLossConfig(alpha=0.25, gamma=2.0)
        target = prob_map([[[[1.0]]]])
        grid = np.linspace(0.02, 0.98, 49)
        losses = [focal_loss(prob_map([[[[p]]]]), target, cfg) for p in grid]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("field,value", [("alpha", 0.0), ("alpha", 1.0),
                                             ("gamma", -1.0),
                                             ("clamp_eps", 0.0),
                                             ("clamp_eps", 1e-2)])
    def test_config_validation(self, field, value):
        kwargs = {"alpha": 0.25, "gamma": 2.0, "clamp_eps": 1e-7, field: value}
        with pytest.raises(ValueError):
            FocalLossConfig(**kwargs)

    def test_traced_losses_match_plain(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
        target = (rng.random((1, 1, 4, 4)) < 0.5).astype(np.float64)
        cfg = FocalLossConfig(alpha=0.3, gamma=1.5)
        t = Tape()
        pv = t.leaf(pred)
        assert float(traced_bce_loss(pv, target).value.reshape(())) == \
            bce_loss(Tensor4(pred.copy()), Tensor4(target.copy()))
        assert float(traced_focal_loss(pv, target, cfg).value.reshape(())) == \
            focal_loss(Tensor4(pred.copy()), Tensor4(target.copy()), cfg)

    def test_loss_gradients_pass_fd(self):
        from caggnet.gradcheck import op_checks

        reports = {r.op: r for r in op_checks()}
        for name in ("bce_loss", "focal_loss_g2", "focal_loss_g0"):
            assert reports[name].passed
            assert reports[name].max_rel_err < 1e-4


class TestAdam:
    def make_store(self, values):
        store = ParamStore()
        for name, v in values.items():
            store.add(name, np.asarray(v, dtype=np.float64))
        return store

    def test_hand_step(self):
        # w=0, g=1, t=1: m_hat=1, v_hat=1 -> step is -lr/(1 + eps)
        store = self.make_store({"w": [0.0]})
        store["w"].grad[...] = 1.0
        adam_step(store, AdamState(lr=1e-3))
        assert abs(store["w"].value[0] + 1e-3) < 1e-6

    def test_zero_gradient_is_noop_on_value(self):
        store = self.make_store({"w": [1.5, -2.0]})
        adam_step(store, AdamState())
        assert np.array_equal(store["w"].value, [1.5, -2.0])

    def test_gradients_zeroed_after_step(self):
        store = self.make_store({"w": [0.0]})
        store["w"].grad[...] = 3.0
        adam_step(store, AdamState())
        assert np.all(store["w"].grad == 0.0)

    def test_nan_gradient_aborts_with_name(self):
        store = self.make_store({"bad_param": [0.0]})
        store["bad_param"].grad[...] = np.nan
        with pytest.raises(TrainingDiverged, match="bad_param"):
            adam_step(store, AdamState())

    def test_identical_runs_identical_trajectories(self, rng):
        init = rng.normal(size=(4,))
        grads = [rng.normal(size=(4,)) for _ in range(10)]

        def run():
            store = self.make_store({"w": init.copy()})
            state = AdamState(lr=1e-2)
            for g in grads:
                store["w"].grad[...] = g
                adam_step(store, state)
            return store["w"].value.tobytes()

        assert run() == run()


class TestEarlyStopper:
    def test_stops_after_patience_plus_one_flat_epochs(self):
        stopper = EarlyStopper(patience=3)
        assert stopper.update(0.5)  # first observation improves
        stalls = 0
        while not stopper.should_stop:
            stopper.update(0.5)  # frozen metric
            stalls += 1
        assert stalls == 4  # patience + 1

    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=2)
        stopper.update(0.1)
        stopper.update(0.1)
        stopper.update(0.2)
        assert stopper.epochs_since_best == 0
        assert not stopper.should_stop


def make_dataset(rng, count=4, size=16):
    from caggnet.data_io import SynthConfig, gen_synthetic

    return gen_synthetic(SynthConfig(count=count, size=size, blobs_min=1,
                                     blobs_max=2, radius_min=3, radius_max=5,
                                     noise_sigma=0.02, seed=7))


class TestTrainLoop:
    def tiny_model(self, seed=0):
        cfg = ModelConfig(levels=2, columns=1, base_channels=4, in_channels=1,
                          seed=seed, dtype="single")
        return build_caggnet(cfg)

    def test_smoke_one_epoch(self, rng):
        samples = make_dataset(rng, count=2)
        model = self.tiny_model()
        log = train_loop(model, samples, samples, make_loss("bce"),
                         AdamState(), EarlyStopper(patience=5), epochs_max=1,
                         batch_size=2, seed=0)
        assert len(log.rows) == 1
        assert math.isfinite(log.rows[0].train_loss)

    def test_empty_dataset_rejected(self):
        model = self.tiny_model()
        with pytest.raises(ValueError, match="non-empty"):
            train_loop(model, [], [], make_loss("bce"), AdamState(),
                       EarlyStopper(), epochs_max=1, batch_size=1)

    def test_early_stop_breaks_loop(self, rng):
        samples = make_dataset(rng, count=2)
        model = self.tiny_model()
        log = train_loop(model, samples, samples, make_loss("bce"),
                         AdamState(lr=0.0), EarlyStopper(patience=2),
                         epochs_max=50, batch_size=2, seed=0)
        # exactly patience+1 non-improving epochs follow the last best one
        assert log.stopped_early
        assert len(log.rows) == log.best_epoch + 1 + 2 + 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, rng):
        samples = make_dataset(rng, count=2)
        model = self.tiny_model()
        with pytest.raises(TrainingDiverged):
            train_loop(model, samples, samples, make_loss("focal"),
                       AdamState(lr=1e12), EarlyStopper(), epochs_max=30,
                       batch_size=2, seed=0)

    def test_csv_log_layout(self, tmp_path, rng):
        samples = make_dataset(rng, count=2)
        model = self.tiny_model()
        log = train_loop(model, samples, samples, make_loss("bce"),
                         AdamState(), EarlyStopper(), epochs_max=2,
                         batch_size=2, seed=0)
        log.write_csv(tmp_path / "log.csv")
        log.write_timing_csv(tmp_path / "timing.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_iou,val_f1"
        assert len(lines) == 1 + len(log.rows)
        assert (tmp_path / "timing.csv").read_text().startswith("epoch,seconds")

    def test_best_checkpoint_restored(self, rng, tmp_path):
        samples = make_dataset(rng, count=4)
        model = self.tiny_model()
        log = train_loop(model, samples[:2], samples[2:], make_loss("bce"),
                         AdamState(), EarlyStopper(patience=3), epochs_max=4,
                         batch_size=2, seed=0,
                         checkpoint_dir=tmp_path / "ckpt")
        from caggnet.metrics import evaluate_model
        from caggnet.models import load_checkpoint

        restored = load_checkpoint(tmp_path / "ckpt")
        a = evaluate_model(model, samples[2:])
        b = evaluate_model(restored, samples[2:])
        assert a.mean_iou == b.mean_iou == log.best_val_iou
