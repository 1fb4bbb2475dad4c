import math

import numpy as np
import pytest
import torch

from djscc_hbf import training as T
from djscc_hbf.channel import build_dataset
from djscc_hbf.config import preset


def tiny(**over):
    base = {"data.train_size": 16, "data.eval_size": 8, "train.batch": 4, "train.steps": 3, "train.log_every": 0}
    base.update(over)
    return preset("smoke").with_overrides(base)


@pytest.fixture(scope="module")
def data():
    cfg = tiny()
    return build_dataset(cfg, 16, 1000), build_dataset(cfg, 8, 900000)


class TestNoam:
    def test_crossover(self):
        for d, w, f in ((16, 10, 1.0), (256, 4000, 0.5)):
            assert T.noam_lr(w, d, w, f) == pytest.approx(f * d ** -0.5 * w ** -0.5, rel=1e-15)

    def test_full_scale_value(self):
        assert T.noam_lr(4000, 256, 4000, 1.0) == pytest.approx(9.882e-4, abs=5e-8)

    def test_increasing_then_decaying(self):
        lrs = [T.noam_lr(s, 32, 100, 1.0) for s in range(1, 300)]
        assert all(a < b for a, b in zip(lrs[:99], lrs[1:100]))
        assert all(a > b for a, b in zip(lrs[100:-1], lrs[101:]))

    def test_step_zero(self):
        with pytest.raises(ValueError):
            T.noam_lr(0, 16, 10)


class TestTraining:
    def test_finite_initial_loss(self, data):
        cfg = tiny()
        st = T.train(cfg, data[0], steps=1)
        assert math.isfinite(st.losses[0])

    def test_identical_seeds_identical_traces(self, data):
        a = T.train(tiny(), data[0])
        b = T.train(tiny(), data[0])
        assert a.losses == b.losses
        c = T.train(tiny(**{"train.seed": 1}), data[0])
        assert c.losses != a.losses

    def test_lr_follows_schedule(self, data):
        cfg = tiny()
        st = T.train(cfg, data[0], steps=2)
        assert st.optimizer.param_groups[0]["lr"] == T.noam_lr(2, 16, cfg.train.warmup, cfg.train.factor)

    def test_non_finite_abort(self, data):
        cfg = tiny()
        st = T.init_state(cfg)
        H_d, H_u = T.to_grids(data[0])
        H_d.re[2, 0, 0, 0, 0] = float("nan")
        with pytest.raises(T.TrainingError, match="sample 2"):
            T.train_step(st, H_d[:4], H_u[:4], T.train_link(cfg), 0.1)

    @pytest.mark.parametrize("mode", ["simultaneous", "tdma_mrc", "awgn"])
    def test_modes_run(self, data, mode):
        st = T.train(tiny(**{"uplink.mode": mode}), data[0], steps=1)
        assert math.isfinite(st.losses[-1])

    def test_sscc_training_and_eval(self, data):
        cfg = tiny(**{"uplink.feedback": "sscc"})
        st = T.train(cfg, data[0], steps=2)
        assert st.model.code_dim == 4
        link = T.train_link(cfg)
        link.quantizer = T.calibrate_quantizer(st.model, data[0])
        for ber in (0.0, 0.1):
            link.ber = ber
            rows = T.evaluate(st.model, data[1], [10], link, 5)
            assert math.isfinite(rows[0].mean)

    def test_float32(self, data):
        st = T.train(tiny(**{"train.dtype": "float32"}), data[0], steps=2)
        assert next(st.model.parameters()).dtype == torch.float32 and math.isfinite(st.losses[-1])


class TestEvaluate:
    def test_empty_grid(self, data):
        model = T.build_model(tiny())
        assert T.evaluate(model, data[1], [], T.train_link(tiny()), 0) == []
        assert T.evaluate_pca(data[1], [], 2) == []

    def test_deterministic_and_monotone(self, data):
        cfg = tiny()
        model = T.build_model(cfg)
        a = T.evaluate(model, data[1], [-10, 0, 10, 20], T.train_link(cfg), 7)
        b = T.evaluate(model, data[1], [-10, 0, 10, 20], T.train_link(cfg), 7)
        assert a == b
        means = [r.mean for r in a]
        assert means == sorted(means)

    def test_chunking_invariant(self, data):
        cfg = tiny()
        model = T.build_model(cfg)
        a = T.evaluate(model, data[1], [10], T.train_link(cfg), 7, chunk=256)
        b = T.evaluate(model, data[1], [10], T.train_link(cfg), 7, chunk=3)
        assert a[0].mean == pytest.approx(b[0].mean, rel=1e-13)

    def test_matches_training_loss(self, data):
        """Evaluation at the training SNR reproduces the batch loss on the same samples and noise."""
        cfg = tiny()
        model = T.build_model(cfg)
        link = T.train_link(cfg)
        rows = T.evaluate(model, data[0], [cfg.train.snr_dl_db], link, 11)
        H_d, H_u = T.to_grids(data[0])
        noise = T.frozen_noise(link.mode, range(len(data[0])), cfg, 11, torch.float64)
        with torch.no_grad():
            bf, _ = T.forward_pipeline(model, H_d, H_u, link, noise)
            loss = -T.sum_rate(H_d, bf, 0.1).sum_rate.mean()
        assert rows[0].mean == pytest.approx(-float(loss), abs=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, data, tmp_path):
        cfg = tiny()
        st = T.train(cfg, data[0])
        st.best_val = 3.25
        path = T.save_checkpoint(st, tmp_path / "m.ckpt")
        back = T.load_checkpoint(path, cfg)
        assert back.step == st.step and back.best_val == 3.25
        for (n, p), (_, q) in zip(st.model.named_parameters(), back.model.named_parameters()):
            assert torch.equal(p, q), n
            sa, sb = st.optimizer.state[p], back.optimizer.state[q]
            assert torch.equal(sa["exp_avg"], sb["exp_avg"]) and torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])
        assert torch.equal(st.generator.get_state(), back.generator.get_state())

    def test_resume_equals_continuous(self, data, tmp_path):
        cfg = tiny()
        cont = T.train(cfg, data[0], steps=4)
        part = T.train(cfg, data[0], steps=3)
        T.save_checkpoint(part, tmp_path / "p.ckpt")
        resumed = T.train(cfg, data[0], steps=1, state=T.load_checkpoint(tmp_path / "p.ckpt", cfg))
        assert resumed.losses[-1] == cont.losses[-1]
        for p, q in zip(cont.model.parameters(), resumed.model.parameters()):
            assert torch.equal(p, q)

    def test_format(self, data, tmp_path):
        cfg = tiny()
        st = T.train(cfg, data[0], steps=1)
        raw = T.read_checkpoint_raw(T.save_checkpoint(st, tmp_path / "f.ckpt"))
        assert raw["digest"] == cfg.digest() and raw["step"] == 1
        name = "param/decoder.lift.weight"
        assert raw["blobs"][name].dtype == np.dtype("<f8")
        assert raw["blobs"][name].shape == tuple(st.model.decoder.lift.weight.shape)
        assert any(k.startswith("adam.m/") for k in raw["blobs"])

    def test_errors(self, data, tmp_path):
        cfg = tiny()
        st = T.train(cfg, data[0], steps=1)
        path = T.save_checkpoint(st, tmp_path / "e.ckpt")
        with pytest.raises(T.CheckpointError, match="digest"):
            T.load_checkpoint(path, tiny(**{"train.seed": 9}))
        (tmp_path / "bad").write_bytes(b"nope")
        with pytest.raises(T.CheckpointError):
            T.read_checkpoint_raw(tmp_path / "bad")
        with pytest.raises(T.CheckpointError):
            T.read_checkpoint_raw(tmp_path / "absent")


def test_pipeline_grad_check_small():
    reports = T.pipeline_grad_check(tiny(), max_coords=4)
    assert reports and all(r.passed for r in reports), [r for r in reports if not r.passed]


def test_parameter_count_matches_modules():
    model = T.build_model(tiny())
    assert T.count_parameters(model) == T.count_parameters(model.encoder) + T.count_parameters(model.decoder)
