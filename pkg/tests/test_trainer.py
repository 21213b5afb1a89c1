import os

import numpy as np
import pytest

from cebsnet.config import ModelConfig, TrainConfig
from cebsnet.model import CEBSNet
from cebsnet.tensor import ContractError, Tensor
from cebsnet.trainer import (
    Adam, CheckpointError, TrainingDiverged, evaluate, load_checkpoint, read_checkpoint, restore_optimizer,
    save_checkpoint, train,
)


def scalar_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return x


def quick_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=4, epochs=1, max_iters=2, seed=3, augment=False, eval_every=0, checkpoint_dir="")
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_matches_scalar_reference(self, rng):
        x0 = rng.standard_normal(5)
        grads = rng.standard_normal((12, 5))
        p = Tensor(x0.copy(), requires_grad=True)
        opt = Adam([("p", p)], lr=0.01)
        for g in grads:
            p.grad = g.copy()
            opt.step()
        ref = [scalar_adam(x0[i], grads[:, i], 0.01) for i in range(5)]
        np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-10)

    def test_zero_lr_bitwise_unchanged(self, small_cfg, tiny_dataset):
        model = CEBSNet(small_cfg, seed=0)
        before = {k: v.copy() for k, v in model.state_dict().items() if not k.endswith(("running_mean", "running_var"))}
        train(small_cfg, quick_cfg(learning_rate=0.0), tiny_dataset, model=model)
        after = model.state_dict()
        assert all(np.array_equal(v, after[k]) for k, v in before.items())

    def test_skips_params_without_grad(self):
        p = Tensor(np.ones(3), requires_grad=True)
        Adam([("p", p)]).step()
        assert np.array_equal(p.data, np.ones(3))

    def test_weight_decay_pulls_toward_zero(self):
        p = Tensor(np.full(2, 5.0), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1, weight_decay=1.0)
        p.grad = np.zeros(2)
        opt.step()
        assert (p.data < 5.0).all()


class TestTraining:
    def test_history_reproducible(self, small_cfg, tiny_dataset, tmp_path):
        for name in ("a", "b"):
            train(small_cfg, quick_cfg(), tiny_dataset, out_dir=str(tmp_path / name),
                  history_csv=str(tmp_path / name / "history.csv"))
        ha = (tmp_path / "a" / "history.csv").read_bytes()
        assert ha == (tmp_path / "b" / "history.csv").read_bytes()
        lines = ha.decode().splitlines()
        assert lines[0] == "iteration,M1,M2,M3,M4,M5,Mhat,M,total" and len(lines) == 3
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_first_loss_near_seven_ln2(self, small_cfg, tiny_dataset):
        res = train(small_cfg, quick_cfg(max_iters=1), tiny_dataset)
        assert np.isfinite(res.initial_loss) and 1.0 < res.initial_loss < 20.0

    def test_max_iters_caps_steps(self, small_cfg, tiny_dataset):
        res = train(small_cfg, quick_cfg(epochs=5, max_iters=3), tiny_dataset)
        assert len(res.history) == 3

    def test_divergence_reported(self, small_cfg, tiny_dataset):
        model = CEBSNet(small_cfg, seed=0)
        model.detector.final_fusion.conv.weight.data[...] = np.nan
        with pytest.raises(TrainingDiverged, match="iteration 1"):
            train(small_cfg, quick_cfg(), tiny_dataset, model=model)

    def test_evaluate_shapes(self, small_cfg, tiny_dataset):
        scores, counts = evaluate(CEBSNet(small_cfg, seed=0), tiny_dataset, "test")
        assert counts.total == 2 * 64 * 64
        assert 0.0 <= scores.OA <= 1.0

    def test_evaluate_empty_split(self, small_cfg, tiny_dataset):
        with pytest.raises(ContractError, match="no samples"):
            evaluate(CEBSNet(small_cfg, seed=0), tiny_dataset, "val")


class TestCheckpoint:
    def test_round_trip_bitwise(self, small_cfg, tiny_dataset, tmp_path):
        res = train(small_cfg, quick_cfg(), tiny_dataset, out_dir=str(tmp_path))
        x = np.random.default_rng(0).random((1, 3, 64, 64))
        ref = res.model.predict_proba(x, x[:, :, ::-1])
        loaded, tcfg, meta = load_checkpoint(res.checkpoint)
        assert tcfg == quick_cfg() and meta["epoch"] == 1
        for k, v in res.model.state_dict().items():
            assert np.array_equal(v, loaded.state_dict()[k]), k
        assert np.array_equal(loaded.predict_proba(x, x[:, :, ::-1]), ref)

    def test_optimizer_state_restored(self, small_cfg, tiny_dataset, tmp_path):
        res = train(small_cfg, quick_cfg(), tiny_dataset, out_dir=str(tmp_path))
        model = CEBSNet(small_cfg, seed=9)
        opt = Adam(model.named_parameters())
        restore_optimizer(opt, res.checkpoint)
        assert opt.t == res.optimizer.t == 2
        assert all(np.array_equal(opt.m[n], res.optimizer.m[n]) for n, _ in opt.params)

    @pytest.mark.parametrize("cut", [1, 100, 4096])
    def test_truncated_rejected(self, small_cfg, tmp_path, cut):
        path = save_checkpoint(str(tmp_path / "m.ckpt"), CEBSNet(small_cfg, seed=0))
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[:-cut])
        with pytest.raises(CheckpointError, match="checksum"):
            read_checkpoint(path)

    def test_flipped_byte_rejected(self, small_cfg, tmp_path):
        path = save_checkpoint(str(tmp_path / "m.ckpt"), CEBSNet(small_cfg, seed=0))
        blob = bytearray(open(path, "rb").read())
        blob[len(blob) // 2] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError, match="header"):
            read_checkpoint(str(path))

    def test_width_mismatch_names_parameter(self, tmp_path):
        small = ModelConfig(stage_widths=(4, 4, 8, 8, 8), fpn_width=64, input_size=64)
        big = ModelConfig(stage_widths=(4, 4, 8, 8, 8), fpn_width=128, input_size=64)
        path = save_checkpoint(str(tmp_path / "m.ckpt"), CEBSNet(small, seed=0))
        with pytest.raises(ContractError, match=r"parameter '.+': checkpoint shape .*64.* != model shape .*128"):
            load_checkpoint(path, CEBSNet(big, seed=0))

    def test_atomic_write_leaves_no_temp(self, small_cfg, tmp_path):
        save_checkpoint(str(tmp_path / "m.ckpt"), CEBSNet(small_cfg, seed=0))
        assert os.listdir(tmp_path) == ["m.ckpt"]


def test_predict_proba_leaves_running_stats_alone(small_cfg, rng):
    model = CEBSNet(small_cfg, seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    model.predict_proba(rng.random((1, 3, 64, 64)), rng.random((1, 3, 64, 64)))
    assert model.training
    assert all(np.array_equal(v, model.state_dict()[k]) for k, v in before.items())
