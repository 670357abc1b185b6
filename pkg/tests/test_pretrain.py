import numpy as np
import pytest
import torch

from conftest import tiny_model_config
from stars.data import DataConfig, generate_synthetic
from stars.model import StarsModel, load_checkpoint
from stars.pretrain import Stage1Config, build_stage1_batch, make_optimizer, mamp_loss, run_stage1
from stars.training import (
    EpochLog, TrainingAborted, epoch_batches, read_log, sample_rng, warmup_cosine,
)


def _data(n_per=4, frames=16, joints=2):
    seqs, _ = generate_synthetic(2, n_per, frames, joints, seed=0)
    return seqs


class TestLoss:
    def test_zero(self):
        x = torch.randn(2, 3, 12)
        assert mamp_loss(x, x.clone()).item() == 0

    def test_single_cell_unit_residual(self):
        pred = torch.ones(1, 1, 12)
        assert mamp_loss(pred, torch.zeros(1, 1, 12)).item() == 12

    def test_quadratic(self):
        p, t = torch.randn(3, 5, 12, dtype=torch.float64), torch.randn(3, 5, 12, dtype=torch.float64)
        assert torch.isclose(mamp_loss(2 * p, 2 * t), 4 * mamp_loss(p, t), rtol=1e-12)

    def test_hand_mean(self):
        pred = torch.zeros(1, 2, 2)
        target = torch.tensor([[[1.0, 1.0], [3.0, 0.0]]])
        assert mamp_loss(pred, target).item() == pytest.approx((2 + 9) / 2)

    def test_empty_and_shape(self):
        with pytest.raises(ValueError, match="masked cell"):
            mamp_loss(torch.zeros(1, 0, 12), torch.zeros(1, 0, 12))
        with pytest.raises(ValueError, match="shape"):
            mamp_loss(torch.zeros(1, 2, 12), torch.zeros(1, 3, 12))


class TestBatch:
    cfg = Stage1Config(mask_ratio=0.5)
    dcfg = DataConfig(target_length=8)

    def test_partition(self):
        seqs = _data()
        b = build_stage1_batch(seqs[:3], self.dcfg, self.cfg, 4, [np.random.default_rng(i) for i in range(3)])
        assert b.tokens.shape == (3, 2, 2, 12)
        for keep, mask in zip(b.keep_idx, b.mask_idx):
            both = torch.cat([keep, mask]).sort().values
            assert both.tolist() == [0, 1, 2, 3]
        assert b.targets.shape == (3, 2, 12)

    def test_min_ratio_keeps_all_but_one(self):
        cfg = Stage1Config(mask_ratio=0.01)
        b = build_stage1_batch(_data()[:2], self.dcfg, cfg, 4, [np.random.default_rng(0)] * 2)
        assert b.mask_idx.shape[1] == 1 and b.keep_idx.shape[1] == 3

    def test_targets_are_motion_at_masked_cells(self):
        seqs = _data(frames=8)
        dcfg = DataConfig(target_length=8, trim_min=1.0, trim_max=1.0)
        b = build_stage1_batch(seqs[:1], dcfg, self.cfg, 4, [np.random.default_rng(0)])
        x = seqs[0].frames.astype(np.float64)
        motion = np.empty_like(x)
        motion[4:] = x[4:] - x[:4]
        motion[:4] = motion[4]
        for k, cell in enumerate(b.mask_idx[0].tolist()):
            t, v = divmod(cell, 2)
            expect = motion[4 * t:4 * t + 4, v].ravel()
            np.testing.assert_allclose(b.targets[0, k].numpy(), expect, rtol=1e-5, atol=1e-6)

    def test_replay(self):
        seqs = _data()
        a = build_stage1_batch(seqs[:3], self.dcfg, self.cfg, 4, [sample_rng(1, 2, i) for i in range(3)])
        b = build_stage1_batch(seqs[:3], self.dcfg, self.cfg, 4, [sample_rng(1, 2, i) for i in range(3)])
        for f in ("tokens", "keep_idx", "mask_idx", "targets"):
            assert torch.equal(getattr(a, f), getattr(b, f))


class TestSchedule:
    def test_warmup_then_cosine(self):
        total = 100
        mult = [warmup_cosine(s, total, 0.05) for s in range(total)]
        assert mult[:5] == [0.2, 0.4, 0.6, 0.8, 1.0]
        assert mult[5] == 1.0
        assert all(a >= b for a, b in zip(mult[5:], mult[6:]))
        assert mult[-1] < 1e-3

    def test_batches_partition(self):
        bs = epoch_batches(10, 3, seed=0, epoch=1)
        assert sorted(np.concatenate(bs).tolist()) == list(range(10))
        assert [len(b) for b in bs] == [3, 3, 3, 1]
        assert [len(b) for b in epoch_batches(10, 3, 0, 1, min_size=2)] == [3, 3, 3]

    def test_batches_vary_by_epoch(self):
        a = np.concatenate(epoch_batches(20, 4, 0, 0))
        b = np.concatenate(epoch_batches(20, 4, 0, 1))
        assert not np.array_equal(a, b)


def _tiny_stage1(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3)
    base.update(kw)
    return Stage1Config(**base)


class TestRun:
    dcfg = DataConfig(target_length=8)

    def test_zero_epochs_is_init(self, tmp_path):
        cfg = tiny_model_config()
        m = StarsModel(cfg)
        init = {k: v.clone() for k, v in m.state_dict().items()}
        run_stage1(_data(), _tiny_stage1(epochs=0), m, self.dcfg, tmp_path)
        back, meta = load_checkpoint(tmp_path)
        assert meta["stage"] == "mamp" and meta["epoch"] == 0
        for k, v in back.state_dict().items():
            assert torch.equal(v, init[k]), k

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            torch.manual_seed(0)
            run_stage1(_data(), _tiny_stage1(seed=3), StarsModel(tiny_model_config()), self.dcfg, tmp_path / name)
        assert (tmp_path / "a/params.bin").read_bytes() == (tmp_path / "b/params.bin").read_bytes()

    def test_log_and_best(self, tmp_path):
        _, records = run_stage1(_data(), _tiny_stage1(epochs=3), StarsModel(tiny_model_config()), self.dcfg, tmp_path)
        log = read_log(tmp_path / "train_log.jsonl")
        assert [r["epoch"] for r in log] == [1, 2, 3]
        assert set(log[0]) == {"epoch", "mean_loss", "lr", "wall_ms"}
        best = load_checkpoint(tmp_path / "best")[1]
        assert best["epoch"] == 1 + int(np.argmin([r["mean_loss"] for r in log]))
        assert records == log

    def test_training_reduces_loss(self):
        _, rec = run_stage1(_data(n_per=8), _tiny_stage1(epochs=30, lr=3e-3), StarsModel(tiny_model_config()),
                            DataConfig(target_length=8, trim_min=1.0, trim_max=1.0))
        assert rec[-1]["mean_loss"] < rec[0]["mean_loss"]

    def test_non_finite_aborts(self, monkeypatch):
        import stars.pretrain as P
        monkeypatch.setattr(P, "mamp_loss", lambda pred, t: mamp_loss(pred, t) * float("nan"))
        with pytest.raises(TrainingAborted) as info:
            run_stage1(_data(), _tiny_stage1(batch_size=8), StarsModel(tiny_model_config()), self.dcfg)
        assert {"batch", "lr", "grad_norm", "epoch"} <= set(info.value.diagnostic)
        assert info.value.diagnostic["batch"] == 0

    @pytest.mark.parametrize("kw", [{"mask_ratio": 1.0}, {"mask_ratio": 0.0}, {"tau1": 0}, {"epochs": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            _tiny_stage1(**kw).validate()

    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="nonempty"):
            run_stage1([], _tiny_stage1(), StarsModel(tiny_model_config()), self.dcfg)


def test_zero_lr_step_is_bit_identical():
    m = StarsModel(tiny_model_config())
    before = {k: v.clone() for k, v in m.state_dict().items()}
    opt = make_optimizer(m.parameters(), 0.0, Stage1Config())
    x = torch.randn(2, 2, 2, 12)
    keep, mask = torch.tensor([[0, 1]] * 2), torch.tensor([[2, 3]] * 2)
    mamp_loss(m.mamp_forward(x, keep, mask), torch.randn(2, 2, 12)).backward()
    opt.step()
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_epoch_log_in_memory():
    log = EpochLog()
    rec = log.write(epoch=1, mean_loss=0.5, lr=0.1)
    assert rec["wall_ms"] >= 0 and log.records == [rec]
