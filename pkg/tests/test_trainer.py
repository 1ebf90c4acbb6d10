import json
import math

import numpy as np
import pytest
import torch

from mumc import corpus
from mumc.config import default_config
from mumc.model import MumcModel
from mumc.trainer import (
    Checkpoint,
    OptimState,
    Schedule,
    adamw_step,
    backward,
    clip_grads,
    decay_exempt,
    epoch_batches,
    load_checkpoint,
    load_model_weights,
    lr_at,
    pretrain,
    save_checkpoint,
)


class TestSchedule:
    def test_paper_profile_endpoints_exact(self):
        s = Schedule(1e-4, 2e-5, total_steps=1000)
        assert lr_at(s, 0) == 1e-4
        assert lr_at(s, 1000) == 2e-5

    def test_midpoint(self):
        s = Schedule(1e-4, 2e-5, total_steps=1000)
        assert lr_at(s, 500) == pytest.approx(6e-5, rel=1e-12)

    def test_monotone_nonincreasing_after_warmup(self):
        s = Schedule(1e-3, 1e-5, total_steps=200, warmup_steps=20)
        values = [lr_at(s, t) for t in range(20, 201)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_warmup_ramp(self):
        s = Schedule(1e-3, 1e-5, total_steps=100, warmup_steps=10)
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, 5) == pytest.approx(5e-4)
        assert lr_at(s, 10) == 1e-3

    def test_out_of_range(self):
        s = Schedule(1e-4, 2e-5, total_steps=10)
        for step in (-1, 11):
            with pytest.raises(ValueError):
                lr_at(s, step)


class TestAdamW:
    def _single(self, value=1.0):
        p = torch.tensor([value], dtype=torch.float64)
        params = {"w": p}
        state = OptimState.for_params(params, weight_decay=0.0)
        return p, params, state

    def test_zero_grad_zero_wd_no_change(self):
        p, params, state = self._single(3.0)
        adamw_step(params, {"w": torch.zeros_like(p)}, state, lr=0.1)
        assert p.item() == 3.0

    def test_descent_direction(self):
        p, params, state = self._single(1.0)
        adamw_step(params, {"w": p.clone()}, state, lr=0.1)  # grad of 0.5 w^2 is w
        assert p.item() < 1.0

    def test_quadratic_bowl_convergence(self):
        torch.manual_seed(0)
        w = torch.tensor([3.0, -2.0], dtype=torch.float64)
        params = {"w": w}
        state = OptimState.for_params(params, weight_decay=0.0)
        a = torch.tensor([1.0, 4.0], dtype=torch.float64)
        for _ in range(2000):
            grad = a * w  # f(w) = 0.5 * sum(a * w^2), optimum at 0
            adamw_step(params, {"w": grad.clone()}, state, lr=0.01)
        assert torch.all(w.abs() < 1e-6)

    def test_decay_exemption_set(self):
        matrix = torch.ones(3, 3, dtype=torch.float64)
        bias = torch.ones(3, dtype=torch.float64)
        tau = torch.tensor(0.07, dtype=torch.float64)
        params = {"blk.weight": matrix, "blk.bias": bias, "temperature": tau}
        state = OptimState.for_params(params, weight_decay=0.5)
        zero = {n: torch.zeros_like(p) for n, p in params.items()}
        adamw_step(params, zero, state, lr=0.1)
        assert torch.allclose(matrix, torch.full((3, 3), 1.0 - 0.1 * 0.5, dtype=torch.float64))
        assert torch.all(bias == 1.0)
        assert tau.item() == 0.07

    def test_exemption_rule(self):
        assert decay_exempt("any.bias", torch.zeros(4))
        assert decay_exempt("norm.weight", torch.zeros(8))
        assert decay_exempt("temperature", torch.zeros(()))
        assert not decay_exempt("attn.q.weight", torch.zeros(4, 4))

    def test_nonfinite_grad_errors(self):
        p, params, state = self._single()
        with pytest.raises(FloatingPointError, match="w"):
            adamw_step(params, {"w": torch.tensor([float("nan")], dtype=torch.float64)}, state, 0.1)

    def test_clip_grads(self):
        grads = {"a": torch.tensor([3.0, 4.0])}  # norm 5
        norm = clip_grads(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert torch.allclose(grads["a"], torch.tensor([0.6, 0.8]))
        grads = {"a": torch.tensor([0.3, 0.4])}
        clip_grads(grads, 1.0)
        assert torch.allclose(grads["a"], torch.tensor([0.3, 0.4]))


class TestCheckpoint:
    def _tensors(self):
        g = torch.Generator().manual_seed(0)
        return {
            "a.weight": torch.randn(4, 3, generator=g),
            "b.bias": torch.randn(7, generator=g),
            "temperature": torch.tensor(0.07),
        }

    def test_roundtrip_bit_exact(self, tmp_path):
        path = tmp_path / "c.bin"
        tensors = self._tensors()
        save_checkpoint(path, tensors, {"step": 3, "phase": "pretrain"})
        ckpt = load_checkpoint(path)
        assert ckpt.meta["step"] == 3
        for name, t in tensors.items():
            assert ckpt.tensors[name].shape == tuple(t.shape)
            assert np.array_equal(ckpt.tensors[name], t.numpy())
        # byte-identical on re-save
        save_checkpoint(tmp_path / "c2.bin", ckpt.tensors, ckpt.meta)
        assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "c2.bin").read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(path, self._tensors(), {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(ValueError, match="data region short"):
            load_checkpoint(path)

    def test_overlapping_offsets_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        header = {
            "x": {"dtype": "f32", "shape": [2], "byte_offset": 0, "byte_length": 8},
            "y": {"dtype": "f32", "shape": [2], "byte_offset": 4, "byte_length": 8},
        }
        hb = json.dumps(header).encode()
        path.write_bytes(len(hb).to_bytes(8, "little") + hb + b"\0" * 12)
        with pytest.raises(ValueError, match="overlapping"):
            load_checkpoint(path)

    def test_unknown_dtype_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        header = {"x": {"dtype": "f64", "shape": [1], "byte_offset": 0, "byte_length": 8}}
        hb = json.dumps(header).encode()
        path.write_bytes(len(hb).to_bytes(8, "little") + hb + b"\0" * 8)
        with pytest.raises(ValueError, match="unknown dtype"):
            load_checkpoint(path)

    def test_reserved_meta_name(self, tmp_path):
        with pytest.raises(ValueError, match="reserved"):
            save_checkpoint(tmp_path / "c.bin", {"__meta__": torch.zeros(1)}, {})

    def test_empty_header_file_too_short(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(ValueError, match="missing header"):
            load_checkpoint(path)


class TestLoadModelWeights:
    def _cfg(self, **kw):
        cfg = default_config("desk").model
        cfg.vocab_size = 32
        for k, v in kw.items():
            setattr(cfg, k, v)
        return cfg

    def test_positional_interpolation_on_resolution_change(self, tmp_path):
        cfg = self._cfg(train_resolution=16, finetune_resolution=32, patch_size=8)
        small = MumcModel(cfg, resolution=16, seed=0)
        save_checkpoint(tmp_path / "c.bin", dict(small.named_parameters()), {})
        big = MumcModel(cfg, resolution=32, seed=1)
        fresh = load_model_weights(big, load_checkpoint(tmp_path / "c.bin"))
        assert fresh == []
        assert big.tower.patch_embed.pos.shape == (17, cfg.hidden)
        # non-positional weights copied exactly
        assert torch.equal(big.tower.img_proj.weight, small.tower.img_proj.weight)

    def test_shape_mismatch_lists_tensors(self, tmp_path):
        cfg_a = self._cfg()
        model_a = MumcModel(cfg_a, seed=0)
        save_checkpoint(tmp_path / "c.bin", dict(model_a.named_parameters()), {})
        cfg_b = self._cfg(vocab_size=48)
        model_b = MumcModel(cfg_b, seed=0)
        with pytest.raises(ValueError) as err:
            load_model_weights(model_b, load_checkpoint(tmp_path / "c.bin"))
        assert "tower.tok_embed.weight" in str(err.value)
        assert "mlm_head" in str(err.value)

    def test_skip_decoder_leaves_fresh_init(self, tmp_path):
        cfg = self._cfg()
        model_a = MumcModel(cfg, seed=0)
        save_checkpoint(tmp_path / "c.bin", dict(model_a.named_parameters()), {})
        model_b = MumcModel(cfg, seed=7)
        before = model_b.dec_head.weight.clone()
        fresh = load_model_weights(model_b, load_checkpoint(tmp_path / "c.bin"), skip_decoder=True)
        assert torch.equal(model_b.dec_head.weight, before)
        assert any(name.startswith("decoder.") for name in fresh)
        assert torch.equal(model_b.itm_head.weight, model_a.itm_head.weight)


class TestEpochBatches:
    def test_partition_and_min_batch(self):
        batches = epoch_batches(10, 4, np.random.default_rng(0))
        sizes = [len(b) for b in batches]
        assert sizes == [4, 4, 2]
        batches = epoch_batches(9, 4, np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4]  # trailing 1 dropped

    def test_covers_all_indices(self):
        batches = epoch_batches(12, 4, np.random.default_rng(3))
        got = sorted(int(i) for b in batches for i in b)
        assert got == list(range(12))


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("traindata")
    cap, vqa = corpus.synthesize_corpus(seed=5, n_pairs=8, image_size=64, out_dir=root)
    return cap, vqa


class TestPretrainLoop:
    def _cfg(self):
        cfg = default_config("desk", "pretrain")
        cfg.run.epochs = 2
        cfg.run.batch = 4
        return cfg

    def test_determinism_byte_identical(self, tiny_corpus, tmp_path):
        cap, vqa = tiny_corpus
        extra = [f"{e.question} {e.answer}" for e in corpus.load_manifest(vqa, "vqa")]
        a = pretrain(self._cfg(), cap, tmp_path / "a", seed=9, extra_text=extra)
        b = pretrain(self._cfg(), cap, tmp_path / "b", seed=9, extra_text=extra)
        assert open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()

    def test_different_seed_differs(self, tiny_corpus, tmp_path):
        cap, _ = tiny_corpus
        a = pretrain(self._cfg(), cap, tmp_path / "a", seed=1)
        b = pretrain(self._cfg(), cap, tmp_path / "b", seed=2)
        assert open(a.metrics_path, "rb").read() != open(b.metrics_path, "rb").read()

    def test_outputs_and_metrics_schema(self, tiny_corpus, tmp_path):
        cap, _ = tiny_corpus
        result = pretrain(self._cfg(), cap, tmp_path / "run", seed=0)
        out = tmp_path / "run"
        assert (out / "resolved_config.json").exists()
        assert (out / "loss_curve.png").exists()
        assert (out / "vocab.txt").exists()
        lines = [json.loads(l) for l in open(result.metrics_path)]
        assert len(lines) == result.steps == 4  # 2 epochs x 2 batches
        for rec in lines:
            assert set(rec) == {"step", "lr", "l_ucl", "l_mcl", "l_itm", "l_mlm", "total"}
            assert math.isfinite(rec["total"])

    def test_keep_last_two_epoch_checkpoints(self, tiny_corpus, tmp_path):
        cap, _ = tiny_corpus
        cfg = self._cfg()
        cfg.run.epochs = 5
        pretrain(cfg, cap, tmp_path / "run", seed=0)
        epochs = sorted((tmp_path / "run").glob("checkpoint_epoch*.bin"))
        assert len(epochs) == 2
        assert epochs[-1].name == "checkpoint_epoch0004.bin"
