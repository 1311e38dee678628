import math

import numpy as np
import pytest
import torch

from coldal.errors import (
    DivergenceError, IncompatibilityError, InvalidArgumentError, MagicMismatchError, StateError,
    TruncatedPayloadError, VersionMismatchError,
)
from coldal.losses import dice_ce_t, one_hot
from coldal.model import (
    HEAD, AdamState, Checkpoint, GradTape, ModelConfig, adam_step, decode_checkpoint,
    encode_checkpoint, forward, init_params, load_checkpoint, network_logits, param_shapes, save_checkpoint,
    sliding_window_predict, sliding_window_probs, tile_starts, warm_start,
)
from coldal.volume import Patch, Volume3D

from oracles import central_difference


def _patch(rng, n=8):
    return Patch((0, 0, 0), (n, n, n), rng.random((n, n, n)).astype(np.float32))


class TestInit:
    def test_same_seed_identical(self):
        assert init_params(ModelConfig(), 3).equal(init_params(ModelConfig(), 3))

    def test_distinct_seeds_differ(self):
        assert not init_params(ModelConfig(), 3).equal(init_params(ModelConfig(), 4))

    def test_biases_zero(self):
        p = init_params(ModelConfig(), 0)
        assert all(not t.any() for n, t in p.tensors.items() if n.endswith(".bias"))

    def test_fan_in_scale(self):
        p = init_params(ModelConfig(base_channels=16), 0)
        w = p["enc1.conv.weight"]
        expected = math.sqrt(2.0 / np.prod(w.shape[1:]))
        assert abs(float(w.std()) / expected - 1) < 0.05

    def test_shapes_cover_every_tensor(self):
        cfg = ModelConfig(levels=3)
        p = init_params(cfg, 0)
        assert {n: tuple(t.shape) for n, t in p.tensors.items()} == dict(param_shapes(cfg))

    @pytest.mark.parametrize("kw", [{"levels": 0}, {"out_channels": 1}, {"dropout_rate": 1.0}, {"base_channels": 0}])
    def test_config_validation(self, kw):
        with pytest.raises(InvalidArgumentError):
            ModelConfig(**kw)


class TestForward:
    def test_eval_deterministic_and_normalised(self, rng):
        p, patch = init_params(ModelConfig(out_channels=3), 0), _patch(rng)
        a, b = forward(p, patch, "eval"), forward(p, patch, "eval")
        assert a == b
        np.testing.assert_allclose(a.data.sum(0), 1.0, atol=1e-5)
        assert a.data.shape == (3, 8, 8, 8)

    def test_mc_seeds(self, rng):
        p, patch = init_params(ModelConfig(), 0), _patch(rng)
        assert forward(p, patch, "mc_dropout", 1) != forward(p, patch, "mc_dropout", 2)
        assert forward(p, patch, "mc_dropout", 1) == forward(p, patch, "mc_dropout", 1)

    def test_zero_dropout_mc_equals_eval(self, rng):
        p, patch = init_params(ModelConfig(dropout_rate=0.0), 0), _patch(rng)
        np.testing.assert_array_equal(forward(p, patch, "mc_dropout", 5).data, forward(p, patch, "eval").data)

    def test_indivisible_shape(self, rng):
        p = init_params(ModelConfig(levels=3), 0)
        with pytest.raises(InvalidArgumentError):
            forward(p, rng.random((6, 8, 8)).astype(np.float32))

    def test_bad_mode(self, rng):
        with pytest.raises(InvalidArgumentError):
            forward(init_params(ModelConfig(), 0), _patch(rng), "predict")

    def test_broadcast_prefix_matches_batched(self, rng):
        # one image with several seeds equals the same image repeated in a batch
        p = init_params(ModelConfig(), 1)
        x = torch.from_numpy(rng.random((1, 1, 8, 8, 8)).astype(np.float32))
        seeds = [11, 12, 13]
        a = network_logits(p, x, seeds)
        b = network_logits(p, x.expand(3, -1, -1, -1, -1).contiguous(), seeds)
        torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6)


def _loss_fn(params, images, target, seed):
    tape = GradTape(params)
    logp = tape.log_probs(images, seed)
    return tape, dice_ce_t(logp, target)


class TestBackward:
    def test_finite_difference_subset(self, rng):
        cfg = ModelConfig(levels=1, base_channels=4, dropout_rate=0.2)
        p = init_params(cfg, 0).to(torch.float64)
        for n in p.tensors:
            if n.endswith(".bias"):
                p.tensors[n] = torch.from_numpy(rng.normal(0, 0.1, p.tensors[n].shape))
        images = torch.from_numpy(rng.random((1, 1, 8, 8, 8)))
        target = one_hot(torch.from_numpy(rng.integers(0, 2, (1, 8, 8, 8))), 2)
        tape, loss = _loss_fn(p, images, target, seed=5)
        grads = tape.backward(loss)
        for name in ("enc0.conv.bias", "enc0.res2.bias", "head.weight", "head.bias"):
            x = p.tensors[name].numpy().copy()

            def f(values, name=name):
                q = p.clone()
                q.tensors[name] = torch.from_numpy(values.copy())
                return float(_loss_fn(q, images, target, seed=5)[1].detach())

            fd = central_difference(f, x, 1e-5)
            an = grads[name].numpy()
            assert np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4, name

    def test_no_forward_recorded(self):
        with pytest.raises(StateError):
            GradTape(init_params(ModelConfig(), 0)).backward(torch.zeros(()))

    def test_linearity(self, rng):
        p = init_params(ModelConfig(levels=1, base_channels=4), 0)
        images = rng.random((2, 8, 8, 8)).astype(np.float32)
        target = one_hot(torch.from_numpy(rng.integers(0, 2, (2, 8, 8, 8))), 2)
        tape, loss = _loss_fn(p, images, target, 1)
        g1 = tape.backward(loss)
        tape, loss = _loss_fn(p, images, target, 1)
        g2 = tape.backward(2 * loss)
        for n in g1:
            torch.testing.assert_close(g2[n], 2 * g1[n])

    def test_unused_parameter_zero_gradient(self, rng):
        p = init_params(ModelConfig(levels=1, base_channels=4), 0)
        tape = GradTape(p)
        logp = tape.log_probs(rng.random((1, 8, 8, 8)).astype(np.float32), None)
        grads = tape.backward(logp[:, 0].sum() * 0 + tape.leaves["head.bias"].sum())
        assert not grads["enc0.conv.weight"].any()
        assert torch.equal(grads["head.bias"], torch.ones(2))


class TestAdam:
    def _single(self, value=0.0):
        cfg = ModelConfig(levels=1, base_channels=1)
        p = init_params(cfg, 0)
        return p, AdamState.zeros_like(p)

    def test_first_step_magnitude(self):
        p, adam = self._single()
        grads = {n: torch.ones_like(t) for n, t in p.tensors.items()}
        new, _ = adam_step(p, adam, grads, 1e-4, 1)
        for n in p.tensors:
            delta = (new[n] - p[n]).double()
            torch.testing.assert_close(delta, torch.full_like(delta, -1e-4 / (1 + 1e-8)), rtol=1e-3, atol=1e-9)

    def test_first_step_exact_f64(self):
        p, adam = self._single()
        p = p.to(torch.float64)
        adam = AdamState.zeros_like(p)
        grads = {n: torch.ones_like(t) for n, t in p.tensors.items()}
        new, _ = adam_step(p, adam, grads, 1e-4, 1)
        delta = (new["head.bias"] - p["head.bias"]).numpy()
        np.testing.assert_allclose(delta, -1e-4 / (1 + 1e-8), rtol=1e-12)

    def test_zero_gradient_no_change(self):
        p, adam = self._single()
        new, _ = adam_step(p, adam, {n: torch.zeros_like(t) for n, t in p.tensors.items()}, 1e-3, 1)
        assert new.equal(p)

    def test_moments_update_with_zero_lr(self):
        p, adam = self._single()
        new, moments = adam_step(p, adam, {n: torch.ones_like(t) for n, t in p.tensors.items()}, 0.0, 1)
        assert new.equal(p)
        assert all(torch.allclose(m, torch.full_like(m, 0.1)) for m in moments.m.values())
        assert moments.step == 1

    def test_non_finite_gradient(self):
        p, adam = self._single()
        grads = {n: torch.zeros_like(t) for n, t in p.tensors.items()}
        grads["head.bias"][0] = float("nan")
        with pytest.raises(DivergenceError, match="head.bias"):
            adam_step(p, adam, grads, 1e-4, 1)

    def test_step_is_one_based(self):
        p, adam = self._single()
        with pytest.raises(InvalidArgumentError):
            adam_step(p, adam, {n: torch.zeros_like(t) for n, t in p.tensors.items()}, 1e-4, 0)


class TestCheckpoint:
    def _ck(self, provenance="supervised"):
        p = init_params(ModelConfig(out_channels=3), 2)
        adam = AdamState.zeros_like(p)
        grads = {n: torch.full_like(t, 0.3) for n, t in p.tensors.items()}
        p, adam = adam_step(p, adam, grads, 1e-3, 1)
        return Checkpoint(p.config, p, adam, 1, provenance)

    def test_roundtrip(self, tmp_path):
        ck = self._ck()
        buf = encode_checkpoint(ck)
        back = decode_checkpoint(buf)
        assert back.equal(ck) and encode_checkpoint(back) == buf
        save_checkpoint(tmp_path / "m.ckpt", ck)
        assert load_checkpoint(tmp_path / "m.ckpt").equal(ck)

    def test_errors(self):
        buf = encode_checkpoint(self._ck())
        with pytest.raises(MagicMismatchError):
            decode_checkpoint(b"XXXXXX" + buf[6:])
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(buf[:6] + b"\x09\x00" + buf[8:])
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(buf[:-3])

    def test_bad_provenance(self):
        with pytest.raises(InvalidArgumentError):
            self._ck("teacher")


class TestWarmStart:
    def test_identical_config_copies(self):
        src = Checkpoint.fresh(init_params(ModelConfig(), 1), "proxy")
        out = warm_start(ModelConfig(), src)
        assert out.equal(src.params)

    def test_head_replaced_only(self):
        src = Checkpoint.fresh(init_params(ModelConfig(out_channels=2), 1), "proxy")
        out = warm_start(ModelConfig(out_channels=3), src)
        for n, t in out.tensors.items():
            if n.startswith(HEAD + "."):
                assert t.shape[0] == 3
                assert not t.any()
            else:
                assert torch.equal(t, src.params[n])

    def test_new_head_predicts_uniform(self):
        src = Checkpoint.fresh(init_params(ModelConfig(out_channels=2), 1), "proxy")
        out = warm_start(ModelConfig(out_channels=3), src)
        probs = forward(out, np.random.default_rng(0).random((8, 8, 8)), "eval")
        np.testing.assert_allclose(probs.data, 1.0 / 3.0, atol=1e-6)

    def test_incompatible(self):
        src = Checkpoint.fresh(init_params(ModelConfig(base_channels=8), 1))
        with pytest.raises(IncompatibilityError) as err:
            warm_start(ModelConfig(base_channels=4), src)
        assert "enc0.conv.weight" in err.value.names


class TestSlidingWindow:
    def test_tile_starts_cover(self):
        for extent in range(8, 40):
            for overlap in (0.0, 0.25, 0.5, 0.9):
                starts = tile_starts(extent, 8, overlap)
                covered = np.zeros(extent, bool)
                for s in starts:
                    covered[s:s + 8] = True
                assert covered.all() and starts[-1] == extent - 8

    def test_single_patch_matches_forward(self, rng):
        p = init_params(ModelConfig(out_channels=3), 0)
        v = Volume3D("v", rng.random((8, 8, 8)).astype(np.float32))
        np.testing.assert_allclose(sliding_window_predict(p, v, 8).data, forward(p, v.data).data, atol=1e-6)

    def test_constant_model_constant_output(self, rng):
        p = init_params(ModelConfig(out_channels=3), 0)
        p.tensors["head.weight"].zero_()
        p.tensors["head.bias"].copy_(torch.tensor([0.5, -1.0, 2.0]))
        v = Volume3D("v", rng.random((13, 11, 17)).astype(np.float32))
        out = sliding_window_predict(p, v, 8, overlap=0.5).data
        expected = torch.softmax(torch.tensor([0.5, -1.0, 2.0]), 0).numpy()
        np.testing.assert_allclose(out, np.broadcast_to(expected[:, None, None, None], out.shape), atol=1e-6)

    def test_small_volume_padded(self, rng):
        p = init_params(ModelConfig(), 0)
        out = sliding_window_probs(p, rng.random((5, 6, 7)).astype(np.float32), 8)
        assert out.shape == (2, 5, 6, 7)

    def test_mc_passes_shape_and_determinism(self, rng):
        p = init_params(ModelConfig(), 0)
        img = rng.random((12, 12, 12)).astype(np.float32)
        a = sliding_window_probs(p, img, 8, pass_seeds=[1, 2, 3])
        b = sliding_window_probs(p, img, 8, pass_seeds=[1, 2, 3])
        assert a.shape == (3, 2, 12, 12, 12) and np.array_equal(a, b)
        assert not np.array_equal(a[0], a[1])

    def test_bad_overlap(self, rng):
        with pytest.raises(InvalidArgumentError):
            sliding_window_probs(init_params(ModelConfig(), 0), np.zeros((8, 8, 8), np.float32), 8, overlap=1.0)
