"""Encoder/head forward-backward correctness and checkpointing."""

import math

import numpy as np
import pytest

from gleasonmil.model import (
    CHECKPOINT_VERSION,
    CheckpointError,
    EncoderConfig,
    ModelParameters,
    Prediction,
    classify,
    classify_batch,
    encode,
    encode_batch,
    init_parameters,
    load_checkpoint,
    network_backward,
    network_forward,
    probs_backward,
    save_checkpoint,
    softmax,
)

TINY = EncoderConfig(input_side=8, feature_dim=8)


def finite_difference(f, arr, h=1e-6):
    """Central finite differences of scalar f() w.r.t. every entry of arr
    (mutated in place and restored)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def cross_entropy_and_grads(x, targets, model):
    """Loss = sum of -log p_target over the batch, with analytic grads."""
    _, probs, cache = network_forward(x, model)
    n = probs.shape[0]
    loss = -np.log(probs[np.arange(n), targets]).sum()
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(n), targets] = -1.0 / probs[np.arange(n), targets]
    dlogits = probs_backward(dprobs, cache, model)
    dx, grads = network_backward(dlogits, None, cache, model)
    return loss, dx, grads


class TestEncode:
    def test_zero_network_zero_vector(self):
        model = init_parameters(TINY, seed=0)
        for key in model.params:
            model.params[key][:] = 0.0
        patch = np.zeros((8, 8, 3), dtype=np.uint8)
        assert np.all(encode(patch, model) == 0.0)

    def test_deterministic(self):
        model = init_parameters(TINY, seed=1)
        rng = np.random.default_rng(2)
        patch = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        assert np.array_equal(encode(patch, model), encode(patch, model))

    def test_replay_with_same_seed(self):
        rng = np.random.default_rng(3)
        patch = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        first = encode(patch, init_parameters(TINY, seed=7))
        again = encode(patch, init_parameters(TINY, seed=7))
        assert np.isfinite(first).all()
        assert np.array_equal(first, again)

    def test_shape_mismatch(self):
        model = init_parameters(TINY, seed=0)
        with pytest.raises(ValueError, match="input_side"):
            encode(np.zeros((16, 16, 3), dtype=np.uint8), model)


class TestClassify:
    def test_zero_head_uniform(self):
        model = init_parameters(TINY, seed=0)
        model.params["head_w"][:] = 0.0
        model.params["head_b"][:] = 0.0
        pred = classify(np.zeros(8), model)
        assert np.allclose(pred.probs, 0.25)

    def test_softmax_oracle(self):
        # Direct scalar evaluation of softmax on logits (10, 0, 0, 0).
        model = init_parameters(TINY, seed=0)
        model.params["head_w"][:] = 0.0
        model.params["head_b"][:] = np.array([10.0, 0.0, 0.0, 0.0])
        pred = classify(np.zeros(8), model)
        denom = math.exp(10) + 3.0
        expected = [math.exp(10) / denom] + [1.0 / denom] * 3
        assert np.allclose(pred.probs, expected, atol=1e-12)
        assert pred.probs[0] == pytest.approx(0.99986, abs=5e-5)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(20, 4))
        assert np.allclose(softmax(logits), softmax(logits + 123.456), atol=1e-12)

    def test_sums_to_one_randomized(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(scale=20.0, size=(1000, 4))
        sums = softmax(logits).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-6)

    def test_nonfinite_input(self):
        model = init_parameters(TINY, seed=0)
        with pytest.raises(ValueError, match="finite"):
            classify(np.array([np.nan] * 8), model)

    def test_prediction_validation(self):
        with pytest.raises(ValueError):
            Prediction(np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            Prediction(np.array([-0.1, 0.5, 0.3, 0.3]))


class TestGradients:
    def test_parameter_gradients_match_finite_differences(self):
        model = init_parameters(TINY, seed=11)
        rng = np.random.default_rng(12)
        x = rng.random((2, 8, 8, 3))
        targets = np.array([1, 3])

        _, _, grads = cross_entropy_and_grads(x, targets, model)

        for name in sorted(model.params):
            def loss_only():
                return cross_entropy_and_grads(x, targets, model)[0]

            fd = finite_difference(loss_only, model.params[name])
            np.testing.assert_allclose(grads[name], fd, rtol=1e-3, atol=1e-8,
                                       err_msg=f"gradient mismatch for {name}")

    def test_input_gradients_match_finite_differences(self):
        model = init_parameters(TINY, seed=13)
        rng = np.random.default_rng(14)
        x = rng.random((1, 8, 8, 3))
        targets = np.array([2])
        _, dx, _ = cross_entropy_and_grads(x, targets, model)

        def loss_only():
            return cross_entropy_and_grads(x, targets, model)[0]

        fd = finite_difference(loss_only, x)
        np.testing.assert_allclose(dx, fd, rtol=1e-3, atol=1e-8)

    def test_sigmoid_head_gradients(self):
        config = EncoderConfig(input_side=8, feature_dim=8, head="sigmoid")
        model = init_parameters(config, seed=15)
        rng = np.random.default_rng(16)
        x = rng.random((2, 8, 8, 3))
        w = rng.normal(size=(2, 4))

        def forward_loss():
            _, probs, _ = network_forward(x, model)
            return float((w * probs).sum())

        _, probs, cache = network_forward(x, model)
        dlogits = probs_backward(w.copy(), cache, model)
        _, grads = network_backward(dlogits, None, cache, model)
        fd = finite_difference(forward_loss, model.params["conv1_w"])
        np.testing.assert_allclose(grads["conv1_w"], fd, rtol=1e-3, atol=1e-8)


class TestAttentionInit:
    def test_attention_block_present(self):
        model = init_parameters(TINY, seed=1, attention_dim=4)
        attn = model.attention
        assert attn is not None
        assert attn.v.shape == (4, 8) and attn.w.shape == (4, 4)

    def test_no_attention_by_default(self):
        assert init_parameters(TINY, seed=1).attention is None


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_parameters(EncoderConfig(input_side=8, feature_dim=16), seed=21,
                                attention_dim=4)
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert loaded.seed == model.seed
        rng = np.random.default_rng(22)
        for _ in range(10):
            patch = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
            z1 = encode(patch, model)
            z2 = encode(patch, loaded)
            assert np.array_equal(z1, z2)
            assert np.array_equal(classify(z1, model).probs, classify(z2, loaded).probs)

    def test_truncated_file_errors(self, tmp_path):
        model = init_parameters(TINY, seed=0)
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_named(self, tmp_path):
        model = init_parameters(TINY, seed=0)
        model.version = CHECKPOINT_VERSION + 1
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        with pytest.raises(CheckpointError, match=f"expected {CHECKPOINT_VERSION}.*found {CHECKPOINT_VERSION + 1}"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.npz")


class TestBatchApi:
    def test_batch_matches_single(self):
        model = init_parameters(TINY, seed=31)
        rng = np.random.default_rng(32)
        batch = rng.integers(0, 256, size=(5, 8, 8, 3)).astype(np.uint8)
        z_batch = encode_batch(batch, model)
        for i in range(5):
            assert np.allclose(z_batch[i], encode(batch[i], model), atol=1e-12)
        probs = classify_batch(z_batch, model)
        assert probs.shape == (5, 4)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
