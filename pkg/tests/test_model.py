import math

import numpy as np
import pytest

from oracles import central_difference, rel_err
from pdws.losses import FILLER
from pdws.model import (
    ModelConfig,
    ModelParams,
    backward,
    backward_batch,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    predicted_label,
    save_checkpoint,
    utterance_loss,
    zero_params,
)

SMALL = ModelConfig(n_mels=6, tcn_layers=2, hidden_dim=5, kernel_size=3, n_keywords=3, vocab_size=4)


def _randomised(cfg, seed):
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, arr in params.tensors.items():
        arr += rng.normal(0, 0.3, size=arr.shape)
    params.cmvn_mean = rng.normal(size=cfg.n_mels)
    params.cmvn_istd = rng.uniform(0.5, 2.0, size=cfg.n_mels)
    return params


def _reference_forward(params, feats):
    """Loop-by-loop causal dilated depthwise conv, pointwise conv, layer norm, ReLU."""
    cfg = params.config
    x = (np.asarray(feats) - params.cmvn_mean) * params.cmvn_istd
    n_frames = x.shape[0]
    for i in range(cfg.tcn_layers):
        d = 2**i
        w, b = params[f"dw{i}.w"], params[f"dw{i}.b"]
        u = np.zeros_like(x)
        for t in range(n_frames):
            for c in range(x.shape[1]):
                acc = b[c]
                for j in range(cfg.kernel_size):
                    src = t - (cfg.kernel_size - 1 - j) * d
                    if src >= 0:
                        acc += w[c, j] * x[src, c]
                u[t, c] = acc
        v = np.zeros((n_frames, cfg.hidden_dim))
        for t in range(n_frames):
            for o in range(cfg.hidden_dim):
                v[t, o] = params[f"pw{i}.b"][o] + sum(u[t, c] * params[f"pw{i}.w"][c, o] for c in range(u.shape[1]))
            mu = v[t].mean()
            var = ((v[t] - mu) ** 2).mean()
            v[t] = (v[t] - mu) / math.sqrt(var + 1e-5) * params[f"ln{i}.g"] + params[f"ln{i}.b"]
        a = np.maximum(v, 0)
        x = a + x if a.shape == x.shape else a
    kws = 1 / (1 + np.exp(-(x @ params["kws.w"] + params["kws.b"])))
    z = x @ params["asr.w"] + params["asr.b"]
    asr = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return kws, asr


def test_zero_params_give_neutral_outputs():
    cfg = ModelConfig(vocab_size=23)
    post = forward(zero_params(cfg), np.random.default_rng(0).normal(size=(17, 80)))
    assert np.all(post.kws_prob == 0.5)
    np.testing.assert_allclose(post.asr_logprob, math.log(1 / 23), atol=1e-12)


def test_frame_count_preserved():
    params = init_params(ModelConfig(), 0)
    assert forward(params, np.zeros((1, 80))).kws_prob.shape == (1, 10)
    for n in (2, 7, 50):
        post = forward(params, np.random.default_rng(n).normal(size=(n, 80)))
        assert post.kws_prob.shape == (n, 10) and post.asr_logprob.shape == (n, 32)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_direct_convolution_reference(seed):
    cfg = ModelConfig(n_mels=5, tcn_layers=3, hidden_dim=5, kernel_size=3, n_keywords=2, vocab_size=4)
    params = _randomised(cfg, seed)
    feats = np.random.default_rng(seed).normal(size=(13, 5))
    kws, asr = _reference_forward(params, feats)
    post = forward(params, feats)
    np.testing.assert_allclose(post.kws_prob, kws, atol=1e-10)
    np.testing.assert_allclose(post.asr_logprob, asr, atol=1e-10)


def test_causality():
    params = _randomised(SMALL, 3)
    feats = np.random.default_rng(0).normal(size=(12, 6))
    changed = feats.copy()
    changed[8:] += 5.0
    a, b = forward(params, feats), forward(params, changed)
    np.testing.assert_array_equal(a.kws_prob[:8], b.kws_prob[:8])
    assert not np.allclose(a.kws_prob[8:], b.kws_prob[8:])


def test_batch_forward_matches_single():
    params = _randomised(SMALL, 4)
    rng = np.random.default_rng(1)
    feats = [rng.normal(size=(n, 6)) for n in (3, 9, 6)]
    for single, batched in zip([forward(params, f) for f in feats], forward_batch(params, feats)):
        np.testing.assert_allclose(single.kws_prob, batched.kws_prob, atol=1e-13)
        np.testing.assert_allclose(single.asr_logprob, batched.asr_logprob, atol=1e-13)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        forward(init_params(SMALL), np.zeros((4, 7)))
    with pytest.raises(ValueError):
        forward(init_params(SMALL), np.zeros((0, 6)))


def test_init_bounds():
    params = init_params(ModelConfig(), 7)
    assert np.all(np.abs(params["dw0.w"]) <= 1 / math.sqrt(8))
    assert np.all(np.abs(params["pw0.w"]) <= 1 / math.sqrt(80))
    assert np.all(np.abs(params["kws.w"]) <= 1 / math.sqrt(128))
    assert np.all(params["ln0.g"] == 1) and np.all(params["ln0.b"] == 0)
    assert np.array_equal(init_params(ModelConfig(), 7)["pw1.w"], params["pw1.w"])


@pytest.mark.parametrize("target_kw,tokens", [(1, [1, 2]), (FILLER, [3]), (0, None)])
def test_backward_matches_finite_differences(target_kw, tokens):
    cfg = ModelConfig(n_mels=4, tcn_layers=1, hidden_dim=4, kernel_size=3, n_keywords=3, vocab_size=4)
    params = _randomised(cfg, 5)
    feats = np.random.default_rng(6).normal(size=(7, 4))
    grad = backward(params, feats, target_kw, tokens).grads
    for name, arr in params.tensors.items():
        f = lambda: utterance_loss(params, feats, target_kw, tokens).l_total
        for idx in np.ndindex(arr.shape):
            assert rel_err(central_difference(f, arr, idx), grad[name][idx]) < 1e-4, (name, idx)


def test_backward_multi_layer_random_coordinates():
    cfg = ModelConfig(n_mels=5, tcn_layers=3, hidden_dim=5, kernel_size=3, n_keywords=2, vocab_size=5)
    params = _randomised(cfg, 8)
    feats = np.random.default_rng(9).normal(size=(15, 5))
    grad = backward(params, feats, 1, [2, 3, 3]).grads
    rng = np.random.default_rng(10)
    names = list(params.tensors)
    for _ in range(100):
        name = names[rng.integers(len(names))]
        arr = params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        fd = central_difference(lambda: utterance_loss(params, feats, 1, [2, 3, 3]).l_total, arr, idx)
        assert rel_err(fd, grad[name][idx]) < 1e-4, (name, idx)


def test_two_branch_gradient_is_linear_in_the_losses():
    params = _randomised(SMALL, 11)
    feats = np.random.default_rng(12).normal(size=(10, 6))
    both = backward(params, feats, 2, [1, 3]).grads
    wws = backward(params, feats, 2, None).grads
    ctc = backward(params, feats, 2, [1, 3], ctc_weight=1.0, wws_weight=0.0).grads
    for name in both:
        np.testing.assert_allclose(both[name], wws[name] + 0.5 * ctc[name], atol=1e-12)


def test_zero_learning_signal_gives_zero_gradient():
    params = zero_params(SMALL)
    res = backward(params, np.ones((4, 6)), 0, None, wws_weight=0.0)
    assert all(not np.any(g) for g in res.grads.values())


def test_batch_gradient_is_sum_of_utterance_gradients():
    params = _randomised(SMALL, 13)
    rng = np.random.default_rng(14)
    feats = [rng.normal(size=(n, 6)) for n in (6, 11, 8)]
    labels, tokens = [0, FILLER, 2], [[1], [2, 3], [3, 1, 2]]
    batch = backward_batch(params, feats, labels, tokens)
    for name in params.tensors:
        total = sum(backward(params, f, l, t).grads[name] for f, l, t in zip(feats, labels, tokens))
        np.testing.assert_allclose(batch.grads[name], total, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    params = _randomised(SMALL, 15)
    save_checkpoint(tmp_path / "m.bin", params)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:4] == b"DWCK"
    loaded = load_checkpoint(tmp_path / "m.bin")
    assert loaded.config == SMALL
    for name in params.tensors:
        np.testing.assert_array_equal(loaded[name], params[name].astype(np.float32))
    np.testing.assert_array_equal(loaded.cmvn_istd, params.cmvn_istd.astype(np.float32))
    save_checkpoint(tmp_path / "again.bin", loaded)
    assert (tmp_path / "again.bin").read_bytes() == blob


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")
    save_checkpoint(tmp_path / "ok.bin", init_params(SMALL))
    (tmp_path / "long.bin").write_bytes((tmp_path / "ok.bin").read_bytes() + b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "long.bin")


def test_params_validation():
    good = init_params(SMALL)
    tensors = dict(good.tensors)
    tensors["kws.b"] = np.zeros(5)
    with pytest.raises(ValueError):
        ModelParams(SMALL, tensors)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=1)


def test_predicted_label():
    p = np.array([[0.1, 0.3], [0.2, 0.8]])
    assert predicted_label(p) == 1
    assert predicted_label(p * 0.5) == FILLER


def test_keyword_prior_init():
    params = init_params(ModelConfig(kws_prior=0.1), 3)
    np.testing.assert_allclose(1 / (1 + np.exp(-params["kws.b"])), 0.1)
    plain = init_params(ModelConfig(kws_prior=None), 3)
    assert np.all(np.abs(plain["kws.b"]) <= 1 / math.sqrt(128))
    # the prior only overwrites the keyword bias
    for name in params.tensors:
        if name != "kws.b":
            assert np.array_equal(params[name], plain[name])
    with pytest.raises(ValueError):
        ModelConfig(kws_prior=1.0)
