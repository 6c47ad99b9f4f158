"""Two-branch DS-TCN: a shared causal depthwise-separable trunk feeding a
per-keyword sigmoid head and a CTC token head.

Everything is plain numpy in float64 with hand-written reverse mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .losses import FILLER, LossBundle, combined_loss, ctc_loss, log_softmax, max_pooling_loss, sigmoid

CHECKPOINT_MAGIC = b"DWCK"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    tcn_layers: int = 4
    hidden_dim: int = 128
    kernel_size: int = 8
    n_keywords: int = 10
    vocab_size: int = 32
    # initial keyword posterior; None keeps the uniform bias init
    kws_prior: float | None = 0.1

    def __post_init__(self):
        if self.tcn_layers < 1 or self.hidden_dim < 1 or self.n_keywords < 1 or self.n_mels < 1:
            raise ValueError("tcn_layers, hidden_dim, n_keywords and n_mels must be >= 1")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (blank plus one token)")
        if self.kws_prior is not None and not 0.0 < self.kws_prior < 1.0:
            raise ValueError("kws_prior must lie in (0, 1)")

    def dilation(self, layer: int) -> int:
        return 2**layer

    def layer_in_dim(self, layer: int) -> int:
        return self.n_mels if layer == 0 else self.hidden_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Trainable tensors in declaration (checkpoint) order."""
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.tcn_layers):
            c_in = self.layer_in_dim(i)
            shapes[f"dw{i}.w"] = (c_in, self.kernel_size)
            shapes[f"dw{i}.b"] = (c_in,)
            shapes[f"pw{i}.w"] = (c_in, self.hidden_dim)
            shapes[f"pw{i}.b"] = (self.hidden_dim,)
            shapes[f"ln{i}.g"] = (self.hidden_dim,)
            shapes[f"ln{i}.b"] = (self.hidden_dim,)
        shapes["kws.w"] = (self.hidden_dim, self.n_keywords)
        shapes["kws.b"] = (self.n_keywords,)
        shapes["asr.w"] = (self.hidden_dim, self.vocab_size)
        shapes["asr.b"] = (self.vocab_size,)
        return shapes


@dataclass(eq=False)
class ModelParams:
    """Trainable tensors plus the (frozen) global feature normalisation."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    cmvn_mean: np.ndarray = field(default=None)
    cmvn_istd: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cmvn_mean is None:
            self.cmvn_mean = np.zeros(self.config.n_mels)
        if self.cmvn_istd is None:
            self.cmvn_istd = np.ones(self.config.n_mels)
        expected = self.config.param_shapes()
        if list(self.tensors) != list(expected):
            raise ValueError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            self.cmvn_mean.copy(),
            self.cmvn_istd.copy(),
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.

    With ``config.kws_prior`` set, the keyword bias instead starts at
    logit(prior), so every detector begins mostly silent rather than at 0.5.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        layer = name.split(".")[0]
        if layer.startswith("ln"):
            tensors[name] = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
            continue
        if layer.startswith("dw"):
            fan_in = config.kernel_size
        else:
            fan_in = config.param_shapes()[f"{layer}.w"][0]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    if config.kws_prior is not None:
        tensors["kws.b"][:] = np.log(config.kws_prior / (1.0 - config.kws_prior))
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {k: np.zeros(s) for k, s in config.param_shapes().items()})


@dataclass(eq=False)
class PosteriorStream:
    kws_prob: np.ndarray
    asr_logprob: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.kws_prob.shape[0]


def left_pad(x: np.ndarray, frames: int) -> np.ndarray:
    """Prepend ``frames`` zero frames along the time axis (axis -2)."""
    if frames == 0:
        return x
    pad = [(0, 0)] * x.ndim
    pad[-2] = (frames, 0)
    return np.pad(x, pad)


def _as_array(feats) -> np.ndarray:
    return np.asarray(getattr(feats, "data", feats), dtype=np.float64)


def _check_features(x: np.ndarray, cfg: ModelConfig) -> None:
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("features must be a non-empty frames x n_mels matrix")
    if x.shape[1] != cfg.n_mels:
        raise ValueError(f"feature dim {x.shape[1]} does not match n_mels={cfg.n_mels}")


def pad_batch(feature_list: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    """Stack utterances into (batch, max_frames, dim), zero-padding at the end.

    The trunk is causal, so trailing padding never changes the valid frames.
    """
    lengths = [f.shape[0] for f in feature_list]
    out = np.zeros((len(feature_list), max(lengths), feature_list[0].shape[1]))
    for b, f in enumerate(feature_list):
        out[b, : f.shape[0]] = f
    return out, lengths


def _trunk(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Shared encoder over a (batch, frames, n_mels) array of normalised input."""
    cfg = params.config
    cache = []
    k = cfg.kernel_size
    for i in range(cfg.tcn_layers):
        d = cfg.dilation(i)
        w_dw = params[f"dw{i}.w"]
        xpad = left_pad(x, (k - 1) * d)
        n_frames = x.shape[-2]
        u = np.broadcast_to(params[f"dw{i}.b"], x.shape).copy()
        for tap in range(k):
            u += w_dw[:, tap] * xpad[..., tap * d : tap * d + n_frames, :]
        v = u @ params[f"pw{i}.w"] + params[f"pw{i}.b"]
        mu = v.mean(axis=-1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(v.var(axis=-1, keepdims=True) + LN_EPS)
        n = (v - mu) * inv_sigma
        y = n * params[f"ln{i}.g"] + params[f"ln{i}.b"]
        a = np.maximum(y, 0.0)
        residual = x.shape[-1] == a.shape[-1]
        cache.append((xpad, u, n, inv_sigma, y))
        x = a + x if residual else a
    return x, cache


def _heads(params: ModelParams, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kws_logits = h @ params["kws.w"] + params["kws.b"]
    asr_logits = h @ params["asr.w"] + params["asr.b"]
    return sigmoid(kws_logits), log_softmax(asr_logits)


def forward(params: ModelParams, feats) -> PosteriorStream:
    """Frame-synchronous keyword probabilities and token log-probabilities.

    The output has exactly as many frames as the input.
    """
    x = _as_array(feats)
    _check_features(x, params.config)
    x = (x - params.cmvn_mean) * params.cmvn_istd
    h, _ = _trunk(params, x[None])
    kws_prob, asr_logprob = _heads(params, h[0])
    return PosteriorStream(kws_prob, asr_logprob)


def forward_batch(params: ModelParams, feature_list: Sequence) -> list[PosteriorStream]:
    arrays = [_as_array(f) for f in feature_list]
    for x in arrays:
        _check_features(x, params.config)
    batch, lengths = pad_batch(arrays)
    h, _ = _trunk(params, (batch - params.cmvn_mean) * params.cmvn_istd)
    kws_prob, asr_logprob = _heads(params, h)
    return [PosteriorStream(kws_prob[b, :n], asr_logprob[b, :n]) for b, n in enumerate(lengths)]


@dataclass
class BatchGrad:
    losses: list[LossBundle]
    grads: dict[str, np.ndarray]
    posteriors: list[PosteriorStream]


@dataclass
class UtteranceGrad:
    loss: LossBundle
    grads: dict[str, np.ndarray]
    posteriors: PosteriorStream


def backward_batch(
    params: ModelParams,
    feature_list: Sequence,
    target_kws: Sequence[int],
    target_tokens: Sequence[Sequence[int] | None],
    ctc_weight: float = 0.5,
    wws_weight: float = 1.0,
) -> BatchGrad:
    """Per-utterance loss bundles and the gradient of their *sum*.

    Utterances are zero-padded at the end to a common length; the padded
    frames carry no loss, so every gradient equals the sum of single-utterance
    gradients.
    """
    cfg = params.config
    arrays = [_as_array(f) for f in feature_list]
    for x in arrays:
        _check_features(x, cfg)
    batch, lengths = pad_batch(arrays)
    h, cache = _trunk(params, (batch - params.cmvn_mean) * params.cmvn_istd)
    kws_prob, asr_logprob = _heads(params, h)

    d_kws = np.zeros_like(kws_prob)
    d_asr = np.zeros_like(asr_logprob)
    losses, posteriors = [], []
    for b, n_frames in enumerate(lengths):
        kp, lp = kws_prob[b, :n_frames], asr_logprob[b, :n_frames]
        l_wws, g_kws = max_pooling_loss(kp, target_kws[b])
        d_kws[b, :n_frames] = wws_weight * g_kws
        if target_tokens[b] is not None and ctc_weight != 0.0:
            l_ctc, g_asr = ctc_loss(lp, target_tokens[b])
            d_asr[b, :n_frames] = ctc_weight * g_asr
        else:
            l_ctc = 0.0
        losses.append(combined_loss(l_ctc, l_wws, ctc_weight, wws_weight))
        posteriors.append(PosteriorStream(kp, lp))

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    grads: dict[str, np.ndarray] = {}
    grads["kws.w"] = flat(h).T @ flat(d_kws)
    grads["kws.b"] = flat(d_kws).sum(axis=0)
    grads["asr.w"] = flat(h).T @ flat(d_asr)
    grads["asr.b"] = flat(d_asr).sum(axis=0)
    dh = d_kws @ params["kws.w"].T + d_asr @ params["asr.w"].T

    k = cfg.kernel_size
    for i in reversed(range(cfg.tcn_layers)):
        xpad, u, n, inv_sigma, y = cache[i]
        d = cfg.dilation(i)
        n_frames = u.shape[-2]
        residual = xpad.shape[-1] == cfg.hidden_dim
        dy = dh * (y > 0)
        grads[f"ln{i}.g"] = flat(dy * n).sum(axis=0)
        grads[f"ln{i}.b"] = flat(dy).sum(axis=0)
        dn = dy * params[f"ln{i}.g"]
        dv = inv_sigma * (dn - dn.mean(axis=-1, keepdims=True) - n * np.mean(dn * n, axis=-1, keepdims=True))
        grads[f"pw{i}.w"] = flat(u).T @ flat(dv)
        grads[f"pw{i}.b"] = flat(dv).sum(axis=0)
        du = dv @ params[f"pw{i}.w"].T
        grads[f"dw{i}.b"] = flat(du).sum(axis=0)
        w_dw = params[f"dw{i}.w"]
        g_dw = np.empty_like(w_dw)
        dxpad = np.zeros_like(xpad)
        for tap in range(k):
            window = slice(tap * d, tap * d + n_frames)
            g_dw[:, tap] = np.einsum("btc,btc->c", du, xpad[:, window, :])
            dxpad[..., window, :] += w_dw[:, tap] * du
        grads[f"dw{i}.w"] = g_dw
        dx = dxpad[..., (k - 1) * d :, :]
        dh = dx + dh if residual else dx

    ordered = {name: grads[name] for name in cfg.param_shapes()}
    return BatchGrad(losses, ordered, posteriors)


def backward(
    params: ModelParams,
    feats,
    target_kw: int,
    target_tokens: Sequence[int] | None,
    ctc_weight: float = 0.5,
    wws_weight: float = 1.0,
) -> UtteranceGrad:
    """Loss bundle and exact gradient of ``l_total`` for every trainable tensor.

    ``target_tokens=None`` (or ``ctc_weight == 0``) drops the CTC branch, which
    gives the single-branch keyword model.
    """
    res = backward_batch(params, [feats], [target_kw], [target_tokens], ctc_weight, wws_weight)
    return UtteranceGrad(res.losses[0], res.grads, res.posteriors[0])


def utterance_loss(params: ModelParams, feats, target_kw, target_tokens, ctc_weight=0.5, wws_weight=1.0) -> LossBundle:
    post = forward(params, feats)
    l_wws, _ = max_pooling_loss(post.kws_prob, target_kw)
    if target_tokens is not None and ctc_weight != 0.0:
        l_ctc, _ = ctc_loss(post.asr_logprob, target_tokens)
    else:
        l_ctc = 0.0
    return combined_loss(l_ctc, l_wws, ctc_weight, wws_weight)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    """``DWCK`` | u32 version | u32 header length | JSON config | float32 LE tensors.

    Tensors follow declaration order; the CMVN mean and inverse std come last.
    """
    header = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name in params.config.param_shapes():
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.cmvn_mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params.cmvn_istd, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(blob[12 : 12 + header_len].decode("utf-8")))
    offset = 12 + header_len
    shapes = dict(config.param_shapes())
    shapes["__cmvn_mean"] = (config.n_mels,)
    shapes["__cmvn_istd"] = (config.n_mels,)
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        chunk = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = chunk.reshape(shape).astype(np.float64)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    mean = arrays.pop("__cmvn_mean")
    istd = arrays.pop("__cmvn_istd")
    return ModelParams(config, arrays, mean, istd)


def predicted_label(kws_prob: np.ndarray, threshold: float = 0.5) -> int:
    """Argmax keyword if its peak probability clears ``threshold``, else FILLER."""
    peaks = kws_prob.max(axis=0)
    best = int(np.argmax(peaks))
    return best if peaks[best] >= threshold else FILLER
