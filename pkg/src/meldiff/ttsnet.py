"""Desk-scale text-conditioning network for the noise predictor.

Layout (all tensors are ``[channels, frames]``):

    phonemes -> embedding -> FC+ReLU -> 10 dilated residual conv blocks
             -> LayerNorm -> GRU (residual)             = encoder output
    encoder output -> duration predictor (log(1 + d) domain)
    encoder output -> length regulator(durations)       = frame context
    step t -> sinusoidal code -> FC/Swish -> FC/Swish   = step vector
    x_t -> 1x1 in -> gated residual blocks (+context, +step) -> skip sum
        -> 1x1 post-net                                 = predicted noise
"""
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .denoiser import Adam
from .embedding import step_embedding
from .rng import make_rng

ENCODER_DILATIONS = (1, 2, 4, 1, 2, 4, 1, 2, 4, 1)


@dataclass(frozen=True)
class TTSConfig:
    vocab_size: int = 48
    d_model: int = 64
    encoder_kernel: int = 4
    encoder_dilations: tuple = ENCODER_DILATIONS
    duration_hidden: int = 64
    duration_kernel: int = 3
    mel_channels: int = 80
    residual_channels: int = 64
    decoder_blocks: int = 4
    decoder_kernel: int = 3
    step_dim: int = 128
    step_hidden: int = 256
    recurrent: bool = True


DESK = TTSConfig()
PAPER = TTSConfig(d_model=256, residual_channels=512, decoder_blocks=12, step_hidden=512)


def _parse_value(raw, current):
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return type(current)(raw)


def parse_config(text):
    """``key = value`` lines; ``scale = desk|paper`` picks the base, other keys override."""
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    base = {"desk": DESK, "paper": PAPER}.get(pairs.pop("scale", "desk"))
    if base is None:
        raise ValueError("scale must be 'desk' or 'paper'")
    known = {f.name for f in fields(TTSConfig)}
    updates = {}
    for key, value in pairs.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _parse_value(value, getattr(base, key))
    return replace(base, **updates)


def load_config(path):
    return parse_config(Path(path).read_text())


def load_vocab(path):
    """One token per line; returns token -> id."""
    tokens = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(set(tokens)) != len(tokens):
        raise ValueError("duplicate tokens in vocabulary file")
    return {tok: i for i, tok in enumerate(tokens)}


def encode_tokens(tokens, vocab):
    try:
        return np.array([vocab[t] for t in tokens], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None


# -- primitives ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def swish(x):
    return x / (1.0 + np.exp(-x))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each frame over the channel axis."""
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain[:, None] + bias[:, None]


def _dense(rng, n_out, n_in):
    return rng.standard_normal((n_out, n_in)) * np.sqrt(1.0 / n_in)


def _conv(rng, n_out, n_in, k):
    return rng.standard_normal((n_out, n_in, k)) * np.sqrt(1.0 / (n_in * k))


def zero_weights(params):
    """Copy of a parameter dict with every array zeroed except LayerNorm gains."""
    out = {}
    for key, value in params.items():
        if isinstance(value, dict):
            out[key] = zero_weights(value)
        elif isinstance(value, list):
            out[key] = [zero_weights(v) for v in value]
        elif key.endswith("ln_g"):
            out[key] = value.copy()
        else:
            out[key] = np.zeros_like(value)
    return out


# -- length regulator ---------------------------------------------------------

def length_regulate(embeddings, durations):
    """Repeat column i of ``embeddings`` durations[i] times, in order."""
    embeddings = np.asarray(embeddings)
    durations = np.asarray(durations)
    if durations.ndim != 1 or durations.size != embeddings.shape[1]:
        raise ValueError(
            f"{durations.size} durations for {embeddings.shape[1]} phonemes")
    if np.any(durations < 0) or not np.all(durations == np.round(durations)):
        raise ValueError("durations must be nonnegative integers")
    if durations.sum() == 0:
        raise ValueError("total duration is zero")
    return _kernels.repeat_columns(embeddings, durations.astype(np.int64))


# -- step encoder -------------------------------------------------------------

def init_step_encoder(cfg, rng):
    return {
        "w1": _dense(rng, cfg.step_hidden, cfg.step_dim), "b1": np.zeros(cfg.step_hidden),
        "w2": _dense(rng, cfg.residual_channels, cfg.step_hidden),
        "b2": np.zeros(cfg.residual_channels),
    }


def step_encode(e, params):
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != params["w1"].shape[1]:
        raise ValueError(f"step code has {e.shape[-1]} dims, expected {params['w1'].shape[1]}")
    h = swish(params["w1"] @ e + params["b1"])
    return swish(params["w2"] @ h + params["b2"])


# -- text encoder -------------------------------------------------------------

def init_gru(rng, d):
    return {"w": _dense(rng, 3 * d, d), "u": _dense(rng, 3 * d, d), "b": np.zeros(3 * d)}


def gru(x, p):
    """Forward GRU over frames; x [d, n] -> hidden states [d, n]."""
    d, n = x.shape
    gates_in = p["w"] @ x + p["b"][:, None]
    h = np.zeros(d)
    out = np.empty_like(x)
    for i in range(n):
        gi = gates_in[:, i]
        gh = p["u"] @ h
        r = sigmoid(gi[:d] + gh[:d])
        z = sigmoid(gi[d:2 * d] + gh[d:2 * d])
        cand = np.tanh(gi[2 * d:] + r * gh[2 * d:])
        h = (1.0 - z) * cand + z * h
        out[:, i] = h
    return out


def init_encoder(cfg, rng):
    d = cfg.d_model
    return {
        "embedding": rng.standard_normal((cfg.vocab_size, d)) * 0.3,
        "prenet_w": _dense(rng, d, d), "prenet_b": np.zeros(d),
        "blocks": [
            {"w": _conv(rng, d, d, cfg.encoder_kernel), "b": np.zeros(d),
             "ln_g": np.ones(d), "ln_b": np.zeros(d)}
            for _ in cfg.encoder_dilations
        ],
        "final_ln_g": np.ones(d), "final_ln_b": np.zeros(d),
        "gru": init_gru(rng, d),
    }


def encoder_receptive_field(cfg):
    """(left, right) reach of one output over the phoneme axis, recurrence off."""
    k = cfg.encoder_kernel
    left = sum(d * (k - 1) // 2 for d in cfg.encoder_dilations)
    right = sum(d * (k - 1) - d * (k - 1) // 2 for d in cfg.encoder_dilations)
    return left, right


def prenet(ids, params):
    emb = params["embedding"][ids].T
    return relu(params["prenet_w"] @ emb + params["prenet_b"][:, None])


def encode_text(ids, params, cfg=DESK, recurrent=None):
    """Phoneme ids [n] -> context features [d_model, n]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("need a nonempty phoneme sequence")
    if ids.min() < 0 or ids.max() >= params["embedding"].shape[0]:
        raise ValueError("phoneme id outside vocabulary")
    x = prenet(ids, params)
    for blk, dil in zip(params["blocks"], cfg.encoder_dilations):
        h = relu(_kernels.conv1d(x, blk["w"], blk["b"], dil))
        x = x + layer_norm(h, blk["ln_g"], blk["ln_b"])
    x = layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    if cfg.recurrent if recurrent is None else recurrent:
        x = x + gru(x, params["gru"])
    return x


# -- duration predictor -------------------------------------------------------

def init_duration_predictor(cfg, rng):
    return {
        "conv_w": _conv(rng, cfg.duration_hidden, cfg.d_model, cfg.duration_kernel),
        "conv_b": np.zeros(cfg.duration_hidden),
        "out_w": _dense(rng, 1, cfg.duration_hidden)[0] * 0.1,
        "out_b": np.zeros(1),
    }


def _duration_forward(enc, p):
    if enc.shape[0] != p["conv_w"].shape[1]:
        raise ValueError(f"encoder output has {enc.shape[0]} channels, "
                         f"predictor expects {p['conv_w'].shape[1]}")
    pre = _kernels.conv1d(enc, p["conv_w"], p["conv_b"])
    h = relu(pre)
    return p["out_w"] @ h + p["out_b"][0], pre, h


def predict_durations(encoder_out, params):
    """Log-domain predictions: estimates of log(1 + duration) per phoneme."""
    return _duration_forward(np.asarray(encoder_out, dtype=np.float64), params)[0]


def log_duration_target(durations):
    return np.log1p(np.asarray(durations, dtype=np.float64))


def duration_loss(log_pred, durations):
    return float(np.mean(np.abs(log_pred - log_duration_target(durations))))


def durations_from_log(log_pred):
    return np.maximum(np.round(np.expm1(log_pred)), 0).astype(np.int64)


def _duration_grads(enc, durations, p, n_total):
    log_pred, pre, h = _duration_forward(enc, p)
    resid = log_pred - log_duration_target(durations)
    g_out = np.sign(resid) / n_total
    grads = {"out_w": h @ g_out, "out_b": np.array([g_out.sum()])}
    g_pre = np.outer(p["out_w"], g_out) * (pre > 0)
    k = p["conv_w"].shape[2]
    left = (k - 1) // 2
    xp = np.zeros((enc.shape[0], enc.shape[1] + k - 1))
    xp[:, left:left + enc.shape[1]] = enc
    n = enc.shape[1]
    grads["conv_w"] = np.stack([g_pre @ xp[:, j:j + n].T for j in range(k)], axis=2)
    grads["conv_b"] = g_pre.sum(axis=1)
    return float(np.abs(resid).sum()), grads


_DUR_KEYS = ("conv_w", "conv_b", "out_w", "out_b")


def train_duration_predictor(params, encoder_outs, durations, steps=500, learning_rate=1e-3):
    """Full-batch Adam on the log-domain L1 loss; returns (params, losses)."""
    params = {k: params[k].copy() for k in _DUR_KEYS}
    n_total = sum(len(d) for d in durations)
    opt = Adam(lr=learning_rate)
    theta = np.concatenate([params[k].ravel() for k in _DUR_KEYS])
    losses = np.empty(steps)
    for step in range(steps):
        total = 0.0
        acc = {k: np.zeros_like(params[k]) for k in _DUR_KEYS}
        for enc, dur in zip(encoder_outs, durations):
            loss, g = _duration_grads(enc, dur, params, n_total)
            total += loss
            for k in _DUR_KEYS:
                acc[k] += g[k]
        losses[step] = total / n_total
        theta = opt.update(theta, np.concatenate([acc[k].ravel() for k in _DUR_KEYS]))
        pos = 0
        for k in _DUR_KEYS:
            params[k] = theta[pos:pos + params[k].size].reshape(params[k].shape)
            pos += params[k].size
    return params, losses


# -- decoder ------------------------------------------------------------------

def init_decoder(cfg, rng):
    c, d = cfg.residual_channels, cfg.d_model
    blocks = []
    for _ in range(cfg.decoder_blocks):
        blocks.append({
            "conv_w": _conv(rng, 2 * c, c, cfg.decoder_kernel), "conv_b": np.zeros(2 * c),
            "ctx_w": _dense(rng, 2 * c, d), "ctx_b": np.zeros(2 * c),
            "step_w": _dense(rng, 2 * c, c), "step_b": np.zeros(2 * c),
            "out_w": _dense(rng, 2 * c, c), "out_b": np.zeros(2 * c),
        })
    return {
        "in_w": _dense(rng, c, cfg.mel_channels), "in_b": np.zeros(c),
        "step": init_step_encoder(cfg, rng),
        "blocks": blocks,
        "post_w": _dense(rng, cfg.mel_channels, c) * 0.1, "post_b": np.zeros(cfg.mel_channels),
    }


def decoder_block(x, context, step_vec, params):
    """Gated residual block; returns (x + residual, skip)."""
    c = x.shape[0]
    if context.shape[1] != x.shape[1]:
        raise ValueError(f"context has {context.shape[1]} frames, x has {x.shape[1]}")
    h = _kernels.conv1d(x, params["conv_w"], params["conv_b"], 1)
    h = h + params["ctx_w"] @ context + params["ctx_b"][:, None]
    h = h + (params["step_w"] @ step_vec + params["step_b"])[:, None]
    gated = np.tanh(h[:c]) * sigmoid(h[c:])
    out = params["out_w"] @ gated + params["out_b"][:, None]
    return x + out[:c], out[c:]


def decode(x_t, t, context, params, cfg=DESK):
    """Noise prediction for one tensor x_t [mel, F] at step t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[0] != params["in_w"].shape[1]:
        raise ValueError(f"expected {params['in_w'].shape[1]} channels, got {x_t.shape[0]}")
    step_vec = step_encode(step_embedding(t, cfg.step_dim), params["step"])
    x = relu(params["in_w"] @ x_t + params["in_b"][:, None])
    skip = np.zeros_like(x)
    for blk in params["blocks"]:
        x, s = decoder_block(x, context, step_vec, blk)
        skip += s
    skip /= np.sqrt(len(params["blocks"]))
    return params["post_w"] @ skip + params["post_b"][:, None]


class TTSDecoderPredictor:
    """Forward-only noise predictor backed by the gated decoder."""

    def __init__(self, params, cfg=DESK):
        self.params = params
        self.cfg = cfg

    def predict(self, x_t, t, context):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim == 2:
            return decode(x_t, t, context, self.params, self.cfg)
        flat = x_t.reshape((-1,) + x_t.shape[-2:])
        ts = np.broadcast_to(np.asarray(t), flat.shape[:1])
        ctx = np.asarray(context)
        ctx = np.broadcast_to(ctx, flat.shape[:1] + ctx.shape[-2:]) if ctx.ndim == 2 \
            else ctx.reshape((-1,) + ctx.shape[-2:])
        out = np.stack([decode(x, int(s), c, self.params, self.cfg)
                        for x, s, c in zip(flat, ts, ctx)])
        return out.reshape(x_t.shape)


@dataclass
class TTSNet:
    cfg: TTSConfig
    encoder: dict
    durations: dict
    decoder: dict
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg=DESK, rng=None):
        rng = make_rng(rng)
        return cls(cfg, init_encoder(cfg, rng), init_duration_predictor(cfg, rng),
                   init_decoder(cfg, rng))

    def context(self, ids, durations=None):
        """Frame-aligned context; predicted durations are used when none are given."""
        enc = encode_text(ids, self.encoder, self.cfg)
        if durations is None:
            durations = durations_from_log(predict_durations(enc, self.durations))
        return length_regulate(enc, durations)

    def predictor(self):
        return TTSDecoderPredictor(self.decoder, self.cfg)
