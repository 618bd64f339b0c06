"""Toy pre-norm encoder-decoder transformer with pluggable length conditioning.

The decoder input is composed as token embedding + fixed sinusoidal position
+ a mode-dependent conditioning vector: zeros (NONE and LAAM), the countdown
embedding (RPE), or the progress-ratio embedding (PRE). LAAM instead reweights
the last decoder layer's cross-attention toward the top remaining-length
encoder tokens.

Two execution paths exist on purpose: a batched, tape-recorded path used for
training and reference logits (encode_batch / decode_batch / decode_step),
and a raw-numpy incremental decoder with KV caches used by generate(). Tests
pin the two paths together position-wise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .compute import Tensor
from .corpus import BEGIN_ID, EOS_ID
from .signals import (
    SignalConfig,
    pre_embedding_array,
    progress_ratio,
    sinusoidal_pe_array,
)

__all__ = [
    "LengthControlMode",
    "ModelConfig",
    "DecoderStepContext",
    "GenerationResult",
    "init_parameters",
    "compose_decoder_input",
    "conditioning_matrix",
    "encode",
    "encode_batch",
    "decode_batch",
    "decode_step",
    "generate",
    "generation_cap",
]

NEG_INF = float("-inf")


class LengthControlMode(enum.Enum):
    NONE = "none"
    RPE = "rpe"
    PRE = "pre"
    LAAM = "laam"


@dataclass
class ModelConfig:
    d_model: int
    n_heads: int
    n_enc_layers: int
    n_dec_layers: int
    d_ff: int
    vocab_size: int
    max_positions: int
    mode: LengthControlMode
    signal: SignalConfig
    laam_boost: float = 1.0
    ln_eps: float = 1e-5
    activation: str = "gelu"

    def validate(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.signal.d_model != self.d_model:
            raise ValueError(
                f"signal.d_model={self.signal.d_model} must equal d_model={self.d_model}"
            )
        if min(self.n_enc_layers, self.n_dec_layers, self.d_ff, self.vocab_size, self.max_positions) < 1:
            raise ValueError("layer counts, d_ff, vocab_size, max_positions must be >= 1")
        if self.laam_boost < 0:
            raise ValueError(f"laam_boost must be >= 0, got {self.laam_boost}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"activation must be 'gelu' or 'relu', got {self.activation!r}")
        self.signal.validate()
        return self


@dataclass(frozen=True)
class DecoderStepContext:
    """Per-step length bookkeeping: step index t, target l, ratio, remaining."""

    t: int
    target_length: int
    ratio: float
    remaining: int

    @classmethod
    def at(cls, t: int, l: int) -> "DecoderStepContext":
        return cls(t=t, target_length=l, ratio=progress_ratio(t, l), remaining=max(l - t, 0))


@dataclass
class GenerationResult:
    tokens: list[int]
    cap_hit: bool


def generation_cap(l: int) -> int:
    """Hard step limit for autoregressive decoding: max(2l, l+50)."""
    return max(2 * l, l + 50)


# ---------------------------------------------------------------------------
# parameters


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Build all learnable tensors in the canonical (checkpoint) order.

    Weight matrices are N(0, fan_in^-1/2); projections that feed a residual
    stream carry an extra (2 * depth)^-1/2 to keep activations from growing
    with layer count. The output head starts at zero so the initial
    predictive distribution is exactly uniform (loss = ln vocab_size).
    The shared token embedding feeds both encoder and decoder inputs; the
    output projection is untied.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: dict[str, Tensor] = {}
    res = (2.0 * max(cfg.n_enc_layers, cfg.n_dec_layers)) ** -0.5

    def w(name: str, shape: tuple[int, ...], std: float) -> None:
        params[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def attn_block(prefix: str) -> None:
        for nm in ("q", "k", "v"):
            w(f"{prefix}.{nm}", (d, d), d**-0.5)
            zeros(f"{prefix}.{nm}_b", (d,))
        w(f"{prefix}.o", (d, d), d**-0.5 * res)
        zeros(f"{prefix}.o_b", (d,))

    def ffn_block(prefix: str) -> None:
        w(f"{prefix}.w1", (d, ff), d**-0.5)
        zeros(f"{prefix}.w1_b", (ff,))
        w(f"{prefix}.w2", (ff, d), ff**-0.5 * res)
        zeros(f"{prefix}.w2_b", (d,))

    def ln(prefix: str) -> None:
        ones(f"{prefix}.g", (d,))
        zeros(f"{prefix}.b", (d,))

    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    w("tok_emb", (v, d), d**-0.5)
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        ln(f"{p}.ln1")
        attn_block(f"{p}.attn")
        ln(f"{p}.ln2")
        ffn_block(f"{p}.ffn")
    ln("enc.ln_f")
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        ln(f"{p}.ln1")
        attn_block(f"{p}.self")
        ln(f"{p}.ln2")
        attn_block(f"{p}.cross")
        ln(f"{p}.ln3")
        ffn_block(f"{p}.ffn")
    ln("dec.ln_f")
    zeros("out.w", (d, v))
    zeros("out.w_b", (v,))
    return params


# ---------------------------------------------------------------------------
# conditioning


def compose_decoder_input(
    token_emb: np.ndarray,
    pos_emb: np.ndarray,
    ctx: DecoderStepContext,
    mode: LengthControlMode,
    cfg: SignalConfig,
) -> np.ndarray:
    """Single-position decoder input: token + position + conditioning vector."""
    token_emb = np.asarray(token_emb)
    pos_emb = np.asarray(pos_emb)
    if token_emb.shape != (cfg.d_model,) or pos_emb.shape != (cfg.d_model,):
        raise ValueError(
            f"expected vectors of length {cfg.d_model}, got {token_emb.shape} and {pos_emb.shape}"
        )
    return token_emb + pos_emb + _conditioning_vector(ctx, mode, cfg)


def _conditioning_vector(ctx: DecoderStepContext, mode: LengthControlMode, cfg: SignalConfig) -> np.ndarray:
    if mode is LengthControlMode.PRE:
        return pre_embedding_array(np.asarray(ctx.ratio), cfg)
    if mode is LengthControlMode.RPE:
        return sinusoidal_pe_array(np.asarray(ctx.remaining), cfg)
    return np.zeros(cfg.d_model)


def conditioning_matrix(
    mode: LengthControlMode,
    cfg: SignalConfig,
    *,
    ratios: np.ndarray | None = None,
    countdowns: np.ndarray | None = None,
) -> np.ndarray:
    """Batched conditioning: [B, T] ratios or countdowns -> [B, T, d_model].

    NONE and LAAM condition nothing at the input, so they yield exact zeros;
    signal injection is strictly additive on top of the Eq.-1 composition.
    """
    if mode is LengthControlMode.PRE:
        return pre_embedding_array(ratios, cfg)
    if mode is LengthControlMode.RPE:
        return sinusoidal_pe_array(countdowns, cfg)
    shape_src = ratios if ratios is not None else countdowns
    return np.zeros(np.asarray(shape_src).shape + (cfg.d_model,))


def ratio_matrix(lengths: np.ndarray, t_max: int) -> np.ndarray:
    """Exact progress ratios [B, t_max] for per-example target lengths."""
    t = np.arange(t_max)[None, :]
    return np.minimum(t / np.asarray(lengths, dtype=np.float64)[:, None], 1.0)


def countdown_matrix(lengths: np.ndarray, t_max: int) -> np.ndarray:
    """Saturating countdowns max(l - t, 0) as an integer [B, t_max] array."""
    t = np.arange(t_max)[None, :]
    return np.maximum(np.asarray(lengths, dtype=np.int64)[:, None] - t, 0)


# ---------------------------------------------------------------------------
# batched forward (tape path)


def _linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return C.add(C.matmul(x, params[name]), params[f"{name}_b"])


def _dtype(params: dict[str, Tensor]):
    return params["tok_emb"].dtype


def _mha(
    q_in: Tensor,
    kv_in: Tensor,
    mask: np.ndarray | None,
    params: dict[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    laam_remaining: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention block; q_in [B,Tq,d], kv_in [B,Tk,d]."""
    b, tq, d = q_in.shape
    tk = kv_in.shape[1]
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def heads(x: Tensor, t: int, name: str) -> Tensor:
        y = _linear(C.reshape(x, (b * t, d)), params, f"{prefix}.{name}")
        return C.transpose(C.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

    q = heads(q_in, tq, "q")
    k = heads(kv_in, tk, "k")
    v = heads(kv_in, tk, "v")
    scores = C.scale(C.matmul(q, C.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    w = C.softmax_rows(scores, mask)
    if laam_remaining is not None:
        w = C.laam_boost(w, np.minimum(laam_remaining, tk)[:, None, :], cfg.laam_boost)
    ctxv = C.matmul(w, v)
    merged = C.reshape(C.transpose(ctxv, (0, 2, 1, 3)), (b * tq, d))
    return C.reshape(_linear(merged, params, f"{prefix}.o"), (b, tq, d))


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    b, t, d = x.shape
    act = C.gelu if cfg.activation == "gelu" else C.relu
    h = act(_linear(C.reshape(x, (b * t, d)), params, f"{prefix}.w1"))
    return C.reshape(_linear(h, params, f"{prefix}.w2"), (b, t, d))


def _ln(x: Tensor, params: dict[str, Tensor], name: str, cfg: ModelConfig) -> Tensor:
    return C.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], cfg.ln_eps)


def _positions(t: int, cfg: ModelConfig, dtype) -> np.ndarray:
    return sinusoidal_pe_array(np.arange(t), cfg.signal).astype(dtype)


def _pad_mask(pad: np.ndarray | None) -> np.ndarray | None:
    """[B, S] boolean pad flags -> additive [B, 1, 1, S] mask, or None."""
    if pad is None or not pad.any():
        return None
    m = np.zeros(pad.shape)
    m[pad] = NEG_INF
    return m[:, None, None, :]


def encode_batch(
    src_ids: np.ndarray,
    src_pad: np.ndarray | None,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    *,
    positional: bool = True,
) -> Tensor:
    """Contextual encoder states [B, S, d] for right-padded sources."""
    src_ids = np.asarray(src_ids, dtype=np.int64)
    b, s = src_ids.shape
    if s == 0:
        raise ValueError("empty source sequence")
    if s > cfg.max_positions:
        raise ValueError(f"source length {s} exceeds max_positions {cfg.max_positions}")
    dtype = _dtype(params)
    x = C.embedding(params["tok_emb"], src_ids)
    if positional:
        x = C.add(x, _positions(s, cfg, dtype)[None, :, :])
    mask = _pad_mask(src_pad)
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        hn = _ln(x, params, f"{p}.ln1", cfg)
        x = C.add(x, _mha(hn, hn, mask, params, f"{p}.attn", cfg))
        x = C.add(x, _ffn(_ln(x, params, f"{p}.ln2", cfg), params, f"{p}.ffn", cfg))
    return _ln(x, params, "enc.ln_f", cfg)


def encode(source, params: dict[str, Tensor], cfg: ModelConfig, *, positional: bool = True) -> Tensor:
    """Single-sequence encoder convenience wrapper; returns [n, d]."""
    src = np.asarray(list(source), dtype=np.int64)
    if src.size == 0:
        raise ValueError("empty source sequence")
    out = encode_batch(src[None, :], None, params, cfg, positional=positional)
    return C.reshape(out, (src.size, cfg.d_model))


def _causal_mask(t: int) -> np.ndarray:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = NEG_INF
    return m[None, None, :, :]


def decode_batch(
    dec_ids: np.ndarray,
    cond: np.ndarray,
    enc_out: Tensor,
    src_pad: np.ndarray | None,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    *,
    laam_remaining: np.ndarray | None = None,
) -> Tensor:
    """Teacher-forced decoder logits [B, T, V].

    dec_ids[b, t] is the decoder input token at position t (BEGIN + shifted
    targets); cond is the [B, T, d] conditioning matrix. laam_remaining
    [B, T] activates the cross-attention boost in the last layer (LAAM mode).
    """
    dec_ids = np.asarray(dec_ids, dtype=np.int64)
    b, t = dec_ids.shape
    if t > cfg.max_positions:
        raise ValueError(f"decoder length {t} exceeds max_positions {cfg.max_positions}")
    if cond.shape != (b, t, cfg.d_model):
        raise ValueError(f"conditioning shape {cond.shape} != {(b, t, cfg.d_model)}")
    if cfg.mode is LengthControlMode.LAAM and laam_remaining is None:
        raise ValueError("LAAM mode requires the per-position remaining-length matrix")
    dtype = _dtype(params)
    x = C.embedding(params["tok_emb"], dec_ids)
    x = C.add(x, _positions(t, cfg, dtype)[None, :, :] + cond.astype(dtype))
    causal = _causal_mask(t)
    cross_mask = _pad_mask(src_pad)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        hn = _ln(x, params, f"{p}.ln1", cfg)
        x = C.add(x, _mha(hn, hn, causal, params, f"{p}.self", cfg))
        boost_k = None
        if cfg.mode is LengthControlMode.LAAM and i == cfg.n_dec_layers - 1:
            boost_k = laam_remaining
        x = C.add(
            x,
            _mha(_ln(x, params, f"{p}.ln2", cfg), enc_out, cross_mask, params, f"{p}.cross", cfg,
                 laam_remaining=boost_k),
        )
        x = C.add(x, _ffn(_ln(x, params, f"{p}.ln3", cfg), params, f"{p}.ffn", cfg))
    x = _ln(x, params, "dec.ln_f", cfg)
    logits = _linear(C.reshape(x, (b * t, cfg.d_model)), params, "out.w")
    return C.reshape(logits, (b, t, cfg.vocab_size))


def decode_step(
    prefix, enc_out: Tensor, ctx: DecoderStepContext, params: dict[str, Tensor], cfg: ModelConfig
) -> np.ndarray:
    """Reference next-token logits at step t, recomputed from the full prefix.

    prefix is the already-generated token sequence; its length must equal
    ctx.t. Conditioning uses exact (noise-free) ratios for every position.
    """
    prefix = list(prefix)
    if len(prefix) != ctx.t:
        raise ValueError(f"prefix length {len(prefix)} does not match ctx.t={ctx.t}")
    l = ctx.target_length
    dec_ids = np.asarray([[BEGIN_ID] + prefix], dtype=np.int64)
    t = ctx.t + 1
    cond = conditioning_matrix(
        cfg.mode,
        cfg.signal,
        ratios=ratio_matrix(np.asarray([l]), t),
        countdowns=countdown_matrix(np.asarray([l]), t),
    )
    remaining = countdown_matrix(np.asarray([l]), t) if cfg.mode is LengthControlMode.LAAM else None
    if enc_out.data.ndim == 2:
        enc_out = C.reshape(enc_out, (1,) + enc_out.shape)
    logits = decode_batch(dec_ids, cond, enc_out, None, params, cfg, laam_remaining=remaining)
    return logits.data[0, -1]


# ---------------------------------------------------------------------------
# incremental generation (raw numpy, no tape)


class _NpLayerNorm:
    def __init__(self, g: np.ndarray, b: np.ndarray, eps: float):
        self.g, self.b, self.eps = g, b, eps

    def __call__(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(dtype=np.float64)
        xc = x - x.dtype.type(mu)
        var = np.square(xc).mean(dtype=np.float64)
        return xc * x.dtype.type(1.0 / np.sqrt(var + self.eps)) * self.g + self.b


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(C._GELU_C * (x + 0.044715 * x**3)))


class _IncrementalDecoder:
    """Single-sequence decoder with per-layer KV caches.

    Numerically equivalent to decode_batch up to matmul regrouping; the
    incremental-vs-batch test pins the two within 1e-5.
    """

    def __init__(self, params: dict[str, Tensor], cfg: ModelConfig, enc_out: np.ndarray, l: int, cap: int):
        self.p = {k: t.data for k, t in params.items()}
        self.cfg = cfg
        self.l = l
        self.h = cfg.n_heads
        self.dh = cfg.d_model // cfg.n_heads
        self.scale = self.dh**-0.5
        dt = enc_out.dtype
        self.dt = dt
        self.ln = {
            name: _NpLayerNorm(self.p[f"{name}.g"], self.p[f"{name}.b"], cfg.ln_eps)
            for name in [f"dec.{i}.ln{j}" for i in range(cfg.n_dec_layers) for j in (1, 2, 3)]
            + ["dec.ln_f"]
        }
        s = enc_out.shape[0]
        self.src_len = s
        # cross-attention K/V per layer, laid out [heads, S, d_head]
        self.cross_kv = []
        for i in range(cfg.n_dec_layers):
            k = (enc_out @ self.p[f"dec.{i}.cross.k"] + self.p[f"dec.{i}.cross.k_b"])
            v = (enc_out @ self.p[f"dec.{i}.cross.v"] + self.p[f"dec.{i}.cross.v_b"])
            self.cross_kv.append(
                (k.reshape(s, self.h, self.dh).transpose(1, 0, 2).copy(),
                 v.reshape(s, self.h, self.dh).transpose(1, 0, 2).copy())
            )
        self.self_k = [np.empty((self.h, cap, self.dh), dtype=dt) for _ in range(cfg.n_dec_layers)]
        self.self_v = [np.empty((self.h, cap, self.dh), dtype=dt) for _ in range(cfg.n_dec_layers)]
        self.act = _np_gelu if cfg.activation == "gelu" else lambda x: np.maximum(x, 0)

    def _split(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.h, self.dh)

    def step(self, token_id: int, ctx: DecoderStepContext) -> np.ndarray:
        cfg, p = self.cfg, self.p
        t = ctx.t
        pos = sinusoidal_pe_array(np.asarray(t), cfg.signal).astype(self.dt)
        cond = _conditioning_vector(ctx, cfg.mode, cfg.signal).astype(self.dt)
        x = p["tok_emb"][token_id] + pos + cond
        for i in range(cfg.n_dec_layers):
            pre = f"dec.{i}"
            hn = self.ln[f"{pre}.ln1"](x)
            q = self._split(hn @ p[f"{pre}.self.q"] + p[f"{pre}.self.q_b"])
            self.self_k[i][:, t] = self._split(hn @ p[f"{pre}.self.k"] + p[f"{pre}.self.k_b"])
            self.self_v[i][:, t] = self._split(hn @ p[f"{pre}.self.v"] + p[f"{pre}.self.v_b"])
            keys = self.self_k[i][:, : t + 1]
            vals = self.self_v[i][:, : t + 1]
            scores = (keys @ q[:, :, None])[:, :, 0] * self.dt.type(self.scale)
            w = _np_softmax(scores)
            attn = (w[:, None, :] @ vals)[:, 0, :].reshape(-1)
            x = x + attn @ p[f"{pre}.self.o"] + p[f"{pre}.self.o_b"]

            hn = self.ln[f"{pre}.ln2"](x)
            q = self._split(hn @ p[f"{pre}.cross.q"] + p[f"{pre}.cross.q_b"])
            ck, cv = self.cross_kv[i]
            scores = (ck @ q[:, :, None])[:, :, 0] * self.dt.type(self.scale)
            w = _np_softmax(scores)
            if cfg.mode is LengthControlMode.LAAM and i == cfg.n_dec_layers - 1:
                w = C.laam_boost(Tensor(w), min(ctx.remaining, self.src_len), cfg.laam_boost).data
            attn = (w[:, None, :] @ cv)[:, 0, :].reshape(-1)
            x = x + attn @ p[f"{pre}.cross.o"] + p[f"{pre}.cross.o_b"]

            hn = self.ln[f"{pre}.ln3"](x)
            x = x + self.act(hn @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.w1_b"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.w2_b"]
        x = self.ln["dec.ln_f"](x)
        return x @ p["out.w"] + p["out.w_b"]


def generate(
    source,
    l: int,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    *,
    policy: str = "greedy",
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> GenerationResult:
    """Autoregressively generate up to the EOS token or the hard cap.

    The per-step context is computed on the fly from the requested target
    length l (ratio saturates at 1 past the target). Greedy decoding is
    deterministic; temperature sampling requires a seeded generator.
    Returned tokens exclude the end token; cap_hit records a forced stop.
    """
    if l < 1:
        raise ValueError(f"target length must be >= 1, got {l}")
    if policy not in ("greedy", "sample"):
        raise ValueError(f"unknown decode policy {policy!r}")
    if policy == "sample" and rng is None:
        raise ValueError("temperature sampling requires an rng")
    enc = encode(source, params, cfg)
    cap = generation_cap(l)
    dec = _IncrementalDecoder(params, cfg, enc.data, l, cap + 1)
    tokens: list[int] = []
    prev = BEGIN_ID
    for t in range(cap + 1):
        logits = dec.step(prev, DecoderStepContext.at(t, l))
        if policy == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = logits.astype(np.float64) / temperature
            prob = np.exp(z - z.max())
            prob /= prob.sum()
            nxt = int(rng.choice(len(prob), p=prob))
        if nxt == EOS_ID:
            return GenerationResult(tokens=tokens, cap_hit=False)
        if len(tokens) == cap:
            return GenerationResult(tokens=tokens, cap_hit=True)
        tokens.append(nxt)
        prev = nxt
    return GenerationResult(tokens=tokens, cap_hit=True)
