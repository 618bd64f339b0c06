"""Teacher-forced MLE training with ratio noise and AdamW.

The loss is the mean negative log-likelihood over all non-pad target tokens
in the batch. In PRE mode, training-time Gaussian noise perturbs each
(example, position) progress ratio independently and is resampled at every
visit; inference always uses exact ratios.

Everything is deterministic under a fixed rng_seed: parameter init, batch
order, and noise draws run on independent streams derived from it.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import compute as C
from .checkpoint import save_checkpoint
from .corpus import BEGIN_ID, PAD_ID, TrainingExample
from .model import (
    LengthControlMode,
    ModelConfig,
    conditioning_matrix,
    countdown_matrix,
    decode_batch,
    encode_batch,
    init_parameters,
    ratio_matrix,
)
from .signals import noisy_ratio_array

__all__ = [
    "AdamWConfig",
    "TrainConfig",
    "LossRecord",
    "AdamWState",
    "batch_loss",
    "init_adamw_state",
    "adamw_step",
    "train",
    "write_loss_log",
    "derive_seed",
]


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    lr: float = 3e-4
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    grad_clip_norm: float = 1.0
    noise_enabled: bool = True
    rng_seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.adamw.beta1 < 1 and 0 <= self.adamw.beta2 < 1):
            raise ValueError("AdamW betas must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        return self


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss: float
    seconds: float


def derive_seed(base: int, tag: str) -> int:
    """Stable per-stream seed: first 8 bytes of sha256(f"{base}:{tag}")."""
    digest = hashlib.sha256(f"{base}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _assemble_batch(batch: list[TrainingExample], cfg: ModelConfig, noise_rng):
    """Right-pad a batch and build decoder inputs, labels, and conditioning."""
    b = len(batch)
    s_max = max(len(ex.source) for ex in batch)
    t_max = max(ex.l for ex in batch) + 1
    src = np.full((b, s_max), PAD_ID, dtype=np.int64)
    dec_in = np.full((b, t_max), PAD_ID, dtype=np.int64)
    labels = np.full((b, t_max), PAD_ID, dtype=np.int64)
    lengths = np.empty(b, dtype=np.int64)
    for i, ex in enumerate(batch):
        src[i, : len(ex.source)] = ex.source
        dec_in[i, 0] = BEGIN_ID
        dec_in[i, 1 : ex.l + 1] = ex.target[:-1]
        labels[i, : ex.l + 1] = ex.target
        lengths[i] = ex.l
    src_pad = src == PAD_ID
    ratios = ratio_matrix(lengths, t_max)
    if cfg.mode is LengthControlMode.PRE and noise_rng is not None:
        ratios = noisy_ratio_array(ratios, cfg.signal, noise_rng)
    countdowns = countdown_matrix(lengths, t_max)
    cond = conditioning_matrix(cfg.mode, cfg.signal, ratios=ratios, countdowns=countdowns)
    remaining = countdowns if cfg.mode is LengthControlMode.LAAM else None
    return src, src_pad, dec_in, labels, cond, remaining


def batch_loss(
    batch: list[TrainingExample],
    params: dict[str, C.Tensor],
    cfg: ModelConfig,
    *,
    noise_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """One teacher-forced forward/backward pass.

    Returns the per-token loss and a gradient array per parameter. Padding
    is excluded from the loss (label mask) and from attention (source mask).
    """
    if not batch:
        raise ValueError("empty batch")
    src, src_pad, dec_in, labels, cond, remaining = _assemble_batch(batch, cfg, noise_rng)
    for t in params.values():
        t.zero_grad()
    with C.Graph() as g:
        enc = encode_batch(src, src_pad, params, cfg)
        logits = decode_batch(dec_in, cond, enc, src_pad, params, cfg, laam_remaining=remaining)
        flat = C.reshape(logits, (labels.size, cfg.vocab_size))
        valid = np.nonzero(labels.ravel() != PAD_ID)[0]
        loss = C.cross_entropy(C.take_rows(flat, valid), labels.ravel()[valid])
    C.backward(g, loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    return loss.item(), grads


@dataclass
class AdamWState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adamw_state(params: dict[str, C.Tensor]) -> AdamWState:
    return AdamWState(
        t=0,
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(np.square(g), dtype=np.float64) for g in grads.values())))


def adamw_step(
    params: dict[str, C.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: TrainConfig,
) -> AdamWState:
    """Decoupled-weight-decay Adam update with bias correction.

    Gradients are globally norm-clipped first when grad_clip_norm > 0.
    A non-finite gradient aborts the step with a diagnostic.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")
    clip = cfg.grad_clip_norm
    if clip and clip > 0:
        norm = global_grad_norm(grads)
        if norm > clip:
            s = clip / norm
            grads = {k: g * s for k, g in grads.items()}
    a = cfg.adamw
    state.t += 1
    bc1 = 1.0 - a.beta1**state.t
    bc2 = 1.0 - a.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= a.beta1
        m += (1.0 - a.beta1) * g
        v *= a.beta2
        v += (1.0 - a.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + a.eps)
        if a.weight_decay:
            p.data -= (cfg.lr * a.weight_decay) * p.data
        p.data -= cfg.lr * update.astype(p.data.dtype, copy=False)
    return state


class _BatchSampler:
    """Seed-determined epoch shuffles; ragged tails are dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self._order = None
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._order is None or self._pos + self.bs > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.bs]
        self._pos += self.bs
        return idx


def train(
    examples: list[TrainingExample],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    *,
    checkpoint_path: Path | str | None = None,
    progress: bool = False,
) -> tuple[dict[str, C.Tensor], list[LossRecord]]:
    """Run the full training loop; returns final parameters and the loss log.

    Deterministic given seeds: identical (corpus, configs) produce identical
    final checkpoint bytes. Periodic checkpoints land next to the final one
    as `<stem>.step<N><suffix>` when checkpoint_every > 0.
    """
    cfg.validate()
    tcfg.validate()
    if not examples:
        raise ValueError("cannot train on an empty corpus")
    max_len = max(len(ex.source) for ex in examples)
    if max_len > cfg.max_positions:
        raise ValueError(f"corpus source length {max_len} exceeds max_positions {cfg.max_positions}")
    params = init_parameters(cfg, derive_seed(tcfg.rng_seed, "init"))
    shuffle_rng = np.random.default_rng(derive_seed(tcfg.rng_seed, "shuffle"))
    noise_rng = (
        np.random.default_rng(derive_seed(tcfg.rng_seed, "noise")) if tcfg.noise_enabled else None
    )
    sampler = _BatchSampler(len(examples), tcfg.batch_size, shuffle_rng)
    state = init_adamw_state(params)
    records: list[LossRecord] = []
    t0 = time.perf_counter()
    for step in range(1, tcfg.steps + 1):
        batch = [examples[i] for i in sampler.next_indices()]
        loss, grads = batch_loss(batch, params, cfg, noise_rng=noise_rng)
        adamw_step(params, grads, state, tcfg)
        records.append(LossRecord(step=step, loss=loss, seconds=time.perf_counter() - t0))
        if progress and (step % 200 == 0 or step == 1):
            print(f"  step {step:>5d}  loss {loss:.4f}  ({records[-1].seconds:.1f}s)", flush=True)
        if (
            checkpoint_path is not None
            and tcfg.checkpoint_every > 0
            and step % tcfg.checkpoint_every == 0
            and step < tcfg.steps
        ):
            cp = Path(checkpoint_path)
            save_checkpoint(cp.with_name(f"{cp.stem}.step{step}{cp.suffix}"), params, cfg)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, cfg)
    return params, records


def write_loss_log(path, records: list[LossRecord], tcfg: TrainConfig) -> None:
    """CSV loss log; a comment header records the optimizer settings."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            f"# lr={tcfg.lr} batch_size={tcfg.batch_size} grad_clip_norm={tcfg.grad_clip_norm} "
            f"beta1={tcfg.adamw.beta1} beta2={tcfg.adamw.beta2} eps={tcfg.adamw.eps} "
            f"weight_decay={tcfg.adamw.weight_decay} noise_enabled={tcfg.noise_enabled} "
            f"seed={tcfg.rng_seed}\n"
        )
        f.write("step,loss,seconds\n")
        for r in records:
            f.write(f"{r.step},{r.loss:.6f},{r.seconds:.3f}\n")
