"""Conditioning signals for length-controlled decoding.

Four vector families share this module: standard sinusoidal positional
embeddings, reverse (countdown) positional embeddings, progress-ratio
impatience embeddings, and the training-time ratio noise. All trigonometric
evaluation happens in float64; callers may downcast the returned vectors.

Component layout: formulas are stated over 1-based dimensions j with
sine on odd j and cosine on even j. Vectors are stored 0-based, index
a = j - 1, so even storage indices hold sines and odd indices cosines.
The frequency index for storage index a is (a + 1) // 2 in the
progress-ratio family and a // 2 in the countdown family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SignalConfig",
    "NyquistReport",
    "progress_ratio",
    "pre_embedding",
    "pre_embedding_array",
    "rpe_embedding",
    "sinusoidal_pe",
    "sinusoidal_pe_array",
    "noisy_ratio",
    "noisy_ratio_array",
    "impatience_signal",
    "max_signal_frequency",
]


@dataclass
class SignalConfig:
    """Shared configuration for all conditioning signals.

    d_model must be even and >= 2. M scales how fast the impatience signal's
    pulsation grows with the progress ratio; it defaults to d_model / 2,
    which sits safely below the Nyquist ceiling d_model * pi / 2.
    """

    d_model: int
    M: float | None = None
    noise_enabled: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.M is None:
            self.M = self.d_model / 2
        if self.M < 0:
            raise ValueError(f"M must be nonnegative, got {self.M}")

    @property
    def nyquist_ceiling(self) -> float:
        """Largest admissible M: the embedding samples the impatience signal
        at rate d_model/2 over [0,1], so frequencies above d_model/4 alias."""
        return self.d_model * math.pi / 2

    def validate(self) -> "SignalConfig":
        """Raise if M exceeds the Nyquist ceiling. Returns self for chaining."""
        if self.M > self.nyquist_ceiling:
            raise ValueError(
                f"M={self.M} exceeds the Nyquist ceiling "
                f"d_model*pi/2={self.nyquist_ceiling} for d_model={self.d_model}"
            )
        return self


@dataclass(frozen=True)
class NyquistReport:
    """Sampling-theory check for a signal configuration."""

    f_max: float
    f_s: float
    satisfied: bool


def progress_ratio(t: int, l: int) -> float:
    """Fraction of the target length already generated, clipped at 1.

    t is the number of tokens generated so far (may exceed l, in which case
    the ratio saturates); l is the requested target length.
    """
    if l < 1:
        raise ValueError(f"target length must be >= 1, got {l}")
    if t < 0:
        raise ValueError(f"step index must be >= 0, got {t}")
    return min(t / l, 1.0)


def pre_embedding(r: float, cfg: SignalConfig) -> np.ndarray:
    """Progress-ratio embedding: trigonometric impatience signal at ratio r.

    1-based component j equals cos(2 * w * floor(j/2) / d_model) for even j
    and sin(...) for odd j, with pulsation w = r * M. Every component lies
    in [-1, 1]; component j=1 is identically zero.
    """
    w = r * cfg.M
    a = np.arange(cfg.d_model)
    arg = 2.0 * w * ((a + 1) // 2) / cfg.d_model
    out = np.empty(cfg.d_model, dtype=np.float64)
    out[0::2] = np.sin(arg[0::2])
    out[1::2] = np.cos(arg[1::2])
    return out


def sinusoidal_pe(pos: int, cfg: SignalConfig) -> np.ndarray:
    """Standard fixed sinusoidal positional vector for position pos.

    Pair k (storage indices 2k, 2k+1) holds sin and cos of
    pos / 10000^(2k / d_model).
    """
    if pos < 0:
        raise ValueError(f"position must be >= 0, got {pos}")
    k = np.arange(cfg.d_model // 2)
    arg = pos / np.power(10000.0, 2.0 * k / cfg.d_model)
    out = np.empty(cfg.d_model, dtype=np.float64)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


def rpe_embedding(i: int, l: int, cfg: SignalConfig) -> np.ndarray:
    """Reverse positional embedding: sinusoidal vector of the countdown l - i.

    The countdown saturates at zero, so decoding past the target length sees
    a constant "zero tokens remaining" signal (mirrors the ratio clip at 1).
    """
    if i < 0:
        raise ValueError(f"step index must be >= 0, got {i}")
    return sinusoidal_pe(max(l - i, 0), cfg)


def pre_embedding_array(r: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    """Vectorized pre_embedding: ratios of any shape -> shape + (d_model,)."""
    r = np.asarray(r, dtype=np.float64)
    a = np.arange(cfg.d_model)
    coeff = 2.0 * ((a + 1) // 2) / cfg.d_model
    arg = (r[..., None] * cfg.M) * coeff
    out = np.empty(r.shape + (cfg.d_model,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg[..., 0::2])
    out[..., 1::2] = np.cos(arg[..., 1::2])
    return out


def sinusoidal_pe_array(pos: np.ndarray, cfg: SignalConfig) -> np.ndarray:
    """Vectorized sinusoidal_pe: positions of any shape -> shape + (d_model,)."""
    pos = np.asarray(pos, dtype=np.float64)
    k = np.arange(cfg.d_model // 2)
    arg = pos[..., None] / np.power(10000.0, 2.0 * k / cfg.d_model)
    out = np.empty(pos.shape + (cfg.d_model,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def noisy_ratio(r: float, cfg: SignalConfig, noise_source) -> float:
    """Perturb a progress ratio with scaled standard-normal noise.

    Returns Clip(r + 2*delta/d_model, 0, 1) where delta is one draw from
    noise_source (anything with a standard_normal() method, e.g. a
    numpy Generator). Training-time regularizer; inference uses exact ratios.
    """
    delta = float(noise_source.standard_normal())
    return float(np.clip(r + 2.0 * delta / cfg.d_model, 0.0, 1.0))


def noisy_ratio_array(r: np.ndarray, cfg: SignalConfig, noise_source) -> np.ndarray:
    """Vectorized noisy_ratio: one independent delta per entry of r."""
    delta = noise_source.standard_normal(size=r.shape)
    return np.clip(r + 2.0 * delta / cfg.d_model, 0.0, 1.0)


def impatience_signal(omega: float, x: float) -> tuple[float, float]:
    """One sample of the periodic impatience signal: (cos(w*x), sin(w*x)).

    Diagnostic helper for plotting signal curves at fixed pulsations.
    """
    if omega < 0:
        raise ValueError(f"pulsation must be >= 0, got {omega}")
    return (math.cos(omega * x), math.sin(omega * x))


def max_signal_frequency(cfg: SignalConfig) -> NyquistReport:
    """Highest per-unit-ratio frequency the embedding must represent.

    The pulsation peaks at M (ratio 1), giving F_max = M / (2*pi). The
    component grid samples at F_s = d_model / 2, so the configuration is
    admissible iff F_max <= F_s / 2. The report carries the verdict instead
    of raising, so boundary experiments can inspect violations.
    """
    f_max = cfg.M / (2.0 * math.pi)
    f_s = cfg.d_model / 2.0
    return NyquistReport(f_max=f_max, f_s=f_s, satisfied=f_max <= f_s / 2.0)
