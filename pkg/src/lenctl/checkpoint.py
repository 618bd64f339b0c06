"""Checkpoint I/O: `LENCTL1` header, key=value config lines, raw float32 data.

Layout: a magic line, one key=value line per ModelConfig/SignalConfig field,
a blank line, then every parameter concatenated as little-endian 32-bit
floats in the canonical init_parameters() order. Round-trips are bit-exact
for float32 models; other dtypes pass through float32 on save by design.

The key=value line format (parse_kv / format_kv) is shared with experiment
plan files.
"""

from __future__ import annotations

import numpy as np

from .compute import Tensor
from .model import LengthControlMode, ModelConfig, init_parameters
from .signals import SignalConfig

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "format_kv", "parse_kv"]

MAGIC = "LENCTL1"


def format_kv(items: dict[str, object]) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def _config_items(cfg: ModelConfig) -> dict[str, object]:
    return {
        "d_model": cfg.d_model,
        "n_heads": cfg.n_heads,
        "n_enc_layers": cfg.n_enc_layers,
        "n_dec_layers": cfg.n_dec_layers,
        "d_ff": cfg.d_ff,
        "vocab_size": cfg.vocab_size,
        "max_positions": cfg.max_positions,
        "mode": cfg.mode.value,
        "laam_boost": float(cfg.laam_boost),
        "ln_eps": float(cfg.ln_eps),
        "activation": cfg.activation,
        "signal_d_model": cfg.signal.d_model,
        "signal_m": float(cfg.signal.M),
        "signal_noise_enabled": cfg.signal.noise_enabled,
        "signal_rng_seed": cfg.signal.rng_seed,
    }


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    def b(s: str) -> bool:
        return s.lower() == "true"

    signal = SignalConfig(
        d_model=int(kv["signal_d_model"]),
        M=float(kv["signal_m"]),
        noise_enabled=b(kv["signal_noise_enabled"]),
        rng_seed=int(kv["signal_rng_seed"]),
    )
    return ModelConfig(
        d_model=int(kv["d_model"]),
        n_heads=int(kv["n_heads"]),
        n_enc_layers=int(kv["n_enc_layers"]),
        n_dec_layers=int(kv["n_dec_layers"]),
        d_ff=int(kv["d_ff"]),
        vocab_size=int(kv["vocab_size"]),
        max_positions=int(kv["max_positions"]),
        mode=LengthControlMode(kv["mode"]),
        signal=signal,
        laam_boost=float(kv["laam_boost"]),
        ln_eps=float(kv["ln_eps"]),
        activation=kv["activation"],
    )


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    header = MAGIC + "\n" + format_kv(_config_items(cfg)) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for t in params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig]:
    """Rebuild parameters (float32) and config from a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing blank line after checkpoint header")
    header = blob[:sep].decode("ascii")
    lines = header.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: bad magic, expected {MAGIC!r}")
    cfg = config_from_kv(parse_kv("\n".join(lines[1:])))
    params = init_parameters(cfg, seed=0, dtype=np.float32)
    raw = blob[sep + 2 :]
    expected = sum(t.data.size for t in params.values()) * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: parameter payload is {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4")
    offset = 0
    for t in params.values():
        n = t.data.size
        t.data = flat[offset : offset + n].reshape(t.data.shape).astype(np.float32)
        offset += n
    return params, cfg
