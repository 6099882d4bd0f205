"""Training configuration: documented defaults, key=value file parsing, hashing."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    """Every knob the pipeline exposes; all values are numeric.

    Defaults target desk-scale runs (64x64 frames, small widths).
    """

    # total objective: recon + lambda_s * spatial-adv + lambda_t * temporal-adv
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    # condition volume spans frames t-p .. t+p
    temporal_half_window_p: int = 1
    # shared embedding width (stage-1 fusion space, stage-2 appearance vector)
    embed_dim: int = 256
    image_size: int = 64
    unet_depth: int = 4
    base_channels: int = 64
    adain_blocks: int = 2
    # frames stacked for the temporal discriminator
    disc_temporal_window: int = 3
    # 1 = discriminators see (composite, image) pairs, 0 = image alone
    conditional_disc: int = 1
    # stage-1 generator internals
    mel_channels: int = 32
    encoder_hidden: int = 256
    decoder_channels: int = 64
    # consecutive frames per stage-1 training sample (temporal smoothing context)
    seq_len: int = 5
    # reference landmark frames sampled per stage-1 sample; 0 = use 16 (batch cap)
    ref_sample_count: int = 16
    # lower-face mask expansion, fraction of the landmark bounding box
    mask_margin: float = 0.1
    # optimizers
    stage1_lr: float = 1e-4
    stage2_lr_g: float = 2e-4
    stage2_lr_d: float = 2e-4
    batch_size: int = 16
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    finetune_steps: int = 500
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"config field {f.name!r} must be finite, got {v!r}")
        if self.image_size % (2 ** self.unet_depth) != 0:
            raise ValueError(
                f"image_size {self.image_size} must be a multiple of "
                f"2^unet_depth = {2 ** self.unet_depth}"
            )
        for name in ("lambda_s", "lambda_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temporal_half_window_p < 0:
            raise ValueError("temporal_half_window_p must be >= 0")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be > 0")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: non-numeric value {raw!r}") from None


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a key=value config file; unknown keys are rejected, missing keys default.

    Lines starting with '#' and blank lines are ignored.
    """
    cfg = TrainConfig(**asdict(base)) if base is not None else TrainConfig()
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: malformed line (expected key=value): {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def config_hash(cfg: TrainConfig) -> str:
    """Stable digest of a config, stored in checkpoints."""
    blob = ",".join(f"{k}={v!r}" for k, v in sorted(asdict(cfg).items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
