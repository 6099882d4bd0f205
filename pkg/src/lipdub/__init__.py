"""Two-stage few-shot visual dubbing.

Stage 1 predicts lip-synced lower-face landmarks from mel-spectrogram windows,
an upper-face pose prior, and reference landmarks. Stage 2 translates masked
composites carrying those landmarks into realistic lower faces, modulated by
an appearance embedding, and composites the result back over the source video.
The two stages train independently, so audio-only-usable and picture-only-
usable corpora can each feed the stage they serve.
"""

from .config import TrainConfig, config_hash, load_config
from .landmarks import (
    LandmarkPartition,
    LandmarkTrack,
    composite_output,
    default_partition,
    load_landmark_track,
    lower_half_mask,
    make_composite,
    merge_landmarks,
    nme,
    rasterize_landmarks,
    save_landmark_track,
    split_landmarks,
)
from .media import (
    AudioTrack,
    MelSpectrogram,
    VideoClip,
    extract_mel,
    load_audio,
    mel_window_for_frame,
)

__all__ = [
    "AudioTrack",
    "LandmarkPartition",
    "LandmarkTrack",
    "MelSpectrogram",
    "TrainConfig",
    "VideoClip",
    "composite_output",
    "config_hash",
    "default_partition",
    "extract_mel",
    "load_audio",
    "load_config",
    "load_landmark_track",
    "lower_half_mask",
    "make_composite",
    "mel_window_for_frame",
    "merge_landmarks",
    "nme",
    "rasterize_landmarks",
    "save_landmark_track",
    "split_landmarks",
]

__version__ = "0.1.0"
