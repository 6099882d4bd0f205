"""Dataset manifests and training corpora.

A manifest entry carries whatever modalities a clip actually has. Landmarks
are always required; audio and frames are each optional, and each training
stage filters to the entries carrying the modality it needs. Stage 1 never
touches frame paths and stage 2 never touches audio paths, which is what lets
audio-only-usable and picture-only-usable footage coexist in one manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .landmarks import (LandmarkPartition, default_partition, load_landmark_track,
                        lower_half_mask, make_composite)
from .media import (MelSpectrogram, extract_mel, load_audio, load_frames_dir,
                    mel_window_for_frame)

MANIFEST_FORMAT = "lipdub.manifest"


class EligibilityError(RuntimeError):
    """No manifest entry carries the modalities a command needs (exit code 2)."""


@dataclass
class ManifestEntry:
    clip_id: str
    speaker_id: str
    landmarks_path: str
    frames_dir: str | None = None
    audio_path: str | None = None
    mel_cache: str | None = None

    @property
    def stage1_eligible(self) -> bool:
        return self.audio_path is not None or self.mel_cache is not None

    @property
    def stage2_eligible(self) -> bool:
        return self.frames_dir is not None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def stage1_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.stage1_eligible]

    def stage2_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.stage2_eligible]

    def save(self, path: str | Path) -> None:
        doc = {"format": MANIFEST_FORMAT,
               "entries": [vars(e) for e in self.entries]}
        with open(path, "w") as f:
            json.dump(doc, f, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path} is not a dataset manifest")
        return cls(entries=[ManifestEntry(**e) for e in doc["entries"]])


def cache_dir_for(manifest_path: str | Path) -> Path:
    """Mel cache location: $LIPDUB_CACHE_DIR or .mel_cache next to the manifest."""
    env = os.environ.get("LIPDUB_CACHE_DIR")
    if env:
        return Path(env)
    return Path(manifest_path).resolve().parent / ".mel_cache"


def prepare_manifest(raw_dir: str | Path, out_path: str | Path,
                     cache_dir: str | Path | None = None) -> DatasetManifest:
    """Scan per-clip subdirectories and write a validated manifest.

    Expected layout per clip: <raw>/<clip_id>/ containing landmarks.json
    (required), audio.wav (optional), frames/ (optional), speaker.txt
    (optional; clip id is the fallback speaker). Mel matrices for every
    audio-bearing clip are computed once and cached as .npy.
    """
    raw_dir = Path(raw_dir)
    cache = Path(cache_dir) if cache_dir is not None else cache_dir_for(out_path)
    entries = []
    for clip_dir in sorted(p for p in raw_dir.iterdir() if p.is_dir()):
        clip_id = clip_dir.name
        landmarks = clip_dir / "landmarks.json"
        if not landmarks.exists():
            raise FileNotFoundError(f"clip {clip_id!r}: missing landmarks.json")
        load_landmark_track(landmarks)  # validates point counts and ranges
        audio = clip_dir / "audio.wav"
        frames = clip_dir / "frames"
        has_audio, has_frames = audio.exists(), frames.is_dir()
        if not has_audio and not has_frames:
            raise ValueError(
                f"clip {clip_id!r} has neither audio nor frames; nothing can train on it")
        speaker_file = clip_dir / "speaker.txt"
        speaker = speaker_file.read_text().strip() if speaker_file.exists() else clip_id
        mel_cache = None
        if has_audio:
            cache.mkdir(parents=True, exist_ok=True)
            mel_cache = cache / f"{clip_id}.npy"
            np.save(mel_cache, extract_mel(load_audio(audio)).frames)
        entries.append(ManifestEntry(
            clip_id=clip_id, speaker_id=speaker,
            landmarks_path=str(landmarks),
            frames_dir=str(frames) if has_frames else None,
            audio_path=str(audio) if has_audio else None,
            mel_cache=str(mel_cache) if mel_cache else None))
    manifest = DatasetManifest(entries=entries)
    manifest.save(out_path)
    return manifest


# ---------------------------------------------------------------------------
# stage-1 corpus: mel windows + landmarks, no pixels

@dataclass
class Stage1Clip:
    mel: np.ndarray    # [T_mel, 80]
    track: np.ndarray  # [T, 216, 2]
    speaker: str = ""


class Stage1Dataset:
    """Samples (mel windows, upper landmarks, reference frames, gt lower landmarks)."""

    def __init__(self, clips: list[Stage1Clip], cfg: TrainConfig,
                 partition: LandmarkPartition | None = None):
        self.part = partition or default_partition()
        self.cfg = cfg
        self.clips = [c for c in clips if c.track.shape[0] >= cfg.seq_len]
        self.seq_len = cfg.seq_len
        self.ref_count = cfg.ref_sample_count if cfg.ref_sample_count > 0 else 16
        # mel windows per frame, precomputed once
        self._windows = []
        for c in self.clips:
            mel = MelSpectrogram(frames=c.mel)
            T = c.track.shape[0]
            self._windows.append(np.stack(
                [mel_window_for_frame(mel, t) for t in range(T)]).astype(np.float32))

    def __len__(self) -> int:
        return len(self.clips)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, cfg: TrainConfig,
                      partition: LandmarkPartition | None = None) -> "Stage1Dataset":
        clips = []
        for entry in manifest.stage1_entries():
            if entry.mel_cache and Path(entry.mel_cache).exists():
                mel = np.load(entry.mel_cache)
            else:
                mel = extract_mel(load_audio(entry.audio_path)).frames
            track = load_landmark_track(entry.landmarks_path)
            clips.append(Stage1Clip(mel=mel, track=track.frames, speaker=entry.speaker_id))
        if not clips:
            raise EligibilityError(
                "no stage-1-eligible entries: every clip lacks audio "
                f"({len(manifest.entries)} entries checked)")
        return cls(clips, cfg, partition)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        mels, uppers, refs, lowers = [], [], [], []
        for _ in range(batch_size):
            ci = int(rng.integers(len(self.clips)))
            clip = self.clips[ci]
            T = clip.track.shape[0]
            start = int(rng.integers(T - self.seq_len + 1))
            sl = slice(start, start + self.seq_len)
            mels.append(self._windows[ci][sl])
            uppers.append(clip.track[sl][:, self.part.upper_indices])
            lowers.append(clip.track[sl][:, self.part.lower_indices])
            ref_idx = rng.choice(T, size=self.ref_count, replace=T < self.ref_count)
            refs.append(clip.track[ref_idx])
        to = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)
        return to(mels), to(uppers), to(refs), to(lowers)


# ---------------------------------------------------------------------------
# stage-2 corpus: frames + landmarks, no audio

@dataclass
class Stage2Clip:
    frames: np.ndarray  # [T, H, W, 3] float32
    track: np.ndarray   # [T, 216, 2]
    speaker: str = ""


class Stage2Dataset:
    """Samples condition volumes, targets, masks, and reference frames.

    Composites and masks come from the ground-truth landmark track and are
    precomputed per frame; reference frames are drawn from the same clip at a
    different timestep than the target.
    """

    def __init__(self, clips: list[Stage2Clip], cfg: TrainConfig,
                 partition: LandmarkPartition | None = None):
        self.part = partition or default_partition()
        self.cfg = cfg
        self.p = cfg.temporal_half_window_p
        self.window = cfg.disc_temporal_window
        self.clips = [c for c in clips if c.frames.shape[0] >= 2]
        self.composites, self.masks = [], []
        for c in self.clips:
            H, W = c.frames.shape[1:3]
            if H != cfg.image_size or W != cfg.image_size:
                raise ValueError(
                    f"stage-2 frames must be {cfg.image_size}x{cfg.image_size}, got {H}x{W}")
            comps, masks = [], []
            for t in range(c.frames.shape[0]):
                frame_lm = c.track[t]
                mask = lower_half_mask(frame_lm, (H, W), self.part, margin=cfg.mask_margin)
                comp = make_composite(c.frames[t], frame_lm[self.part.lower_indices],
                                      self.part, mask=mask)
                comps.append(comp.image.astype(np.float32))
                masks.append(mask)
            self.composites.append(np.stack(comps))
            self.masks.append(np.stack(masks))

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def num_speakers(self) -> int:
        return len({c.speaker for c in self.clips})

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, cfg: TrainConfig,
                      partition: LandmarkPartition | None = None,
                      speaker: str | None = None) -> "Stage2Dataset":
        clips = []
        for entry in manifest.stage2_entries():
            if speaker is not None and entry.speaker_id != speaker:
                continue
            video = load_frames_dir(entry.frames_dir)
            track = load_landmark_track(entry.landmarks_path)
            if len(track) != len(video):
                raise ValueError(
                    f"clip {entry.clip_id!r}: {len(video)} frames vs {len(track)} landmark frames")
            clips.append(Stage2Clip(frames=video.frames, track=track.frames,
                                    speaker=entry.speaker_id))
        if not clips:
            raise EligibilityError(
                "no stage-2-eligible entries: every clip lacks frames "
                f"({len(manifest.entries)} entries checked)")
        return cls(clips, cfg, partition)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        from .translate import build_condition_volume

        half = self.window // 2
        out = {k: [] for k in ("volume", "target", "mask", "composite",
                               "reference", "temporal_real")}
        for _ in range(batch_size):
            ci = int(rng.integers(len(self.clips)))
            clip, comps = self.clips[ci], self.composites[ci]
            T = clip.frames.shape[0]
            t = int(rng.integers(T))
            t_ref = int(rng.integers(T - 1))
            if t_ref >= t:  # reference is a different frame of the same clip
                t_ref += 1
            out["volume"].append(build_condition_volume(comps, t, self.p))
            out["target"].append(clip.frames[t])
            out["mask"].append(self.masks[ci][t][..., None].astype(np.float32))
            out["composite"].append(comps[t])
            out["reference"].append(clip.frames[t_ref])
            stack_idx = np.clip(np.arange(t - half, t - half + self.window), 0, T - 1)
            out["temporal_real"].append(
                np.concatenate([clip.frames[j] for j in stack_idx], axis=-1))
        # HWC float -> BCHW tensors
        return {k: torch.as_tensor(np.stack(v), dtype=torch.float32).permute(0, 3, 1, 2)
                for k, v in out.items()}
