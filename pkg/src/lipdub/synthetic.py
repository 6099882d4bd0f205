"""Synthetic talking-face toy data.

Generates schematic 216-point faces whose jaw drop and lip opening follow the
energy envelope of a generated audio track, plus rendered frames, so both
training stages have a small fully-determined corpus to learn and tests have
ground truth with known structure. Openness is derived from the same mel
windows the model conditions on, making the audio-to-landmark mapping exactly
learnable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .landmarks import LandmarkPartition, LandmarkTrack, default_partition, save_landmark_track
from .media import (AudioTrack, DEFAULT_SAMPLE_RATE, MEL_ROWS_PER_VIDEO_FRAME,
                    MEL_WINDOW_FRAMES, extract_mel, mel_window_for_frame,
                    save_audio, save_frames_dir)


@dataclass
class SpeakerStyle:
    """Per-speaker rendering and geometry parameters."""

    f0: float = 220.0
    scale: float = 1.0
    background: tuple = (40, 60, 90)
    skin: tuple = (205, 170, 140)
    lip: tuple = (150, 60, 60)

    @classmethod
    def preset(cls, index: int) -> "SpeakerStyle":
        presets = [
            cls(),
            cls(f0=330.0, scale=0.9, background=(70, 45, 45),
                skin=(170, 140, 120), lip=(120, 40, 70)),
            cls(f0=275.0, scale=1.05, background=(45, 75, 55),
                skin=(225, 195, 165), lip=(170, 80, 50)),
        ]
        return presets[index % len(presets)]


def _arc(n, cx, cy, rx, ry, a0, a1):
    theta = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(theta), cy + ry * np.sin(theta)], axis=1)


def synth_landmark_frame(openness: float, dx: float = 0.0, dy: float = 0.0,
                         scale: float = 1.0,
                         partition: LandmarkPartition | None = None) -> np.ndarray:
    """One schematic face frame; `openness` in [0, 1] drives jaw and lips."""
    part = partition or default_partition()
    cx, cy = 0.5 + dx, 0.44 + dy
    s = scale
    pts = np.zeros((216, 2))

    def put(region, array):
        pts[part.regions[region]] = array

    n = lambda r: len(part.regions[r])
    # y grows downward: the top of the head is at negative sine
    put("upper_contour", _arc(n("upper_contour"), cx, cy, 0.24 * s, 0.30 * s,
                              np.pi, 2 * np.pi))
    put("right_eyebrow", _arc(n("right_eyebrow"), cx - 0.10 * s, cy - 0.09 * s,
                              0.055 * s, 0.025 * s, np.pi * 1.15, np.pi * 1.85))
    put("left_eyebrow", _arc(n("left_eyebrow"), cx + 0.10 * s, cy - 0.09 * s,
                             0.055 * s, 0.025 * s, np.pi * 1.15, np.pi * 1.85))
    put("right_eye", _arc(n("right_eye"), cx - 0.10 * s, cy - 0.035 * s,
                          0.045 * s, 0.022 * s, 0.0, 2 * np.pi))
    put("left_eye", _arc(n("left_eye"), cx + 0.10 * s, cy - 0.035 * s,
                         0.045 * s, 0.022 * s, 0.0, 2 * np.pi))
    bridge_y = np.linspace(cy - 0.02 * s, cy + 0.09 * s, n("nose_bridge"))
    put("nose_bridge", np.stack([np.full_like(bridge_y, cx), bridge_y], axis=1))
    put("nose_base", _arc(n("nose_base"), cx, cy + 0.095 * s,
                          0.045 * s, 0.02 * s, 0.0, np.pi))
    chin = 0.30 * s + 0.05 * s * openness
    # sin is negative over (pi, 2pi); negating ry puts the arc below the face
    put("jaw", _arc(n("jaw"), cx, cy, 0.24 * s, -chin, np.pi, 2 * np.pi))
    mouth_y = cy + (0.185 + 0.02 * openness) * s
    put("outer_lip", _arc(n("outer_lip"), cx, mouth_y, 0.095 * s,
                          (0.015 + 0.045 * openness) * s, 0.0, 2 * np.pi))
    put("inner_lip", _arc(n("inner_lip"), cx, mouth_y, 0.055 * s,
                          (0.004 + 0.030 * openness) * s, 0.0, 2 * np.pi))
    return np.clip(pts, 0.0, 1.0)


def _polygon(draw: ImageDraw.ImageDraw, pts: np.ndarray, size: int, color) -> None:
    xy = [(float(x * (size - 1)), float(y * (size - 1))) for x, y in pts]
    draw.polygon(xy, fill=color)


def render_face_frame(frame: np.ndarray, size: int, style: SpeakerStyle,
                      partition: LandmarkPartition | None = None) -> np.ndarray:
    """Rasterize one landmark frame into a flat-shaded face image in [0, 1]."""
    part = partition or default_partition()
    img = Image.new("RGB", (size, size), style.background)
    draw = ImageDraw.Draw(img)
    reg = lambda name: frame[part.regions[name]]
    outline = np.concatenate([reg("upper_contour"), reg("jaw")[::-1]])
    _polygon(draw, outline, size, style.skin)
    for eye in ("right_eye", "left_eye"):
        _polygon(draw, reg(eye), size, (250, 250, 250))
        center = reg(eye).mean(axis=0) * (size - 1)
        r = max(1.0, 0.012 * size)
        draw.ellipse([center[0] - r, center[1] - r, center[0] + r, center[1] + r],
                     fill=(30, 30, 30))
    for brow in ("right_eyebrow", "left_eyebrow"):
        xy = [(float(x * (size - 1)), float(y * (size - 1))) for x, y in reg(brow)]
        draw.line(xy, fill=(60, 40, 30), width=max(1, size // 48))
    xy = [(float(x * (size - 1)), float(y * (size - 1))) for x, y in reg("nose_bridge")]
    draw.line(xy, fill=(140, 110, 90), width=max(1, size // 64))
    _polygon(draw, reg("outer_lip"), size, style.lip)
    _polygon(draw, reg("inner_lip"), size, (25, 10, 10))
    return np.asarray(img, dtype=np.float32) / 255.0


def synth_audio_for_frames(n_frames: int, seed: int, f0: float = 220.0,
                           sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioTrack:
    """Sine carrier under a smooth random envelope, long enough that every
    video frame's mel window [5t, 5t+20) is fully populated."""
    hop = sample_rate // 100
    win = 4 * hop
    rows_needed = MEL_ROWS_PER_VIDEO_FRAME * n_frames + MEL_WINDOW_FRAMES
    n_samples = (rows_needed - 1) * hop + win
    rng = np.random.default_rng(seed)
    t = np.arange(n_samples) / sample_rate
    env = np.zeros(n_samples)
    for _ in range(3):
        freq = rng.uniform(0.4, 1.8)
        env += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    env = 0.12 + 0.85 * (env - env.min()) / (env.max() - env.min() + 1e-12)
    samples = 0.8 * env * np.sin(2 * np.pi * f0 * t)
    return AudioTrack(samples=samples, sample_rate=sample_rate)


def openness_from_mel(mel, n_frames: int) -> np.ndarray:
    """Per-frame mouth openness in [0, 1] from mean mel-window energy."""
    energy = np.array([mel_window_for_frame(mel, t).mean() for t in range(n_frames)])
    lo, hi = energy.min(), energy.max()
    return (energy - lo) / (hi - lo + 1e-12)


@dataclass
class ToyClip:
    frames: np.ndarray | None  # [T, S, S, 3] or None for audio-only clips
    track: LandmarkTrack
    audio: AudioTrack | None
    mel: np.ndarray | None
    openness: np.ndarray
    speaker: str


def make_toy_clip(n_frames: int, image_size: int = 64, seed: int = 0,
                  speaker_index: int = 0, with_frames: bool = True,
                  with_audio: bool = True, clip_id: str = "clip") -> ToyClip:
    style = SpeakerStyle.preset(speaker_index)
    rng = np.random.default_rng(seed)
    if with_audio:
        audio = synth_audio_for_frames(n_frames, seed=seed, f0=style.f0)
        mel = extract_mel(audio)
        openness = openness_from_mel(mel, n_frames)
        mel_frames = mel.frames
    else:
        audio, mel_frames = None, None
        phase = rng.uniform(0, 2 * np.pi)
        openness = 0.5 + 0.5 * np.sin(np.linspace(0, 6 * np.pi, n_frames) + phase)
    # gentle head bob gives the pose encoder something to carry
    tt = np.arange(n_frames)
    dx = 0.015 * np.sin(2 * np.pi * tt / max(n_frames, 1) * 2 + rng.uniform(0, 6))
    dy = 0.012 * np.sin(2 * np.pi * tt / max(n_frames, 1) * 3 + rng.uniform(0, 6))
    track_frames = np.stack([
        synth_landmark_frame(float(openness[t]), float(dx[t]), float(dy[t]), style.scale)
        for t in range(n_frames)])
    track = LandmarkTrack(frames=track_frames, source_id=clip_id)
    frames = None
    if with_frames:
        frames = np.stack([render_face_frame(track_frames[t], image_size, style)
                           for t in range(n_frames)])
    return ToyClip(frames=frames, track=track, audio=audio, mel=mel_frames,
                   openness=openness, speaker=f"speaker{speaker_index}")


def write_toy_clip(clip: ToyClip, clip_dir: str | Path) -> Path:
    """Emit the raw on-disk layout `prepare` expects."""
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    save_landmark_track(clip.track, clip_dir / "landmarks.json")
    (clip_dir / "speaker.txt").write_text(clip.speaker + "\n")
    if clip.audio is not None:
        save_audio(clip.audio, clip_dir / "audio.wav")
    if clip.frames is not None:
        save_frames_dir(clip.frames, clip_dir / "frames")
    return clip_dir


def write_toy_dataset(root: str | Path, n_frames: int = 50, image_size: int = 64,
                      audio_clips: int = 1, video_clips: int = 2,
                      full_clips: int = 0, seed: int = 0) -> Path:
    """A small heterogeneous corpus: audio-only, video-only, and full clips."""
    root = Path(root)
    idx = 0
    for i in range(audio_clips):
        clip = make_toy_clip(n_frames, image_size, seed=seed + idx, speaker_index=idx,
                             with_frames=False, clip_id=f"audio{i:02d}")
        write_toy_clip(clip, root / f"audio{i:02d}")
        idx += 1
    for i in range(video_clips):
        clip = make_toy_clip(n_frames, image_size, seed=seed + idx, speaker_index=idx,
                             with_audio=False, clip_id=f"video{i:02d}")
        write_toy_clip(clip, root / f"video{i:02d}")
        idx += 1
    for i in range(full_clips):
        clip = make_toy_clip(n_frames, image_size, seed=seed + idx, speaker_index=idx,
                             clip_id=f"full{i:02d}")
        write_toy_clip(clip, root / f"full{i:02d}")
        idx += 1
    return root
