"""Audio, mel-spectrogram, and frame-directory I/O.

File contracts:
  - audio: mono 16-bit PCM WAV (stereo rejected)
  - video: a directory of PNG frames, lexicographically ordered, 25 fps
  - mel: 80 log-mel bands, 40 ms window / 10 ms hop; each video frame t is
    conditioned on mel rows [5t, 5t+20), zero-padded past the end
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_SAMPLE_RATE = 16_000
MEL_BANDS = 80
MEL_WIN_MS = 40
MEL_HOP_MS = 10
# 200 ms of mel context per video frame, starting at row 5t
MEL_WINDOW_FRAMES = 20
MEL_ROWS_PER_VIDEO_FRAME = 5
VIDEO_FPS = 25


@dataclass
class AudioTrack:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T_mel, 80] log energies
    hop_ms: int = MEL_HOP_MS
    win_ms: int = MEL_WIN_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != MEL_BANDS:
            raise ValueError(f"mel matrix must be [T, {MEL_BANDS}], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("mel matrix must have at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel entries must be finite")


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    fps: int = VIDEO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be [T, H, W, 3], got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


def load_audio(path: str | Path) -> AudioTrack:
    """Read a mono 16-bit PCM WAV file, normalizing samples to [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"mono required: {path} has {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"16-bit PCM required: {path} has {8 * wf.getsampwidth()}-bit samples")
        sr = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioTrack(samples=samples, sample_rate=sr)


def save_audio(track: AudioTrack, path: str | Path) -> None:
    """Write a mono 16-bit PCM WAV file."""
    quantized = np.clip(np.rint(track.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(track.sample_rate)
        wf.writeframes(quantized.tobytes())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = MEL_BANDS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank, [n_mels, n_fft//2 + 1]."""
    fmax = fmax if fmax is not None else sample_rate / 2.0
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    hz_pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (freqs - lo) / max(center - lo, 1e-10)
        falling = (hi - freqs) / max(hi - center, 1e-10)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_frame_count(n_samples: int, sample_rate: int) -> int:
    """1 + floor((len - win) / hop); callers must ensure len >= win."""
    win = sample_rate * MEL_WIN_MS // 1000
    hop = sample_rate * MEL_HOP_MS // 1000
    return 1 + (n_samples - win) // hop


def extract_mel(audio: AudioTrack, n_fft: int | None = None,
                fmin: float = 0.0, fmax: float | None = None,
                log_floor: float = 1e-10) -> MelSpectrogram:
    """80-band log-mel spectrogram (Hann window, power spectrum, natural log).

    Frame i covers samples [i*hop, i*hop + win). Deterministic for fixed input.
    """
    sr = audio.sample_rate
    win = sr * MEL_WIN_MS // 1000
    hop = sr * MEL_HOP_MS // 1000
    x = audio.samples
    if len(x) < win:
        raise ValueError(f"audio shorter than one {MEL_WIN_MS} ms window ({win} samples)")
    n_frames = mel_frame_count(len(x), sr)
    if n_fft is None:
        n_fft = 1 << int(np.ceil(np.log2(win)))
    window = np.hanning(win)
    idx = hop * np.arange(n_frames)[:, None] + np.arange(win)[None, :]
    power = np.abs(np.fft.rfft(x[idx] * window, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(sr, n_fft, MEL_BANDS, fmin, fmax)
    mel = power @ fb.T
    return MelSpectrogram(frames=np.log(np.maximum(mel, log_floor)))


def mel_window_for_frame(mel: MelSpectrogram, t: int) -> np.ndarray:
    """Mel rows [5t, 5t+20) for video frame t; rows past the end are zero.

    Always returns a [20, 80] matrix.
    """
    if t < 0:
        raise ValueError(f"frame index must be >= 0, got {t}")
    start = MEL_ROWS_PER_VIDEO_FRAME * t
    out = np.zeros((MEL_WINDOW_FRAMES, MEL_BANDS), dtype=np.float64)
    chunk = mel.frames[start:start + MEL_WINDOW_FRAMES]
    out[:chunk.shape[0]] = chunk
    return out


# ---------------------------------------------------------------------------
# frame-directory I/O

def load_image(path: str | Path) -> np.ndarray:
    """PNG/JPEG -> float32 [H, W, 3] in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_frames_dir(path: str | Path, fps: int = VIDEO_FPS) -> VideoClip:
    path = Path(path)
    files = sorted(p for p in path.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no frames found in {path}")
    images = [load_image(p) for p in files]
    if len({im.shape for im in images}) > 1:
        raise ValueError(f"frames in {path} have mixed sizes")
    return VideoClip(frames=np.stack(images), fps=fps)


def save_frames_dir(frames: np.ndarray, path: str | Path) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(frames):
        out = path / f"{i:06d}.png"
        save_image(frame, out)
        written.append(out)
    return written
