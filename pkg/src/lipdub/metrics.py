"""Evaluation metrics: SSIM, PSNR, perceptual distance, Fréchet distances.

All image arguments are [H, W, 3] (or [H, W]) arrays in [0, 1]. The NME
landmark metric lives in `lipdub.landmarks` and is re-exported here so the
whole metric roster imports from one place.

Definitions pinned for reproducibility:
  - SSIM: 11x11 Gaussian window (sigma 1.5) applied at every pixel with
    reflect padding; K1=0.01, K2=0.03, dynamic range 1.0; inputs converted to
    BT.601 luma; the reported value is the mean of the SSIM map.
  - PSNR: 10*log10(1/MSE) for [0,1] images, capped at 100 dB (exactly 100 for
    identical inputs).
  - Perceptual distance: LPIPS-style layer-weighted mean squared difference
    of channel-unit-normalized extractor features.
  - Temporal Fréchet: features of channel-stacked consecutive-frame windows,
    one Gaussian fit per clip set, Fréchet distance between the fits.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.ndimage
import torch

from .features import RandomFeatureNet
from .landmarks import load_landmark_track, nme
from .media import load_frames_dir

__all__ = [
    "ssim", "psnr", "perceptual_distance", "frechet_distance", "temporal_fid",
    "evaluate", "MetricReport", "nme",
]

PSNR_CAP_DB = 100.0


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"expected [H, W] or [H, W, 3] image, got {img.shape}")


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Windowed structural similarity; symmetric, 1.0 for identical images."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError(f"shape mismatch: {np.asarray(a).shape} vs {np.asarray(b).shape}")
    x, y = _to_gray(a), _to_gray(b)
    kernel = gaussian_kernel(window_size, sigma)
    blur = lambda im: scipy.ndimage.correlate(im, kernel, mode="reflect")
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _img_to_batch(img: np.ndarray) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def _unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f ** 2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor=None,
                        layer_weights=None) -> float:
    """Layer-weighted mean squared difference of unit-normalized features."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError(f"shape mismatch: {np.asarray(a).shape} vs {np.asarray(b).shape}")
    extractor = extractor or _default_frame_extractor()
    with torch.no_grad():
        fa = extractor(_img_to_batch(a))
        fb = extractor(_img_to_batch(b))
    if layer_weights is None:
        layer_weights = [1.0] * len(fa)
    if len(layer_weights) != len(fa):
        raise ValueError(f"{len(layer_weights)} weights for {len(fa)} extractor layers")
    total = 0.0
    for w, la, lb in zip(layer_weights, fa, fb):
        d = (_unit_normalize(la) - _unit_normalize(lb)) ** 2
        total += w * float(d.mean())
    return total


def frechet_distance(mu1, cov1, mu2, cov2, psd_tol: float = 1e-6) -> float:
    """||mu1-mu2||^2 + tr(C1 + C2 - 2 sqrt(C1 C2)) between two Gaussians."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    for name, c in (("cov1", cov1), ("cov2", cov2)):
        if not np.allclose(c, c.T, atol=1e-8):
            raise ValueError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(c).min() < -psd_tol:
            raise ValueError(f"{name} is not positive semidefinite within tolerance")
    diff = mu1 - mu2
    covmean = scipy.linalg.sqrtm(cov1 @ cov2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    covmean = (covmean + covmean.T) / 2.0  # symmetric projection
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(val, 0.0)


def _fit_gaussian(feats: np.ndarray, shrinkage: float = 1e-6):
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov) + shrinkage * np.eye(feats.shape[1])
    return mu, cov


def _window_features(videos, extractor, window: int) -> np.ndarray:
    vecs = []
    for clip in videos:
        clip = np.asarray(clip, dtype=np.float32)
        T = clip.shape[0]
        if T < window:
            raise ValueError(f"clip with {T} frames is shorter than window {window}")
        for t in range(T - window + 1):
            stacked = np.concatenate(list(clip[t:t + window]), axis=-1)  # [H, W, 3w]
            with torch.no_grad():
                feats = extractor(_img_to_batch(stacked))
            vecs.append(feats[-1].mean(dim=(2, 3)).squeeze(0).numpy())
    return np.stack(vecs)


def temporal_fid(videos_a, videos_b, extractor=None, window: int = 3,
                 shrinkage: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits over stacked-frame window features.

    window=1 degenerates to a frame-level Fréchet metric. Covariances get a
    small diagonal shrinkage so tiny clip sets stay well conditioned.
    """
    if len(videos_a) < 2 or len(videos_b) < 2:
        raise ValueError("temporal_fid needs at least 2 clips per set")
    if extractor is None:
        extractor = RandomFeatureNet(in_channels=3 * window, seed=0)
    fa = _window_features(videos_a, extractor, window)
    fb = _window_features(videos_b, extractor, window)
    return frechet_distance(*_fit_gaussian(fa, shrinkage), *_fit_gaussian(fb, shrinkage))


_frame_extractor_cache: dict[int, RandomFeatureNet] = {}


def _default_frame_extractor() -> RandomFeatureNet:
    if 3 not in _frame_extractor_cache:
        _frame_extractor_cache[3] = RandomFeatureNet(in_channels=3, seed=0)
    return _frame_extractor_cache[3]


# ---------------------------------------------------------------------------
# run-directory evaluation

@dataclass
class MetricReport:
    """Per-video values plus their arithmetic-mean aggregates."""

    metrics: dict[str, dict] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, name: str, per_video: dict[str, float]) -> None:
        mean = float(np.mean(list(per_video.values()))) if per_video else float("nan")
        self.metrics[name] = {"per_video": per_video, "mean": mean}

    def add_scalar(self, name: str, value: float) -> None:
        self.metrics[name] = {"per_video": {}, "mean": float(value)}

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as f:
            json.dump({"metrics": self.metrics, "counts": self.counts,
                       "config": self.config}, f, indent=1)
        with open(out_dir / "report.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["metric", "video", "value"])
            for name, entry in self.metrics.items():
                for vid, value in entry["per_video"].items():
                    writer.writerow([name, vid, value])
                writer.writerow([name, "mean", entry["mean"]])


def _clip_ids(run_dir: Path, sub: str) -> list[str]:
    root = run_dir / sub
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def evaluate(run_dir: str | Path, mode: str = "paired", extractor=None,
             temporal_window: int = 3, out_dir: str | Path | None = None) -> MetricReport:
    """Score a run directory and write report.json / report.csv.

    Layout: generated/<clip>/ holds output frames; paired mode also needs
    gt/<clip>/ with matching frame counts; unpaired mode compares against
    real/<clip>/ (falling back to gt/ when absent). Landmark tracks under
    landmarks_pred/<clip>.json and landmarks_gt/<clip>.json switch on NME.
    """
    if mode not in ("paired", "unpaired"):
        raise ValueError(f"mode must be 'paired' or 'unpaired', got {mode!r}")
    run_dir = Path(run_dir)
    gen_ids = _clip_ids(run_dir, "generated")
    if not gen_ids:
        raise FileNotFoundError(f"no generated clips under {run_dir / 'generated'}")
    report = MetricReport(config={"mode": mode, "temporal_window": temporal_window})
    report.counts["generated_clips"] = len(gen_ids)

    gen_clips = {cid: load_frames_dir(run_dir / "generated" / cid).frames for cid in gen_ids}

    if mode == "paired":
        gt_ids = _clip_ids(run_dir, "gt")
        missing = [cid for cid in gen_ids if cid not in gt_ids]
        if missing:
            raise FileNotFoundError(
                f"paired mode requires ground truth; missing gt clips: {missing}")
        gt_clips = {cid: load_frames_dir(run_dir / "gt" / cid).frames for cid in gen_ids}
        ssim_pv, psnr_pv, lpips_pv = {}, {}, {}
        for cid in gen_ids:
            gen, gt = gen_clips[cid], gt_clips[cid]
            if gen.shape != gt.shape:
                raise ValueError(f"clip {cid!r}: generated {gen.shape} vs gt {gt.shape}")
            ssim_pv[cid] = float(np.mean([ssim(g, r) for g, r in zip(gen, gt)]))
            psnr_pv[cid] = float(np.mean([psnr(g, r) for g, r in zip(gen, gt)]))
            lpips_pv[cid] = float(np.mean(
                [perceptual_distance(g, r, extractor) for g, r in zip(gen, gt)]))
        report.add("ssim", ssim_pv)
        report.add("psnr", psnr_pv)
        report.add("perceptual", lpips_pv)

        pred_lm = run_dir / "landmarks_pred"
        gt_lm = run_dir / "landmarks_gt"
        if pred_lm.is_dir() and gt_lm.is_dir():
            nme_pv = {}
            for cid in gen_ids:
                pp, gp = pred_lm / f"{cid}.json", gt_lm / f"{cid}.json"
                if pp.exists() and gp.exists():
                    nme_pv[cid] = nme(load_landmark_track(pp).frames,
                                      load_landmark_track(gp).frames)
            if nme_pv:
                report.add("nme", nme_pv)

        if len(gen_ids) >= 2:
            report.add_scalar("temporal_fid", temporal_fid(
                [gen_clips[c] for c in gen_ids], [gt_clips[c] for c in gen_ids],
                extractor=None, window=temporal_window))
    else:
        ref_sub = "real" if (run_dir / "real").is_dir() else "gt"
        ref_ids = _clip_ids(run_dir, ref_sub)
        if len(ref_ids) < 2 or len(gen_ids) < 2:
            raise FileNotFoundError(
                f"unpaired mode needs >= 2 generated and >= 2 {ref_sub}/ clips")
        ref_clips = [load_frames_dir(run_dir / ref_sub / cid).frames for cid in ref_ids]
        report.add_scalar("temporal_fid", temporal_fid(
            [gen_clips[c] for c in gen_ids], ref_clips,
            extractor=None, window=temporal_window))

    report.save(out_dir if out_dir is not None else run_dir)
    return report
