"""216-point landmark geometry: partition, rasterization, masking, compositing, NME.

Landmark frames are [216, 2] arrays of (x, y) in [0, 1] normalized image
coordinates (x across width, y down the height). The point schema lives in
data/face216.json: named regions with polyline connectivity, split into an
upper (pose) set and a lower (jaw + lips) set.

Pixel mapping used everywhere in this module: px = floor(x * (W - 1) + 0.5),
i.e. round-half-up onto the pixel grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

N_POINTS = 216


# ---------------------------------------------------------------------------
# partition schema

@dataclass(frozen=True)
class Polyline:
    indices: tuple[int, ...]
    closed: bool


class LandmarkPartition:
    """Upper/lower split plus drawing connectivity for the 216-point schema."""

    def __init__(self, schema: dict):
        if schema.get("n_points") != N_POINTS:
            raise ValueError(f"schema must describe {N_POINTS} points")
        self.regions: dict[str, np.ndarray] = {
            name: np.asarray(idx, dtype=np.int64) for name, idx in schema["regions"].items()
        }
        self.upper_indices = np.concatenate([self.regions[r] for r in schema["upper"]])
        self.lower_indices = np.concatenate([self.regions[r] for r in schema["lower"]])
        self.lip_indices = np.concatenate([self.regions[r] for r in schema["lips"]])
        self.jaw_indices = self.regions["jaw"]
        self.nose_base_indices = self.regions["nose_base"]
        self.polylines = [
            Polyline(indices=tuple(p["indices"]), closed=bool(p["closed"]))
            for p in schema["polylines"]
        ]
        self._check()

    def _check(self) -> None:
        upper, lower = set(self.upper_indices.tolist()), set(self.lower_indices.tolist())
        if upper & lower:
            raise ValueError("upper and lower index sets overlap")
        if upper | lower != set(range(N_POINTS)):
            raise ValueError("upper and lower index sets must cover 0..215")
        if not set(self.lip_indices.tolist()) <= lower:
            raise ValueError("lip indices must be a subset of lower indices")

    def lower_polylines(self) -> list[Polyline]:
        """Connectivity of the lower set, reindexed to positions within it."""
        pos = {int(g): i for i, g in enumerate(self.lower_indices)}
        out = []
        for line in self.polylines:
            if all(i in pos for i in line.indices):
                out.append(Polyline(tuple(pos[i] for i in line.indices), line.closed))
        return out


@lru_cache(maxsize=1)
def default_partition() -> LandmarkPartition:
    data = resources.files("lipdub").joinpath("data/face216.json").read_text()
    return LandmarkPartition(json.loads(data))


# ---------------------------------------------------------------------------
# landmark frames and tracks

def validate_frame(points: np.ndarray, want: int = N_POINTS) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.shape != (want, 2):
        raise ValueError(f"landmark frame must have exactly {want} points, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("landmark coordinates must be finite")
    return points


@dataclass
class LandmarkTrack:
    frames: np.ndarray  # [T, 216, 2] float64, coordinates in [0, 1]
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.size == 0:
            self.frames = self.frames.reshape(0, N_POINTS, 2)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_POINTS, 2):
            raise ValueError(f"track must be [T, {N_POINTS}, 2], got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


def load_landmark_track(path: str | Path) -> LandmarkTrack:
    """Read a JSON track: {"source_id": ..., "frames": [[[x, y] * 216], ...]}."""
    with open(path) as f:
        doc = json.load(f)
    frames = doc.get("frames", [])
    arr = np.zeros((len(frames), N_POINTS, 2), dtype=np.float64)
    for t, frame in enumerate(frames):
        if len(frame) != N_POINTS:
            raise ValueError(
                f"{path}: frame {t} has {len(frame)} points, expected {N_POINTS}")
        arr[t] = np.asarray(frame, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{path}: landmark coordinates outside [0, 1]")
    return LandmarkTrack(frames=arr, source_id=doc.get("source_id", ""))


def save_landmark_track(track: LandmarkTrack, path: str | Path) -> None:
    """Write the JSON track format; floats round-trip exactly via repr."""
    if track.frames.size and (track.frames.min() < 0.0 or track.frames.max() > 1.0):
        raise ValueError("landmark coordinates outside [0, 1]")
    doc = {"source_id": track.source_id, "frames": track.frames.tolist()}
    with open(path, "w") as f:
        json.dump(doc, f)


# ---------------------------------------------------------------------------
# split / merge

def split_landmarks(frame: np.ndarray, partition: LandmarkPartition | None = None):
    """Full frame -> (upper points, lower points), each in partition index order."""
    part = partition or default_partition()
    frame = validate_frame(frame)
    return frame[part.upper_indices].copy(), frame[part.lower_indices].copy()


def merge_landmarks(upper: np.ndarray, lower: np.ndarray,
                    partition: LandmarkPartition | None = None) -> np.ndarray:
    part = partition or default_partition()
    upper = np.asarray(upper, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    if upper.shape != (len(part.upper_indices), 2):
        raise ValueError(f"upper set must be {(len(part.upper_indices), 2)}, got {upper.shape}")
    if lower.shape != (len(part.lower_indices), 2):
        raise ValueError(f"lower set must be {(len(part.lower_indices), 2)}, got {lower.shape}")
    frame = np.zeros((N_POINTS, 2), dtype=np.float64)
    frame[part.upper_indices] = upper
    frame[part.lower_indices] = lower
    return frame


# ---------------------------------------------------------------------------
# rasterization

def _to_px(v: float, extent: int) -> int:
    return int(np.floor(v * (extent - 1) + 0.5))


def _line_pixels(x0: int, y0: int, x1: int, y1: int):
    """Integer Bresenham, endpoints inclusive."""
    dx, sx = abs(x1 - x0), 1 if x0 < x1 else -1
    dy, sy = -abs(y1 - y0), 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


# dot of radius 1 around each point: offsets with dx^2 + dy^2 <= 1
DOT_OFFSETS = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def rasterize_landmarks(points: np.ndarray, size: tuple[int, int],
                        polylines: list[Polyline] | None = None) -> np.ndarray:
    """Draw landmarks as white radius-1 dots plus 1-px Bresenham polylines on black.

    No anti-aliasing; identical inputs produce bit-identical buffers.
    `polylines` index into `points`; omit to draw dots only.
    """
    H, W = size
    if H <= 0 or W <= 0:
        raise ValueError(f"size must be positive, got {size}")
    img = np.zeros((H, W, 3), dtype=np.float32)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return img
    px = np.array([[_to_px(x, W), _to_px(y, H)] for x, y in points], dtype=np.int64)

    def ink(x, y):
        if 0 <= x < W and 0 <= y < H:
            img[y, x] = 1.0

    for x, y in px:
        for dx, dy in DOT_OFFSETS:
            ink(x + dx, y + dy)
    for line in polylines or []:
        idx = list(line.indices) + ([line.indices[0]] if line.closed else [])
        for a, b in zip(idx[:-1], idx[1:]):
            for x, y in _line_pixels(px[a, 0], px[a, 1], px[b, 0], px[b, 1]):
                ink(x, y)
    return img


# ---------------------------------------------------------------------------
# masks and composites

def _bbox_mask(points: np.ndarray, size: tuple[int, int], margin: float,
               top_cap: float | None = None) -> np.ndarray:
    """Binary mask over the bbox of `points` expanded by `margin` (bbox fractions).

    Upward expansion stops at `top_cap` (never shrinking below the raw bbox).
    Empty point set -> empty mask.
    """
    H, W = size
    mask = np.zeros((H, W), dtype=np.uint8)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return mask
    (x0, y0), (x1, y1) = points.min(axis=0), points.max(axis=0)
    mx, my = margin * (x1 - x0), margin * (y1 - y0)
    top = y0 - my
    if top_cap is not None:
        top = max(top, min(top_cap, y0))
    c0 = max(_to_px(x0 - mx, W), 0)
    c1 = min(_to_px(x1 + mx, W), W - 1)
    r0 = max(_to_px(top, H), 0)
    r1 = min(_to_px(y1 + my, H), H - 1)
    if c0 <= c1 and r0 <= r1:
        mask[r0:r1 + 1, c0:c1 + 1] = 1
    return mask


def lower_half_mask(frame: np.ndarray, size: tuple[int, int],
                    partition: LandmarkPartition | None = None,
                    margin: float = 0.1, cap_at_nose: bool = True) -> np.ndarray:
    """Lower-face mask: bbox of the lower landmarks expanded by `margin`.

    The upward expansion is capped at the nose-base landmark row so the mask
    never swallows the eyes; the cap never shrinks the raw bbox.
    """
    part = partition or default_partition()
    frame = validate_frame(frame)
    cap = float(frame[part.nose_base_indices][:, 1].max()) if cap_at_nose else None
    return _bbox_mask(frame[part.lower_indices], size, margin, top_cap=cap)


@dataclass
class CompositeFrame:
    image: np.ndarray           # [H, W, 3] source outside mask, drawing inside
    mask: np.ndarray            # [H, W] uint8 in {0, 1}
    drawn_landmarks: np.ndarray  # the lower points that were rasterized


def make_composite(frame: np.ndarray, predicted_lower: np.ndarray,
                   partition: LandmarkPartition | None = None,
                   mask: np.ndarray | None = None,
                   margin: float = 0.1, fill: float = 0.5) -> CompositeFrame:
    """Mask the lower face and draw the predicted landmarks in its place.

    Outside the mask the source pixels pass through bit-exactly; inside, a
    neutral `fill` gray carries the white landmark drawing. When no mask is
    given it is derived from the predicted points' bbox plus `margin`.
    """
    part = partition or default_partition()
    frame = np.asarray(frame)
    predicted_lower = np.asarray(predicted_lower, dtype=np.float64).reshape(-1, 2)
    if mask is None:
        mask = _bbox_mask(predicted_lower, frame.shape[:2], margin)
    drawing = rasterize_landmarks(predicted_lower, frame.shape[:2],
                                  polylines=part.lower_polylines()
                                  if predicted_lower.shape[0] == len(part.lower_indices)
                                  else None)
    inked = np.where(drawing > 0, drawing.astype(frame.dtype),
                     np.asarray(fill, dtype=frame.dtype))
    image = np.where(mask[..., None].astype(bool), inked, frame)
    return CompositeFrame(image=image, mask=mask, drawn_landmarks=predicted_lower)


def composite_output(original: np.ndarray, generated: np.ndarray,
                     mask: np.ndarray) -> np.ndarray:
    """Per pixel: mask * generated + (1 - mask) * original, exact outside the mask."""
    if original.shape != generated.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {generated.shape}")
    if mask.shape != original.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {original.shape[:2]}")
    return np.where(mask[..., None].astype(bool), generated, original)


# ---------------------------------------------------------------------------
# NME

def nme(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean keypoint error normalized by the ground-truth bbox diagonal.

    Per frame t: (1/N) * sum_n ||pred_n - gt_n||_2 / d_t, with d_t the
    diagonal of the gt bounding box; frames are then averaged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise ValueError(f"expected [T, N, 2] sequences, got {pred.shape}")
    per_frame = []
    for t in range(gt.shape[0]):
        span = gt[t].max(axis=0) - gt[t].min(axis=0)
        diag = float(np.hypot(span[0], span[1]))
        if diag <= 0.0:
            raise ValueError(f"degenerate ground-truth bounding box at frame {t}")
        per_frame.append(float(np.linalg.norm(pred[t] - gt[t], axis=1).mean()) / diag)
    return float(np.mean(per_frame))
