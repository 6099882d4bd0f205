"""Stage 1: few-shot landmark generation.

Three encoders (mel window, upper-face pose, reference landmarks) produce
embeddings that are fused by a weighted average whose three weights are
constrained to the simplex; a two-branch transposed-convolution decoder emits
the lower-face (jaw + lip) landmarks, trained with plain L1 distance. No pixel
data is touched anywhere in this stage.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, config_hash
from .landmarks import LandmarkPartition, default_partition
from .media import MEL_BANDS, MEL_WINDOW_FRAMES

CHECKPOINT_FORMAT = "lipdub.stage1"
CHECKPOINT_VERSION = 1


class _ResBlock2d(nn.Module):
    def __init__(self, cin, cout, stride=2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(h + self.skip(x))


class MelEncoder(nn.Module):
    """Residual conv stack over a [20, 80] mel window -> embed_dim vector."""

    def __init__(self, embed_dim: int, width: int = 32):
        super().__init__()
        widths = [width, width * 2, width * 4, width * 4]
        blocks, cin = [], 1
        for w in widths:
            blocks.append(_ResBlock2d(cin, w))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.proj = nn.Linear(cin, embed_dim)

    def forward(self, window):
        # [B, 20, 80] -> [B, D]
        if window.dim() == 2:
            window = window.unsqueeze(0)
        if window.shape[-2:] != (MEL_WINDOW_FRAMES, MEL_BANDS):
            raise ValueError(
                f"mel window must be [{MEL_WINDOW_FRAMES}, {MEL_BANDS}], got {tuple(window.shape[-2:])}")
        h = self.blocks(window.unsqueeze(1))
        return self.proj(h.mean(dim=(2, 3)))


class PoseEncoder(nn.Module):
    """2-layer perceptron over flattened upper-landmark coordinates."""

    def __init__(self, n_points: int, embed_dim: int, hidden: int = 256):
        super().__init__()
        self.n_points = n_points
        self.net = nn.Sequential(
            nn.Linear(n_points * 2, hidden), nn.ReLU(),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, upper):
        # [B, n_points, 2] -> [B, D]
        if upper.dim() == 2:
            upper = upper.unsqueeze(0)
        if upper.shape[-2:] != (self.n_points, 2):
            raise ValueError(
                f"pose input must be [{self.n_points}, 2] points, got {tuple(upper.shape[-2:])}")
        return self.net(upper.flatten(-2))


class ReferenceEncoder(nn.Module):
    """Per-frame perceptron, arithmetic-mean pooled into one global vector.

    Mean pooling makes the embedding invariant to frame order and count
    duplication; a single reference frame is the degenerate-but-valid case.
    """

    def __init__(self, n_points: int, embed_dim: int, hidden: int = 256):
        super().__init__()
        self.n_points = n_points
        self.net = nn.Sequential(
            nn.Linear(n_points * 2, hidden), nn.ReLU(),
            nn.Linear(hidden, embed_dim),
        )

    def forward(self, track):
        # [B, K, n_points, 2] or [K, n_points, 2] -> [B, D]
        if track.dim() == 3:
            track = track.unsqueeze(0)
        if track.shape[1] == 0:
            raise ValueError("reference track must contain at least one frame")
        if track.shape[-2:] != (self.n_points, 2):
            raise ValueError(
                f"reference frames must be [{self.n_points}, 2] points, got {tuple(track.shape[-2:])}")
        per_frame = self.net(track.flatten(-2))  # [B, K, D]
        return per_frame.mean(dim=1)


def fuse(mel, pose, ref, weights):
    """Timestep-wise weighted sum of the three embeddings; weights sum to 1."""
    if not (mel.shape == pose.shape == ref.shape):
        raise ValueError(
            f"embedding shape mismatch: {tuple(mel.shape)}, {tuple(pose.shape)}, {tuple(ref.shape)}")
    w = weights if torch.is_tensor(weights) else torch.as_tensor(weights, dtype=mel.dtype)
    return w[0] * mel + w[1] * pose + w[2] * ref


class FusionWeights(nn.Module):
    """Three encoder weights kept on the simplex by a softmax of raw params.

    The sum-to-one constraint therefore holds by construction after any
    optimizer step.
    """

    def __init__(self):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros(3))

    @property
    def weights(self):
        return torch.softmax(self.raw, dim=0)

    def forward(self, mel, pose, ref):
        return fuse(mel, pose, ref, self.weights)


class BranchDecoder(nn.Module):
    """embed -> transposed-conv point grid -> [n_points, 2] raw coordinates."""

    def __init__(self, embed_dim: int, n_points: int, width: int = 64):
        super().__init__()
        self.n_points = n_points
        grid0 = max(1, -(-n_points // 8))  # three 2x upsamplings
        self.grid0 = grid0
        self.fc = nn.Linear(embed_dim, width * grid0)
        self.width = width
        self.ups = nn.Sequential(
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose1d(width, width // 2, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose1d(width // 2, width // 2, 4, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Conv1d(width // 2, 2, 3, padding=1)

    def forward(self, z):
        # [B, D] -> [B, n_points, 2]
        h = self.fc(z).reshape(-1, self.width, self.grid0)
        h = self.ups(h)
        out = self.head(h)[:, :, :self.n_points]
        return out.transpose(1, 2)


class _IdentitySmoother(nn.Module):
    """Depthwise kernel-3 conv initialized to the identity (delta) kernel.

    Replicate padding keeps single-step sequences well defined.
    """

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv1d(2, 2, 3, padding=0, groups=2)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, 0, 1] = 1.0
            self.conv.bias.zero_()

    def forward(self, x):
        # [N, 2, L]
        return self.conv(F.pad(x, (1, 1), mode="replicate"))


class LowerFaceDecoder(nn.Module):
    """Jaw and lip branches, concatenated in partition order, then smoothed.

    Smoothing is a depthwise conv along the time axis followed by one along
    the point axis; both start as identities. Output coordinates are shifted
    to center on 0.5 and clamped to [0, 1].
    """

    def __init__(self, embed_dim: int, n_jaw: int, n_lip: int, width: int = 64):
        super().__init__()
        self.n_jaw, self.n_lip = n_jaw, n_lip
        self.jaw = BranchDecoder(embed_dim, n_jaw, width)
        self.lip = BranchDecoder(embed_dim, n_lip, width)
        self.temporal_smooth = _IdentitySmoother()
        self.coord_smooth = _IdentitySmoother()

    def forward(self, fused):
        # [B, T, D] -> [B, T, n_jaw + n_lip, 2]
        if fused.dim() == 2:
            fused = fused.unsqueeze(1)
        B, T, D = fused.shape
        if T == 0:
            raise ValueError("fused sequence must be nonempty")
        flat = fused.reshape(B * T, D)
        pts = torch.cat([self.jaw(flat), self.lip(flat)], dim=1)  # [B*T, n, 2]
        n = pts.shape[1]
        # smooth along the point axis
        pts = self.coord_smooth(pts.transpose(1, 2)).transpose(1, 2)
        # smooth along the time axis
        seq = pts.reshape(B, T, n, 2).permute(0, 2, 3, 1).reshape(B * n, 2, T)
        seq = self.temporal_smooth(seq)
        out = seq.reshape(B, n, 2, T).permute(0, 3, 1, 2)
        return torch.clamp(out + 0.5, 0.0, 1.0)


class LandmarkGenerator(nn.Module):
    """The full stage-1 model: three encoders, simplex fusion, two-branch decoder."""

    def __init__(self, embed_dim: int = 256, mel_width: int = 32, hidden: int = 256,
                 decoder_width: int = 64, partition: LandmarkPartition | None = None):
        super().__init__()
        part = partition or default_partition()
        self.n_upper = len(part.upper_indices)
        self.n_lower = len(part.lower_indices)
        self.embed_dim = embed_dim
        self.mel_encoder = MelEncoder(embed_dim, mel_width)
        self.pose_encoder = PoseEncoder(self.n_upper, embed_dim, hidden)
        self.ref_encoder = ReferenceEncoder(216, embed_dim, hidden)
        self.fusion = FusionWeights()
        self.decoder = LowerFaceDecoder(
            embed_dim, len(part.jaw_indices), len(part.lip_indices), decoder_width)

    def encode_mel(self, window):
        return self.mel_encoder(window)

    def encode_pose(self, upper):
        return self.pose_encoder(upper)

    def encode_reference(self, track):
        return self.ref_encoder(track)

    def forward(self, mel_windows, upper_seq, ref_track):
        # mel [B, T, 20, 80], upper [B, T, n_upper, 2], ref [B, K, 216, 2]
        B, T = mel_windows.shape[:2]
        mel = self.mel_encoder(mel_windows.reshape(B * T, *mel_windows.shape[2:]))
        pose = self.pose_encoder(upper_seq.reshape(B * T, *upper_seq.shape[2:]))
        ref = self.ref_encoder(ref_track)  # [B, D], one global vector ...
        ref = ref.unsqueeze(1).expand(B, T, -1).reshape(B * T, -1)  # ... repeated per timestep
        fused = self.fusion(mel, pose, ref).reshape(B, T, -1)
        return self.decoder(fused)


def generate(model: LandmarkGenerator, mel_window: np.ndarray, upper: np.ndarray,
             reference: np.ndarray) -> np.ndarray:
    """Predict one frame of lower-face landmarks; numpy in, numpy out."""
    model.eval()
    with torch.no_grad():
        mel = torch.as_tensor(np.asarray(mel_window), dtype=torch.float32).reshape(1, 1, MEL_WINDOW_FRAMES, MEL_BANDS)
        up = torch.as_tensor(np.asarray(upper), dtype=torch.float32).reshape(1, 1, model.n_upper, 2)
        ref = torch.as_tensor(np.asarray(reference), dtype=torch.float32)
        if ref.dim() == 2:
            ref = ref.unsqueeze(0)
        ref = ref.unsqueeze(0)  # [1, K, 216, 2]
        out = model(mel, up, ref)
    return out[0, 0].numpy().astype(np.float64)


def l1_landmark_loss(pred, gt):
    """Mean absolute coordinate error over batch, time, points, and axes."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def train_stage1(model: LandmarkGenerator, dataset, cfg: TrainConfig,
                 steps: int | None = None):
    """Gradient descent on the L1 landmark loss; returns the (step, loss) curve.

    `dataset` must expose __len__ and sample_batch(rng, batch_size) returning
    (mel [B,T,20,80], upper [B,T,nu,2], ref [B,K,216,2], lower [B,T,nl,2])
    float32 tensors. Aborts with a diagnostic on non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("stage-1 training requires a nonempty dataset")
    steps = steps if steps is not None else cfg.stage1_steps
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage1_lr)
    model.train()
    curve = []
    for step in range(steps):
        mel, upper, ref, lower = dataset.sample_batch(rng, cfg.batch_size)
        pred = model(mel, upper, ref)
        loss = l1_landmark_loss(pred, lower)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite stage-1 loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        # fusion weights live on the simplex by construction (softmax of raw params)
        curve.append((step, float(loss.detach())))
    return curve


def embedding_sum_check(model: LandmarkGenerator, tol: float = 1e-6) -> float:
    """|sum(W) - 1| of the current fusion weights (diagnostic)."""
    return float(abs(model.fusion.weights.sum().item() - 1.0))


def save_stage1_checkpoint(model: LandmarkGenerator, cfg: TrainConfig, path) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "state": model.state_dict(),
    }, path)


def load_stage1_checkpoint(path) -> tuple[LandmarkGenerator, TrainConfig]:
    blob = torch.load(path, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a stage-1 checkpoint")
    cfg = TrainConfig(**blob["config"])
    model = LandmarkGenerator(
        embed_dim=cfg.embed_dim, mel_width=cfg.mel_channels,
        hidden=cfg.encoder_hidden, decoder_width=cfg.decoder_channels)
    model.load_state_dict(blob["state"])
    return model, cfg
