"""Stage 2: few-shot landmark-to-face translation.

An appearance embedder turns a reference frame into a style vector; a U-Net
generator with gated convolutions consumes a space-time volume of composite
frames and is modulated by that vector through AdaIN residual blocks placed
only at the bottleneck. A spatial and a temporal patch discriminator drive
least-squares GAN and feature-matching terms on top of a perceptual
reconstruction loss. Meta-training updates all four networks over a
multi-speaker corpus; fine-tuning freezes the embedder and adapts the rest to
one speaker.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, config_hash
from .features import RandomFeatureNet

CHECKPOINT_FORMAT = "lipdub.stage2"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# building blocks

def adain(x, gamma, beta, std_floor: float = 1e-5):
    """Per-channel instance normalization re-styled by (gamma, beta).

    Statistics are taken over the spatial positions of each instance; the
    (biased) standard deviation is floored so constant channels map to beta.
    gamma/beta may be [C] or [B, C].
    """
    if x.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] features, got {tuple(x.shape)}")
    gamma = gamma if torch.is_tensor(gamma) else torch.as_tensor(gamma, dtype=x.dtype)
    beta = beta if torch.is_tensor(beta) else torch.as_tensor(beta, dtype=x.dtype)
    if gamma.shape[-1] != x.shape[1] or beta.shape[-1] != x.shape[1]:
        raise ValueError(
            f"gamma/beta must carry {x.shape[1]} channels, got {tuple(gamma.shape)}/{tuple(beta.shape)}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    std = x.var(dim=(2, 3), keepdim=True, unbiased=False).sqrt()
    std = torch.clamp(std, min=std_floor)
    g = gamma.reshape(*gamma.shape, 1, 1) if gamma.dim() == 2 else gamma.reshape(1, -1, 1, 1)
    b = beta.reshape(*beta.shape, 1, 1) if beta.dim() == 2 else beta.reshape(1, -1, 1, 1)
    return g * (x - mean) / std + b


class GatedConv2d(nn.Module):
    """activation(conv_f(x)) * sigmoid(conv_g(x)), the gated-convolution form."""

    def __init__(self, cin, cout, kernel_size=3, stride=1, padding=1):
        super().__init__()
        self.feature = nn.Conv2d(cin, cout, kernel_size, stride, padding)
        self.gate = nn.Conv2d(cin, cout, kernel_size, stride, padding)

    def forward(self, x):
        return F.elu(self.feature(x)) * torch.sigmoid(self.gate(x))


class AdaINResBlock(nn.Module):
    """Residual block whose two normalizations take (gamma, beta) from the style."""

    def __init__(self, channels, embed_dim):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        # one learnable affine map from the appearance vector to (gamma, beta) x2
        self.style = nn.Linear(embed_dim, 4 * channels)
        with torch.no_grad():
            self.style.weight.normal_(0.0, 0.02)
            self.style.bias.zero_()
            self.style.bias[:channels] = 1.0              # gamma1
            self.style.bias[2 * channels:3 * channels] = 1.0  # gamma2

    def forward(self, x, e):
        c = self.channels
        params = self.style(e)
        g1, b1, g2, b2 = params[:, :c], params[:, c:2 * c], params[:, 2 * c:3 * c], params[:, 3 * c:]
        h = adain(self.conv1(x), g1, b1)
        h = F.relu(h)
        h = adain(self.conv2(h), g2, b2)
        return x + h


class AppearanceEmbedder(nn.Module):
    """Reference face -> fixed-length appearance vector."""

    def __init__(self, embed_dim: int, base: int = 32, depth: int = 4):
        super().__init__()
        layers, cin = [], 3
        for i in range(depth):
            cout = min(base * 2 ** i, 256)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.ReLU()]
            cin = cout
        self.convs = nn.Sequential(*layers)
        self.proj = nn.Linear(cin, embed_dim)

    def forward(self, image):
        # [B, 3, H, W] -> [B, D]
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.shape[1] != 3:
            raise ValueError(f"reference must be a 3-channel image, got {tuple(image.shape)}")
        h = self.convs(image)
        return self.proj(h.mean(dim=(2, 3)))


class FaceGenerator(nn.Module):
    """Gated-conv U-Net over the composite volume, AdaIN blocks at the bottleneck."""

    def __init__(self, in_channels: int, embed_dim: int, depth: int = 4,
                 base: int = 64, adain_blocks: int = 2, max_width: int = 512):
        super().__init__()
        self.depth = depth
        widths = [min(base * 2 ** i, max_width) for i in range(depth)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.down.append(GatedConv2d(cin, w, 4, stride=2, padding=1))
            cin = w
        self.bottleneck = nn.ModuleList(
            AdaINResBlock(widths[-1], embed_dim) for _ in range(adain_blocks))
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            skip = widths[i - 1] if i > 0 else in_channels
            cout = widths[i - 1] if i > 0 else base
            self.up.append(GatedConv2d(widths[i] + skip, cout, 3, stride=1, padding=1))
        self.out_conv = nn.Conv2d(base, 3, 3, padding=1)

    def forward(self, volume, e):
        # volume [B, (2p+1)*3, H, W], e [B, D] -> [B, 3, H, W] in [0, 1]
        if volume.dim() == 3:
            volume = volume.unsqueeze(0)
        H, W = volume.shape[-2:]
        scale = 2 ** self.depth
        if H % scale or W % scale:
            raise ValueError(f"resolution {H}x{W} not divisible by 2^{self.depth}")
        if e.dim() == 1:
            e = e.unsqueeze(0)
        skips = [volume]
        h = volume
        for conv in self.down:
            h = conv(h)
            skips.append(h)
        for block in self.bottleneck:
            h = block(h, e)
        for i, conv in enumerate(self.up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(torch.cat([h, skips[self.depth - 1 - i]], dim=1))
        return torch.sigmoid(self.out_conv(h))


class PatchDiscriminator(nn.Module):
    """Conv stack emitting a patch score map plus per-layer features."""

    def __init__(self, in_channels: int, base: int = 64, n_layers: int = 3):
        super().__init__()
        blocks = [nn.Sequential(nn.Conv2d(in_channels, base, 4, stride=2, padding=1),
                                nn.LeakyReLU(0.2))]
        cin = base
        for i in range(1, n_layers):
            cout = min(base * 2 ** i, 512)
            blocks.append(nn.Sequential(
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout),
                nn.LeakyReLU(0.2)))
            cin = cout
        blocks.append(nn.Sequential(
            nn.Conv2d(cin, cin, 4, stride=1, padding=1),
            nn.InstanceNorm2d(cin),
            nn.LeakyReLU(0.2)))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(cin, 1, 4, stride=1, padding=1)

    def forward(self, x):
        feats = []
        h = x
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return self.head(h), feats


class TranslationModel(nn.Module):
    """Embedder, generator, and the two discriminators, wired to one config."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        cfg.validate()
        self.volume_channels = (2 * cfg.temporal_half_window_p + 1) * 3
        self.image_size = cfg.image_size
        self.temporal_window = cfg.disc_temporal_window
        self.conditional = bool(cfg.conditional_disc)
        cond_ch = 3 if self.conditional else 0
        self.embedder = AppearanceEmbedder(cfg.embed_dim, base=max(8, cfg.base_channels // 2))
        self.generator = FaceGenerator(
            self.volume_channels, cfg.embed_dim, depth=cfg.unet_depth,
            base=cfg.base_channels, adain_blocks=cfg.adain_blocks)
        self.disc_spatial = PatchDiscriminator(3 + cond_ch, base=cfg.base_channels)
        self.disc_temporal = PatchDiscriminator(
            3 * cfg.disc_temporal_window + cond_ch, base=cfg.base_channels)

    def embed_appearance(self, reference):
        return self.embedder(reference)

    def generate_face(self, volume, e):
        return self.generator(volume, e)

    def spatial_input(self, image, composite):
        if self.conditional:
            return torch.cat([composite, image], dim=1)
        return image

    def temporal_input(self, frames, composite):
        # frames: [B, w*3, H, W], already channel-stacked
        if frames.shape[1] != 3 * self.temporal_window:
            raise ValueError(
                f"temporal discriminator expects {self.temporal_window} stacked frames, "
                f"got {frames.shape[1] // 3}")
        if self.conditional:
            return torch.cat([composite, frames], dim=1)
        return frames


# ---------------------------------------------------------------------------
# losses

def perceptual_loss(gen, gt, extractor):
    """Sum over extractor layers of the mean absolute feature difference."""
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    total = None
    for fa, fb in zip(extractor(gen), extractor(gt)):
        if fa.shape != fb.shape:
            raise ValueError("extractor returned mismatched feature layers")
        term = (fa - fb).abs().mean()
        total = term if total is None else total + term
    return total


def gan_losses(real_input, fake_input, disc):
    """Least-squares patch-GAN terms plus feature matching.

    Returns (adv_g, adv_d, feat_match) as pure computations; callers manage
    detaching for their own update steps.
    """
    real_score, real_feats = disc(real_input)
    fake_score, fake_feats = disc(fake_input)
    adv_d = 0.5 * (((real_score - 1.0) ** 2).mean() + (fake_score ** 2).mean())
    adv_g = ((fake_score - 1.0) ** 2).mean()
    feat = None
    for rf, ff in zip(real_feats, fake_feats):
        term = (rf - ff).abs().mean()
        feat = term if feat is None else feat + term
    return adv_g, adv_d, feat


def total_loss(l_r, l_s, l_t, cfg: TrainConfig):
    """The stage-2 objective: reconstruction + weighted adversarial terms."""
    return l_r + cfg.lambda_s * l_s + cfg.lambda_t * l_t


def masked_l1(gen, gt, mask):
    """Mean absolute error restricted to mask pixels (diagnostic metric)."""
    m = mask.expand_as(gen)
    denom = m.sum() * 1.0
    if float(denom) == 0.0:
        return torch.zeros(())
    return ((gen - gt).abs() * m).sum() / (denom)


# ---------------------------------------------------------------------------
# training

def embedder_checksum(model: TranslationModel) -> str:
    """SHA-256 over the embedder's parameter bytes; the fine-tune freeze witness."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.embedder.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _reconstruction_loss(fake, target, mask, extractor):
    # full-frame perceptual term plus an in-mask term: pixels inside the mask
    # effectively count twice
    full = perceptual_loss(fake, target, extractor)
    blended = mask * fake + (1.0 - mask) * target
    return full + perceptual_loss(blended, target, extractor)


def _train_translation(model: TranslationModel, dataset, cfg: TrainConfig,
                       steps: int, train_embedder: bool, extractor=None):
    """Alternating D/G updates on the full objective; returns per-step history.

    `dataset.sample_batch(rng, n)` must return a dict of float32 tensors:
      volume   [B, (2p+1)*3, H, W]   stacked composites
      target   [B, 3, H, W]          ground-truth frame v(t)
      mask     [B, 1, H, W]          lower-face mask of frame t
      composite [B, 3, H, W]         center composite x(t)
      reference [B, 3, H, W]         reference frame v(t'), t' != t
      temporal_real [B, w*3, H, W]   w consecutive real frames centered on t
    The fake temporal stack substitutes the generated frame at the center.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    extractor = extractor or RandomFeatureNet(in_channels=3)
    for p in model.embedder.parameters():
        p.requires_grad_(train_embedder)
    g_params = list(model.generator.parameters())
    if train_embedder:
        g_params += list(model.embedder.parameters())
    d_params = list(model.disc_spatial.parameters()) + list(model.disc_temporal.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.stage2_lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d_params, lr=cfg.stage2_lr_d, betas=(0.5, 0.999))

    w = cfg.disc_temporal_window
    center = w // 2
    history = []
    model.train()
    for step in range(steps):
        batch = dataset.sample_batch(rng, cfg.batch_size)
        volume, target = batch["volume"], batch["target"]
        mask, composite = batch["mask"], batch["composite"]
        reference, temporal_real = batch["reference"], batch["temporal_real"]

        e = model.embedder(reference)
        fake = model.generator(volume, e)
        fake_temporal = temporal_real.clone()
        fake_temporal[:, 3 * center:3 * (center + 1)] = fake

        # discriminator step (generated frames detached)
        real_s = model.spatial_input(target, composite)
        fake_s = model.spatial_input(fake.detach(), composite)
        real_t = model.temporal_input(temporal_real, composite)
        fake_t = model.temporal_input(fake_temporal.detach(), composite)
        _, d_s, _ = gan_losses(real_s, fake_s, model.disc_spatial)
        _, d_t, _ = gan_losses(real_t, fake_t, model.disc_temporal)
        d_loss = d_s + d_t
        if not torch.isfinite(d_loss):
            raise FloatingPointError(f"non-finite discriminator loss at step {step}")
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        # generator step against the updated discriminators
        fake_s = model.spatial_input(fake, composite)
        fake_t = model.temporal_input(
            torch.cat([temporal_real[:, :3 * center], fake,
                       temporal_real[:, 3 * (center + 1):]], dim=1), composite)
        adv_g_s, _, feat_s = gan_losses(real_s.detach(), fake_s, model.disc_spatial)
        adv_g_t, _, feat_t = gan_losses(real_t.detach(), fake_t, model.disc_temporal)
        l_r = _reconstruction_loss(fake, target, mask, extractor)
        l_s = adv_g_s + feat_s
        l_t = adv_g_t + feat_t
        g_loss = total_loss(l_r, l_s, l_t, cfg)
        if not torch.isfinite(g_loss):
            raise FloatingPointError(f"non-finite generator loss at step {step}")
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        history.append({
            "step": step,
            "loss": float(g_loss.detach()),
            "recon": float(l_r.detach()),
            "adv_g": float((adv_g_s + adv_g_t).detach()),
            "adv_d": float(d_loss.detach()),
            "feat_match": float((feat_s + feat_t).detach()),
        })
    return history


def meta_train(model: TranslationModel, dataset, cfg: TrainConfig,
               steps: int | None = None, extractor=None):
    """Multi-speaker training of all four networks."""
    if dataset.num_speakers < 2:
        raise ValueError(
            f"meta-training needs at least 2 speakers, got {dataset.num_speakers}")
    steps = steps if steps is not None else cfg.stage2_steps
    return _train_translation(model, dataset, cfg, steps, train_embedder=True,
                              extractor=extractor)


def fine_tune(model: TranslationModel, dataset, cfg: TrainConfig,
              steps: int | None = None, extractor=None):
    """Single-speaker adaptation; the embedder is frozen and left byte-identical."""
    steps = steps if steps is not None else cfg.finetune_steps
    before = embedder_checksum(model)
    history = _train_translation(model, dataset, cfg, steps, train_embedder=False,
                                 extractor=extractor)
    after = embedder_checksum(model)
    if before != after:
        raise RuntimeError("fine-tuning modified the frozen embedder")
    return history


def transfer_appearance(model: TranslationModel, volume, other_reference):
    """generate_face with the appearance vector of a different reference frame."""
    e = model.embedder(other_reference)
    return model.generator(volume, e)


# ---------------------------------------------------------------------------
# condition volumes and checkpoints

def build_condition_volume(composites: np.ndarray, t: int, p: int) -> np.ndarray:
    """Channel-stack composites t-p..t+p (HWC), repeating frames at clip edges."""
    T = composites.shape[0]
    idx = np.clip(np.arange(t - p, t + p + 1), 0, T - 1)
    return np.concatenate([composites[j] for j in idx], axis=-1)


def save_stage2_checkpoint(model: TranslationModel, cfg: TrainConfig, path,
                           extractor=None) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "state": model.state_dict(),
    }
    if extractor is not None:
        blob["feature_state"] = extractor.state_dict()
        blob["feature_seed"] = getattr(extractor, "seed", 0)
    torch.save(blob, path)


def load_stage2_checkpoint(path):
    blob = torch.load(path, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a stage-2 checkpoint")
    cfg = TrainConfig(**blob["config"])
    model = TranslationModel(cfg)
    model.load_state_dict(blob["state"])
    extractor = RandomFeatureNet(in_channels=3, seed=blob.get("feature_seed", 0))
    if "feature_state" in blob:
        extractor.load_state_dict(blob["feature_state"])
    return model, cfg, extractor
