"""The tracker: refined features (frozen backbone + trainable residual CNN),
cosine cost volumes, a small heatmap refiner, and radius-restricted soft-argmax."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, FeatureMap, grid_size
from .errors import InputError
from .media import FrameSequence


@dataclass
class AdapterConfig:
    """Residual feature CNN. Default sizes give ~7.59M parameters at C=1024."""

    hidden_channels: tuple[int, ...] = (64, 128, 256)
    out_channels: int = 1024
    kernel_size: int = 5
    input_upsample: int = 1


@dataclass
class TrackerConfig:
    softargmax_radius: float = 35.0  # px
    use_refiner: bool = True
    seed: int = 0


class BlurPool2d(nn.Module):
    """Antialiased stride-2 downsampling: fixed binomial blur then subsample."""

    def __init__(self, channels: int, filt_size: int = 3):
        super().__init__()
        a = {2: [1., 1.], 3: [1., 2., 1.], 4: [1., 3., 3., 1.],
             5: [1., 4., 6., 4., 1.]}[filt_size]
        k = torch.tensor(a)
        k = k[:, None] * k[None, :]
        k = k / k.sum()
        self.register_buffer("kernel", k[None, None].repeat(channels, 1, 1, 1))
        self.channels = channels
        self.pad = (filt_size - 1) // 2

    def forward(self, x):
        x = F.pad(x, (self.pad,) * 4, mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype), stride=2, groups=self.channels)


class DeltaAdapter(nn.Module):
    """Residual feature extractor on raw RGB frames.

    Three conv/BN/ReLU/blur-downsample stages followed by a dilated projection
    stage whose batch-norm affine parameters start at zero, so the residual is
    exactly zero before any training step. The CNN's output stride is 8; with
    ``input_upsample`` > 1 the frames are bilinearly enlarged first, which
    puts the residual on a grid of 8/input_upsample frame pixels and buys
    sub-pixel precision at extra compute cost.
    """

    OUT_STRIDE = 8

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        if cfg.input_upsample < 1 or cfg.input_upsample != int(cfg.input_upsample):
            raise InputError("input_upsample must be a positive integer")
        self.input_upsample = int(cfg.input_upsample)
        chans = (3,) + tuple(cfg.hidden_channels)
        k = cfg.kernel_size
        stages = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            stages += [
                nn.Conv2d(c_in, c_out, k, padding=k // 2, padding_mode="reflect"),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                BlurPool2d(c_out),
            ]
        stages += [
            nn.Conv2d(chans[-1], cfg.out_channels, k, padding=2 * (k // 2),
                      dilation=2, padding_mode="reflect"),
            nn.BatchNorm2d(cfg.out_channels),
        ]
        self.net = nn.Sequential(*stages)
        final_bn = self.net[-1]
        nn.init.zeros_(final_bn.weight)
        nn.init.zeros_(final_bn.bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, C, ~H*input_upsample/8, ~W*input_upsample/8)."""
        if self.input_upsample != 1:
            frames = F.interpolate(frames, scale_factor=self.input_upsample,
                                   mode="bilinear", align_corners=False)
        return self.net(frames)


class HeatmapRefiner(nn.Module):
    """Two-layer CNN sharpening the raw cost volume before the softmax."""

    def __init__(self, hidden: int = 16, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        for conv in (self.conv1, self.conv2):
            fan_in = conv.weight.shape[1] * 9
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        """(B, 1, H', W') cost volumes -> refined logits, same shape."""
        return self.conv2(F.relu(self.conv1(s)))


# --------------------------------------------------------------------------
# functional pieces


def sample_query_features(phi: torch.Tensor, xy: torch.Tensor, stride: int,
                          patch_size: int) -> torch.Tensor:
    """Bilinearly sample (gh, gw, C) features at pixel (x, y) positions (N, 2).

    Grid coordinates are clamped to the continuous hull of the feature grid.
    """
    gh, gw, _ = phi.shape
    half = (patch_size - 1) / 2.0
    c = ((xy[:, 0] - half) / stride).clamp(0, gw - 1)
    r = ((xy[:, 1] - half) / stride).clamp(0, gh - 1)
    r0 = r.floor().long().clamp(0, max(gh - 2, 0))
    c0 = c.floor().long().clamp(0, max(gw - 2, 0))
    fr = (r - r0).unsqueeze(1)
    fc = (c - c0).unsqueeze(1)
    r1 = (r0 + 1).clamp(max=gh - 1)
    c1 = (c0 + 1).clamp(max=gw - 1)
    return (phi[r0, c0] * (1 - fr) * (1 - fc) + phi[r0, c1] * (1 - fr) * fc
            + phi[r1, c0] * fr * (1 - fc) + phi[r1, c1] * fr * fc)


def cost_volumes(phi_q: torch.Tensor, phi_t: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of query features (N, C) against a map (gh, gw, C).

    Zero vectors map to similarity 0. Returns (N, gh, gw) in [-1, 1].
    """
    gh, gw, ch = phi_t.shape
    q = phi_q / phi_q.norm(dim=1, keepdim=True).clamp_min(1e-12)
    t = phi_t.reshape(-1, ch)
    t = t / t.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return (q @ t.T).reshape(-1, gh, gw)


def heatmaps_from_cost(s: torch.Tensor, refiner: HeatmapRefiner | None) -> torch.Tensor:
    """(N, gh, gw) cost volumes -> spatial-softmax heatmaps summing to 1."""
    logits = refiner(s.unsqueeze(1)).squeeze(1) if refiner is not None else s
    n, gh, gw = logits.shape
    return F.softmax(logits.reshape(n, -1), dim=1).reshape(n, gh, gw)


def grid_pixel_positions(gh: int, gw: int, stride: int, patch_size: int,
                         dtype=torch.float64, device="cpu") -> torch.Tensor:
    """(gh, gw, 2) pixel (x, y) positions of all patch centers."""
    half = (patch_size - 1) / 2.0
    ys = torch.arange(gh, dtype=dtype, device=device) * stride + half
    xs = torch.arange(gw, dtype=dtype, device=device) * stride + half
    return torch.stack(torch.meshgrid(ys, xs, indexing="ij")[::-1], dim=-1)


def soft_argmax(h: torch.Tensor, stride: int, patch_size: int,
                radius: float) -> torch.Tensor:
    """Heatmap-weighted mean position restricted to ``radius`` px of the peak.

    (N, gh, gw) heatmaps -> (N, 2) pixel positions. The peak location (ties:
    lowest row-major index) is held constant under differentiation; gradients
    flow through the heatmap values only.
    """
    n, gh, gw = h.shape
    pos = grid_pixel_positions(gh, gw, stride, patch_size, h.dtype, h.device)
    flat = h.detach().reshape(n, -1)
    idx = flat.argmax(dim=1)
    pmax = pos.reshape(-1, 2)[idx]  # (N, 2)
    dist = (pos.reshape(1, -1, 2) - pmax[:, None]).norm(dim=2)
    mask = (dist <= radius).to(h.dtype)
    w = h.reshape(n, -1) * mask
    return (w.unsqueeze(2) * pos.reshape(1, -1, 2)).sum(dim=1) / w.sum(dim=1, keepdim=True)


# --------------------------------------------------------------------------
# tracker state


class Tracker:
    """Bundles frozen backbone features with the trainable adapter + refiner.

    Frozen features are computed once per frame and cached; refined maps are
    recomputed on demand so gradients reach the adapter.
    """

    def __init__(self, seq: FrameSequence, backbone, bb_cfg: BackboneConfig,
                 adapter_cfg: AdapterConfig | None = None,
                 cfg: TrackerConfig | None = None,
                 dtype: torch.dtype = torch.float32, device: str = "cpu"):
        self.seq = seq
        self.backbone = backbone
        self.bb_cfg = bb_cfg
        self.cfg = cfg or TrackerConfig()
        adapter_cfg = adapter_cfg or AdapterConfig(out_channels=bb_cfg.channels)
        if adapter_cfg.out_channels != bb_cfg.channels:
            raise InputError("adapter out_channels must match backbone channels")
        self.dtype = dtype
        self.device = device
        min_dim = min(seq.working_size)
        pad = 2 * (adapter_cfg.kernel_size // 2)
        if min_dim * adapter_cfg.input_upsample // DeltaAdapter.OUT_STRIDE <= pad:
            raise InputError(
                f"working frames {seq.working_size} too small for the adapter; "
                f"need more than "
                f"{pad * DeltaAdapter.OUT_STRIDE // adapter_cfg.input_upsample} "
                f"px per side")
        torch.manual_seed(self.cfg.seed)
        self.adapter = DeltaAdapter(adapter_cfg).to(dtype=dtype, device=device)
        self.refiner = HeatmapRefiner(seed=self.cfg.seed).to(dtype=dtype, device=device)
        self._frames = torch.from_numpy(seq.frames).permute(0, 3, 1, 2).to(
            dtype=dtype, device=device)
        self._dino_cache: dict[int, torch.Tensor] = {}
        self.grid_shape = grid_size(seq.working_size, bb_cfg)

    # frozen features ------------------------------------------------------

    def dino_map(self, t: int) -> torch.Tensor:
        if t not in self._dino_cache:
            fm = self.backbone.extract(self.seq.frames[t], t)
            self._dino_cache[t] = torch.from_numpy(
                np.ascontiguousarray(fm.data)).to(dtype=self.dtype, device=self.device)
        return self._dino_cache[t]

    # refined features -----------------------------------------------------

    def _sample_residual(self, res: torch.Tensor) -> torch.Tensor:
        """Sample (B, C, h8, w8) adapter output at the backbone patch centers."""
        b, ch, h8, w8 = res.shape
        gh, gw = self.grid_shape
        half = (self.bb_cfg.patch_size - 1) / 2.0
        s = DeltaAdapter.OUT_STRIDE
        up = self.adapter.input_upsample
        # residual cell m sits at frame pixel (8m + 0.5)/up - 0.5
        xs = ((torch.arange(gw, dtype=self.dtype, device=self.device)
               * self.bb_cfg.stride + half + 0.5) * up - 0.5) / s
        ys = ((torch.arange(gh, dtype=self.dtype, device=self.device)
               * self.bb_cfg.stride + half + 0.5) * up - 0.5) / s
        gx = (2 * xs + 1) / w8 - 1
        gy = (2 * ys + 1) / h8 - 1
        grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)
        out = F.grid_sample(res, grid.expand(b, gh, gw, 2), mode="bilinear",
                            padding_mode="border", align_corners=False)
        return out.permute(0, 2, 3, 1)  # (B, gh, gw, C)

    def refined_maps(self, frames: list[int]) -> dict[int, torch.Tensor]:
        """Refined feature maps for several frames in one adapter forward."""
        batch = self._frames[list(frames)]
        res = self._sample_residual(self.adapter(batch))
        return {t: self.dino_map(t) + res[k] for k, t in enumerate(frames)}

    def refined_map(self, t: int) -> torch.Tensor:
        return self.refined_maps([t])[t]

    def refined_feature_map(self, t: int) -> FeatureMap:
        """Refined map as a numpy FeatureMap (for the miner)."""
        with torch.no_grad():
            data = self.refined_map(t).detach().cpu().numpy()
        return FeatureMap(data, t, self.bb_cfg.stride, self.bb_cfg.patch_size)

    # tracking -------------------------------------------------------------

    def track_points(self, xy: torch.Tensor, query_frame: int, target_frame: int,
                     maps: dict[int, torch.Tensor] | None = None) -> torch.Tensor:
        """Track (N, 2) pixel positions from query_frame onto target_frame.

        ``maps`` may carry precomputed refined maps to amortize the adapter
        forward across many calls within one training step.
        """
        if maps is None or query_frame not in maps or target_frame not in maps:
            need = sorted({query_frame, target_frame})
            computed = self.refined_maps(need)
            maps = {**(maps or {}), **computed}
        phi_q = sample_query_features(maps[query_frame], xy,
                                      self.bb_cfg.stride, self.bb_cfg.patch_size)
        s = cost_volumes(phi_q, maps[target_frame])
        refiner = self.refiner if self.cfg.use_refiner else None
        h = heatmaps_from_cost(s, refiner)
        return soft_argmax(h, self.bb_cfg.stride, self.bb_cfg.patch_size,
                           self.cfg.softargmax_radius)

    def track_points_np(self, xy: np.ndarray, query_frame: int,
                        target_frame: int) -> np.ndarray:
        pts = torch.as_tensor(np.asarray(xy, np.float64), dtype=self.dtype,
                              device=self.device)
        with torch.no_grad():
            out = self.track_points(pts, query_frame, target_frame)
        return out.cpu().numpy().astype(np.float64)

    def track_trajectory(self, xy: np.ndarray, query_frame: int) -> tuple[np.ndarray, np.ndarray]:
        """Full per-frame trajectory and feature similarity for one query.

        Returns positions (T, 2) and cos-sim of the sampled feature at each
        tracked position against the query feature (T,).
        """
        t_total = self.seq.num_frames
        pts = torch.as_tensor(np.asarray([xy], np.float64), dtype=self.dtype,
                              device=self.device)
        positions = np.empty((t_total, 2))
        sims = np.empty(t_total)
        with torch.no_grad():
            q_map = self.refined_map(query_frame)
            phi_q = sample_query_features(q_map, pts, self.bb_cfg.stride,
                                          self.bb_cfg.patch_size)
            refiner = self.refiner if self.cfg.use_refiner else None
            for t in range(t_total):
                t_map = q_map if t == query_frame else self.refined_map(t)
                s = cost_volumes(phi_q, t_map)
                h = heatmaps_from_cost(s, refiner)
                pos = soft_argmax(h, self.bb_cfg.stride, self.bb_cfg.patch_size,
                                  self.cfg.softargmax_radius)
                positions[t] = pos[0].cpu().numpy()
                phi_t = sample_query_features(t_map, pos, self.bb_cfg.stride,
                                              self.bb_cfg.patch_size)
                num = (phi_q * phi_t).sum()
                den = (phi_q.norm() * phi_t.norm()).clamp_min(1e-12)
                sims[t] = float(num / den)
        return positions, sims

    # parameters -----------------------------------------------------------

    def trainable_parameters(self):
        return list(self.adapter.parameters()) + list(self.refiner.parameters())

    def train_mode(self):
        self.adapter.train()
        self.refiner.train()

    def eval_mode(self):
        self.adapter.eval()
        self.refiner.eval()


# --------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, tracker: Tracker, iteration: int,
                    config_hash: str, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config_hash": config_hash,
        "adapter": tracker.adapter.state_dict(),
        "refiner": tracker.refiner.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str, tracker: Tracker) -> dict:
    payload = torch.load(path, map_location=tracker.device, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version in {path}")
    tracker.adapter.load_state_dict(payload["adapter"])
    tracker.refiner.load_state_dict(payload["refiner"])
    return payload
