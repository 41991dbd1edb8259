"""Frozen backbone feature extraction and the feature-grid coordinate mapping.

Two backbone clients share one interface (``extract(frame) -> FeatureMap``):
a pretrained-ViT adapter (needs downloaded weights) and a seeded mock that
projects local RGB patches through a fixed random matrix, which makes every
downstream component testable offline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DependencyError, InputError
from .media import FrameSequence

FACETS = ("tokens", "queries", "keys", "values")


@dataclass
class BackboneConfig:
    layer: int = 16
    facet: str = "tokens"
    stride: int = 7
    patch_size: int = 14
    channels: int = 1024  # mock backbone may use fewer

    def __post_init__(self):
        if self.facet not in FACETS:
            raise InputError(f"facet must be one of {FACETS}")
        if self.patch_size % self.stride != 0:
            raise InputError("stride must divide patch_size")


@dataclass
class FeatureMap:
    """Dense per-frame descriptors on the overlapping-patch grid.

    data: (H', W', C) float array; grid cell (r, c) sits at pixel
    (stride*c + (patch-1)/2, stride*r + (patch-1)/2).
    """

    data: np.ndarray
    frame_index: int
    stride: int
    patch_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class ForegroundMask:
    mask: np.ndarray  # (H', W') bool
    frame_index: int


def grid_size(image_hw: tuple[int, int], cfg: BackboneConfig) -> tuple[int, int]:
    h, w = image_hw
    if h < cfg.patch_size or w < cfg.patch_size:
        raise InputError(f"frame {h}x{w} smaller than patch size {cfg.patch_size}")
    return ((h - cfg.patch_size) // cfg.stride + 1,
            (w - cfg.patch_size) // cfg.stride + 1)


def feature_grid_to_pixel(grid_rc: np.ndarray, stride: int, patch_size: int) -> np.ndarray:
    """(row, col) grid coords -> (x, y) pixel coords of the patch centers."""
    grid_rc = np.asarray(grid_rc, dtype=np.float64)
    half = (patch_size - 1) / 2.0
    out = np.empty_like(grid_rc)
    out[..., 0] = grid_rc[..., 1] * stride + half  # x from col
    out[..., 1] = grid_rc[..., 0] * stride + half  # y from row
    return out


def pixel_to_feature_grid(xy: np.ndarray, stride: int, patch_size: int) -> np.ndarray:
    """(x, y) pixel coords -> continuous (row, col) grid coords; exact inverse."""
    xy = np.asarray(xy, dtype=np.float64)
    half = (patch_size - 1) / 2.0
    out = np.empty_like(xy)
    out[..., 0] = (xy[..., 1] - half) / stride  # row from y
    out[..., 1] = (xy[..., 0] - half) / stride  # col from x
    return out


class MockBackbone:
    """Deterministic stand-in: features are a fixed random projection of each
    local patch's pixels. Constant-color frames give spatially constant maps."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.patch_size * cfg.patch_size * 3
        self._proj = rng.standard_normal((d, cfg.channels)).astype(np.float64) / np.sqrt(d)

    def _patches(self, frame: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        gh, gw = grid_size(frame.shape[:2], cfg)
        p = cfg.patch_size
        s = cfg.stride
        view = np.lib.stride_tricks.sliding_window_view(frame, (p, p), axis=(0, 1))
        view = view[::s, ::s][:gh, :gw]  # (gh, gw, 3, p, p)
        return view.reshape(gh, gw, 3 * p * p)

    def extract(self, frame: np.ndarray, frame_index: int = 0) -> FeatureMap:
        frame = np.asarray(frame, dtype=np.float64)
        patches = self._patches(frame)
        gh, gw, d = patches.shape
        # sliding_window_view yields (..., 3, p, p); reorder to (p, p, 3) flat
        p = self.cfg.patch_size
        patches = patches.reshape(gh, gw, 3, p, p).transpose(0, 1, 3, 4, 2).reshape(gh, gw, -1)
        feats = patches @ self._proj
        return FeatureMap(feats, frame_index, self.cfg.stride, self.cfg.patch_size)

    def saliency(self, frame: np.ndarray) -> np.ndarray:
        """Per-cell deviation of the patch mean color from the frame median."""
        frame = np.asarray(frame, dtype=np.float64)
        patches = self._patches(frame)
        gh, gw, _ = patches.shape
        means = patches.reshape(gh, gw, 3, -1).mean(axis=3)
        ref = np.median(means.reshape(-1, 3), axis=0)
        return np.linalg.norm(means - ref, axis=2)


class PretrainedViTBackbone:
    """Adapter over a pretrained self-supervised ViT (downloaded via torch.hub).

    Overrides the patch-embedding stride (14 -> 7 by default) for a denser
    feature grid and exposes token/query/key/value facets of one layer.
    """

    HUB_REPO = "facebookresearch/dinov2"
    HUB_MODEL = "dinov2_vitl14"

    def __init__(self, cfg: BackboneConfig, device: str = "cpu"):
        self.cfg = cfg
        self.device = device
        try:
            import torch

            self._torch = torch
            self.model = torch.hub.load(self.HUB_REPO, self.HUB_MODEL)
        except Exception as exc:
            raise DependencyError(
                "pretrained ViT weights unavailable "
                f"({exc}); rerun with --mock to use the offline mock backbone"
            ) from exc
        self.model.eval().to(device)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._override_stride()
        self._mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        self._std = np.array([0.229, 0.224, 0.225], dtype=np.float32)

    def _override_stride(self):
        torch = self._torch
        patch = self.model.patch_embed
        patch.proj.stride = (self.cfg.stride, self.cfg.stride)

        def interp(x, w, h):
            return x

        # positional embeddings are interpolated by the model itself for
        # arbitrary grids; nothing else to patch
        del torch, interp

    def _forward_facet(self, img):
        torch = self._torch
        cfg = self.cfg
        captured = {}
        blk = self.model.blocks[cfg.layer - 1]

        if cfg.facet == "tokens":
            def hook(_m, _i, out):
                captured["x"] = out
            handle = blk.register_forward_hook(hook)
        else:
            idx = FACETS.index(cfg.facet) - 1  # 0=q, 1=k, 2=v

            def hook(_m, inp, _out):
                x = inp[0]
                b, n, c = x.shape
                attn = blk.attn
                qkv = attn.qkv(x).reshape(b, n, 3, c)
                captured["x"] = qkv[:, :, idx]
            handle = blk.attn.register_forward_hook(hook)

        with torch.no_grad():
            self.model.forward_features(img)
        handle.remove()
        return captured["x"]

    def extract(self, frame: np.ndarray, frame_index: int = 0) -> FeatureMap:
        torch = self._torch
        cfg = self.cfg
        gh, gw = grid_size(frame.shape[:2], cfg)
        img = (frame.astype(np.float32) - self._mean) / self._std
        t = torch.from_numpy(img).permute(2, 0, 1)[None].to(self.device)
        tokens = self._forward_facet(t)[0, 1:]  # drop cls token
        feats = tokens.reshape(gh, gw, -1).cpu().numpy().astype(np.float64)
        return FeatureMap(feats, frame_index, cfg.stride, cfg.patch_size)

    def saliency(self, frame: np.ndarray) -> np.ndarray:
        """Class-token attention over patches, averaged across heads."""
        torch = self._torch
        cfg = self.cfg
        gh, gw = grid_size(frame.shape[:2], cfg)
        img = (frame.astype(np.float32) - self._mean) / self._std
        t = torch.from_numpy(img).permute(2, 0, 1)[None].to(self.device)
        blk = self.model.blocks[-1]
        captured = {}

        def hook(_m, inp, _out):
            x = inp[0]
            b, n, c = x.shape
            attn = blk.attn
            qkv = attn.qkv(x).reshape(b, n, 3, attn.num_heads, c // attn.num_heads)
            q, k = qkv[:, :, 0], qkv[:, :, 1]
            a = torch.einsum("bnhd,bmhd->bhnm", q * attn.scale, k).softmax(dim=-1)
            captured["a"] = a[0, :, 0, 1:].mean(0)  # cls -> patches

        handle = blk.attn.register_forward_hook(hook)
        with torch.no_grad():
            self.model.forward_features(t)
        handle.remove()
        return captured["a"].reshape(gh, gw).cpu().numpy().astype(np.float64)


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's method on a flat array; returns the class-separating threshold."""
    v = values.ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=256, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mu1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # upper edge of the winning bin, so ``value > threshold`` reproduces the
    # class split exactly (a bin center would misassign half of its own bin)
    return float(edges[int(np.argmax(between)) + 1])


def compute_foreground_masks(
    seq: FrameSequence,
    backbone,
    cfg: BackboneConfig,
    user_masks: np.ndarray | None = None,
) -> list[ForegroundMask]:
    """Per-frame boolean foreground masks on the feature grid.

    User-provided masks (T, H, W) take precedence and are resampled to the
    grid by nearest neighbor; otherwise the backbone's saliency is thresholded
    with Otsu's method. A degenerate all-background result degrades to an
    all-true mask so sampling ratios stay satisfiable.
    """
    gh, gw = grid_size(seq.working_size, cfg)
    out = []
    if user_masks is not None:
        if user_masks.shape[0] != seq.num_frames:
            raise InputError("user mask count must equal frame count")
        centers = feature_grid_to_pixel(
            np.stack(np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij"), -1),
            cfg.stride, cfg.patch_size)
        rr = np.clip(np.round(centers[..., 1]).astype(int), 0, seq.working_size[0] - 1)
        cc = np.clip(np.round(centers[..., 0]).astype(int), 0, seq.working_size[1] - 1)
        for t in range(seq.num_frames):
            mask = user_masks[t][rr, cc] > 0
            if not mask.any():
                warnings.warn(f"frame {t}: empty user mask, using all-true mask")
                mask = np.ones((gh, gw), dtype=bool)
            out.append(ForegroundMask(mask, t))
        return out
    for t in range(seq.num_frames):
        sal = backbone.saliency(seq.frames[t])
        thr = otsu_threshold(sal)
        mask = sal > thr
        if not mask.any():
            warnings.warn(f"frame {t}: degenerate saliency, using all-true mask")
            mask = np.ones((gh, gw), dtype=bool)
        out.append(ForegroundMask(mask, t))
    return out
