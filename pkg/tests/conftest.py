"""Shared fixtures: tiny random sequences, a sprite video with analytic flow,
and small tracker factories that keep every test CPU-cheap."""

from __future__ import annotations

import numpy as np
import pytest

from selftrack.backbone import BackboneConfig, MockBackbone
from selftrack.flow import AnalyticFlowProvider
from selftrack.media import FrameSequence, sequence_from_frames
from selftrack.tracker import AdapterConfig, Tracker, TrackerConfig


def random_frames(t: int, h: int, w: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((t, h, w, 3), dtype=np.float32)


def make_sequence(t: int = 4, h: int = 48, w: int = 48, seed: int = 0):
    return sequence_from_frames(random_frames(t, h, w, seed))


class SpriteVideo:
    """A textured square translating by a constant step over a static textured
    background. Ground truth and optical flow are known in closed form."""

    def __init__(self, t: int = 24, h: int = 128, w: int = 128,
                 sprite: int = 28, step: float = 3.0, x0: int = 10,
                 y0: int = 50, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.t, self.h, self.w = t, h, w
        self.sprite, self.step, self.x0, self.y0 = sprite, step, x0, y0
        bg = (0.2 + 0.6 * rng.random((h, w, 3))).astype(np.float32)
        tex = rng.random((sprite, sprite, 3)).astype(np.float32)
        frames = np.empty((t, h, w, 3), np.float32)
        for k in range(t):
            img = bg.copy()
            x = self.sprite_x(k)
            img[y0:y0 + sprite, x:x + sprite] = tex
            frames[k] = img
        self.seq = sequence_from_frames(frames)

    def sprite_x(self, frame: int) -> int:
        return int(round(self.x0 + self.step * frame))

    def in_sprite(self, xy: np.ndarray, frame: int) -> np.ndarray:
        x = self.sprite_x(frame)
        return ((xy[:, 0] >= x) & (xy[:, 0] < x + self.sprite)
                & (xy[:, 1] >= self.y0) & (xy[:, 1] < self.y0 + self.sprite))

    def flow_fn(self, i: int, j: int, h: int, w: int) -> np.ndarray:
        """True displacement field i -> j; background-covered pixels get the
        background's (zero) motion, so occluded seeds fail the cycle check."""
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        flow = np.zeros((h * w, 2))
        dx = self.sprite_x(j) - self.sprite_x(i)
        flow[self.in_sprite(pts, i), 0] = dx
        return flow.reshape(h, w, 2)

    def flow_provider(self) -> AnalyticFlowProvider:
        return AnalyticFlowProvider(self.flow_fn, self.t, (self.h, self.w))

    def upsampled_seq(self, scale: int = 2) -> FrameSequence:
        """The same video resampled to a finer working resolution.  Tracking
        internals operate on a fixed-stride grid, so a larger working canvas
        buys sub-pixel precision in the original coordinate frame."""
        import cv2

        up = np.stack([cv2.resize(f, (self.w * scale, self.h * scale),
                                  interpolation=cv2.INTER_LINEAR)
                       for f in self.seq.frames])
        return FrameSequence(up, "<memory>", (self.h, self.w),
                             (self.h * scale, self.w * scale))

    def upsampled_flow_provider(self, scale: int = 2) -> AnalyticFlowProvider:
        """Analytic flow expressed in the upsampled working coordinates."""
        def fn(i: int, j: int, h: int, w: int) -> np.ndarray:
            gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                                 np.arange(h, dtype=np.float64))
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1) / scale
            flow = np.zeros((h * w, 2))
            dx = self.sprite_x(j) - self.sprite_x(i)
            flow[self.in_sprite(pts, i), 0] = scale * dx
            return flow.reshape(h, w, 2)

        return AnalyticFlowProvider(fn, self.t,
                                    (self.h * scale, self.w * scale))

    def gt_tracks(self, n: int, seed: int = 11) -> np.ndarray:
        """(n, T, 2) ground-truth trajectories of points inside the sprite."""
        rng = np.random.default_rng(seed)
        off = 3.0 + rng.random((n, 2)) * (self.sprite - 6)
        base = np.array([self.x0, self.y0], float) + off
        out = np.empty((n, self.t, 2))
        for k in range(self.t):
            out[:, k, 0] = base[:, 0] + (self.sprite_x(k) - self.sprite_x(0))
            out[:, k, 1] = base[:, 1]
        return out


def small_tracker(seq, channels: int = 16, hidden=(4, 8, 8), seed: int = 0,
                  use_refiner: bool = True, dtype=None, stride: int = 7):
    import torch

    bb_cfg = BackboneConfig(stride=stride, patch_size=14, channels=channels)
    backbone = MockBackbone(bb_cfg, seed=seed)
    kwargs = {} if dtype is None else {"dtype": dtype}
    return Tracker(seq, backbone, bb_cfg,
                   AdapterConfig(hidden_channels=tuple(hidden), out_channels=channels),
                   TrackerConfig(use_refiner=use_refiner, seed=seed), **kwargs)


@pytest.fixture(scope="session")
def sprite_video():
    return SpriteVideo()
