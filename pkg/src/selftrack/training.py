"""Per-video optimization: batch composition, schedules, checkpoints."""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field, asdict
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from .backbone import feature_grid_to_pixel
from .errors import InputError, NumericalError
from .flow import FlowCorrespondenceSet
from .losses import LossWeights, total_loss
from .mining import (BuddyPair, CyclePair, MinerConfig, mine_cycle_pairs,
                     mine_refined_buddies)
from .tracker import Tracker, save_checkpoint


@dataclass
class TrainConfig:
    lr: float = 0.01
    refiner_lr_decay: float = 0.999
    refiner_decay_every: int = 40
    iterations: int = 10_000
    rfn_loss_start: int = 5_000
    frames_per_batch: int = 8
    flow_pairs: int = 512
    max_bb_pairs: int = 1024
    max_cc_pairs: int = 1024
    bb_frame_pairs: int = 4
    fg_ratio_flow: float = 0.5
    fg_ratio_feat: float = 0.7
    frame_subsample: int = 1
    cc_seed_grid: int = 16      # px grid of extra cycle-pair seeds
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("iterations", "frames_per_batch", "flow_pairs", "max_bb_pairs",
                     "max_cc_pairs", "bb_frame_pairs", "frame_subsample"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        for name in ("fg_ratio_flow", "fg_ratio_feat"):
            if not 0 <= getattr(self, name) <= 1:
                raise InputError(f"{name} must be in [0, 1]")


@dataclass
class Supervision:
    """Preprocessed per-video supervision handed to the trainer."""

    flow_set: FlowCorrespondenceSet
    dino_bb: dict[tuple[int, int], list[BuddyPair]]
    masks: list  # ForegroundMask per frame


@dataclass
class FlowBatch:
    frame_i: np.ndarray
    frame_j: np.ndarray
    xi: torch.Tensor
    xj: torch.Tensor


@dataclass
class Batch:
    frames: list[int]
    flow: FlowBatch | None
    dino_bb: list[BuddyPair]
    rfn_bb: list[BuddyPair]
    rfn_cc: list[CyclePair]


def lr_schedule(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """(adapter_lr, refiner_lr) at a given step; only the refiner decays."""
    return cfg.lr, cfg.lr * cfg.refiner_lr_decay ** (step // cfg.refiner_decay_every)


def _stratified_sample(idx_fg: np.ndarray, idx_bg: np.ndarray, count: int,
                       fg_ratio: float, rng: np.random.Generator,
                       what: str) -> np.ndarray:
    """Sample up to ``count`` items without replacement at the given
    foreground ratio, spilling into the other stratum when one runs short."""
    total = len(idx_fg) + len(idx_bg)
    count = min(count, total)
    want_fg = int(round(count * fg_ratio))
    take_fg = min(want_fg, len(idx_fg))
    take_bg = min(count - take_fg, len(idx_bg))
    if take_fg + take_bg < count:
        extra = count - take_fg - take_bg
        take_fg = min(take_fg + extra, len(idx_fg))
        warnings.warn(f"{what}: stratum short, filled from the other stratum")
    elif take_fg < want_fg:
        warnings.warn(f"{what}: foreground stratum short, filled from background")
    sel = []
    if take_fg:
        sel.append(rng.choice(idx_fg, size=take_fg, replace=False))
    if take_bg:
        sel.append(rng.choice(idx_bg, size=take_bg, replace=False))
    return np.concatenate(sel) if sel else np.empty(0, dtype=np.int64)


def _buddy_fg(pair: BuddyPair, masks) -> bool:
    return bool(masks[pair.i].mask[pair.cell_i]) and bool(masks[pair.j].mask[pair.cell_j])


def _point_fg(xy: np.ndarray, frame: int, masks, stride: int, patch: int) -> bool:
    m = masks[frame].mask
    r = int(np.clip(round((xy[1] - (patch - 1) / 2) / stride), 0, m.shape[0] - 1))
    c = int(np.clip(round((xy[0] - (patch - 1) / 2) / stride), 0, m.shape[1] - 1))
    return bool(m[r, c])


def sample_batch(tracker: Tracker, sup: Supervision, cfg: TrainConfig,
                 rng: np.random.Generator, rfn_active: bool,
                 miner_cfg: MinerConfig | None = None) -> Batch:
    """Compose one training batch per the published recipe.

    Draws ``frames_per_batch`` frames, flow pairs among them at the flow
    foreground ratio, capped best-buddy pairs across ``bb_frame_pairs`` frame
    pairs, and (after activation) freshly mined refined buddies and
    cycle-consistent pairs.
    """
    t_total = tracker.seq.num_frames
    allowed = np.arange(0, t_total, cfg.frame_subsample)
    if len(allowed) < 2:
        raise InputError("frame_subsample leaves fewer than 2 frames")
    n_frames = min(cfg.frames_per_batch, len(allowed))
    frames = np.sort(rng.choice(allowed, size=n_frames, replace=False))
    fset = set(int(f) for f in frames)

    # --- flow pairs
    flow_batch = None
    fs = sup.flow_set
    if len(fs):
        within = np.array([int(a) in fset and int(b) in fset
                           for a, b in zip(fs.frame_i, fs.frame_j)])
        cand = np.flatnonzero(within)
        if len(cand):
            fg = fs.foreground[cand]
            sel = _stratified_sample(cand[fg], cand[~fg], cfg.flow_pairs,
                                     cfg.fg_ratio_flow, rng, "flow pairs")
            sel = np.sort(sel)
            dev = dict(dtype=tracker.dtype, device=tracker.device)
            flow_batch = FlowBatch(fs.frame_i[sel], fs.frame_j[sel],
                                   torch.as_tensor(fs.xi[sel], **dev),
                                   torch.as_tensor(fs.xj[sel], **dev))

    # --- frame pairs for feature correspondences
    combos = list(combinations(sorted(fset), 2))
    k = min(cfg.bb_frame_pairs, len(combos))
    pair_idx = rng.choice(len(combos), size=k, replace=False)
    frame_pairs = [combos[int(p)] for p in sorted(pair_idx)]

    def cap_buddies(pairs: list[BuddyPair], what: str) -> list[BuddyPair]:
        if not pairs:
            return []
        fg = np.array([_buddy_fg(p, sup.masks) for p in pairs])
        idx = np.arange(len(pairs))
        sel = _stratified_sample(idx[fg], idx[~fg], cfg.max_bb_pairs,
                                 cfg.fg_ratio_feat, rng, what)
        return [pairs[int(s)] for s in np.sort(sel)]

    dino_pairs = [p for ij in frame_pairs for p in sup.dino_bb.get(ij, [])]
    dino_pairs = cap_buddies(dino_pairs, "dino-bb pairs")

    rfn_pairs: list[BuddyPair] = []
    cc_pairs: list[CyclePair] = []
    if rfn_active:
        miner_cfg = miner_cfg or MinerConfig()
        refined = {t: tracker.refined_feature_map(t)
                   for t in sorted({f for ij in frame_pairs for f in ij})}
        for i, j in frame_pairs:
            rfn_pairs += mine_refined_buddies(refined[i], refined[j])
        rfn_pairs = cap_buddies(rfn_pairs, "rfn-bb pairs")

        h, w = tracker.seq.working_size
        gx, gy = np.meshgrid(np.arange(0, w, cfg.cc_seed_grid, dtype=np.float64),
                             np.arange(0, h, cfg.cc_seed_grid, dtype=np.float64))
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        seeds: dict[int, np.ndarray] = {}
        for i, j in frame_pairs:
            ends = [feature_grid_to_pixel(np.array([p.cell_i], float),
                                          tracker.bb_cfg.stride,
                                          tracker.bb_cfg.patch_size)[0]
                    for p in rfn_pairs if p.i == i]
            seeds[i] = np.concatenate([grid, np.array(ends)]) if ends else grid
        cc_all = mine_cycle_pairs(tracker.track_points_np, frame_pairs, seeds,
                                  miner_cfg)
        if cc_all:
            stride, patch = tracker.bb_cfg.stride, tracker.bb_cfg.patch_size
            fg = np.array([
                _point_fg(p.xi, p.i, sup.masks, stride, patch)
                and _point_fg(p.xj, p.j, sup.masks, stride, patch)
                for p in cc_all])
            idx = np.arange(len(cc_all))
            sel = _stratified_sample(idx[fg], idx[~fg], cfg.max_cc_pairs,
                                     cfg.fg_ratio_feat, rng, "cc pairs")
            cc_pairs = [cc_all[int(s)] for s in np.sort(sel)]

    if flow_batch is None and not dino_pairs and not rfn_pairs and not cc_pairs:
        raise InputError(
            "no supervision available for sampled frames "
            f"{sorted(fset)}; check the preprocessing stage")
    return Batch(sorted(fset), flow_batch, dino_pairs, rfn_pairs, cc_pairs)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    iteration: int
    optimizer_state: dict
    numpy_rng_state: dict
    torch_rng_state: torch.Tensor
    reports: list = field(default_factory=list)


def _make_optimizer(tracker: Tracker, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [{"params": list(tracker.adapter.parameters()), "lr": cfg.lr},
         {"params": list(tracker.refiner.parameters()), "lr": cfg.lr}],
        betas=(0.9, 0.999), eps=1e-8)


def train(tracker: Tracker, sup: Supervision, cfg: TrainConfig,
          out_dir: str | None = None,
          weights: LossWeights | None = None,
          miner_cfg: MinerConfig | None = None,
          resume_from: dict | None = None,
          config_hash: str = "unhashed") -> TrainState:
    """Optimize the adapter + refiner on one video's mined supervision.

    Deterministic for a fixed seed; resuming from a checkpoint payload
    reproduces the identical loss sequence.
    """
    weights = weights or LossWeights()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "loss_log.jsonl", "a") if out else None

    opt = _make_optimizer(tracker, cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    start = 0
    if resume_from is not None:
        start = resume_from["iteration"]
        opt.load_state_dict(resume_from["optimizer"])
        rng.bit_generator.state = resume_from["numpy_rng"]
        torch.set_rng_state(resume_from["torch_rng"])

    tracker.train_mode()
    state = TrainState(start, {}, {}, torch.empty(0))

    def checkpoint(path: Path, iteration: int):
        save_checkpoint(str(path), tracker, iteration, config_hash, extra={
            "optimizer": opt.state_dict(),
            "numpy_rng": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        })

    try:
        for step in range(start, cfg.iterations):
            lr_a, lr_r = lr_schedule(step, cfg)
            opt.param_groups[0]["lr"] = lr_a
            opt.param_groups[1]["lr"] = lr_r

            rfn_active = step >= cfg.rfn_loss_start
            tracker.eval_mode()
            batch = sample_batch(tracker, sup, cfg, rng, rfn_active, miner_cfg)
            tracker.train_mode()
            loss, report = total_loss(tracker, batch, weights, rfn_active)
            if not np.isfinite(report.total):
                if out:
                    checkpoint(out / "last_good.pt", step)
                raise NumericalError(f"non-finite loss at iteration {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()

            state.reports.append(report)
            if log_fh:
                log_fh.write(json.dumps({"step": step, **report.as_dict()}) + "\n")
            if out and ((step + 1) % cfg.checkpoint_every == 0
                        or step + 1 == cfg.iterations):
                checkpoint(out / f"checkpoint_{step + 1:06d}.pt", step + 1)
    finally:
        if log_fh:
            log_fh.close()

    state.iteration = cfg.iterations
    state.optimizer_state = copy.deepcopy(opt.state_dict())
    state.numpy_rng_state = rng.bit_generator.state
    state.torch_rng_state = torch.get_rng_state()
    if out:
        checkpoint(out / "final.pt", cfg.iterations)
    tracker.eval_mode()
    return state


def config_hash_of(*cfgs) -> str:
    """Stable short hash over dataclass configs, for cache keys."""
    import hashlib

    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c
                       for c in cfgs], sort_keys=True, default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]
