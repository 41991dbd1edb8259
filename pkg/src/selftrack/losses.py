"""The five-term training objective, evaluated on sampled correspondence
batches. Continuous coordinates are normalized to [-1, 1] per axis before any
position loss: n = 2x/(D-1) - 1 with D the axis size in pixels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import torch

from .tracker import Tracker, sample_query_features


@dataclass
class LossWeights:
    dino_bb: float = 25e-5   # lambda_1
    rfn_bb: float = 5e-5     # lambda_2
    rfn_cc: float = 0.5      # lambda_3
    prior: float = 1e-4      # lambda_4
    temperature: float = 0.1
    huber_delta: float = 1.0  # in normalized units

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass
class LossReport:
    flow: float
    dino_bb: float
    rfn_bb: float
    rfn_cc: float
    prior: float
    total: float
    counts: dict[str, int]

    def as_dict(self) -> dict:
        return {"flow": self.flow, "dino_bb": self.dino_bb, "rfn_bb": self.rfn_bb,
                "rfn_cc": self.rfn_cc, "prior": self.prior, "total": self.total,
                **{f"n_{k}": v for k, v in self.counts.items()}}


def normalize_coords(xy: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Pixel (x, y) -> [-1, 1]^2; pixel 0 maps to -1 and D-1 to +1 exactly."""
    h, w = hw
    scale = torch.tensor([2.0 / (w - 1), 2.0 / (h - 1)], dtype=xy.dtype,
                         device=xy.device)
    return xy * scale - 1.0


def huber(a: torch.Tensor, b: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Huber loss on the Euclidean distance of (..., 2) point pairs."""
    r = (a - b).norm(dim=-1)
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin)


def flow_loss(tracker: Tracker, batch, maps, weights: LossWeights) -> torch.Tensor:
    """Mean symmetric Huber misfit between tracked and flow-derived positions.

    ``batch`` carries frame_i, frame_j (ints per pair) and xi, xj tensors.
    """
    if batch is None or len(batch.frame_i) == 0:
        return _zero(tracker)
    hw = tracker.seq.working_size
    terms = []
    for (i, j), sel in _group_pairs(batch.frame_i, batch.frame_j):
        pred_j = tracker.track_points(batch.xi[sel], i, j, maps)
        pred_i = tracker.track_points(batch.xj[sel], j, i, maps)
        terms.append(
            huber(normalize_coords(pred_j, hw), normalize_coords(batch.xj[sel], hw),
                  weights.huber_delta)
            + huber(normalize_coords(pred_i, hw), normalize_coords(batch.xi[sel], hw),
                    weights.huber_delta))
    return torch.cat(terms).mean()


def contrastive_pair_loss(phi_a: torch.Tensor, phi_b: torch.Tensor,
                          target_map: torch.Tensor, temperature: float) -> torch.Tensor:
    """-log softmax of the positive cosine logit over all target-map cells."""
    ch = target_map.shape[-1]
    t = target_map.reshape(-1, ch)
    t = t / t.norm(dim=1, keepdim=True).clamp_min(1e-12)
    a = phi_a / phi_a.norm().clamp_min(1e-12)
    b = phi_b / phi_b.norm().clamp_min(1e-12)
    logits = (t @ a) / temperature
    pos = (a @ b) / temperature
    return torch.logsumexp(logits, dim=0) - pos


def buddy_loss(tracker: Tracker, pairs, maps, weights: LossWeights) -> torch.Tensor:
    """Weighted symmetrized contrastive loss over a buddy batch.

    (1/|batch|) * sum of 0.5 * w * (l(i->j) + l(j->i)); features are sampled
    from the current refined maps at the buddy cells' patch centers.
    """
    if not pairs:
        return _zero(tracker)
    stride = tracker.bb_cfg.stride
    patch = tracker.bb_cfg.patch_size
    tau = weights.temperature
    total = _zero(tracker)
    for p in pairs:
        phi_i = _cell_feature(maps, p.i, p.cell_i, stride, patch)
        phi_j = _cell_feature(maps, p.j, p.cell_j, stride, patch)
        l_ij = contrastive_pair_loss(phi_i, phi_j, maps[p.j], tau)
        l_ji = contrastive_pair_loss(phi_j, phi_i, maps[p.i], tau)
        total = total + 0.5 * p.w * (l_ij + l_ji)
    return total / len(pairs)


def cycle_loss(tracker: Tracker, pairs, maps, weights: LossWeights) -> torch.Tensor:
    """Mean of 0.5 * w * symmetric Huber misfit over cycle-consistent pairs."""
    if not pairs:
        return _zero(tracker)
    hw = tracker.seq.working_size
    dev = dict(dtype=tracker.dtype, device=tracker.device)
    terms = []
    for p in pairs:
        xi = torch.as_tensor(p.xi[None], **dev)
        xj = torch.as_tensor(p.xj[None], **dev)
        pred_j = tracker.track_points(xi, p.i, p.j, maps)
        pred_i = tracker.track_points(xj, p.j, p.i, maps)
        lh = (huber(normalize_coords(pred_j, hw), normalize_coords(xj, hw),
                    weights.huber_delta)
              + huber(normalize_coords(pred_i, hw), normalize_coords(xi, hw),
                      weights.huber_delta))
        terms.append(0.5 * p.w * lh)
    return torch.cat(terms).mean()


def prior_loss(refined: torch.Tensor, frozen: torch.Tensor) -> torch.Tensor:
    """Norm-ratio + angle deviation of refined features from the frozen ones,
    averaged over grid cells; zero-norm frozen cells are excluded."""
    ch = refined.shape[-1]
    r = refined.reshape(-1, ch)
    d = frozen.reshape(-1, ch)
    dn = d.norm(dim=1)
    valid = dn > 0
    if not bool(valid.all()):
        warnings.warn("prior_loss: zero-norm frozen cells excluded from the mean")
        r, d, dn = r[valid], d[valid], dn[valid]
    rn = r.norm(dim=1)
    l_norm = (1.0 - rn / dn).abs()
    cos = (r * d).sum(dim=1) / (rn * dn).clamp_min(1e-12)
    l_angle = (1.0 - cos).abs()
    return (l_norm + l_angle).mean()


def total_loss(tracker: Tracker, batch, weights: LossWeights,
               rfn_active: bool = True) -> tuple[torch.Tensor, LossReport]:
    """Eq.-style weighted sum of all five terms over one sampled batch.

    ``batch`` is a ``training.Batch``; refined-feature terms contribute
    exactly 0 while ``rfn_active`` is false (pre-activation iterations).
    """
    maps = tracker.refined_maps(batch.frames)
    l_flow = flow_loss(tracker, batch.flow, maps, weights)
    l_dino = buddy_loss(tracker, batch.dino_bb, maps, weights)
    if rfn_active:
        l_rfn = buddy_loss(tracker, batch.rfn_bb, maps, weights)
        l_cc = cycle_loss(tracker, batch.rfn_cc, maps, weights)
    else:
        l_rfn = _zero(tracker)
        l_cc = _zero(tracker)
    l_prior = torch.stack(
        [prior_loss(maps[t], tracker.dino_map(t)) for t in batch.frames]).mean()
    total = (l_flow + weights.dino_bb * l_dino + weights.rfn_bb * l_rfn
             + weights.rfn_cc * l_cc + weights.prior * l_prior)
    report = LossReport(
        float(l_flow.detach()), float(l_dino.detach()), float(l_rfn.detach()),
        float(l_cc.detach()), float(l_prior.detach()), float(total.detach()),
        {"flow": 0 if batch.flow is None else len(batch.flow.frame_i),
         "dino_bb": len(batch.dino_bb),
         "rfn_bb": len(batch.rfn_bb) if rfn_active else 0,
         "rfn_cc": len(batch.rfn_cc) if rfn_active else 0})
    return total, report


def _zero(tracker: Tracker) -> torch.Tensor:
    return torch.zeros((), dtype=tracker.dtype, device=tracker.device)


def _cell_feature(maps, frame: int, cell: tuple[int, int], stride: int,
                  patch: int) -> torch.Tensor:
    return maps[frame][cell[0], cell[1]]


def _group_pairs(frame_i, frame_j):
    groups: dict[tuple[int, int], list[int]] = {}
    for k, (i, j) in enumerate(zip(frame_i, frame_j)):
        groups.setdefault((int(i), int(j)), []).append(k)
    for key, idx in sorted(groups.items()):
        yield key, torch.as_tensor(idx)
