"""Geometric supervision: a frozen voxel-feature extractor and the loss
family used to align predicted feature volumes with it.

The extractor is pretrained once (self-supervised depth reconstruction from
voxelised ground-truth clouds) and then frozen; downstream losses treat its
output as a constant target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .render import RayRenderer, VolumeGeometry


class GeometryError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Raised when a training loop produces non-finite or exploding losses."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


def voxelize(points: np.ndarray, geom: VolumeGeometry,
             dtype=torch.float32) -> torch.Tensor:
    """Binary occupancy volume (1, Z, H, W) from ego-frame points (N, 3).

    Points outside the grid are ignored.
    """
    occ = torch.zeros(1, geom.z, geom.h, geom.w, dtype=dtype)
    if points.size == 0:
        return occ
    ix = np.floor((points[:, 0] + geom.extent) / geom.cell_xy).astype(np.int64)
    iy = np.floor((points[:, 1] + geom.extent) / geom.cell_xy).astype(np.int64)
    iz = np.floor((points[:, 2] - geom.z_min) / geom.cell_z).astype(np.int64)
    keep = ((ix >= 0) & (ix < geom.w) & (iy >= 0) & (iy < geom.h)
            & (iz >= 0) & (iz < geom.z))
    occ[0, iz[keep], iy[keep], ix[keep]] = 1.0
    return occ


class GeometryEncoder(nn.Module):
    """Dense 3-D conv encoder from occupancy to feature volumes."""

    def __init__(self, width: int, out_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(1, width, 3, padding=1), nn.GELU(),
            nn.Conv3d(width, width, 3, padding=1), nn.GELU(),
            nn.Conv3d(width, out_channels, 3, padding=1),
        )

    def forward(self, occupancy: torch.Tensor) -> torch.Tensor:
        return self.net(occupancy)


def freeze_module(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def extract_features(encoder: GeometryEncoder, occupancy: torch.Tensor) -> torch.Tensor:
    """Frozen-target forward pass: no gradients ever flow into the encoder."""
    if occupancy.dim() != 5 or occupancy.shape[1] != 1:
        raise GeometryError(f"expected (B,1,Z,H,W) occupancy, got {tuple(occupancy.shape)}")
    with torch.no_grad():
        return encoder(occupancy).detach()


def pretrain_extractor(encoder: GeometryEncoder, renderer: RayRenderer,
                       samples: list, steps: int, lr: float, batch: int,
                       rays_per_sample: int, rng: np.random.Generator,
                       log=None, grad_clip: float = 0.0) -> list:
    """Self-supervised depth-reconstruction pretraining, then freeze.

    ``samples`` entries are dicts with keys ``occ`` (1,Z,H,W), ``origins``
    (R,3), ``dirs`` (R,3) and ``gt`` (R,) — all torch tensors in the frame's
    ego coordinates with only finite (hit) rays included.
    Returns the per-step loss history; raises TrainingDivergedError when the
    loss goes non-finite or explodes.
    """
    params = list(encoder.parameters()) + list(renderer.parameters())
    opt = torch.optim.AdamW(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=batch)
        occ = torch.stack([samples[i]["occ"] for i in idx])
        vol = encoder(occ)
        origins, dirs, gts = [], [], []
        for i in idx:
            s = samples[i]
            sel = rng.integers(0, s["gt"].shape[0], size=rays_per_sample)
            sel = torch.from_numpy(sel)
            origins.append(s["origins"][sel])
            dirs.append(s["dirs"][sel])
            gts.append(s["gt"][sel])
        pred, _, _ = renderer(vol, torch.stack(origins), torch.stack(dirs))
        loss = (pred - torch.stack(gts)).abs().mean()
        val = float(loss.detach())
        if not np.isfinite(val) or (history and val > 50.0 * (history[0] + 1.0)):
            raise TrainingDivergedError(
                f"extractor pretraining diverged at step {step} (loss {val})",
                history)
        history.append(val)
        opt.zero_grad()
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        opt.step()
        sched.step()
        if log is not None:
            log(step, val)
    freeze_module(encoder)
    return history


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def lambda_weight(frame_index: int) -> float:
    """Per-horizon render-loss weight: 1 + 0.5 * i."""
    return 1.0 + 0.5 * frame_index


def depth_render_loss(pred: torch.Tensor, gt: torch.Tensor,
                      mask: torch.Tensor, frame_index: int) -> torch.Tensor:
    """Weighted mean absolute depth error over supervised rays.

    ``mask`` selects rays with usable ground truth (hits within the render
    range); an empty mask is an error, never a silent zero.
    """
    if int(mask.sum()) == 0:
        raise GeometryError("no supervised rays in render loss")
    err = (pred - gt).abs() * mask.to(pred.dtype)
    return lambda_weight(frame_index) * err.sum() / mask.sum()


def cosine_alignment_loss(pred: torch.Tensor, target: torch.Tensor,
                          eps: float = 1e-8) -> torch.Tensor:
    """1 - mean voxelwise cosine similarity between feature volumes.

    Voxels where both features are numerically zero count as agreement.
    """
    if pred.shape != target.shape:
        raise GeometryError("volume shape mismatch")
    num = (pred * target).sum(dim=1)
    na = torch.linalg.vector_norm(pred, dim=1)
    nb = torch.linalg.vector_norm(target, dim=1)
    cos = num / (na * nb + eps)
    both_zero = (na < eps) & (nb < eps)
    cos = torch.where(both_zero, torch.ones_like(cos), cos)
    return 1.0 - cos.mean()


@dataclass
class GramSet:
    """Spatial Gram matrices for the three axis-pooled views of a volume."""

    hw: torch.Tensor   # (B, H*W, H*W)
    hz: torch.Tensor   # (B, Z*H, Z*H)
    wz: torch.Tensor   # (B, Z*W, Z*W)


def _pooled_map(vol: torch.Tensor, reduce_dim: int, eps: float = 1e-8) -> torch.Tensor:
    """Mean over one spatial axis, flattened row-major to (B, N_d, C).

    Rows are l2-normalised and scaled by 1/sqrt(N_d), so Gram entries are
    bounded correlations and the loss magnitude is independent of grid size
    and feature scale.
    """
    pooled = vol.mean(dim=reduce_dim)          # (B, C, A1, A2)
    b, c = pooled.shape[:2]
    flat = pooled.reshape(b, c, -1).transpose(1, 2)
    norm = torch.linalg.vector_norm(flat, dim=-1, keepdim=True)
    flat = flat / (norm + eps)
    return flat / float(np.sqrt(flat.shape[1]))


def gram_of_map(m: torch.Tensor) -> torch.Tensor:
    """Gram matrix of a pooled map: rows x rows inner products."""
    return m @ m.transpose(-1, -2)


def gram_matrices(vol: torch.Tensor) -> GramSet:
    """GramSet of a feature volume (B, C, Z, H, W)."""
    if vol.dim() != 5:
        raise GeometryError(f"expected (B,C,Z,H,W), got {tuple(vol.shape)}")
    return GramSet(
        hw=gram_of_map(_pooled_map(vol, 2)),   # reduce z
        hz=gram_of_map(_pooled_map(vol, 4)),   # reduce w
        wz=gram_of_map(_pooled_map(vol, 3)),   # reduce h
    )


def gram_alignment_loss(pred: GramSet, target: GramSet) -> torch.Tensor:
    """Mean over perspectives of the squared Frobenius difference."""
    total = None
    for a, b in ((pred.hw, target.hw), (pred.hz, target.hz), (pred.wz, target.wz)):
        if a.shape != b.shape:
            raise GeometryError("gram shape mismatch")
        term = ((a - b) ** 2).sum(dim=(-2, -1)).mean()
        total = term if total is None else total + term
    return total / 3.0


def _cross_energy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """tr((A A^T)(B B^T)) per batch element, via the C x C cross product."""
    cross = a.transpose(1, 2) @ b
    return (cross ** 2).sum(dim=(-2, -1))


def gram_alignment_from_volumes(pred: torch.Tensor,
                                target: torch.Tensor) -> torch.Tensor:
    """Same value as gram_alignment_loss(gram_matrices(pred), ...).

    Expands the squared Frobenius norm into traces of C x C products so the
    row-count-squared Gram matrices are never materialised.
    """
    if pred.shape != target.shape:
        raise GeometryError("volume shape mismatch")
    total = None
    for reduce_dim in (2, 4, 3):
        a = _pooled_map(pred, reduce_dim)
        b = _pooled_map(target, reduce_dim)
        term = (_cross_energy(a, a) - 2.0 * _cross_energy(a, b)
                + _cross_energy(b, b)).mean()
        total = term if total is None else total + term
    return total / 3.0


def total_loss(lang, render_terms: list, cos, gram,
               render_weight: float = 10.0,
               use_cos: bool = True, use_gram: bool = True) -> dict:
    """Compose the joint objective; every active part must be finite.

    ``lang``, ``cos`` and ``gram`` may be None (or toggled off) and then
    contribute nothing; ``render_terms`` are already horizon-weighted.
    """
    parts = {}
    total = None

    def _add(name, value, weight=1.0):
        nonlocal total
        parts[name] = value
        if value is None:
            return
        if not torch.isfinite(value):
            raise GeometryError(f"non-finite loss component {name!r}")
        total = value * weight if total is None else total + value * weight

    _add("lang", lang)
    for i, term in enumerate(render_terms):
        _add(f"render_{i}", term, render_weight)
    _add("cos", cos if use_cos else None)
    _add("gram", gram if use_gram else None)
    if total is None:
        raise GeometryError("no loss components supplied")
    parts["total"] = total
    return parts
