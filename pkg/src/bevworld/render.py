"""Differentiable point-cloud rendering from BEV feature grids.

Pipeline: a compressed BEV map is upsampled back to full resolution,
expanded into a small feature volume by 3-D convolutions, queried with
trilinear interpolation along rays, mapped to signed distances by an MLP,
and composited into expected ray depths with a sigmoid-difference opacity.

Tensor conventions:
  * BEV maps are (B, C, H, W); row index = y cell, column index = x cell.
  * Volumes are (B, C', Z, H, W); level index = z cell.
  * World coordinates are metres in the frame's ego system; the voxel centre
    of cell (ix, iy, iz) sits at (-extent + (ix+0.5)*cell, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import RunConfig


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeGeometry:
    extent: float
    w: int
    h: int
    z: int
    z_min: float
    z_max: float

    @property
    def cell_xy(self) -> float:
        return 2.0 * self.extent / self.w

    @property
    def cell_z(self) -> float:
        return (self.z_max - self.z_min) / self.z

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "VolumeGeometry":
        return cls(extent=cfg.scene_extent, w=cfg.bev_w, h=cfg.bev_w,
                   z=cfg.vol_z, z_min=cfg.vol_z_min, z_max=cfg.vol_z_max)


class BevUpsampler(nn.Module):
    """Nearest-neighbour x4 upsample followed by one 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.repeat_interleave(torch.repeat_interleave(x, 4, dim=-2), 4, dim=-1)
        return self.conv(x)


class VolumeBuilder(nn.Module):
    """Reshape a full-resolution BEV map into height levels and refine in 3-D.

    Input channels must equal z * levels_per_cell; the split is z-major.
    """

    def __init__(self, z: int, levels_per_cell: int, width: int, out_channels: int):
        super().__init__()
        self.z = z
        self.levels = levels_per_cell
        self.conv1 = nn.Conv3d(levels_per_cell, width, 3, padding=1)
        self.conv2 = nn.Conv3d(width, out_channels, 3, padding=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        b, c, h, w = grid.shape
        if c != self.z * self.levels:
            raise RenderError(f"grid channels {c} not divisible into "
                              f"{self.z} levels x {self.levels}")
        vol = grid.view(b, self.z, self.levels, h, w).permute(0, 2, 1, 3, 4)
        return self.conv2(torch.nn.functional.gelu(self.conv1(vol)))


class SdfHead(nn.Module):
    """Signed distance from interpolated features plus the sample position.

    Positions are divided by the world extent on the way in so every input
    is O(1); no positional encoding is applied.  The opacity sharpness is
    parameterised as tau = exp(theta) to stay positive.
    """

    def __init__(self, feat_channels: int, extent: float, tau_init: float,
                 hidden: int = 32):
        super().__init__()
        self.extent = extent
        self.net = nn.Sequential(
            nn.Linear(feat_channels + 3, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 1),
        )
        self.log_tau = nn.Parameter(torch.tensor(float(math.log(tau_init))))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def forward(self, feats: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        x = torch.cat([feats, points / self.extent], dim=-1)
        return self.net(x).squeeze(-1)


def trilinear_sample(volume: torch.Tensor, points: torch.Tensor,
                     geom: VolumeGeometry) -> torch.Tensor:
    """Trilinear lookup with zero padding outside the volume.

    volume: (B, C, Z, H, W); points: (B, ..., 3) in metres.
    Returns (B, ..., C).
    """
    b, c, z, h, w = volume.shape
    shape = points.shape[:-1]
    p = points.reshape(b, -1, 3)
    fx = (p[..., 0] + geom.extent) / geom.cell_xy - 0.5
    fy = (p[..., 1] + geom.extent) / geom.cell_xy - 0.5
    fz = (p[..., 2] - geom.z_min) / geom.cell_z - 0.5
    x0, y0, z0 = torch.floor(fx), torch.floor(fy), torch.floor(fz)
    wx, wy, wz = fx - x0, fy - y0, fz - z0

    flat = volume.reshape(b, c, z * h * w)
    out = torch.zeros(b, p.shape[1], c, dtype=volume.dtype, device=volume.device)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                xi = x0 + dx
                yi = y0 + dy
                zi = z0 + dz
                valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                         & (zi >= 0) & (zi < z))
                weight = ((wx if dx else 1.0 - wx)
                          * (wy if dy else 1.0 - wy)
                          * (wz if dz else 1.0 - wz)) * valid.to(volume.dtype)
                idx = ((zi.clamp(0, z - 1) * h + yi.clamp(0, h - 1)) * w
                       + xi.clamp(0, w - 1)).long()
                vals = flat.gather(2, idx.unsqueeze(1).expand(b, c, -1))
                out = out + vals.permute(0, 2, 1) * weight.unsqueeze(-1)
    return out.reshape(*shape, c)


def stratified_depths(n_samples: int, lo: float, hi: float, shape,
                      generator=None, dtype=torch.float32,
                      device=None) -> torch.Tensor:
    """One depth per bin over [lo, hi); midpoints unless a generator is given."""
    if hi <= lo:
        raise RenderError("degenerate depth range")
    step = (hi - lo) / n_samples
    base = torch.arange(n_samples, dtype=dtype, device=device) * step + lo
    if generator is None:
        jitter = torch.full((*shape, n_samples), 0.5, dtype=dtype, device=device)
    else:
        jitter = torch.rand(*shape, n_samples, generator=generator,
                            dtype=dtype, device=device)
    return base + jitter * step


_ALPHA_MAX = 1.0 - 1e-6


def opacity(sdf: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """Per-interval opacity from consecutive signed-distance samples.

    alpha_i = max((sig(tau s_i) - sig(tau s_{i+1})) / sig(tau s_i), 0),
    evaluated as 1 - exp(logsig(tau s_{i+1}) - logsig(tau s_i)) so the ratio
    stays finite even where the sigmoid underflows.  The exponent clamp does
    not change any value (positive differences already map to zero opacity);
    the cap below one keeps downstream transmittance products away from hard
    zeros, whose cumulative-product gradients divide by the factors.  The
    output has one fewer entry than the input along the last axis.
    """
    logsig = torch.nn.functional.logsigmoid(tau * sdf)
    diff = (logsig[..., 1:] - logsig[..., :-1]).clamp(max=0.0)
    return (1.0 - torch.exp(diff)).clamp(min=0.0, max=_ALPHA_MAX)


def composite_depth(alpha: torch.Tensor, depths: torch.Tensor):
    """Expected depth under front-to-back alpha compositing.

    Returns (depth, weights); weights w_i = alpha_i * prod_{j<i}(1 - alpha_j).
    """
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    ones = torch.ones_like(alpha[..., :1])
    t_excl = torch.cat([ones, trans[..., :-1]], dim=-1)
    weights = t_excl * alpha
    return (weights * depths).sum(dim=-1), weights


class RayRenderer(nn.Module):
    """Renders expected depths for ego-frame rays through a feature volume."""

    def __init__(self, cfg: RunConfig, feat_channels: int):
        super().__init__()
        self.geom = VolumeGeometry.from_config(cfg)
        self.n_samples = cfg.render_samples
        self.depth_min = cfg.render_depth_min
        self.depth_max = cfg.render_depth_max
        self.head = SdfHead(feat_channels, cfg.scene_extent, cfg.render_tau_init)

    def forward(self, volume: torch.Tensor, origins: torch.Tensor,
                dirs: torch.Tensor, generator=None):
        """volume (B,C,Z,H,W); origins (B,R,3); dirs (B,R,3) unit vectors.

        Returns (depth (B,R), weight_sum (B,R), sdf (B,R,S)).
        """
        if float(origins[..., :2].abs().max()) > self.geom.extent:
            raise RenderError("ray origin outside the volume footprint")
        b, r, _ = dirs.shape
        depths = stratified_depths(self.n_samples, self.depth_min,
                                   self.depth_max, (b, r), generator,
                                   dtype=volume.dtype, device=volume.device)
        points = origins.unsqueeze(2) + depths.unsqueeze(-1) * dirs.unsqueeze(2)
        feats = trilinear_sample(volume, points, self.geom)
        sdf = self.head(feats, points)
        alpha = opacity(sdf, self.head.tau)
        depth, weights = composite_depth(alpha, depths[..., :-1])
        return depth, weights.sum(dim=-1), sdf


def render_pointcloud(depth: torch.Tensor, weight_sum: torch.Tensor,
                      origin: np.ndarray, dirs: np.ndarray,
                      threshold: float) -> np.ndarray:
    """Lift rendered ray depths to 3-D points, dropping low-confidence rays."""
    d = depth.detach().cpu().numpy().reshape(-1)
    ws = weight_sum.detach().cpu().numpy().reshape(-1)
    keep = ws >= threshold
    return origin[None, :] + d[keep, None] * dirs[keep]


def export_ply(points: np.ndarray, path) -> None:
    """Write an ASCII PLY point cloud."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {points.shape[0]}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for p in points:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
