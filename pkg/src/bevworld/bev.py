"""Camera-to-BEV tokenizer.

A learnable query per BEV cell cross-attends over the camera features that
its (x, y, anchor-height) probe points project into.  Because the rig and
grid are static, projections and bilinear weights are precomputed once at
construction.  The lifted grid is then compressed by two stride-2
convolutions (x4 spatial, x4 channels) and flattened into LLM tokens.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .scene import camera_poses, project_to_cameras


class CalibrationError(ValueError):
    pass


class BevShapeError(ValueError):
    pass


def validate_rig(cfg: RunConfig) -> None:
    """Reject degenerate camera rigs before any projection is attempted."""
    if cfg.cam_count < 1:
        raise CalibrationError("need at least one camera")
    if not (0.0 < cfg.cam_hfov_deg < 180.0 and 0.0 < cfg.cam_vfov_deg < 180.0):
        raise CalibrationError("field of view must lie in (0, 180) degrees")
    if cfg.cam_width < 2 or cfg.cam_height < 2:
        raise CalibrationError("camera images must be at least 2x2")
    for right, down, fwd, _origin in camera_poses(cfg):
        rot = np.stack([right, down, fwd])
        if abs(abs(np.linalg.det(rot)) - 1.0) > 1e-6:
            raise CalibrationError("camera extrinsics are not a rotation")


class BevLift(nn.Module):
    """Single-head cross-attention from grid queries to projected pixels.

    Output cells that no camera sees keep their query embedding unchanged;
    visible cells are pure attention values (no residual), so with a single
    visible key the output is exactly the value projection of that feature.
    """

    def __init__(self, cfg: RunConfig, in_channels: int):
        super().__init__()
        validate_rig(cfg)
        self.cfg = cfg
        self.w = cfg.bev_w
        self.c = cfg.bev_c
        self.n_anchors = len(cfg.bev_height_anchors)
        self.n_cam = cfg.cam_count

        self.grid_queries = nn.Parameter(torch.randn(self.w * self.w, self.c) * 0.02)
        self.wq = nn.Linear(self.c, self.c, bias=False)
        self.wk = nn.Linear(in_channels, self.c, bias=False)
        self.wv = nn.Linear(in_channels, self.c, bias=False)

        idx, weight, valid = self._precompute()
        self.register_buffer("corner_idx", idx)        # (K, M, 4) long
        self.register_buffer("corner_weight", weight)  # (K, M, 4)
        self.register_buffer("key_valid", valid)       # (K, M) bool

    def _precompute(self):
        cfg = self.cfg
        cell = 2.0 * cfg.scene_extent / self.w
        centers = -cfg.scene_extent + (np.arange(self.w) + 0.5) * cell
        # row-major cell order: index = iy * w + ix
        gx, gy = np.meshgrid(centers, centers)          # (H, W) each
        points = []
        for y_row, x_row in zip(gy.reshape(-1), gx.reshape(-1)):
            for z in cfg.bev_height_anchors:
                points.append((x_row, y_row, z))
        points = np.asarray(points)                     # (M, 3), M = cells*anchors
        uv, _depth, valid = project_to_cameras(points, cfg)

        u, v = uv[..., 0], uv[..., 1]
        u0 = np.floor(u)
        v0 = np.floor(v)
        du, dv = u - u0, v - v0
        wts = np.stack([(1 - du) * (1 - dv), du * (1 - dv),
                        (1 - du) * dv, du * dv], axis=-1)
        idx = []
        for dy in (0, 1):
            for dx in (0, 1):
                uu = np.clip(u0 + dx, 0, cfg.cam_width - 1)
                vv = np.clip(v0 + dy, 0, cfg.cam_height - 1)
                idx.append(vv * cfg.cam_width + uu)
        idx = np.stack([idx[0], idx[1], idx[2], idx[3]], axis=-1)
        wts = wts * valid[..., None]
        return (torch.from_numpy(idx).long(), torch.from_numpy(wts).float(),
                torch.from_numpy(valid))

    def sample_keys(self, feats: torch.Tensor) -> torch.Tensor:
        """Bilinear lookup at every probe point: (B,K,Cin,H,W) -> (B,K,M,Cin)."""
        b, k, cin, h, w = feats.shape
        flat = feats.reshape(b, k, cin, h * w)
        weight = self.corner_weight.to(feats.dtype)
        out = None
        for corner in range(4):
            gidx = self.corner_idx[..., corner]                 # (K, M)
            gather_idx = gidx.unsqueeze(0).unsqueeze(2).expand(b, k, cin, -1)
            vals = flat.gather(3, gather_idx)                   # (B,K,Cin,M)
            term = vals * weight[..., corner].unsqueeze(0).unsqueeze(2)
            out = term if out is None else out + term
        return out.permute(0, 1, 3, 2)                          # (B,K,M,Cin)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        """feats (B, n_cam, C_in, H_img, W_img) -> BEV grid (B, c, H, W)."""
        if feats.dim() != 5 or feats.shape[1] != self.n_cam:
            raise BevShapeError(f"expected (B,{self.n_cam},C,H,W) features")
        b = feats.shape[0]
        keys = self.sample_keys(feats)                          # (B,K,M,Cin)
        n_cells = self.w * self.w
        # regroup probe points: key set per cell = anchors x cameras
        keys = keys.reshape(b, self.n_cam, n_cells, self.n_anchors, -1)
        keys = keys.permute(0, 2, 3, 1, 4).reshape(b, n_cells,
                                                   self.n_anchors * self.n_cam, -1)
        valid = self.key_valid.reshape(self.n_cam, n_cells, self.n_anchors)
        valid = valid.permute(1, 2, 0).reshape(n_cells, -1)     # (cells, A*K)

        q = self.wq(self.grid_queries.to(feats.dtype))          # (cells, c)
        k = self.wk(keys)                                       # (B,cells,A*K,c)
        v = self.wv(keys)
        scores = torch.einsum("nc,bnkc->bnk", q, k) / math.sqrt(self.c)
        scores = scores.masked_fill(~valid.unsqueeze(0), float("-inf"))
        seen = valid.any(dim=1)                                 # (cells,)
        attn = torch.softmax(scores[:, seen, :], dim=-1)
        attended = torch.einsum("bnk,bnkc->bnc", attn, v[:, seen, :, :])

        out = self.grid_queries.to(feats.dtype).unsqueeze(0).expand(b, -1, -1).clone()
        out[:, seen, :] = attended
        return out.reshape(b, self.w, self.w, self.c).permute(0, 3, 1, 2)


class BevDownsample(nn.Module):
    """Two stride-2 convolutions, each doubling the channel count."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, 2 * channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(2 * channels, 4 * channels, 3, stride=2, padding=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        if grid.shape[-1] % 4 or grid.shape[-2] % 4:
            raise BevShapeError("BEV sides must be divisible by 4")
        return self.conv2(torch.nn.functional.gelu(self.conv1(grid)))


class TokenProjector(nn.Module):
    """Row-major flatten of the compressed map plus a shared linear map."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(in_channels, dim)

    def forward(self, comp: torch.Tensor) -> torch.Tensor:
        b, c, h, w = comp.shape
        tokens = comp.permute(0, 2, 3, 1).reshape(b, h * w, c)
        return self.proj(tokens)
