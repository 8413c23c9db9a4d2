"""The full world model: camera lift -> causal core -> future link -> render.

This module only wires submodules together and owns the parameter-group
bookkeeping used by the staged trainer; loss composition lives in
``training``.
"""

from __future__ import annotations

import torch
from torch import nn

from .bev import BevDownsample, BevLift, TokenProjector
from .config import RunConfig
from .geometry import GeometryEncoder
from .language import CausalCore, WorldQueryBuilder
from .link import CopyBaseline, FutureLink, propagate_future
from .render import BevUpsampler, RayRenderer, VolumeBuilder
from .scene import CLASS_NAMES

PARAM_GROUPS = ("extractor", "tokenizer", "projectors", "lm", "queries",
                "link", "upsampler", "volume", "renderer")


class WorldModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab):
        super().__init__()
        self.cfg = cfg
        in_channels = 1 + len(CLASS_NAMES)
        wide = 4 * cfg.bev_c
        self.lift = BevLift(cfg, in_channels)
        self.down = BevDownsample(cfg.bev_c)
        self.to_tokens = TokenProjector(wide, cfg.llm_dim)
        self.core = CausalCore(cfg, len(vocab), vocab.pad_id)
        self.queries = WorldQueryBuilder(cfg)
        if cfg.link_enabled:
            self.link = FutureLink(cfg, n_tokens=cfg.bev_tokens)
        else:
            self.link = CopyBaseline(cfg)
        self.upsampler = BevUpsampler(wide, cfg.vol_z * cfg.render_levels_per_cell)
        self.volume = VolumeBuilder(cfg.vol_z, cfg.render_levels_per_cell,
                                    cfg.extractor_width, cfg.vol_cprime)
        self.renderer = RayRenderer(cfg, cfg.vol_cprime)
        self.extractor = GeometryEncoder(cfg.extractor_width, cfg.vol_cprime)

    # ---- encoding ----

    def encode(self, cam_feats: torch.Tensor) -> dict:
        grid = self.lift(cam_feats)
        comp = self.down(grid)
        return {"grid": grid, "comp": comp, "tokens": self.to_tokens(comp)}

    def comp_from_states(self, states: torch.Tensor) -> torch.Tensor:
        """Invert the token flatten: (B, L, C) states -> (B, 4c, h/4, w/4)."""
        side = self.cfg.bev_w // 4
        proj = self.core.project_bev_states(states)
        return proj.reshape(proj.shape[0], side, side, -1).permute(0, 3, 1, 2)

    def volume_from_comp(self, comp: torch.Tensor) -> torch.Tensor:
        """Compressed map -> upsampled grid -> refined feature volume."""
        return self.volume(self.upsampler(comp))

    def upsampled_grid(self, comp: torch.Tensor) -> torch.Tensor:
        return self.upsampler(comp)

    # ---- future propagation ----

    def future_states(self, bev_states: torch.Tensor, core_out: dict,
                      motions: torch.Tensor) -> list:
        return propagate_future(
            self.link, bev_states,
            core_out.get("query_states"),
            core_out.get("pooled_text"),
            motions, self.cfg.query_n, self.cfg.link_textual_injection)

    # ---- parameter groups for staged freezing ----

    def group_of(self, param_name: str) -> str:
        if param_name.startswith("extractor."):
            return "extractor"
        if param_name.startswith(("lift.", "down.")):
            return "tokenizer"
        if param_name.startswith(("to_tokens.", "core.bev_out_proj.")):
            return "projectors"
        if param_name.startswith("core."):
            return "lm"
        if param_name.startswith("queries."):
            return "queries"
        if param_name.startswith("link."):
            return "link"
        if param_name.startswith("upsampler."):
            return "upsampler"
        if param_name.startswith("volume."):
            return "volume"
        if param_name.startswith("renderer."):
            return "renderer"
        raise ValueError(f"parameter {param_name!r} belongs to no group")

    def group_parameters(self, groups) -> list:
        wanted = set(groups)
        return [p for n, p in self.named_parameters() if self.group_of(n) in wanted]

    def set_trainable(self, groups) -> None:
        wanted = set(groups)
        for n, p in self.named_parameters():
            p.requires_grad_(self.group_of(n) in wanted)
