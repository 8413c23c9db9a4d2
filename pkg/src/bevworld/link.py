"""Current-to-future propagation over BEV token states.

Each future step runs the same stack of blocks (parameters shared across
horizons) on the current BEV states.  A block is: cross-attention into that
horizon's enriched query group plus pooled text, then self-attention and a
feed-forward, with the latter two branches conditioned on the ego motion by
feature-wise modulation.  All residual-branch output projections, the
modulation gains, and the positional embedding start at zero, so an
untrained link is exactly the identity.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import RunConfig


class LinkError(ValueError):
    pass


MOTION_SCALE = (1.0 / 16.0, 1.0 / 16.0, 1.0)


def _scaled(motion: torch.Tensor) -> torch.Tensor:
    scale = torch.tensor(MOTION_SCALE, dtype=motion.dtype, device=motion.device)
    return motion * scale


class EgoModulation(nn.Module):
    """(gamma + 1) * LN(x) + beta, with gamma/beta predicted from ego motion.

    The predictor is a 2-layer MLP ending in tanh, scaled by a learnable
    gain that starts at zero — so modulation is inert at initialisation.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.ln = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(3, hidden), nn.GELU(),
                                 nn.Linear(hidden, 2 * dim))
        self.gain = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
        gb = torch.tanh(self.mlp(_scaled(motion))) * self.gain
        gamma, beta = gb.chunk(2, dim=-1)
        return (gamma.unsqueeze(1) + 1.0) * self.ln(x) + beta.unsqueeze(1)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor,
                return_weights: bool = False):
        b, l, d = x.shape
        lc = cond.shape[1]
        q = self.wq(x).view(b, l, self.heads, -1).transpose(1, 2)
        k = self.wk(cond).view(b, lc, self.heads, -1).transpose(1, 2)
        v = self.wv(cond).view(b, lc, self.heads, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads),
                             dim=-1)
        out = self.out((attn @ v).transpose(1, 2).reshape(b, l, d))
        if return_weights:
            return out, attn
        return out


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, self.heads, -1).transpose(1, 2)
        k = k.view(b, l, self.heads, -1).transpose(1, 2)
        v = v.view(b, l, self.heads, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads),
                             dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(b, l, d))


class LinkBlock(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        dim = cfg.llm_dim
        self.use_em = cfg.link_ego_modulation
        self.ln_q = nn.LayerNorm(dim)
        self.cross = CrossAttention(dim, cfg.link_heads)
        self.self_attn = SelfAttention(dim, cfg.link_heads)
        hidden = cfg.link_ff_mult * dim
        self.ff = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                nn.Linear(hidden, dim))
        nn.init.zeros_(self.ff[-1].weight)
        nn.init.zeros_(self.ff[-1].bias)
        if self.use_em:
            self.em_sa = EgoModulation(dim, cfg.link_mod_hidden)
            self.em_ff = EgoModulation(dim, cfg.link_mod_hidden)
        else:
            self.ln_sa = nn.LayerNorm(dim, elementwise_affine=False)
            self.ln_ff = nn.LayerNorm(dim, elementwise_affine=False)

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None,
                motion: torch.Tensor) -> torch.Tensor:
        if cond is not None and cond.shape[1] > 0:
            x = x + self.cross(self.ln_q(x), cond)
        h = self.em_sa(x, motion) if self.use_em else self.ln_sa(x)
        x = x + self.self_attn(h)
        h = self.em_ff(x, motion) if self.use_em else self.ln_ff(x)
        return x + self.ff(h)


class FutureLink(nn.Module):
    """Shared block stack applied once per future horizon."""

    def __init__(self, cfg: RunConfig, n_tokens: int):
        super().__init__()
        self.cfg = cfg
        self.pos_emb = nn.Parameter(torch.zeros(n_tokens, cfg.llm_dim))
        self.blocks = nn.ModuleList(LinkBlock(cfg)
                                    for _ in range(cfg.link_n_blocks))

    def forward(self, bev_states: torch.Tensor, cond: torch.Tensor | None,
                motion: torch.Tensor) -> torch.Tensor:
        x = bev_states + self.pos_emb
        for block in self.blocks:
            x = block(x, cond, motion)
        return x


class CopyBaseline(nn.Module):
    """No-link ablation: copy the current states, add an ego-motion bias."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.motion_proj = nn.Linear(3, cfg.llm_dim)

    def forward(self, bev_states: torch.Tensor, cond, motion: torch.Tensor) -> torch.Tensor:
        return bev_states + self.motion_proj(_scaled(motion)).unsqueeze(1)


def propagate_future(link: nn.Module, bev_states: torch.Tensor,
                     query_states: torch.Tensor | None,
                     pooled_text: torch.Tensor | None,
                     motions: torch.Tensor, n_per_horizon: int,
                     textual_injection: bool) -> list:
    """Run the link once per horizon with that horizon's conditioning group.

    query_states: (B, H*n, C) in horizon-major order, or None when n = 0.
    motions: (B, H, 3).  Returns a list of (B, L, C) future states.
    """
    horizon = motions.shape[1]
    if horizon < 1:
        raise LinkError("need at least one future horizon")
    groups = None
    if query_states is not None and n_per_horizon > 0:
        b, hn, c = query_states.shape
        if hn != horizon * n_per_horizon:
            raise LinkError("query states do not match horizon x n")
        groups = query_states.view(b, horizon, n_per_horizon, c)
    futures = []
    for i in range(horizon):
        kv = []
        if groups is not None:
            kv.append(groups[:, i])
        if textual_injection and pooled_text is not None:
            kv.append(pooled_text)
        cond = torch.cat(kv, dim=1) if kv else None
        futures.append(link(bev_states, cond, motions[:, i]))
    return futures
