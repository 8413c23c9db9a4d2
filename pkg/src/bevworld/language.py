"""Causal multimodal core: BEV tokens, then text, then world queries in one
autoregressive stream.

The sequence layout is fixed per config: ``[bev cells][instruction pad to
L_i][answer slot pad to L_a][query tokens]``.  Causal masking guarantees the
text logits never depend on the query tokens, and BEV states never depend on
the text.  Hidden states exposed to other modules (BEV states, query states,
pooled text) are taken from the raw residual stream before the final norm,
so zero-initialised residual branches leave them exactly equal to their
input embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import RunConfig


class LanguageError(ValueError):
    pass


class EmptySupervisionError(LanguageError):
    pass


@dataclass(frozen=True)
class SequenceLayout:
    n_bev: int
    instr_len: int
    answer_len: int
    n_query: int

    @property
    def text_len(self) -> int:
        return self.instr_len + self.answer_len

    @property
    def text_start(self) -> int:
        return self.n_bev

    @property
    def query_start(self) -> int:
        return self.n_bev + self.text_len

    @property
    def total(self) -> int:
        return self.query_start + self.n_query

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SequenceLayout":
        return cls(n_bev=cfg.bev_tokens, instr_len=cfg.llm_instr_len,
                   answer_len=cfg.llm_answer_len,
                   n_query=cfg.query_n * cfg.query_horizon)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise LanguageError("dim must divide heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, self.heads, -1).transpose(1, 2)
        k = k.view(b, l, self.heads, -1).transpose(1, 2)
        v = v.view(b, l, self.heads, -1).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        scores = scores + bias
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


class CausalCore(nn.Module):
    """The shared autoregressive transformer over BEV/text/query tokens."""

    def __init__(self, cfg: RunConfig, vocab_size: int, pad_id: int):
        super().__init__()
        self.cfg = cfg
        self.layout = SequenceLayout.from_config(cfg)
        if self.layout.total > cfg.llm_max_seq:
            raise LanguageError(f"sequence length {self.layout.total} exceeds "
                                f"context {cfg.llm_max_seq}")
        dim = cfg.llm_dim
        self.pad_id = pad_id
        self.vocab_size = vocab_size
        self.token_emb = nn.Embedding(vocab_size, dim)
        # continuous prefix/suffix tokens come from conv stacks whose scale is
        # unbounded; normalising them on entry keeps attention unsaturated
        self.in_norm = nn.LayerNorm(dim)
        self.pos_emb = nn.Parameter(torch.randn(self.layout.total, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, cfg.llm_heads)
                                    for _ in range(cfg.llm_layers))
        self.ln_f = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, vocab_size, bias=False)
        self.bev_out_proj = nn.Linear(dim, 4 * cfg.bev_c)
        self.text_pool_proj = nn.Linear(dim, dim)
        self.pooled_text_tokens = cfg.llm_pooled_text

    def _bias(self, text_ids: torch.Tensor, total: int) -> torch.Tensor:
        """Additive attention bias: causal and pad-keys-blocked."""
        b = text_ids.shape[0]
        lay = self.layout
        device = text_ids.device
        neg = torch.finfo(self.pos_emb.dtype).min
        causal = torch.triu(torch.ones(total, total, device=device, dtype=torch.bool), 1)
        bias = torch.zeros(b, 1, total, total, dtype=self.pos_emb.dtype, device=device)
        bias.masked_fill_(causal, neg)
        key_pad = torch.zeros(b, total, dtype=torch.bool, device=device)
        key_pad[:, lay.text_start:lay.text_start + lay.text_len] = text_ids == self.pad_id
        bias = bias.masked_fill(key_pad[:, None, None, :], neg)
        return bias

    def forward(self, bev_tokens: torch.Tensor, text_ids: torch.Tensor,
                queries: torch.Tensor | None = None) -> dict:
        """bev_tokens (B, L_bev, C); text_ids (B, L_text); queries (B, Lq, C).

        Returns text logits aligned so logits[:, j] predicts text_ids[:, j],
        plus the raw hidden states for the BEV span, query span, and the
        pooled text representation.
        """
        lay = self.layout
        b = bev_tokens.shape[0]
        if bev_tokens.shape[1] != lay.n_bev:
            raise LanguageError(f"expected {lay.n_bev} BEV tokens")
        if text_ids.shape[1] != lay.text_len:
            raise LanguageError(f"expected text length {lay.text_len}")
        parts = [self.in_norm(bev_tokens), self.token_emb(text_ids)]
        total = lay.n_bev + lay.text_len
        if queries is not None:
            if queries.shape[1] != lay.n_query:
                raise LanguageError(f"expected {lay.n_query} query tokens")
            parts.append(self.in_norm(queries))
            total += lay.n_query
        x = torch.cat(parts, dim=1) + self.pos_emb[:total]
        bias = self._bias(text_ids, total)
        for block in self.blocks:
            x = block(x, bias)

        # logits at position j-1 predict token j; gather the text span
        pred_h = x[:, lay.text_start - 1:lay.text_start + lay.text_len - 1]
        logits = self.lm_head(self.ln_f(pred_h))

        text_h = x[:, lay.text_start:lay.text_start + lay.text_len]
        not_pad = (text_ids != self.pad_id).to(x.dtype)
        pooled = self._pool_text(text_h, not_pad)

        out = {
            "logits": logits,
            "bev_states": x[:, :lay.n_bev],
            "pooled_text": pooled,
        }
        if queries is not None:
            out["query_states"] = x[:, lay.query_start:lay.query_start + lay.n_query]
        return out

    def _pool_text(self, text_h: torch.Tensor, not_pad: torch.Tensor) -> torch.Tensor:
        """Masked mean over k contiguous bins of the text span, then project."""
        b, l, d = text_h.shape
        k = self.pooled_text_tokens
        edges = [round(i * l / k) for i in range(k + 1)]
        bins = []
        for i in range(k):
            seg = text_h[:, edges[i]:edges[i + 1]]
            w = not_pad[:, edges[i]:edges[i + 1]].unsqueeze(-1)
            denom = w.sum(dim=1).clamp(min=1.0)
            bins.append((seg * w).sum(dim=1) / denom)
        return self.text_pool_proj(torch.stack(bins, dim=1))

    def project_bev_states(self, states: torch.Tensor) -> torch.Tensor:
        """Map residual-stream BEV states to render-path channels (4c)."""
        return self.bev_out_proj(states)


def language_loss(logits: torch.Tensor, targets: torch.Tensor,
                  mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token negative log-likelihood over the supervised positions."""
    if int(mask.sum()) == 0:
        raise EmptySupervisionError("no supervised text positions")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(logits.dtype)
    return (nll * m).sum() / m.sum()


@torch.no_grad()
def decode_greedy(core: CausalCore, bev_tokens: torch.Tensor,
                  instr_ids: torch.Tensor, vocab) -> list:
    """Greedy answer decoding; ties resolve to the lowest token id.

    instr_ids: (B, instr_len) padded instruction.  Returns a list of id
    lists, one per batch row, truncated before the end marker.
    """
    lay = core.layout
    b = instr_ids.shape[0]
    device = instr_ids.device
    answer = torch.full((b, lay.answer_len), vocab.pad_id, dtype=torch.long,
                        device=device)
    answer[:, 0] = vocab.ans_id
    done = torch.zeros(b, dtype=torch.bool, device=device)
    for step in range(lay.answer_len - 1):
        text = torch.cat([instr_ids, answer], dim=1)
        out = core(bev_tokens, text)
        nxt = out["logits"][:, lay.instr_len + 1 + step].argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, vocab.pad_id), nxt)
        done = done | (nxt == vocab.eos_id)
        answer[:, step + 1] = torch.where(nxt == vocab.eos_id,
                                          torch.full_like(nxt, vocab.pad_id), nxt)
        if bool(done.all()):
            break
    results = []
    for row in answer:
        ids = [int(t) for t in row[1:] if int(t) != vocab.pad_id]
        results.append(ids)
    return results


@dataclass
class WorldQueries:
    """Future-conditioning tokens and their ingredients.

    base: pooled current-scene queries, (B, n, 4c)
    motion_embeds: per-horizon ego-motion embeddings, (B, H, 4c)
    frame_embeds: learned per-horizon embeddings, (H, 4c)
    enriched: base + motion + frame per horizon, (B, H, n, 4c)
    projected: enriched mapped into the LLM width, (B, H*n, C)
    """

    base: torch.Tensor
    motion_embeds: torch.Tensor
    frame_embeds: torch.Tensor
    enriched: torch.Tensor
    projected: torch.Tensor

    @property
    def n(self) -> int:
        return self.base.shape[1]

    @property
    def horizon(self) -> int:
        return self.motion_embeds.shape[1]


def _pool_grid(n: int):
    g1 = int(math.floor(math.sqrt(n)))
    while n % g1:
        g1 -= 1
    return g1, n // g1


class WorldQueryBuilder(nn.Module):
    """Builds the per-horizon query groups appended after the text."""

    MOTION_SCALE = (1.0 / 16.0, 1.0 / 16.0, 1.0)

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.n = cfg.query_n
        self.horizon = cfg.query_horizon
        self.mode = cfg.query_init
        width = 4 * cfg.bev_c
        self.motion_mlp = nn.Sequential(nn.Linear(3, 64), nn.GELU(),
                                        nn.Linear(64, width))
        self.frame_emb = nn.Parameter(torch.randn(self.horizon, width) * 0.02)
        self.proj = nn.Linear(width, cfg.llm_dim)
        if self.mode == "random":
            self.random_base = nn.Parameter(torch.randn(self.n, width) * 0.02)
        elif self.mode == "attn":
            self.attn_queries = nn.Parameter(torch.randn(self.n, width) * 0.02)

    def base_queries(self, comp: torch.Tensor) -> torch.Tensor:
        b, c, h, w = comp.shape
        if self.mode in ("max", "avg"):
            g1, g2 = _pool_grid(self.n)
            pool = (torch.nn.functional.adaptive_max_pool2d if self.mode == "max"
                    else torch.nn.functional.adaptive_avg_pool2d)
            pooled = pool(comp, (g1, g2))
            return pooled.reshape(b, c, self.n).transpose(1, 2)
        if self.mode == "random":
            return self.random_base.unsqueeze(0).expand(b, -1, -1)
        cells = comp.reshape(b, c, h * w).transpose(1, 2)       # (B, HW, 4c)
        scores = torch.einsum("nc,blc->bnl", self.attn_queries, cells)
        attn = torch.softmax(scores / math.sqrt(c), dim=-1)
        return attn @ cells

    def forward(self, comp: torch.Tensor, motions: torch.Tensor) -> WorldQueries:
        """comp (B, 4c, h/4, w/4); motions (B, H, 3) as (dx, dy, dyaw)."""
        if motions.shape[1] != self.horizon:
            raise LanguageError(f"expected {self.horizon} ego motions, "
                                f"got {motions.shape[1]}")
        base = self.base_queries(comp)
        scale = torch.tensor(self.MOTION_SCALE, dtype=motions.dtype,
                             device=motions.device)
        e = self.motion_mlp(motions * scale)                    # (B, H, 4c)
        groups = (base.unsqueeze(1) + e.unsqueeze(2)
                  + self.frame_emb.unsqueeze(0).unsqueeze(2))   # (B,H,n,4c)
        b = comp.shape[0]
        projected = self.proj(groups.reshape(b, self.horizon * self.n, -1))
        return WorldQueries(base=base, motion_embeds=e,
                            frame_embeds=self.frame_emb, enriched=groups,
                            projected=projected)
