"""Multi-head scaled-dot-product cross-attention used by the enhancement and
text-refinement modules.

Kept in-house (rather than nn.MultiheadAttention) so tests can read the
attention weights, zero individual projections, and run the whole thing in
float64 for finite-difference checks.
"""

from __future__ import annotations

import torch
from torch import nn


class MultiheadCrossAttention(nn.Module):
    """out = out_proj(softmax(QK^T / sqrt(d_head)) V), Q from the query
    tokens, K and V from the context tokens.

    The output projection is zero-initialized so that, combined with a
    residual connection, a freshly built block is the identity.
    """

    def __init__(self, dim, heads=1, zero_init_out=True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context, need_weights=False):
        """query (B, Nq, C), context (B, Nk, C) -> (B, Nq, C)
        and optionally the attention weights (B, heads, Nq, Nk)."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(query.shape)
        out = self.out_proj(out)
        if need_weights:
            return out, attn
        return out
