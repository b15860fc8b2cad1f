"""Slow reference implementations shared by the attention tests."""

import math

import torch
import torch.nn.functional as F


def naive_attention(x, block, context=None):
    """Token-by-token reference for TokenAttention on (n, c) inputs."""
    n, c = x.shape
    h = F.layer_norm(x, (c,), block.norm.weight, block.norm.bias, block.norm.eps)
    ctx = h if context is None else context
    heads = block.heads
    dh = c // heads
    out = torch.zeros_like(x)
    for i in range(n):
        q = block.to_q.weight @ h[i]
        row = torch.zeros(c, dtype=x.dtype)
        for g in range(heads):
            sl = slice(g * dh, (g + 1) * dh)
            logits = torch.stack([(q[sl] @ (block.to_k.weight @ ctx[j])[sl]) / math.sqrt(dh) for j in range(ctx.shape[0])])
            w = torch.exp(logits - logits.max())
            w = w / w.sum()
            for j in range(ctx.shape[0]):
                row[sl] += w[j] * (block.to_v.weight @ ctx[j])[sl]
        out[i] = x[i] + block.to_out.weight @ row + block.to_out.bias
    return out
