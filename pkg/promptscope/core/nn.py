"""
Transformer building blocks shared by the encoders, the prompt detector and the
sentence generator, plus a finite-difference gradient checker.

Everything runs in float64. Stochastic layers (dropout, drop-path) draw from an
explicitly passed torch.Generator and are inactive in eval mode.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from promptscope.errors import NonFiniteError, ShapeMismatchError

DTYPE = torch.float64


def dropout(x: Tensor, p: float, training: bool, rng: Optional[torch.Generator]) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    keep = torch.bernoulli(torch.full_like(x, 1.0 - p), generator=rng)
    return x * keep / (1.0 - p)


def drop_path(x: Tensor, p: float, training: bool, rng: Optional[torch.Generator]) -> Tensor:
    """Stochastic depth: drop the whole residual branch per sample (leading dim)."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode drop-path needs an explicit generator")
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = torch.bernoulli(torch.full(shape, 1.0 - p, dtype=x.dtype), generator=rng)
    return x * keep / (1.0 - p)


def group_mask(groups: Tensor, keep: Optional[Tensor] = None) -> Tensor:
    """
    Boolean (N, N) self-attention mask: token i may attend token j iff both share
    a group id and j is kept. Every token always sees itself.
    """
    allowed = groups.unsqueeze(-1) == groups.unsqueeze(-2)
    if keep is not None:
        allowed = allowed & keep.unsqueeze(-2)
    eye = torch.eye(groups.shape[-1], dtype=torch.bool)
    return allowed | eye


def causal_mask(length: int, prefix: int = 0) -> Tensor:
    """(length, prefix + length) mask; prefix positions are always visible."""
    causal = torch.ones(length, length, dtype=torch.bool).tril()
    return torch.cat([torch.ones(length, prefix, dtype=torch.bool), causal], dim=-1)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None,
                     attn_dropout: float = 0.0, training: bool = False,
                     rng: Optional[torch.Generator] = None) -> Tensor:
    """
    Scaled dot-product attention. q: (..., Nq, d), k/v: (..., Nk, d);
    mask (broadcastable to (..., Nq, Nk)) is True where attention is allowed.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatchError(f"attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    probs = dropout(probs, attn_dropout, training, rng)
    return probs @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, attn_dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ShapeMismatchError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.attn_dropout = attn_dropout
        self.q = nn.Linear(dim, dim, dtype=DTYPE)
        self.k = nn.Linear(dim, dim, dtype=DTYPE)
        self.v = nn.Linear(dim, dim, dtype=DTYPE)
        self.o = nn.Linear(dim, dim, dtype=DTYPE)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x: Tensor, memory: Optional[Tensor] = None, mask: Optional[Tensor] = None,
                prefix: Optional[Tuple[Tensor, Tensor]] = None,
                rng: Optional[torch.Generator] = None) -> Tensor:
        memory = x if memory is None else memory
        if x.ndim != 3 or memory.ndim != 3 or x.shape[-1] != self.dim or memory.shape[-1] != self.dim:
            raise ShapeMismatchError(f"expected (B, N, {self.dim}) inputs")
        q = self._split(self.q(x))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        if prefix is not None:
            pk, pv = prefix
            k = torch.cat([self._split(pk), k], dim=2)
            v = torch.cat([self._split(pv), v], dim=2)
        if mask is not None and mask.ndim == 3:
            mask = mask.unsqueeze(1)
        out = masked_attention(q, k, v, mask, self.attn_dropout, self.training, rng)
        b, _, n, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, self.dim))


class Mlp(nn.Module):
    """Perceptron with GELU (exact erf form) between `hidden_layers` hidden layers."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, hidden_layers: int = 1):
        super().__init__()
        dims = [in_dim] + [hidden] * hidden_layers + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor, dropout_p: float = 0.0, rng: Optional[torch.Generator] = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x, approximate="none")
                x = dropout(x, dropout_p, self.training, rng)
        return x


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init), dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gamma


class _Branch(nn.Module):
    """norm -> op -> dropout -> layer-scale -> drop-path, as one residual branch."""

    def __init__(self, dim: int, layer_scale_init: float, dropout_p: float, drop_path_p: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.scale = LayerScale(dim, layer_scale_init)
        self.dropout_p, self.drop_path_p = dropout_p, drop_path_p

    def finish(self, y: Tensor, rng: Optional[torch.Generator]) -> Tensor:
        y = dropout(y, self.dropout_p, self.training, rng)
        return drop_path(self.scale(y), self.drop_path_p, self.training, rng)


class DecoderLayer(nn.Module):
    """
    Pre-norm DETR-style decoder layer: masked self-attention, cross-attention over
    memory, feed-forward. Each branch is layer-scaled and residual-added.
    """

    def __init__(self, dim: int, heads: int, ff_hidden: int, dropout_p: float = 0.3,
                 attn_dropout: float = 0.1, drop_path_p: float = 0.2, layer_scale_init: float = 0.1):
        super().__init__()
        self.self_branch = _Branch(dim, layer_scale_init, dropout_p, drop_path_p)
        self.self_attn = MultiHeadAttention(dim, heads, attn_dropout)
        self.cross_branch = _Branch(dim, layer_scale_init, dropout_p, drop_path_p)
        self.cross_attn = MultiHeadAttention(dim, heads, attn_dropout)
        self.ff_branch = _Branch(dim, layer_scale_init, dropout_p, drop_path_p)
        self.ff = Mlp(dim, ff_hidden, dim)
        self.dropout_p = dropout_p

    def forward(self, x: Tensor, memory: Tensor, self_mask: Optional[Tensor] = None,
                rng: Optional[torch.Generator] = None) -> Tensor:
        h = self.self_branch.norm(x)
        x = x + self.self_branch.finish(self.self_attn(h, mask=self_mask, rng=rng), rng)
        h = self.cross_branch.norm(x)
        x = x + self.cross_branch.finish(self.cross_attn(h, memory=memory, rng=rng), rng)
        h = self.ff_branch.norm(x)
        x = x + self.ff_branch.finish(self.ff(h, self.dropout_p, rng), rng)
        return x


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward; optional per-layer key/value prefix."""

    def __init__(self, dim: int, heads: int, ff_hidden: int, dropout_p: float = 0.0,
                 attn_dropout: float = 0.0, drop_path_p: float = 0.0, layer_scale_init: float = 0.1):
        super().__init__()
        self.attn_branch = _Branch(dim, layer_scale_init, dropout_p, drop_path_p)
        self.attn = MultiHeadAttention(dim, heads, attn_dropout)
        self.ff_branch = _Branch(dim, layer_scale_init, dropout_p, drop_path_p)
        self.ff = Mlp(dim, ff_hidden, dim)
        self.dropout_p = dropout_p

    def forward(self, x: Tensor, mask: Optional[Tensor] = None, prefix: Optional[Tuple[Tensor, Tensor]] = None,
                rng: Optional[torch.Generator] = None) -> Tensor:
        h = self.attn_branch.norm(x)
        x = x + self.attn_branch.finish(self.attn(h, mask=mask, prefix=prefix, rng=rng), rng)
        h = self.ff_branch.norm(x)
        x = x + self.ff_branch.finish(self.ff(h, self.dropout_p, rng), rng)
        return x


def sincos_positions(grid_h: int, grid_w: int, dim: int) -> Tensor:
    """Fixed 2-D sine/cosine positional encodings, (grid_h * grid_w, dim)."""
    if dim % 4:
        raise ShapeMismatchError("positional dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=DTYPE) / quarter))
    ys, xs = torch.meshgrid(torch.arange(grid_h, dtype=DTYPE), torch.arange(grid_w, dtype=DTYPE), indexing="ij")
    ys, xs = ys.reshape(-1, 1) * freqs, xs.reshape(-1, 1) * freqs
    return torch.cat([ys.sin(), ys.cos(), xs.sin(), xs.cos()], dim=-1)


def set_frozen(module: nn.Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               abs_floor: float = 1e-3) -> float:
    """
    Worst relative error between reverse-mode gradients of the scalar f() and
    central differences (f(θ + eps e_i) - f(θ - eps e_i)) / 2eps over every
    element of params. The denominator is floored at abs_floor: for gradients
    below it the result is the absolute error divided by abs_floor, so a bound
    `tol` on the result allows an absolute error of tol * abs_floor there and a
    relative error of tol elsewhere. Central differences at eps = 1e-5 carry
    roughly 1e-10 of float64 rounding noise, which sets the lowest useful floor.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    params = list(params)
    value = f()
    if not torch.isfinite(value).all():
        raise NonFiniteError("objective is not finite")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f()
                flat[i] = orig - eps
                down = f()
                flat[i] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise NonFiniteError("objective is not finite near the evaluation point")
                numeric = (up - down).item() / (2 * eps)
                analytic = gflat[i].item()
                denom = max(abs(analytic), abs(numeric), abs_floor)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst
