"""MAXIM building blocks over (n1, n2, d) real feature grids.

Token axis 1 is the subcarrier axis and token axis 2 the antenna axis.  All
blocks accept arbitrary leading batch dimensions.

Initialization makes every stage an exact identity map: the spatial
projection starts at ``W2 = 0, b2 = 1`` (gate passes ``U`` through) and the
last projection of each residual branch starts at zero.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numeric import gelu, layer_norm


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, -1, self.weight, self.bias)


def _zero_linear(d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


def _token_dim(axis: int) -> int:
    if axis not in (1, 2):
        raise ValueError(f"token axis must be 1 or 2, got {axis}")
    return -3 if axis == 1 else -2


class GatedMLP(nn.Module):
    """gMLP with a spatial gating unit acting along one token axis."""

    def __init__(self, d: int, n_axis: int, axis: int):
        super().__init__()
        _token_dim(axis)
        self.axis = axis
        self.n_axis = n_axis
        self.norm_in = LayerNorm(d)
        self.fc1 = nn.Linear(d, 2 * d)
        self.norm_v = LayerNorm(d)
        self.spatial_weight = nn.Parameter(torch.zeros(n_axis, n_axis))
        self.spatial_bias = nn.Parameter(torch.ones(n_axis))
        self.fc3 = _zero_linear(d, d)

    def gate(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[_token_dim(self.axis)] != self.n_axis:
            raise ValueError(f"axis {self.axis} has length {v.shape[_token_dim(self.axis)]}, "
                             f"spatial projection expects {self.n_axis}")
        if self.axis == 1:
            return (torch.einsum("ik,...kjc->...ijc", self.spatial_weight, v)
                    + self.spatial_bias[:, None, None])
        return torch.einsum("jk,...ikc->...ijc", self.spatial_weight, v) + self.spatial_bias[:, None]

    def forward(self, x):
        r1 = gelu(self.fc1(self.norm_in(x)))
        u, v = r1.chunk(2, dim=-1)
        sgu = u * self.gate(self.norm_v(v))
        return x + self.fc3(sgu)


class MultiAxisBlock(nn.Module):
    """MAB: two gMLP branches gating along the two token axes, then a merge.

    ``wiring="parallel"`` splits the channels in half (half A gates along
    ``first_axis``, half B along the other axis).  ``"serial"`` runs both gMLPs
    over all channels one after the other.
    """

    def __init__(self, d: int, n1: int, n2: int, wiring: str = "parallel", first_axis: int = 1):
        super().__init__()
        second_axis = 3 - first_axis
        sizes = {1: n1, 2: n2}
        self.wiring = wiring
        if wiring == "parallel":
            if d % 2:
                raise ValueError(f"parallel MAB needs an even channel count, got {d}")
            width = d // 2
        elif wiring == "serial":
            width = d
        else:
            raise ValueError(f"unknown MAB wiring '{wiring}'")
        self.branch_a = GatedMLP(width, sizes[first_axis], first_axis)
        self.branch_b = GatedMLP(width, sizes[second_axis], second_axis)
        self.merge = _zero_linear(d, d)

    def forward(self, x):
        if self.wiring == "parallel":
            a, b = x.chunk(2, dim=-1)
            y = torch.cat([self.branch_a(a), self.branch_b(b)], dim=-1)
        else:
            y = self.branch_b(self.branch_a(x))
        return x + self.merge(y)


class ResidualChannelAttention(nn.Module):
    """RCAB: token MLP, squeeze over both token axes, logistic channel gate."""

    def __init__(self, d: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, d // reduction)
        self.norm = LayerNorm(d)
        self.fc_a = nn.Linear(d, d)
        self.fc_b = _zero_linear(d, d)
        self.squeeze = nn.Linear(d, hidden)
        self.excite = nn.Linear(hidden, d)

    def channel_gate(self, y):
        pooled = y.mean(dim=(-3, -2))
        return torch.sigmoid(self.excite(gelu(self.squeeze(pooled))))

    def forward(self, x):
        y = self.fc_b(gelu(self.fc_a(self.norm(x))))
        g = self.channel_gate(y)
        return x + g[..., None, None, :] * y


class MaximStage(nn.Module):
    def __init__(self, d, n1, n2, wiring="parallel", first_axis=1):
        super().__init__()
        self.mab = MultiAxisBlock(d, n1, n2, wiring, first_axis)
        self.rcab = ResidualChannelAttention(d)

    def forward(self, x):
        return self.rcab(self.mab(x))


class MaximStack(nn.Module):
    """``stages`` cascaded MAB -> RCAB stages; shape preserving."""

    def __init__(self, stages: int, d: int, n1: int, n2: int, wiring="parallel", first_axis=1):
        super().__init__()
        self.stages = nn.ModuleList(MaximStage(d, n1, n2, wiring, first_axis) for _ in range(stages))

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


def sinusoidal_table(n: int, width: int) -> torch.Tensor:
    """Standard sin/cos table of shape (n, width)."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    j = torch.arange(width, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * (2.0 * torch.div(j, 2, rounding_mode="floor")) / max(width, 1))
    angle = pos * freq
    return torch.where(j.long() % 2 == 0, torch.sin(angle), torch.cos(angle))


def positional_table(n1: int, n2: int, d: int) -> torch.Tensor:
    """(n1, n2, d): first d//2 channels encode the axis-1 index, the rest axis 2."""
    h1 = d // 2
    p1 = sinusoidal_table(n1, h1)[:, None, :].expand(n1, n2, h1)
    p2 = sinusoidal_table(n2, d - h1)[None, :, :].expand(n1, n2, d - h1)
    return torch.cat([p1, p2], dim=-1).contiguous()


class Embedding(nn.Module):
    """Per-token linear lift 2 -> d plus the fixed two-axis positional table."""

    def __init__(self, d: int, n1: int, n2: int):
        super().__init__()
        self.proj = nn.Linear(2, d)
        self.register_buffer("pos", positional_table(n1, n2, d), persistent=False)

    def forward(self, h):
        if h.shape[-1] != 2:
            raise ValueError(f"embedding expects a trailing re/im axis of 2, got {h.shape[-1]}")
        return self.proj(h) + self.pos.to(h.dtype)


def mab_spatial_mults(n1: int, n2: int, d: int, wiring: str = "parallel") -> int:
    """Multiplications spent in the two spatial projections of one MAB."""
    width = d // 2 if wiring == "parallel" else d
    return n1 * n2 * (n1 + n2) * width
