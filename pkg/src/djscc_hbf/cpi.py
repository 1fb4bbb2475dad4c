"""Cross-polarization interaction: bidirectional co-attention between the
horizontal and vertical CSI feature grids."""

from __future__ import annotations

import torch
from torch import nn

from .numeric import gelu, softmax


class MLPBlock(nn.Module):
    """Two linear layers with GELU in between."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_out
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class _CpiWeights(nn.Module):
    def __init__(self, n_t: int):
        super().__init__()
        w = 2 * n_t
        self.extract_m = MLPBlock(w, w)
        self.extract_f = MLPBlock(w, w)
        self.fuse = MLPBlock(2 * w, w)


def flatten_pol(p: torch.Tensor) -> torch.Tensor:
    """(..., N_c, N_t, 2) -> (..., N_c, 2 N_t): real parts first, then imaginary."""
    return torch.cat([p[..., 0], p[..., 1]], dim=-1)


def unflatten_pol(q: torch.Tensor) -> torch.Tensor:
    re, im = q.chunk(2, dim=-1)
    return torch.stack([re, im], dim=-1)


class CrossPolarizationInteraction(nn.Module):
    """Co-attention between two (N_c, N_t, 2) polarization grids.

    With ``shared=True`` one parameter set serves both branches, which makes
    the module equivariant under swapping its inputs.  ``normalize`` selects
    the softmax axis of the N_c x N_c attention maps: ``"column"`` makes every
    column sum to one, ``"row"`` every row.
    """

    def __init__(self, n_c: int, n_t: int, shared: bool = True, normalize: str = "column"):
        super().__init__()
        if normalize not in ("column", "row"):
            raise ValueError(f"normalize must be 'column' or 'row', got {normalize!r}")
        self.n_c, self.n_t = n_c, n_t
        self.normalize = normalize
        self.h = _CpiWeights(n_t)
        self.v = self.h if shared else _CpiWeights(n_t)

    def attention(self, m_q: torch.Tensor, m_k: torch.Tensor) -> torch.Tensor:
        scores = m_q @ m_k.transpose(-1, -2)
        return softmax(scores, dim=-2 if self.normalize == "column" else -1)

    def forward(self, p_h: torch.Tensor, p_v: torch.Tensor, return_maps: bool = False):
        if p_h.shape != p_v.shape:
            raise ValueError(f"polarization grids differ in shape: {tuple(p_h.shape)} vs {tuple(p_v.shape)}")
        if p_h.shape[-3:] != (self.n_c, self.n_t, 2):
            raise ValueError(f"expected (..., {self.n_c}, {self.n_t}, 2), got {tuple(p_h.shape)}")
        x_h, x_v = flatten_pol(p_h), flatten_pol(p_v)
        m_h, m_v = self.h.extract_m(x_h), self.v.extract_m(x_v)
        f_h, f_v = self.h.extract_f(x_h), self.v.extract_f(x_v)
        z_vh = self.attention(m_h, m_v)
        z_hv = self.attention(m_v, m_h)
        p_vh = z_vh @ f_v
        p_hv = z_hv @ f_h
        out_h = unflatten_pol(self.h.fuse(torch.cat([p_vh, x_h], dim=-1)))
        out_v = unflatten_pol(self.v.fuse(torch.cat([p_hv, x_v], dim=-1)))
        if return_maps:
            return out_h, out_v, (z_vh, z_hv)
        return out_h, out_v
