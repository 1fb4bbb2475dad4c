"""UE-side semantic encoder: downlink CSI -> compressed real feature vector.

One :class:`Encoder` instance serves every user; users are simply an extra
batch axis.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import Config
from .cpi import CrossPolarizationInteraction
from .maxim import Embedding, MaximStack
from .numeric import ComplexGrid, DegenerateInputError


class UnsupportedConfigError(ValueError):
    pass


def realify_csi(H: ComplexGrid) -> torch.Tensor:
    """(..., N_c, N_r, N_t) complex -> (..., N_c, N_t, N_r, 2) real."""
    x = torch.stack([H.re, H.im], dim=-1)
    return x.transpose(-3, -2)


class Encoder(nn.Module):
    """Polarization split -> embed -> L1 MAXIM -> CPI -> L2 MAXIM -> FC head.

    After the L1 trunk a shared per-token projection maps each branch from
    ``d_model`` back to a (re, im) pair so the CPI module sees
    (N_c, N_t, 2) grids.  The L2 trunk runs on the concatenated
    (N_c, N_t, 2 N_r) grid.
    """

    def __init__(self, cfg: Config, code_dim: int | None = None):
        super().__init__()
        s, mo = cfg.system, cfg.model
        if s.N_r != 2:
            raise UnsupportedConfigError(f"encoder supports N_r = 2 only, got {s.N_r}")
        self.n_c, self.n_t, self.n_r = s.N_c, s.N_t, s.N_r
        self.code_dim = code_dim or 2 * s.m
        self.embed = Embedding(s.d_model, s.N_c, s.N_t)
        self.trunk1 = MaximStack(s.L1, s.d_model, s.N_c, s.N_t, mo.mab_wiring, mo.mab_first_axis)
        self.to_pol = nn.Linear(s.d_model, 2)
        self.cpi = (CrossPolarizationInteraction(s.N_c, s.N_t, mo.cpi_shared, mo.cpi_softmax)
                    if mo.cpi_enabled else None)
        self.trunk2 = MaximStack(s.L2, 2 * s.N_r, s.N_c, s.N_t, mo.mab_wiring, mo.mab_first_axis)
        self.head = nn.Linear(s.N_c * s.N_t * 2 * s.N_r, self.code_dim)

    def branch(self, p: torch.Tensor) -> torch.Tensor:
        return self.to_pol(self.trunk1(self.embed(p)))

    def forward(self, H: ComplexGrid) -> torch.Tensor:
        if H.shape[-3:] != (self.n_c, self.n_r, self.n_t):
            raise UnsupportedConfigError(
                f"expected CSI (..., {self.n_c}, {self.n_r}, {self.n_t}), got {tuple(H.shape)}")
        x = realify_csi(H)
        p_h, p_v = self.branch(x[..., 0, :]), self.branch(x[..., 1, :])
        if self.cpi is not None:
            p_h, p_v = self.cpi(p_h, p_v)
        joint = torch.stack([p_h, p_v], dim=-2).flatten(-2)      # (..., N_c, N_t, 2 N_r)
        joint = self.trunk2(joint)
        return self.head(joint.flatten(-3))


def to_complex_symbols(s: torch.Tensor) -> ComplexGrid:
    """Pair 2m reals into m symbols (first half real, second half imaginary)
    and scale each block to total power m."""
    if s.shape[-1] % 2:
        raise ValueError(f"need an even number of reals, got {s.shape[-1]}")
    m = s.shape[-1] // 2
    power = (s * s).sum(-1, keepdim=True)
    if bool((power == 0).any()):
        raise DegenerateInputError("cannot power-normalize an all-zero feature vector")
    scaled = s * torch.sqrt(m / power)
    return ComplexGrid(scaled[..., :m], scaled[..., m:])


def symbols_to_features(S: ComplexGrid) -> torch.Tensor:
    """Inverse pairing of :func:`to_complex_symbols` per user.

    ``S`` is (..., m, K), as detected at the BS; returns (..., K * 2m) with
    user k occupying ``[k*2m, (k+1)*2m)`` as (re_0..re_{m-1}, im_0..im_{m-1}).
    """
    per_user = torch.cat([S.re.transpose(-1, -2), S.im.transpose(-1, -2)], dim=-1)
    return per_user.flatten(-2)

