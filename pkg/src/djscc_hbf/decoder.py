"""BS-side decoder: detected feedback -> constrained hybrid beamformer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .config import Config
from .maxim import MaximStack
from .numeric import ComplexGrid, DegenerateInputError


@dataclass
class HybridBeamformer:
    theta: torch.Tensor       # (..., N_t, N_RF) phases in radians
    f_rf: ComplexGrid         # (..., N_t, N_RF)
    f_bb: ComplexGrid         # (..., N_c, N_RF, K)

    def precoders(self) -> ComplexGrid:
        """Effective precoders w_{k,n} as columns: (..., N_c, N_t, K)."""
        return self.f_rf.unsqueeze(-3) @ self.f_bb


def build_analog(theta: torch.Tensor) -> ComplexGrid:
    """Constant-modulus analog matrix ``exp(j theta) / sqrt(N_t)``."""
    scale = 1.0 / math.sqrt(theta.shape[-2])
    return ComplexGrid(torch.cos(theta) * scale, torch.sin(theta) * scale)


def normalize_power(f_rf: ComplexGrid, f_bb: ComplexGrid) -> ComplexGrid:
    """Rescale each subcarrier's F_BB so that ||F_RF F_BB[n]||_F^2 = K."""
    K = f_bb.shape[-1]
    energy = (f_rf.unsqueeze(-3) @ f_bb).abs2().sum((-2, -1))      # (..., N_c)
    if bool((energy == 0).any()):
        raise DegenerateInputError("F_RF F_BB[n] is zero on some subcarrier")
    scale = torch.sqrt(K / energy)[..., None, None]
    return f_bb * scale


def assemble(theta: torch.Tensor, f_bb_raw: ComplexGrid) -> HybridBeamformer:
    f_rf = build_analog(theta)
    return HybridBeamformer(theta, f_rf, normalize_power(f_rf, f_bb_raw))


class Decoder(nn.Module):
    """Joint multi-user decoder.

    FC lift of the aggregated features to (N_c, N_t, 2 K N_r), L3 MAXIM trunk,
    per-token projection to the virtual fully-digital grid (N_c, N_t, 2 K N_s),
    then two branches: L4 trunk + head to N_RF phases (mean over subcarriers)
    and L5 trunk + head to 2 N_RF K N_s digital weights (mean over antennas).
    """

    def __init__(self, cfg: Config, code_dim: int | None = None):
        super().__init__()
        s, mo = cfg.system, cfg.model
        self.n_c, self.n_t, self.n_rf, self.K = s.N_c, s.N_t, s.N_RF, s.K
        self.code_dim = code_dim or 2 * s.m
        width_in = 2 * s.K * s.N_r
        width_virt = 2 * s.K * s.N_s
        args = (s.N_c, s.N_t, mo.mab_wiring, mo.mab_first_axis)
        self.lift = nn.Linear(s.K * self.code_dim, s.N_c * s.N_t * width_in)
        self.trunk3 = MaximStack(s.L3, width_in, *args)
        self.virtual = nn.Linear(width_in, width_virt)
        self.trunk4 = MaximStack(s.L4, width_virt, *args)
        self.analog_head = nn.Linear(width_virt, s.N_RF)
        self.trunk5 = MaximStack(s.L5, width_virt, *args)
        self.digital_head = nn.Linear(width_virt, 2 * s.N_RF * s.K * s.N_s)

    def raw(self, features: torch.Tensor) -> tuple[torch.Tensor, ComplexGrid]:
        """Phases and un-normalized digital weights from (..., K * code_dim) features."""
        if features.shape[-1] != self.K * self.code_dim:
            raise ValueError(f"decoder expects {self.K * self.code_dim} features, got {features.shape[-1]}")
        lead = features.shape[:-1]
        x = self.lift(features).reshape(*lead, self.n_c, self.n_t, -1)
        f_virt = self.virtual(self.trunk3(x))
        theta = self.analog_head(self.trunk4(f_virt)).mean(-3)            # (..., N_t, N_RF)
        d = self.digital_head(self.trunk5(f_virt)).mean(-2)              # (..., N_c, 2 N_RF K)
        d = d.reshape(*lead, self.n_c, self.n_rf, self.K, 2)
        return theta, ComplexGrid(d[..., 0], d[..., 1])

    def forward(self, features: torch.Tensor) -> HybridBeamformer:
        theta, f_bb = self.raw(features)
        return assemble(theta, f_bb)
