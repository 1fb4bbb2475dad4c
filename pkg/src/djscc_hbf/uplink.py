"""Uplink feedback transport.

Shapes follow the BS view: symbols ``S`` are (..., m, K) (subcarrier, user),
composite channels ``H_eff`` are (..., m, N_t, K), received signals are
(..., m, N_t).  Noise is passed in as standard CN(0, 1) draws so callers can
freeze it; when omitted it is drawn from ``generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import torch

from .numeric import ComplexGrid, DegenerateInputError, DimensionError, hermitian_solve


@dataclass
class UplinkOutcome:
    symbols: ComplexGrid              # (..., m, K)
    resource_units: int
    mse: torch.Tensor | None = None   # (..., m) per-subcarrier residual MSE, if S was known


def snr_to_noise_var(snr_db: float) -> float:
    """sigma^2 = 10^(-SNR/10) under unit symbol power and normalized channels."""
    return 10.0 ** (-snr_db / 10.0)


def complex_normal(shape, generator: torch.Generator | None = None, dtype=torch.float64) -> ComplexGrid:
    """CN(0, 1) samples: each real dimension has variance 1/2."""
    scale = 1.0 / math.sqrt(2.0)
    re = torch.randn(shape, generator=generator, dtype=dtype) * scale
    im = torch.randn(shape, generator=generator, dtype=dtype) * scale
    return ComplexGrid(re, im)


def effective_channel(H_u: ComplexGrid) -> ComplexGrid:
    """``h_eff = H_u v`` with the all-ones UE precoder: sum over UE ports."""
    return H_u.sum(-1)


def composite_channel(H_u: ComplexGrid, m: int) -> ComplexGrid:
    """(..., K, N_c, N_t, N_r) uplink CSI -> (..., m, N_t, K) on the first m subcarriers."""
    h = effective_channel(H_u)[..., :m, :]                 # (..., K, m, N_t)
    nd = h.re.dim()
    return h.permute(*range(nd - 3), nd - 2, nd - 1, nd - 3)


def _noise(noise, shape, generator, dtype):
    if noise is None:
        return complex_normal(shape, generator, dtype)
    if tuple(noise.shape) != tuple(shape):
        raise DimensionError(f"noise shape {tuple(noise.shape)} != {tuple(shape)}")
    return noise


def _residual(est: ComplexGrid, S: ComplexGrid | None):
    if S is None:
        return None
    return (est - S).abs2().mean(-1)


def uplink_transmit(S: ComplexGrid, H_eff: ComplexGrid, sigma_u: float,
                    noise: ComplexGrid | None = None,
                    generator: torch.Generator | None = None) -> ComplexGrid:
    """Superposed reception ``y[n] = H_eff[n] s[n] + z[n]``."""
    if sigma_u < 0:
        raise ValueError("sigma_u must be >= 0")
    y = (H_eff @ S.unsqueeze(-1)).squeeze(-1)
    if sigma_u == 0:
        return y
    z = _noise(noise, y.shape, generator, y.dtype)
    return y + z * sigma_u


def mmse_matrix(H_eff: ComplexGrid, sigma_u: float) -> ComplexGrid:
    """Explicit W = (H^H H + s^2 I)^-1 H^H, for diagnostics and tests."""
    K = H_eff.shape[-1]
    gram = H_eff.mH @ H_eff
    gram = gram + ComplexGrid.eye(K, H_eff.dtype) * (sigma_u ** 2)
    return hermitian_solve(gram, H_eff.mH)


def mmse_detect(Y: ComplexGrid, H_eff: ComplexGrid, sigma_u: float,
                S: ComplexGrid | None = None) -> UplinkOutcome:
    """Per-subcarrier linear MMSE multi-user detection."""
    K = H_eff.shape[-1]
    m = H_eff.shape[-3]
    gram = H_eff.mH @ H_eff + ComplexGrid.eye(K, H_eff.dtype) * (sigma_u ** 2)
    rhs = H_eff.mH @ Y.unsqueeze(-1)
    est = hermitian_solve(gram, rhs).squeeze(-1)
    return UplinkOutcome(est, m, _residual(est, S))


def simultaneous_uplink(S, H_eff, sigma_u, noise=None, generator=None) -> UplinkOutcome:
    Y = uplink_transmit(S, H_eff, sigma_u, noise, generator)
    return mmse_detect(Y, H_eff, sigma_u, S)


def tdma_mrc_uplink(S: ComplexGrid, H_eff: ComplexGrid, sigma_u: float,
                    noise: ComplexGrid | None = None,
                    generator: torch.Generator | None = None) -> UplinkOutcome:
    """Each user transmits alone in its own slot; the BS applies MRC.

    ``noise`` has shape (..., m, N_t, K): one receiver noise vector per slot.
    """
    energy = H_eff.abs2().sum(-2)                          # (..., m, K)
    if bool((energy == 0).any()):
        raise DegenerateInputError("MRC needs a nonzero channel for every user")
    y = H_eff * S.unsqueeze(-2)                            # (..., m, N_t, K)
    if sigma_u > 0:
        y = y + _noise(noise, y.shape, generator, y.re.dtype) * sigma_u
    matched = (H_eff.conj() * y).sum(-2)
    est = ComplexGrid(matched.re / energy, matched.im / energy)
    K, m = H_eff.shape[-1], H_eff.shape[-3]
    return UplinkOutcome(est, K * m, _residual(est, S))


def awgn_uplink(S: ComplexGrid, sigma_u: float, noise: ComplexGrid | None = None,
                generator: torch.Generator | None = None) -> UplinkOutcome:
    """Orthogonal per-user AWGN links (no fading, no interference)."""
    est = S if sigma_u == 0 else S + _noise(noise, S.shape, generator, S.dtype) * sigma_u
    K, m = S.shape[-1], S.shape[-2]
    return UplinkOutcome(est, K * m, _residual(est, S))


UPLINK_MODES = ("simultaneous", "tdma_mrc", "awgn")


def noise_shape(mode: str, batch_shape, m: int, n_t: int, K: int) -> tuple:
    if mode == "simultaneous":
        return (*batch_shape, m, n_t)
    if mode == "tdma_mrc":
        return (*batch_shape, m, n_t, K)
    if mode == "awgn":
        return (*batch_shape, m, K)
    raise ValueError(f"unknown uplink mode '{mode}'")


def transport(mode: str, S: ComplexGrid, H_eff: ComplexGrid, sigma_u: float,
              noise: ComplexGrid | None = None,
              generator: torch.Generator | None = None) -> UplinkOutcome:
    if mode == "simultaneous":
        return simultaneous_uplink(S, H_eff, sigma_u, noise, generator)
    if mode == "tdma_mrc":
        return tdma_mrc_uplink(S, H_eff, sigma_u, noise, generator)
    if mode == "awgn":
        return awgn_uplink(S, sigma_u, noise, generator)
    raise ValueError(f"unknown uplink mode '{mode}'")


# ---------------------------------------------------------------------------
# separate source-channel coding (quantize -> bit channel -> dequantize)

class SymbolCostError(ValueError):
    def __init__(self, value: Fraction):
        self.value = value
        super().__init__(f"symbol count is not an integer: {value} (= {float(value):.6g})")


def sscc_symbol_cost(b: int, q: int, r, a: int) -> int:
    """Uplink symbols per user for b reals at q bits, code rate r, a-point QAM."""
    r = Fraction(r)
    if not 0 < r <= 1:
        raise ValueError("code rate must lie in (0, 1]")
    if a < 2 or a & (a - 1):
        raise ValueError("constellation size must be a power of 2")
    value = Fraction(b * q) / (r * (a.bit_length() - 1))
    if value.denominator != 1:
        raise SymbolCostError(value)
    return int(value)


def sscc_code_dim(m: int, q: int, r, a: int) -> int:
    """Encoder output dimension b whose SSCC symbol cost equals m."""
    value = Fraction(m) * Fraction(r) * (a.bit_length() - 1) / q
    if value.denominator != 1 or value < 1:
        raise SymbolCostError(value)
    return int(value)


@dataclass
class Quantizer:
    """Uniform mid-rise quantizer with per-dimension range [lo, hi]."""

    lo: torch.Tensor
    hi: torch.Tensor
    q: int

    @classmethod
    def symmetric(cls, c: float, size: int, q: int, dtype=torch.float64) -> "Quantizer":
        return cls(torch.full((size,), -c, dtype=dtype), torch.full((size,), c, dtype=dtype), q)

    @classmethod
    def calibrate(cls, samples: torch.Tensor, q: int, sigmas: float = 3.0) -> "Quantizer":
        """Range mean +- sigmas * std per dimension over the leading axis."""
        mu = samples.mean(0)
        sd = samples.std(0, unbiased=False).clamp_min(1e-12)
        return cls(mu - sigmas * sd, mu + sigmas * sd, q)

    @property
    def levels(self) -> int:
        return 1 << self.q

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.lo.to(x.dtype), self.hi.to(x.dtype)
        t = (x - lo) / (hi - lo)
        idx = torch.floor(t * self.levels).long()
        return idx.clamp(0, self.levels - 1)

    def decode(self, idx: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
        lo, hi = self.lo.to(dtype), self.hi.to(dtype)
        return lo + (idx.to(dtype) + 0.5) * (hi - lo) / self.levels


def to_bits(idx: torch.Tensor, q: int) -> torch.Tensor:
    shifts = torch.arange(q - 1, -1, -1)
    return (idx.unsqueeze(-1) >> shifts) & 1


def from_bits(bits: torch.Tensor) -> torch.Tensor:
    q = bits.shape[-1]
    weights = 1 << torch.arange(q - 1, -1, -1)
    return (bits * weights).sum(-1)


def binary_symmetric_channel(bits: torch.Tensor, p: float,
                             uniforms: torch.Tensor | None = None,
                             generator: torch.Generator | None = None) -> torch.Tensor:
    """Flip each bit where its uniform draw falls below ``p``.

    Passing the same ``uniforms`` for several ``p`` couples the error patterns:
    the flips at a smaller ``p`` are a subset of those at a larger one.
    """
    if p <= 0:
        return bits
    if uniforms is None:
        uniforms = torch.rand(bits.shape, generator=generator, dtype=torch.float64)
    return bits ^ (uniforms < p).long()


def sscc_roundtrip(s: torch.Tensor, quantizer: Quantizer, ber: float = 0.0,
                   uniforms: torch.Tensor | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Quantize, send the bits through BSC(ber), and dequantize to bin centres."""
    bits = to_bits(quantizer.encode(s), quantizer.q)
    bits = binary_symmetric_channel(bits, ber, uniforms, generator)
    return quantizer.decode(from_bits(bits), s.dtype)
