"""Achievable rate, sum rate and the training loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .decoder import HybridBeamformer
from .numeric import ComplexGrid, logdet2_hpd


@dataclass
class RateBreakdown:
    per_user: torch.Tensor    # (..., K, N_c) bits/s/Hz
    sum_rate: torch.Tensor    # (...,)


def rate_matrix(H_d: ComplexGrid, W: ComplexGrid, noise_var: float) -> torch.Tensor:
    """R_{k,n} for every user and subcarrier.

    ``H_d`` is (..., K, N_c, N_r, N_t) and ``W`` (..., N_c, N_t, K) holds the
    effective precoders as columns.  The rate is evaluated as
    ``log2 det(Phi + S) - log2 det(Phi)`` with ``Phi`` the interference-plus-
    noise covariance and ``S`` the desired-signal covariance.
    """
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    G = H_d @ W.unsqueeze(-4)                             # (..., K, N_c, N_r, K') = H_k w_k'
    K = G.shape[-1]
    n_r = G.shape[-2]
    eye = ComplexGrid.eye(n_r, G.dtype)
    # per-stream outer products g g^H: (..., K, N_c, K', N_r, N_r)
    g = G.transpose(-1, -2).unsqueeze(-1)
    outer = g @ g.mH
    interferers = 1.0 - torch.eye(K, dtype=G.dtype)        # k' != k mask
    mask = interferers.reshape(*([1] * (G.re.dim() - 4)), K, 1, K, 1, 1)
    phi = (outer * mask).sum(-3) + eye * noise_var
    own = torch.eye(K, dtype=G.dtype).reshape(mask.shape)
    signal = (outer * own).sum(-3)
    rate = logdet2_hpd(phi + signal) - logdet2_hpd(phi)
    return rate.clamp_min(0.0)


def user_rate(H: ComplexGrid, W: ComplexGrid, k: int, noise_var: float) -> torch.Tensor:
    """Rate of user ``k`` for a single (N_r, N_t) channel and (N_t, K) precoders."""
    G = H @ W                                               # (N_r, K)
    n_r, K = G.shape
    phi = ComplexGrid.eye(n_r, G.dtype) * noise_var
    for j in range(K):
        if j == k:
            continue
        gj = G[:, j:j + 1]
        phi = phi + gj @ gj.mH
    gk = G[:, k:k + 1]
    return logdet2_hpd(phi + gk @ gk.mH) - logdet2_hpd(phi)


def sum_rate(H_d: ComplexGrid, bf: HybridBeamformer, noise_var: float) -> RateBreakdown:
    R = rate_matrix(H_d, bf.precoders(), noise_var)
    return RateBreakdown(R, R.sum(-2).mean(-1))


def sum_rate_and_loss(H_d: ComplexGrid, bf: HybridBeamformer, noise_var: float):
    out = sum_rate(H_d, bf, noise_var)
    return out, -out.sum_rate.mean()
