"""Non-learned hybrid beamforming references.

``pca_hb`` is our reading of PCA-based hybrid beamforming with perfect CSI:

1. analog stage: the top-N_RF eigenvectors of ``C = sum_{k,n} H^H H``,
   projected onto constant modulus by keeping only their phases;
2. digital stage: per subcarrier, each user's channel is collapsed to a row
   with its dominant left singular vector, and F_BB is the ZF pseudo-inverse
   of the resulting K x N_RF effective channel, then power-normalized.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

from .decoder import HybridBeamformer, build_analog, normalize_power
from .numeric import ComplexGrid

ZF_REGULARIZATION = 1e-9


def _to_numpy(H) -> np.ndarray:
    return H.numpy() if isinstance(H, ComplexGrid) else np.asarray(H)


def pca_analog_phases(H_d: np.ndarray, n_rf: int) -> np.ndarray:
    """(K, N_c, N_r, N_t) -> (N_t, N_RF) analog phases."""
    n_t = H_d.shape[-1]
    flat = H_d.reshape(-1, H_d.shape[-2], n_t)
    C = np.einsum("brt,brs->ts", flat.conj(), flat)
    C = 0.5 * (C + C.conj().T)
    _, vecs = np.linalg.eigh(C)
    top = vecs[:, ::-1][:, :n_rf]
    return np.angle(top)


def zf_digital(H_d: np.ndarray, f_rf: np.ndarray) -> np.ndarray:
    """(K, N_c, N_r, N_t), (N_t, N_RF) -> un-normalized F_BB (N_c, N_RF, K)."""
    K, n_c = H_d.shape[:2]
    rows = np.empty((n_c, K, f_rf.shape[1]), dtype=complex)
    for k in range(K):
        for n in range(n_c):
            u, _, _ = np.linalg.svd(H_d[k, n])
            rows[n, k] = u[:, 0].conj() @ H_d[k, n] @ f_rf
    out = np.empty((n_c, f_rf.shape[1], K), dtype=complex)
    for n in range(n_c):
        G = rows[n]
        gram = G @ G.conj().T
        if np.linalg.cond(gram) > 1e12:
            warnings.warn(f"rank-deficient effective channel on subcarrier {n}; regularizing ZF",
                          RuntimeWarning, stacklevel=2)
            gram = gram + ZF_REGULARIZATION * np.eye(K)
        out[n] = G.conj().T @ np.linalg.solve(gram, np.eye(K))
    return out


def pca_hb(H_d, n_rf: int) -> HybridBeamformer:
    """PCA hybrid beamformer for one sample of perfect CSI (K, N_c, N_r, N_t)."""
    H = _to_numpy(H_d).astype(complex)
    K, _, _, n_t = H.shape
    if not K <= n_rf <= n_t:
        raise ValueError(f"need K <= N_RF <= N_t, got K={K}, N_RF={n_rf}, N_t={n_t}")
    theta = pca_analog_phases(H, n_rf)
    f_rf_np = np.exp(1j * theta) / np.sqrt(n_t)
    f_bb = zf_digital(H, f_rf_np)
    theta_t = torch.as_tensor(theta, dtype=torch.float64)
    f_rf = build_analog(theta_t)
    return HybridBeamformer(theta_t, f_rf, normalize_power(f_rf, ComplexGrid.from_numpy(f_bb)))


def pca_hb_batch(H_d, n_rf: int) -> HybridBeamformer:
    """Stack :func:`pca_hb` over a leading batch axis."""
    H = _to_numpy(H_d)
    parts = [pca_hb(h, n_rf) for h in H]
    theta = torch.stack([p.theta for p in parts])
    f_rf = ComplexGrid(torch.stack([p.f_rf.re for p in parts]), torch.stack([p.f_rf.im for p in parts]))
    f_bb = ComplexGrid(torch.stack([p.f_bb.re for p in parts]), torch.stack([p.f_bb.im for p in parts]))
    return HybridBeamformer(theta, f_rf, f_bb)


def random_beamformer(batch_shape, n_t: int, n_rf: int, n_c: int, K: int,
                      generator: torch.Generator | None = None,
                      dtype=torch.float64) -> HybridBeamformer:
    """Uniform random phases and Gaussian digital weights, power-normalized."""
    batch_shape = tuple(batch_shape)
    theta = (torch.rand((*batch_shape, n_t, n_rf), generator=generator, dtype=dtype) * 2 - 1) * np.pi
    shape = (*batch_shape, n_c, n_rf, K)
    f_bb = ComplexGrid(torch.randn(shape, generator=generator, dtype=dtype),
                       torch.randn(shape, generator=generator, dtype=dtype))
    f_rf = build_analog(theta)
    return HybridBeamformer(theta, f_rf, normalize_power(f_rf, f_bb))
