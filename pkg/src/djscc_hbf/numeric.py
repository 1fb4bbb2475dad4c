"""Complex linear algebra on split real/imaginary planes, plus the small set of
differentiable primitives shared by the networks.

All complex math in the package goes through :class:`ComplexGrid`, which keeps
the real and imaginary parts as two real ``torch`` tensors of identical shape.
Autograd therefore only ever sees real arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A factorization failed or produced non-finite values."""


class DegenerateInputError(ValueError):
    """Input is zero/degenerate where a nonzero value is required."""


class ComplexGrid:
    """Dense complex array stored as paired real planes."""

    __slots__ = ("re", "im")

    def __init__(self, re: torch.Tensor, im: torch.Tensor | None = None):
        if im is None:
            im = torch.zeros_like(re)
        if re.shape != im.shape:
            raise DimensionError(f"re/im shape mismatch: {tuple(re.shape)} vs {tuple(im.shape)}")
        self.re = re
        self.im = im

    # construction / conversion
    @classmethod
    def from_numpy(cls, z, dtype=torch.float64) -> "ComplexGrid":
        z = np.asarray(z)
        return cls(torch.tensor(np.real(z), dtype=dtype), torch.tensor(np.imag(z), dtype=dtype))

    @classmethod
    def zeros(cls, shape, dtype=torch.float64) -> "ComplexGrid":
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    @classmethod
    def eye(cls, n: int, dtype=torch.float64) -> "ComplexGrid":
        return cls(torch.eye(n, dtype=dtype), torch.zeros(n, n, dtype=dtype))

    def numpy(self) -> np.ndarray:
        return self.re.detach().cpu().numpy() + 1j * self.im.detach().cpu().numpy()

    def to(self, dtype) -> "ComplexGrid":
        return ComplexGrid(self.re.to(dtype), self.im.to(dtype))

    # structure
    @property
    def shape(self) -> torch.Size:
        return self.re.shape

    @property
    def dtype(self):
        return self.re.dtype

    def __getitem__(self, idx) -> "ComplexGrid":
        return ComplexGrid(self.re[idx], self.im[idx])

    def __len__(self) -> int:
        return len(self.re)

    def __repr__(self) -> str:
        return f"ComplexGrid(shape={tuple(self.shape)}, dtype={self.dtype})"

    def reshape(self, *shape) -> "ComplexGrid":
        return ComplexGrid(self.re.reshape(*shape), self.im.reshape(*shape))

    def permute(self, *dims) -> "ComplexGrid":
        return ComplexGrid(self.re.permute(*dims), self.im.permute(*dims))

    def transpose(self, a: int, b: int) -> "ComplexGrid":
        return ComplexGrid(self.re.transpose(a, b), self.im.transpose(a, b))

    def unsqueeze(self, dim: int) -> "ComplexGrid":
        return ComplexGrid(self.re.unsqueeze(dim), self.im.unsqueeze(dim))

    def squeeze(self, dim: int) -> "ComplexGrid":
        return ComplexGrid(self.re.squeeze(dim), self.im.squeeze(dim))

    def sum(self, dim, keepdim: bool = False) -> "ComplexGrid":
        return ComplexGrid(self.re.sum(dim, keepdim=keepdim), self.im.sum(dim, keepdim=keepdim))

    # arithmetic
    def conj(self) -> "ComplexGrid":
        return ComplexGrid(self.re, -self.im)

    @property
    def mH(self) -> "ComplexGrid":
        """Conjugate transpose of the last two axes."""
        return ComplexGrid(self.re.transpose(-1, -2), -self.im.transpose(-1, -2))

    def abs2(self) -> torch.Tensor:
        return self.re * self.re + self.im * self.im

    def __add__(self, other: "ComplexGrid") -> "ComplexGrid":
        return ComplexGrid(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexGrid") -> "ComplexGrid":
        return ComplexGrid(self.re - other.re, self.im - other.im)

    def __neg__(self) -> "ComplexGrid":
        return ComplexGrid(-self.re, -self.im)

    def __mul__(self, other) -> "ComplexGrid":
        if isinstance(other, ComplexGrid):
            return ComplexGrid(self.re * other.re - self.im * other.im,
                               self.re * other.im + self.im * other.re)
        return ComplexGrid(self.re * other, self.im * other)

    __rmul__ = __mul__

    def __matmul__(self, other: "ComplexGrid") -> "ComplexGrid":
        return cmatmul(self, other)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.re).all() and torch.isfinite(self.im).all())


def cmatmul(a: ComplexGrid, b: ComplexGrid) -> ComplexGrid:
    """Batched complex matrix product over the last two axes."""
    if a.re.dim() < 2 or b.re.dim() < 2:
        raise DimensionError("cmatmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner axes disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    re = a.re @ b.re - a.im @ b.im
    im = a.re @ b.im + a.im @ b.re
    return ComplexGrid(re, im)


def _real_embedding(a: ComplexGrid) -> torch.Tensor:
    # [[Ar, -Ai], [Ai, Ar]] is real symmetric PD iff A is Hermitian PD
    top = torch.cat([a.re, -a.im], dim=-1)
    bottom = torch.cat([a.im, a.re], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def _hermitian_tol(dtype) -> float:
    return 1e-10 if dtype == torch.float64 else 1e-4


def _check_hermitian(a: ComplexGrid) -> None:
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"matrix must be square, got {tuple(a.shape)}")
    with torch.no_grad():
        scale = max(1.0, float(torch.sqrt(a.abs2()).max()))
        skew = torch.maximum((a.re - a.re.transpose(-1, -2)).abs().max(),
                             (a.im + a.im.transpose(-1, -2)).abs().max())
        if float(skew) > _hermitian_tol(a.dtype) * scale:
            raise NumericError(f"matrix not Hermitian (max skew {float(skew):.3e})")


def _cholesky(a: ComplexGrid) -> torch.Tensor:
    _check_hermitian(a)
    m = _real_embedding(a)
    m = 0.5 * (m + m.transpose(-1, -2))
    chol, info = torch.linalg.cholesky_ex(m)
    if bool((info != 0).any()):
        bad = torch.nonzero(info.reshape(-1)).reshape(-1)[:5].tolist()
        raise NumericError(
            f"Hermitian factorization failed (not positive definite); "
            f"flat batch indices {bad}, leading minor order {int(info.reshape(-1)[bad[0]])}")
    return chol


def hermitian_solve(a: ComplexGrid, b: ComplexGrid) -> ComplexGrid:
    """Solve ``A X = B`` for Hermitian positive-definite ``A``.

    Uses a Cholesky factorization of the real 2N x 2N embedding of ``A``;
    never forms an explicit inverse.
    """
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"solve shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    chol = _cholesky(a)
    rhs = torch.cat([b.re, b.im], dim=-2)
    rhs = rhs.expand(*chol.shape[:-2], *rhs.shape[-2:]) if rhs.dim() < chol.dim() else rhs
    x = torch.cholesky_solve(rhs, chol)
    n = a.shape[-1]
    return ComplexGrid(x[..., :n, :], x[..., n:, :])


def logdet2_hpd(a: ComplexGrid) -> torch.Tensor:
    """``log2 det(A)`` for Hermitian positive-definite ``A`` (batched)."""
    chol = _cholesky(a)
    m = _real_embedding(a)
    m = 0.5 * (m + m.transpose(-1, -2))
    # pivots d_i = m_ii - sum_{j<i} L_ij^2 (= L_ii^2 without the sqrt round trip);
    # det(embedding) = det(A)^2
    lower = torch.tril(chol, diagonal=-1)
    pivots = torch.diagonal(m, dim1=-2, dim2=-1) - (lower * lower).sum(-1)
    return 0.5 * torch.log2(pivots).sum(-1)


# ---------------------------------------------------------------------------
# network primitives

LAYER_NORM_EPS = 1e-6


def layer_norm(x: torch.Tensor, dim: int = -1, weight=None, bias=None,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    mean = x.mean(dim=dim, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=dim, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


# ---------------------------------------------------------------------------
# finite-difference gradient verification

@dataclass(frozen=True)
class GradientReport:
    name: str
    analytic_norm: float
    max_rel_deviation: float
    passed: bool
    coords_checked: int


def grad_check(f: Callable[[], torch.Tensor],
               params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
               tol: float = 1e-4,
               rel_step: float = 1e-5,
               max_coords: int = 64,
               seed: int = 0,
               floor: float = 1e-8) -> list[GradientReport]:
    """Compare autograd gradients of a scalar ``f`` with central differences.

    ``f`` takes no arguments and reads the parameter tensors in place, so it
    must be deterministic (freeze all noise).  Each parameter block is
    subsampled to at most ``max_coords`` coordinates.  The per-block deviation
    is ``max_i |g_i - fd_i| / max(|g|_inf, |fd|_inf, floor)`` with ``i`` over
    the checked coordinates and ``|g|_inf`` taken over the whole analytic block.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    tensors = [p for _, p in items]
    flags = [p.requires_grad for p in tensors]
    for p in tensors:
        p.grad = None
        p.requires_grad_(True)
    try:
        with torch.enable_grad():
            value = f()
            grads = torch.autograd.grad(value, tensors, allow_unused=True)
    finally:
        for p, flag in zip(tensors, flags):
            p.requires_grad_(flag)

    rng = np.random.default_rng(seed)
    reports = []
    with torch.no_grad():
        for (name, p), g in zip(items, grads):
            g = torch.zeros_like(p) if g is None else g
            flat_p = p.view(-1)
            flat_g = g.reshape(-1)
            n = flat_p.numel()
            idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
            analytic = np.empty(len(idx))
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat_p[i].item()
                h = rel_step * max(abs(orig), 1.0)
                flat_p[i] = orig + h
                f_plus = float(f())
                flat_p[i] = orig - h
                f_minus = float(f())
                flat_p[i] = orig
                numeric[j] = (f_plus - f_minus) / (2.0 * h)
                analytic[j] = float(flat_g[i])
            block_inf = float(flat_g.abs().max()) if n else 0.0
            scale = max(block_inf, np.abs(numeric).max(initial=0.0), floor)
            dev = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
            reports.append(GradientReport(name, float(g.norm()), dev, dev <= tol, len(idx)))
    return reports
