"""Synthetic dual-polarized multipath MIMO-OFDM channels and the dataset file.

Channels follow the clustered geometric model

    H[n] = sqrt(N_t N_r / L) * sum_l beta_l exp(-j 2 pi n tau_l f_s / N_c) d_r(psi_l) d_t(phi_l)^H

with ULA steering vectors at half-wavelength spacing.  Receive port ``r``
belongs to polarization ``r % 2`` (0 = horizontal, 1 = vertical) and uses the
path gain of that polarization; both polarizations share the path geometry.

Generation runs in numpy complex128; the networks consume the float32
dataset file through :func:`read_dataset`.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ChannelConfig, Config, SystemConfig
from .numeric import DegenerateInputError

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIQ")


class DatasetError(IOError):
    pass


@dataclass
class UserPaths:
    """Multipath parameters of one user.

    ``dl_gains``/``ul_gains`` have shape (L, 2): one complex gain per path and
    receive polarization.
    """

    dl_gains: np.ndarray
    ul_gains: np.ndarray
    delays: np.ndarray
    aod: np.ndarray
    aoa: np.ndarray

    @property
    def num_paths(self) -> int:
        return len(self.delays)


PathSet = list  # list[UserPaths], one entry per user


@dataclass
class ChannelSample:
    H_d: np.ndarray           # (K, N_c, N_r, N_t)
    H_u: np.ndarray           # (K, N_c, N_t, N_r)
    seed: int
    paths: PathSet | None = None


def steering_vector(angle: float, n: int) -> np.ndarray:
    """ULA response ``exp(-j pi i sin(angle))`` for ``i = 0..n-1``."""
    if n < 1:
        raise ValueError("antenna count must be >= 1")
    return np.exp(-1j * math.pi * np.arange(n) * math.sin(angle))


def _correlated_pair(rng: np.random.Generator, size: int, rho: float) -> np.ndarray:
    z = (rng.standard_normal((size, 2)) + 1j * rng.standard_normal((size, 2))) / math.sqrt(2)
    return np.stack([z[:, 0], rho * z[:, 0] + math.sqrt(max(0.0, 1.0 - rho * rho)) * z[:, 1]], axis=1)


def polarization_gains(rng: np.random.Generator, size: int, rho: float, xpd_db: float) -> np.ndarray:
    """Draw ``size`` (horizontal, vertical) unit-power gain pairs with correlation ``rho``.

    Each port sums a co-polar component and a depolarization leakage component
    ``1/XPD`` times as strong.  The co-polar pair carries as much of the target
    correlation as it can (``rho * (1 + 1/XPD)``, capped at 1) and the
    leakage pair carries the remainder, so the net correlation is ``rho`` for
    every XPD.
    """
    inv_xpd = 0.0 if math.isinf(xpd_db) else 10.0 ** (-xpd_db / 10.0)
    rho_co = min(1.0, rho * (1.0 + inv_xpd))
    rho_leak = 0.0 if inv_xpd == 0.0 else min(1.0, (rho * (1.0 + inv_xpd) - rho_co) / inv_xpd)
    co = _correlated_pair(rng, size, rho_co)
    leak = _correlated_pair(rng, size, rho_leak)
    return (co + math.sqrt(inv_xpd) * leak) / math.sqrt(1.0 + inv_xpd)


def draw_paths(rng: np.random.Generator, system: SystemConfig, channel: ChannelConfig) -> PathSet:
    tau_max = channel.delay_fraction * system.N_c / system.f_s
    users = []
    for _ in range(system.K):
        L = int(rng.integers(channel.paths_min, channel.paths_max + 1))
        aod = rng.uniform(-channel.angle_max_rad, channel.angle_max_rad, L)
        aoa = rng.uniform(-channel.angle_max_rad, channel.angle_max_rad, L)
        delays = rng.uniform(0.0, tau_max, L)
        dl = polarization_gains(rng, L, channel.rho_pol, channel.xpd_db)
        ul = polarization_gains(rng, L, channel.rho_pol, channel.xpd_db)
        users.append(UserPaths(dl, ul, delays, aod, aoa))
    return users


def synth_channel(paths: UserPaths, system: SystemConfig, direction: str = "downlink",
                  gains: np.ndarray | None = None) -> np.ndarray:
    """One user's channel over all subcarriers.

    Returns (N_c, N_r, N_t) for ``downlink`` and (N_c, N_t, N_r) for ``uplink``.
    """
    n_t, n_r, n_c = system.N_t, system.N_r, system.N_c
    if gains is None:
        gains = paths.dl_gains if direction == "downlink" else paths.ul_gains
    L = paths.num_paths
    pol = np.arange(n_r) % 2
    n = np.arange(n_c)
    phase = np.exp(-2j * math.pi * np.outer(n, paths.delays) * system.f_s / n_c)   # (N_c, L)
    d_r = np.stack([steering_vector(a, n_r) for a in paths.aoa])                    # (L, N_r)
    d_t = np.stack([steering_vector(a, n_t) for a in paths.aod])                    # (L, N_t)
    beta = gains[:, pol]                                                             # (L, N_r)
    scale = math.sqrt(n_t * n_r / L)
    if direction == "downlink":
        return scale * np.einsum("nl,lr,lt->nrt", phase, beta * d_r, d_t.conj())
    if direction == "uplink":
        return scale * np.einsum("nl,lr,lt->ntr", phase, beta * d_r.conj(), d_t)
    raise ValueError(f"unknown direction '{direction}'")


def derive_uplink(paths: UserPaths, system: SystemConfig, channel: ChannelConfig) -> np.ndarray:
    """Uplink channel on the same geometry; gains shared or redrawn per config."""
    gains = paths.dl_gains if channel.uplink_gains == "shared" else paths.ul_gains
    return synth_channel(paths, system, "uplink", gains=gains)


def normalize_energy(H: np.ndarray) -> np.ndarray:
    """Scale each user (leading axis) to energy ``prod(per-user shape)``."""
    H = np.asarray(H)
    per_user = H.reshape(H.shape[0], -1)
    energy = np.sum(np.abs(per_user) ** 2, axis=1)
    if np.any(energy <= 0.0) or not np.all(np.isfinite(energy)):
        raise DegenerateInputError("cannot normalize a zero or non-finite channel")
    target = per_user.shape[1]
    factor = np.sqrt(target / energy)
    return H * factor.reshape((-1,) + (1,) * (H.ndim - 1))


def normalize_sample(sample: ChannelSample) -> ChannelSample:
    return ChannelSample(normalize_energy(sample.H_d), normalize_energy(sample.H_u),
                         sample.seed, sample.paths)


def generate_sample(cfg: Config, seed: int) -> ChannelSample:
    rng = np.random.default_rng(seed)
    paths = draw_paths(rng, cfg.system, cfg.channel)
    H_d = np.stack([synth_channel(p, cfg.system, "downlink") for p in paths])
    H_u = np.stack([derive_uplink(p, cfg.system, cfg.channel) for p in paths])
    return normalize_sample(ChannelSample(H_d, H_u, seed, paths))


# ---------------------------------------------------------------------------
# dataset file

@dataclass
class Dataset:
    H_d: np.ndarray           # (count, K, N_c, N_r, N_t) complex64
    H_u: np.ndarray           # (count, K, N_c, N_t, N_r) complex64
    seed: int

    def __len__(self) -> int:
        return len(self.H_d)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        _, K, n_c, n_r, n_t = self.H_d.shape
        return K, n_c, n_r, n_t


def _sample_arrays(args) -> tuple[np.ndarray, np.ndarray]:
    cfg_dict, seed = args
    s = generate_sample(Config.from_dict(cfg_dict), seed)
    return s.H_d.astype(np.complex64), s.H_u.astype(np.complex64)


def build_dataset(cfg: Config, count: int, seed: int, workers: int = 1) -> Dataset:
    jobs = [(cfg.to_dict(), seed + i) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_sample_arrays, jobs, chunksize=max(1, count // (4 * workers))))
    else:
        parts = [_sample_arrays(j) for j in jobs]
    s = cfg.system
    if parts:
        H_d = np.stack([p[0] for p in parts])
        H_u = np.stack([p[1] for p in parts])
    else:
        H_d = np.zeros((0, s.K, s.N_c, s.N_r, s.N_t), np.complex64)
        H_u = np.zeros((0, s.K, s.N_c, s.N_t, s.N_r), np.complex64)
    return Dataset(H_d, H_u, seed)


def write_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    K, n_c, n_r, n_t = ds.dims
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(ds), K, n_c, n_r, n_t, ds.seed))
            for hd, hu in zip(ds.H_d, ds.H_u):
                fh.write(np.ascontiguousarray(hd, dtype=np.complex64).view("<f4").tobytes())
                fh.write(np.ascontiguousarray(hu, dtype=np.complex64).view("<f4").tobytes())
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def generate_dataset(cfg: Config, count: int, seed: int, path: str | Path, workers: int = 1) -> Path:
    return write_dataset(build_dataset(cfg, count, seed, workers), path)


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, count, K, n_c, n_r, n_t, seed = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    per = K * n_c * n_r * n_t
    expected = _HEADER.size + count * 2 * per * 8
    if len(raw) != expected:
        raise DatasetError(f"{path}: size {len(raw)} != expected {expected}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).view(np.complex64)
    body = body.reshape(count, 2, per)
    H_d = body[:, 0].reshape(count, K, n_c, n_r, n_t).copy()
    H_u = body[:, 1].reshape(count, K, n_c, n_t, n_r).copy()
    return Dataset(H_d, H_u, int(seed))


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
