"""End-to-end pipeline, optimizer loop, evaluation and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .baselines import pca_hb_batch, random_beamformer
from .channel import Dataset
from .config import Config
from .decoder import Decoder, HybridBeamformer
from .encoder import Encoder, symbols_to_features, to_complex_symbols
from .numeric import ComplexGrid
from .rates import sum_rate
from .uplink import (Quantizer, composite_channel, complex_normal, noise_shape, snr_to_noise_var,
                     sscc_code_dim, sscc_roundtrip, transport)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


def noam_lr(step: int, d_model: int, warmup: int, factor: float = 1.0) -> float:
    if step < 1:
        raise ValueError("Noam schedule is defined for step >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class JointModel(nn.Module):
    """Shared UE encoder + BS decoder, wired for DJSCC or SSCC feedback."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.feedback = cfg.uplink.feedback
        s = cfg.system
        if self.feedback == "sscc":
            sc = cfg.uplink.sscc
            code_dim = sscc_code_dim(s.m, sc.q, Fraction(sc.r), sc.a)
        else:
            code_dim = 2 * s.m
        self.code_dim = code_dim
        self.encoder = Encoder(cfg, code_dim)
        self.decoder = Decoder(cfg, code_dim)


def build_model(cfg: Config, seed: int | None = None) -> JointModel:
    seed = cfg.train.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = JointModel(cfg)
    return model.to(DTYPES[cfg.train.dtype])


def perturb_(model: nn.Module, scale: float, seed: int) -> nn.Module:
    """Add N(0, scale^2) to every parameter so zero-initialized branches are live."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * scale)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class FeedbackChannel:
    """How the per-user feature vectors reach the decoder."""

    mode: str = "simultaneous"
    sigma_u: float = 1.0
    quantizer: Quantizer | None = None   # SSCC only; None means ideal (training) feedback
    ber: float = 0.0


def draw_noise(mode: str, batch: int, cfg: Config, generator: torch.Generator, dtype) -> ComplexGrid:
    s = cfg.system
    return complex_normal(noise_shape(mode, (batch,), s.m, s.N_t, s.K), generator, dtype)


def sample_stream(seed: int, index: int) -> torch.Generator:
    """Counter-based generator for sample ``index`` under base ``seed``."""
    state = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def frozen_noise(mode: str, indices, cfg: Config, seed: int, dtype) -> ComplexGrid:
    """Per-sample uplink noise; identical for a sample whatever batch it sits in."""
    parts = [draw_noise(mode, 1, cfg, sample_stream(seed, int(i)), dtype) for i in indices]
    return ComplexGrid(torch.cat([p.re for p in parts]), torch.cat([p.im for p in parts]))


def forward_pipeline(model: JointModel, H_d: ComplexGrid, H_u: ComplexGrid, link: FeedbackChannel,
                     noise: ComplexGrid | None = None, bit_uniforms: torch.Tensor | None = None,
                     generator: torch.Generator | None = None):
    """Batch of (B, K, ...) CSI -> (beamformer, uplink resource units)."""
    m = model.cfg.system.m
    s = model.encoder(H_d)                                   # (B, K, code_dim)
    if model.feedback == "djscc":
        S = to_complex_symbols(s).transpose(-1, -2)         # (B, m, K)
        out = transport(link.mode, S, composite_channel(H_u, m), link.sigma_u, noise, generator)
        features, units = symbols_to_features(out.symbols), out.resource_units
    else:
        if link.quantizer is not None:
            s = sscc_roundtrip(s, link.quantizer, link.ber, bit_uniforms, generator)
        features, units = s.flatten(-2), m * s.shape[-2]
    return model.decoder(features), units


def to_grids(ds: Dataset, dtype=torch.float64) -> tuple[ComplexGrid, ComplexGrid]:
    return ComplexGrid.from_numpy(ds.H_d, dtype), ComplexGrid.from_numpy(ds.H_u, dtype)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainState:
    model: JointModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    best_val: float = float("-inf")
    losses: list = field(default_factory=list)


def make_optimizer(model: nn.Module, cfg: Config) -> torch.optim.Optimizer:
    t = cfg.train
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=(t.adam_beta1, t.adam_beta2), eps=t.adam_eps)


def init_state(cfg: Config, seed: int | None = None) -> TrainState:
    seed = cfg.train.seed if seed is None else seed
    model = build_model(cfg, seed)
    gen = torch.Generator().manual_seed(seed + 7919)
    return TrainState(model, make_optimizer(model, cfg), gen)


def train_link(cfg: Config) -> FeedbackChannel:
    return FeedbackChannel(cfg.uplink.mode, math.sqrt(snr_to_noise_var(cfg.uplink.snr_ul_db)))


def train_step(state: TrainState, H_d: ComplexGrid, H_u: ComplexGrid, link: FeedbackChannel,
               noise_var_dl: float) -> float:
    cfg = state.model.cfg
    lr = noam_lr(state.step + 1, cfg.system.d_model, cfg.train.warmup, cfg.train.factor)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    noise = None
    if cfg.uplink.feedback == "djscc":
        noise = draw_noise(link.mode, H_d.shape[0], cfg, state.generator, H_d.dtype)
    bad = _first_non_finite(H_d, H_u)
    if bad is not None:
        raise TrainingError(f"non-finite CSI at step {state.step}, batch sample {bad}")
    state.optimizer.zero_grad(set_to_none=True)
    bf, _ = forward_pipeline(state.model, H_d, H_u, link, noise)
    rates = sum_rate(H_d, bf, noise_var_dl).sum_rate
    if not bool(torch.isfinite(rates).all()):
        bad = int(torch.nonzero(~torch.isfinite(rates))[0])
        raise TrainingError(f"non-finite loss at step {state.step}, batch sample {bad}: "
                            f"rate={float(rates[bad])}")
    loss = -rates.mean()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return value


def _first_non_finite(*grids: ComplexGrid):
    ok = None
    for g in grids:
        flat = torch.isfinite(g.re).flatten(1).all(1) & torch.isfinite(g.im).flatten(1).all(1)
        ok = flat if ok is None else ok & flat
    return None if bool(ok.all()) else int(torch.nonzero(~ok)[0])


def train(cfg: Config, train_set: Dataset, steps: int | None = None,
          state: TrainState | None = None) -> TrainState:
    steps = cfg.train.steps if steps is None else steps
    state = state or init_state(cfg)
    dtype = DTYPES[cfg.train.dtype]
    H_d, H_u = to_grids(train_set, dtype)
    link = train_link(cfg)
    noise_var = snr_to_noise_var(cfg.train.snr_dl_db)
    n = len(train_set)
    for _ in range(steps):
        idx = torch.randint(0, n, (cfg.train.batch,), generator=state.generator)
        value = train_step(state, H_d[idx], H_u[idx], link, noise_var)
        if cfg.train.log_every and state.step % cfg.train.log_every == 0:
            log.info("step %d loss %.4f", state.step, value)
    return state


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalRow:
    snr_dl_db: float
    mean: float
    std: float


def _summarize(per_sample: torch.Tensor, grid) -> list[EvalRow]:
    # per_sample: (len(grid), N)
    return [EvalRow(float(snr), float(r.mean()), float(r.std(unbiased=False)))
            for snr, r in zip(grid, per_sample)]


def _rates_over_grid(H_d: ComplexGrid, bf: HybridBeamformer, grid) -> torch.Tensor:
    return torch.stack([sum_rate(H_d, bf, snr_to_noise_var(snr)).sum_rate for snr in grid])


@torch.no_grad()
def evaluate(model: JointModel, ds: Dataset, snr_dl_grid, link: FeedbackChannel,
             noise_seed: int, chunk: int = 256) -> list[EvalRow]:
    """Mean/std sum rate of ``model`` at each downlink SNR with frozen uplink noise."""
    grid = list(snr_dl_grid)
    if not grid or len(ds) == 0:
        return []
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    H_d_all, H_u_all = to_grids(ds, dtype)
    parts = []
    for start in range(0, len(ds), chunk):
        H_d, H_u = H_d_all[start:start + chunk], H_u_all[start:start + chunk]
        idx = range(start, start + H_d.shape[0])
        noise = frozen_noise(link.mode, idx, cfg, noise_seed, dtype)
        uniforms = None
        if model.feedback == "sscc" and link.quantizer is not None:
            shape = (1, cfg.system.K, model.code_dim, link.quantizer.q)
            uniforms = torch.cat([torch.rand(shape, generator=sample_stream(noise_seed + 1, i),
                                             dtype=torch.float64) for i in idx])
        bf, _ = forward_pipeline(model, H_d, H_u, link, noise if model.feedback == "djscc" else None,
                                 uniforms)
        parts.append(_rates_over_grid(H_d, bf, grid))
    return _summarize(torch.cat(parts, dim=1), grid)


@torch.no_grad()
def calibrate_quantizer(model: JointModel, ds: Dataset, chunk: int = 256) -> Quantizer:
    """SSCC clip range from encoder outputs on ``ds`` (mean +- k sigma per dimension)."""
    sc = model.cfg.uplink.sscc
    dtype = next(model.parameters()).dtype
    H_d, _ = to_grids(ds, dtype)
    outs = [model.encoder(H_d[i:i + chunk]) for i in range(0, len(ds), chunk)]
    flat = torch.cat(outs).reshape(-1, model.code_dim).to(torch.float64)
    return Quantizer.calibrate(flat, sc.q, sc.clip_sigmas)


@torch.no_grad()
def evaluate_pca(ds: Dataset, snr_dl_grid, n_rf: int) -> list[EvalRow]:
    grid = list(snr_dl_grid)
    if not grid or len(ds) == 0:
        return []
    H_d, _ = to_grids(ds)
    return _summarize(_rates_over_grid(H_d, pca_hb_batch(ds.H_d, n_rf), grid), grid)


@torch.no_grad()
def evaluate_random(ds: Dataset, snr_dl_grid, cfg: Config, seed: int, draws: int = 8) -> list[EvalRow]:
    grid = list(snr_dl_grid)
    if not grid or len(ds) == 0:
        return []
    s = cfg.system
    H_d, _ = to_grids(ds)
    gen = torch.Generator().manual_seed(seed)
    per = []
    for _ in range(draws):
        bf = random_beamformer((len(ds),), s.N_t, s.N_RF, s.N_c, s.K, gen)
        per.append(_rates_over_grid(H_d, bf, grid))
    return _summarize(torch.cat(per, dim=1), grid)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian): "CKPT" u16 version | u64 step | f64 best_val |
# 64 ascii bytes config digest | u32 n + n bytes RNG state | u32 entry count |
# entries: u16 name length, utf-8 name, u8 ndim, ndim x u32 shape, f64 data.
# Entry names: "param/<p>", "adam.m/<p>", "adam.v/<p>", "adam.step/<p>".

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def _entries(state: TrainState):
    named = dict(state.model.named_parameters())
    for name, p in named.items():
        yield f"param/{name}", p.detach()
        st = state.optimizer.state.get(p)
        if st:
            yield f"adam.m/{name}", st["exp_avg"]
            yield f"adam.v/{name}", st["exp_avg_sq"]
            yield f"adam.step/{name}", torch.as_tensor(float(st["step"]))


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    digest = state.model.cfg.digest().encode()
    rng = state.generator.get_state().numpy().tobytes()
    entries = list(_entries(state))
    chunks = [CKPT_MAGIC, struct.pack("<HQd", CKPT_VERSION, state.step, state.best_val), digest,
              struct.pack("<I", len(rng)), rng, struct.pack("<I", len(entries))]
    for name, t in entries:
        raw = name.encode()
        arr = t.detach().to(torch.float64).cpu().numpy()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint_raw(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, step, best = struct.unpack_from("<HQd", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<HQd")
    digest = raw[off:off + 64].decode()
    off += 64
    (n_rng,) = struct.unpack_from("<I", raw, off)
    off += 4
    rng = raw[off:off + n_rng]
    off += n_rng
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    blobs = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n_name].decode()
        off += n_name
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
    return {"step": step, "best_val": best, "digest": digest, "rng": rng, "blobs": blobs}


def load_checkpoint(path: str | Path, cfg: Config, strict_digest: bool = True) -> TrainState:
    data = read_checkpoint_raw(path)
    if strict_digest and data["digest"] != cfg.digest():
        raise CheckpointError(f"{path}: config digest mismatch "
                              f"(checkpoint {data['digest'][:12]}, config {cfg.digest()[:12]})")
    state = init_state(cfg)
    blobs = data["blobs"]
    named = dict(state.model.named_parameters())
    with torch.no_grad():
        for name, p in named.items():
            key = f"param/{name}"
            if key not in blobs:
                raise CheckpointError(f"{path}: missing parameter '{name}'")
            p.copy_(torch.from_numpy(blobs[key].copy()).to(p.dtype))
            if f"adam.m/{name}" in blobs:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(blobs[f"adam.step/{name}"])),
                    "exp_avg": torch.from_numpy(blobs[f"adam.m/{name}"].copy()).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(blobs[f"adam.v/{name}"].copy()).to(p.dtype),
                }
    state.generator.set_state(torch.from_numpy(np.frombuffer(data["rng"], dtype=np.uint8).copy()))
    state.step = data["step"]
    state.best_val = data["best_val"]
    return state


def load_model(path: str | Path, cfg: Config) -> JointModel:
    return load_checkpoint(path, cfg).model


# ---------------------------------------------------------------------------
# gradient verification

def pipeline_grad_check(cfg: Config, seed: int = 0, batch: int = 2, perturb: float = 0.3,
                        tol: float = 1e-4, max_coords: int = 16, dataset: Dataset | None = None):
    """Finite-difference check of every parameter block of the full pipeline.

    Runs in float64 with frozen uplink noise.  Parameters are perturbed off
    the identity initialization first so the zero-initialized branches carry
    gradient.
    """
    from .channel import build_dataset
    from .numeric import grad_check

    cfg = cfg.with_overrides({"train.dtype": "float64"})
    model = perturb_(build_model(cfg, seed), perturb, seed + 1)
    ds = dataset if dataset is not None else build_dataset(cfg, batch, cfg.data.train_seed, 1)
    H_d, H_u = to_grids(ds)
    link = train_link(cfg)
    noise = draw_noise(link.mode, len(ds), cfg, torch.Generator().manual_seed(seed + 2), torch.float64)
    noise_var = snr_to_noise_var(cfg.train.snr_dl_db)

    def loss():
        bf, _ = forward_pipeline(model, H_d, H_u, link, noise)
        return -sum_rate(H_d, bf, noise_var).sum_rate.mean()

    return grad_check(loss, model.named_parameters(), tol=tol, max_coords=max_coords, seed=seed)
