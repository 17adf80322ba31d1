"""Noise schedule, forward noising, x0-parameterised loss, training loop and ancestral sampler."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import DiffusionConfig, NetworkConfig, TrainingConfig
from .errors import ConfigError, NumericalError
from .network import Denoiser
from .serialization import read_container, state_to_numpy, write_container

log = logging.getLogger(__name__)

MDL_MAGIC = b"RATD-MDL1"


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step quantities; index ``t - 1`` holds step t for t = 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray  # alpha_bar[t-1] with alpha_bar_0 = 1
    beta_tilde_sq: np.ndarray  # posterior variance of q(x_{t-1} | x_t, x_0)
    gamma: np.ndarray  # x0-loss weights

    @property
    def beta_tilde(self) -> np.ndarray:
        return np.sqrt(self.beta_tilde_sq)

    @property
    def posterior_coef_x0(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar_prev) * self.beta / (1.0 - self.alpha_bar)

    @property
    def posterior_coef_xt(self) -> np.ndarray:
        return np.sqrt(self.alpha) * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.5,
                  shape: str = "quadratic") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"invalid beta bounds ({beta_start}, {beta_end})")
    if shape == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif shape == "quadratic":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T) ** 2
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde_sq = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    # beta_tilde_1 is 0, which would make gamma_1 infinite; step 1 uses the
    # beta_1 upper-bound variance instead.
    var = np.where(beta_tilde_sq > 0, beta_tilde_sq, beta)
    gamma = alpha_bar_prev * beta ** 2 / (2.0 * var * (1.0 - alpha_bar) ** 2)
    return NoiseSchedule(T, beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde_sq, gamma)


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule)


def _check_t(t, T):
    arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if arr.size == 0 or arr.min() < 1 or arr.max() > T:
        raise ValueError(f"diffusion step out of range 1..{T}: {arr}")


def _coef(values: np.ndarray, t, like):
    """Gather per-step values at t (1-based) and broadcast against ``like``."""
    if torch.is_tensor(like):
        idx = torch.as_tensor(t, device=like.device).long() - 1
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[idx]
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))
    c = values[np.asarray(t) - 1]
    return np.reshape(c, np.shape(c) + (1,) * (np.ndim(like) - np.ndim(c)))


def forward_perturb(x0, t, noise, schedule: NoiseSchedule):
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise."""
    _check_t(t, schedule.T)
    ab = _coef(schedule.alpha_bar, t, x0)
    sq = (lambda v: v.sqrt()) if torch.is_tensor(x0) else np.sqrt
    return sq(ab) * x0 + sq(1.0 - ab) * noise


def eps_to_x0(x_t, eps_hat, t, schedule: NoiseSchedule):
    ab = _coef(schedule.alpha_bar, t, x_t)
    sq = (lambda v: v.sqrt()) if torch.is_tensor(x_t) else np.sqrt
    return (x_t - sq(1.0 - ab) * eps_hat) / sq(ab)


def x0_to_eps(x_t, x0_hat, t, schedule: NoiseSchedule):
    ab = _coef(schedule.alpha_bar, t, x_t)
    sq = (lambda v: v.sqrt()) if torch.is_tensor(x_t) else np.sqrt
    return (x_t - sq(ab) * x0_hat) / sq(1.0 - ab)


def predict_target_adapter(mode: str, schedule: NoiseSchedule):
    """Returns f(raw_output, x_t, t) -> x0_hat for a network trained on ``mode``."""
    if mode == "x0":
        return lambda out, x_t, t: out
    if mode == "epsilon":
        if np.any(schedule.alpha_bar <= 0):
            raise ValueError("alpha_bar must be positive to convert epsilon predictions")
        return lambda out, x_t, t: eps_to_x0(x_t, out, t, schedule)
    raise ValueError(f"unknown prediction target {mode!r}")


def training_loss(x0, x0_hat, t, schedule: NoiseSchedule, weighting: str = "uniform"):
    """Per-sample mean squared error, optionally scaled by gamma_t, averaged over the batch."""
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    if torch.isnan(x0).any() or torch.isnan(x0_hat).any():
        raise NumericalError("NaN in loss inputs")
    err = ((x0 - x0_hat) ** 2).reshape(x0.shape[0], -1).mean(dim=1)
    if weighting == "gamma":
        err = err * _coef(schedule.gamma, t, err)
    elif weighting != "uniform":
        raise ValueError(f"unknown weighting {weighting!r}")
    return err.mean()


@dataclass
class ConditionedData:
    """Stacked model inputs for a set of windows."""

    history: np.ndarray  # [N, l, d]
    target: np.ndarray  # [N, h, d']
    positions: np.ndarray  # [N, l + h]
    refs: np.ndarray  # [N, k, h, d]

    def __len__(self):
        return len(self.history)

    def tensors(self, idx=None, dtype=torch.float32):
        sl = slice(None) if idx is None else idx
        return tuple(torch.as_tensor(np.asarray(a[sl]), dtype=dtype)
                     for a in (self.history, self.target, self.positions, self.refs))


class DiffusionModel(nn.Module):
    def __init__(self, network: NetworkConfig, diffusion: DiffusionConfig, d: int, l: int, h: int,
                 k: int, target_features=None):
        super().__init__()
        self.network_cfg = network
        self.diffusion_cfg = diffusion
        self.schedule = schedule_from_config(diffusion)
        self.target = diffusion.target
        self.dims = {"d": d, "l": l, "h": h, "k": k,
                     "target_features": None if target_features is None else [int(i) for i in target_features]}
        self.denoiser = Denoiser(network, diffusion.T, d, l, h, k, target_features)
        self._adapter = predict_target_adapter(self.target, self.schedule)

    @property
    def T(self):
        return self.schedule.T

    def raw(self, x_t, t, history, positions, refs):
        return self.denoiser(x_t, history, t, positions, refs)

    def predict_x0(self, x_t, t, history, positions, refs):
        return self._adapter(self.raw(x_t, t, history, positions, refs), x_t, t)

    def loss(self, history, target, positions, refs, t, noise, weighting="uniform"):
        x_t = forward_perturb(target, t, noise, self.schedule)
        out = self.raw(x_t, t, history, positions, refs)
        if self.target == "epsilon":
            return training_loss(noise, out, t, self.schedule, "uniform")
        return training_loss(target, out, t, self.schedule, weighting)


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    steps: int


def _validation_loss(model, val: ConditionedData, weighting, seed, batch_size=256):
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(val), batch_size):
            hist, tgt, pos, refs = val.tensors(slice(i, i + batch_size), dtype)
            t = torch.randint(1, model.T + 1, (len(hist),), generator=gen)
            noise = torch.randn(tgt.shape, generator=gen, dtype=dtype)
            total += float(model.loss(hist, tgt, pos, refs, t, noise, weighting)) * len(hist)
            count += len(hist)
    model.train()
    return total / max(count, 1)


def fit(model: DiffusionModel, train_data: ConditionedData, val_data: ConditionedData | None,
        cfg: TrainingConfig, weighting: str = "uniform", seed: int = 0, log_path=None) -> TrainResult:
    """Adam with early stopping on validation loss; restores the best weights."""
    if model.target == "epsilon" and weighting == "gamma":
        raise ConfigError("gamma weighting applies to x0 prediction only")
    if len(train_data) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    val_seed = seed + 104729
    val = val_data if val_data is not None and len(val_data) else None
    best = _validation_loss(model, val, weighting, val_seed) if val else float("inf")
    best_state, best_epoch, bad_epochs, steps = copy.deepcopy(model.state_dict()), -1, 0, 0
    history = [{"epoch": -1, "train_loss": None, "val_loss": best if val else None, "wall_time": 0.0}]
    start = time.perf_counter()
    log_fh = open(log_path, "a") if log_path else None
    model.train()
    try:
        for epoch in range(cfg.max_epochs):
            order = torch.randperm(len(train_data), generator=gen).numpy()
            total, count = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                idx = np.sort(order[i:i + cfg.batch_size])
                hist, tgt, pos, refs = train_data.tensors(idx, dtype)
                t = torch.randint(1, model.T + 1, (len(idx),), generator=gen)
                noise = torch.randn(tgt.shape, generator=gen, dtype=dtype)
                loss = model.loss(hist, tgt, pos, refs, t, noise, weighting)
                if not torch.isfinite(loss):
                    raise NumericalError(f"training diverged at step {steps} (epoch {epoch})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.detach().item() * len(idx)
                count += len(idx)
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
            val_loss = _validation_loss(model, val, weighting, val_seed) if val else total / count
            rec = {"epoch": epoch, "train_loss": total / count, "val_loss": val_loss,
                   "wall_time": time.perf_counter() - start}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if val_loss < best:
                best, best_epoch, bad_epochs = val_loss, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad_epochs += 1
            if bad_epochs >= cfg.patience or (cfg.max_steps is not None and steps >= cfg.max_steps):
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(history, best_epoch, steps)


def train(model, train_windows, ref_cache, index, schedule, optimizer_config: TrainingConfig,
          val_windows=None, val_refs=None, weighting="uniform", seed=0):
    """Train from window lists and a precomputed reference cache."""
    from .pipeline import conditioned_from_windows

    if schedule.T != model.T:
        raise ValueError("schedule does not match model")
    refs = []
    for wid in range(len(train_windows)):
        if ref_cache.k == 0:
            refs.append(np.zeros((0, model.dims["h"], model.dims["d"]), np.float32))
            continue
        if wid not in ref_cache.ids:
            raise KeyError(f"training window {wid} missing from the reference cache")
        refs.append(ref_cache.reference_set(wid, index).references)
    data = conditioned_from_windows(train_windows, np.stack(refs))
    val = None
    if val_windows is not None:
        val = conditioned_from_windows(val_windows, val_refs)
    return fit(model, data, val, optimizer_config, weighting, seed)


# -- sampling -------------------------------------------------------------------

def sample(model: DiffusionModel, history, refs, positions, num_samples: int,
           generator: torch.Generator | None = None, noise_fn=None, batch_size: int = 2048):
    """Ancestral sampling from x_T ~ N(0, I) through the x0-parameterised posterior.

    ``history`` [B, l, d], ``refs`` [B, k, h, d], ``positions`` [B, l+h];
    returns [B, num_samples, h, d']. ``noise_fn(shape)`` overrides the
    Gaussian draws (used to force deterministic paths in tests).
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    dtype = next(model.parameters()).dtype
    history = torch.as_tensor(np.asarray(history), dtype=dtype)
    refs = torch.as_tensor(np.asarray(refs), dtype=dtype)
    positions = torch.as_tensor(np.asarray(positions), dtype=dtype)
    if history.dim() == 2:
        history, refs, positions = history[None], refs[None], positions[None]
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    if noise_fn is None:
        def noise_fn(shape):
            return torch.randn(shape, generator=generator, dtype=dtype)

    B = history.shape[0]
    h = model.dims["h"]
    dp = len(model.denoiser.target_index)
    sch = model.schedule
    rep = lambda a: a.repeat_interleave(num_samples, dim=0)
    hist_r, refs_r, pos_r = rep(history), rep(refs), rep(positions)
    N = B * num_samples
    x = noise_fn((N, h, dp)).to(dtype)
    model.eval()
    with torch.no_grad():
        for t in range(sch.T, 0, -1):
            x0_hat = torch.empty_like(x)
            for i in range(0, N, batch_size):
                sl = slice(i, i + batch_size)
                tt = torch.full((x[sl].shape[0],), t, dtype=torch.long)
                x0_hat[sl] = model.predict_x0(x[sl], tt, hist_r[sl], pos_r[sl], refs_r[sl])
            mean = sch.posterior_coef_x0[t - 1] * x0_hat + sch.posterior_coef_xt[t - 1] * x
            if t > 1:
                x = mean + float(np.sqrt(sch.beta_tilde_sq[t - 1])) * noise_fn((N, h, dp)).to(dtype)
            else:
                x = mean
    if not torch.isfinite(x).all():
        raise NumericalError("sampler produced non-finite values")
    return x.reshape(B, num_samples, h, dp).numpy()


# -- checkpoints ----------------------------------------------------------------

def save_model(model: DiffusionModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "network": dataclasses.asdict(model.network_cfg),
        "diffusion": dataclasses.asdict(model.diffusion_cfg),
        "dims": model.dims,
        **(extra_meta or {}),
    }
    write_container(path, MDL_MAGIC, meta, state_to_numpy(model))


def load_model(path) -> tuple[DiffusionModel, dict]:
    meta, arrays = read_container(path, MDL_MAGIC)
    net = NetworkConfig(**meta["network"])
    diff = DiffusionConfig(**meta["diffusion"])
    dims = meta["dims"]
    model = DiffusionModel(net, diff, dims["d"], dims["l"], dims["h"], dims["k"], dims["target_features"])
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.eval()
    return model, meta

