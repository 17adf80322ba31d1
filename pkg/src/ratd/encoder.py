"""Frozen prefix encoder used for retrieval, with masked-segment pretraining.

Four interchangeable backbones are selectable via ``architecture_tag``:
``tcn`` (default), ``dlinear``, ``informer`` and ``timesnet``. All map a
prefix [n, d] to an embedding of size e.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import FrozenModelError, NumericalError
from .serialization import hash_arrays, read_container, state_to_numpy, write_container

log = logging.getLogger(__name__)

ENC_MAGIC = b"RATD-ENC1"


class CausalConv1d(nn.Conv1d):
    def __init__(self, c_in, c_out, kernel_size, dilation=1):
        super().__init__(c_in, c_out, kernel_size, dilation=dilation)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TemporalBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, dilation):
        super().__init__()
        self.conv1 = CausalConv1d(c_in, c_out, kernel_size, dilation)
        self.conv2 = CausalConv1d(c_out, c_out, kernel_size, dilation)
        self.down = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        y = F.relu(self.conv1(x))
        y = F.relu(self.conv2(y))
        return F.relu(y + self.down(x))


def _pool(h):
    # h: [B, C, n]. Mean pooling alone is shift-invariant; the last causal step
    # sees the whole prefix in order, so both are kept.
    return torch.cat([h.mean(dim=-1), h[..., -1]], dim=-1)


class TCNBackbone(nn.Module):
    def __init__(self, n, d, e, hidden=32, levels=3, kernel_size=3):
        super().__init__()
        blocks, c = [], d
        for i in range(levels):
            blocks.append(TemporalBlock(c, hidden, kernel_size, 2 ** i))
            c = hidden
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(2 * hidden, e)

    def forward(self, x):  # x: [B, n, d]
        return self.head(_pool(self.blocks(x.transpose(1, 2))))


class DLinearBackbone(nn.Module):
    def __init__(self, n, d, e, hidden=32, kernel_size=5, **_):
        super().__init__()
        self.kernel_size = kernel_size if kernel_size % 2 else kernel_size + 1
        self.seasonal = nn.Linear(n, hidden)
        self.trend = nn.Linear(n, hidden)
        self.head = nn.Linear(d * hidden, e)

    def forward(self, x):
        xt = x.transpose(1, 2)  # [B, d, n]
        pad = self.kernel_size // 2
        padded = torch.cat([xt[..., :1].expand(-1, -1, pad), xt, xt[..., -1:].expand(-1, -1, pad)], dim=-1)
        trend = F.avg_pool1d(padded, self.kernel_size, stride=1)
        z = self.seasonal(xt - trend) + self.trend(trend)
        return self.head(z.flatten(1))


class InformerBackbone(nn.Module):
    def __init__(self, n, d, e, hidden=32, heads=4, **_):
        super().__init__()
        heads = heads if hidden % heads == 0 else 1
        self.inp = nn.Linear(d, hidden)
        self.pos = nn.Parameter(torch.randn(1, n, hidden) * 0.02)
        self.layer = nn.TransformerEncoderLayer(hidden, heads, 2 * hidden, dropout=0.0, batch_first=True)
        self.head = nn.Linear(2 * hidden, e)

    def forward(self, x):
        h = self.layer(self.inp(x) + self.pos)
        return self.head(_pool(h.transpose(1, 2)))


class TimesNetBackbone(nn.Module):
    """Folds the prefix by its dominant FFT period and applies a 2-D conv."""

    def __init__(self, n, d, e, hidden=32, kernel_size=3, **_):
        super().__init__()
        self.inp = nn.Linear(d, hidden)
        self.conv = nn.Sequential(
            nn.Conv2d(hidden, hidden, kernel_size, padding=kernel_size // 2),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, kernel_size, padding=kernel_size // 2),
        )
        self.head = nn.Linear(2 * hidden, e)

    def _fold(self, h, period):
        B, n, C = h.shape
        rows = -(-n // period)
        padded = F.pad(h, (0, 0, 0, rows * period - n))
        grid = padded.reshape(B, rows, period, C).permute(0, 3, 1, 2)
        return self.conv(grid).permute(0, 2, 3, 1).reshape(B, rows * period, C)[:, :n]

    def forward(self, x):
        h = self.inp(x)  # [B, n, C]
        n = h.shape[1]
        # dominant period per sample, so an embedding never depends on its batch-mates
        amp = torch.fft.rfft(x, dim=1).abs().mean(dim=2)
        amp[:, 0] = 0
        freq = torch.argmax(amp, dim=1).clamp(min=1)
        periods = torch.clamp(n // freq, min=1)
        out = torch.empty_like(h)
        for period in torch.unique(periods).tolist():
            sel = periods == period
            out[sel] = self._fold(h[sel], int(period))
        h = h + out
        return self.head(_pool(h.transpose(1, 2)))


BACKBONES = {
    "tcn": TCNBackbone,
    "dlinear": DLinearBackbone,
    "informer": InformerBackbone,
    "timesnet": TimesNetBackbone,
}


def build_backbone(tag, n, d, e, hidden=32, levels=3, kernel_size=3):
    if tag not in BACKBONES:
        raise ValueError(f"unknown encoder architecture {tag!r}")
    if tag == "tcn":
        return TCNBackbone(n, d, e, hidden=hidden, levels=levels, kernel_size=kernel_size)
    return BACKBONES[tag](n, d, e, hidden=hidden, kernel_size=kernel_size)


@dataclass
class Embedding:
    vector: np.ndarray
    source_window_id: int = -1


class EncoderModel:
    """Wraps a backbone with shape bookkeeping and a freeze flag."""

    def __init__(self, net: nn.Module, input_length: int, input_features: int,
                 embedding_dim: int, architecture_tag: str, hparams: dict | None = None):
        self.net = net
        self.input_length = input_length
        self.input_features = input_features
        self.embedding_dim = embedding_dim
        self.architecture_tag = architecture_tag
        self.hparams = dict(hparams or {})
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "EncoderModel":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    def load_parameters(self, state: dict[str, np.ndarray]) -> None:
        if self._frozen:
            raise FrozenModelError("encoder parameters are frozen")
        self.net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})

    def parameters_numpy(self) -> dict[str, np.ndarray]:
        return state_to_numpy(self.net)

    @property
    def fingerprint(self) -> str:
        salt = f"{self.architecture_tag}:{self.input_length}:{self.input_features}:{self.embedding_dim}"
        return hash_arrays(self.parameters_numpy(), salt)

    def _check_shape(self, x: np.ndarray):
        if x.shape[-2:] != (self.input_length, self.input_features):
            raise ValueError(
                f"prefix shape {x.shape[-2:]} does not match encoder input "
                f"({self.input_length}, {self.input_features})")

    def encode_batch(self, prefixes: np.ndarray, batch_size: int = 512) -> np.ndarray:
        if not self._frozen:
            raise FrozenModelError("encode requires a frozen encoder")
        prefixes = np.ascontiguousarray(prefixes, dtype=np.float32)
        self._check_shape(prefixes)
        outs = []
        with torch.no_grad():
            for i in range(0, len(prefixes), batch_size):
                outs.append(self.net(torch.from_numpy(prefixes[i:i + batch_size])).numpy())
        out = np.concatenate(outs) if outs else np.zeros((0, self.embedding_dim), np.float32)
        if not np.isfinite(out).all():
            raise NumericalError("encoder produced non-finite embeddings")
        return out

    def __call__(self, prefixes):
        return self.encode_batch(prefixes)


def encode(model: EncoderModel, prefix: np.ndarray, source_window_id: int = -1) -> Embedding:
    prefix = np.asarray(prefix, dtype=np.float32)
    if prefix.ndim != 2:
        raise ValueError(f"prefix must be [n, d], got shape {prefix.shape}")
    return Embedding(model.encode_batch(prefix[None])[0], source_window_id)


def _mask_segments(x: torch.Tensor, ratio: float, gen: torch.Generator) -> torch.Tensor:
    B, n, _ = x.shape
    span = max(1, int(round(ratio * n)))
    starts = torch.randint(0, n - span + 1, (B,), generator=gen)
    pos = torch.arange(n)[None, :]
    keep = ~((pos >= starts[:, None]) & (pos < starts[:, None] + span))
    return x * keep[..., None]


def pretrain_encoder(prefixes: np.ndarray, config: EncoderConfig, seed: int = 0,
                     holdout: float = 0.1) -> tuple[EncoderModel, dict]:
    """Masked-segment reconstruction pretraining; returns a frozen encoder and its curve.

    ``prefixes`` is [N, n, d] (normalized history windows).
    """
    prefixes = np.asarray(prefixes, dtype=np.float32)
    if prefixes.ndim != 3 or len(prefixes) < 2:
        raise ValueError("pretraining needs at least 2 training windows of shape [n, d]")
    N, n, d = prefixes.shape
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    net = build_backbone(config.architecture, n, d, config.embedding_dim,
                         hidden=config.hidden, levels=config.levels, kernel_size=config.kernel_size)
    decoder = nn.Linear(config.embedding_dim, n * d)

    perm = torch.randperm(N, generator=gen).numpy()
    n_hold = max(1, int(round(holdout * N))) if N >= 4 else 1
    hold = torch.from_numpy(prefixes[np.sort(perm[:n_hold])])
    train = torch.from_numpy(prefixes[np.sort(perm[n_hold:])]) if N - n_hold > 0 else hold
    hold_gen_seed = seed + 7919

    def heldout_loss():
        g = torch.Generator().manual_seed(hold_gen_seed)
        with torch.no_grad():
            rec = decoder(net(_mask_segments(hold, config.mask_ratio, g))).view_as(hold)
            return float(F.mse_loss(rec, hold))

    params = list(net.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    history = {"heldout": [heldout_loss()], "train": []}
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(len(train), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(train), config.batch_size):
            x = train[order[i:i + config.batch_size]]
            rec = decoder(net(_mask_segments(x, config.mask_ratio, gen))).view_as(x)
            loss = F.mse_loss(rec, x)
            if not torch.isfinite(loss):
                raise NumericalError(f"encoder pretraining diverged at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.detach().item() * len(x)
            count += len(x)
            step += 1
        history["train"].append(total / max(count, 1))
        history["heldout"].append(heldout_loss())
        log.debug("encoder epoch %d train %.4f heldout %.4f", epoch, history["train"][-1], history["heldout"][-1])

    hparams = {"hidden": config.hidden, "levels": config.levels, "kernel_size": config.kernel_size}
    model = EncoderModel(net, n, d, config.embedding_dim, config.architecture, hparams)
    return model.freeze(), history


def save_encoder(model: EncoderModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "architecture_tag": model.architecture_tag,
        "n": model.input_length,
        "d": model.input_features,
        "e": model.embedding_dim,
        "hparams": model.hparams,
        "fingerprint": model.fingerprint,
        **(extra_meta or {}),
    }
    write_container(path, ENC_MAGIC, meta, model.parameters_numpy())


def load_encoder(path) -> tuple[EncoderModel, dict]:
    meta, arrays = read_container(path, ENC_MAGIC)
    net = build_backbone(meta["architecture_tag"], meta["n"], meta["d"], meta["e"], **meta["hparams"])
    model = EncoderModel(net, meta["n"], meta["d"], meta["e"], meta["architecture_tag"], meta["hparams"])
    model.load_parameters(arrays)
    return model.freeze(), meta
