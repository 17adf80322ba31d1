"""Reference-guided denoiser: side information, RMA and the residual transformer stack.

Tensors inside the network follow the (batch, channels, features, time)
layout of two-dimensional time-series transformers.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig
from .errors import NumericalError

TAU = 10000.0


def time_embedding(timestamps, dim: int = 128, tau: float = TAU):
    """Sinusoidal embedding: ``dim/2`` sine columns then ``dim/2`` cosine columns.

    Column j of each half uses frequency ``tau ** (j / (dim/2))``. Accepts a
    numpy array or tensor of shape [..., L] and returns [..., L, dim].
    """
    half = dim // 2
    if isinstance(timestamps, np.ndarray):
        s = np.asarray(timestamps, dtype=np.float64)[..., None]
        if not np.isfinite(s).all():
            raise ValueError("timestamps must be finite")
        arg = s / tau ** (np.arange(half) / half)
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
    s = timestamps.unsqueeze(-1)
    if not torch.isfinite(s).all():
        raise ValueError("timestamps must be finite")
    div = tau ** (torch.arange(half, dtype=s.dtype, device=s.device) / half)
    arg = s / div
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class DiffusionStepEmbedding(nn.Module):
    def __init__(self, num_steps: int, dim: int = 128):
        super().__init__()
        steps = torch.arange(num_steps + 1, dtype=torch.float64)
        self.register_buffer("table", time_embedding(steps, dim, tau=TAU).float(), persistent=False)
        self.proj1 = nn.Linear(dim, dim)
        self.proj2 = nn.Linear(dim, dim)

    def forward(self, t):
        x = self.table[t].to(self.proj1.weight.dtype)
        x = F.silu(self.proj1(x))
        return F.silu(self.proj2(x))


class ReferenceExtractor(nn.Module):
    """1-D conv features of the k concatenated references, per feature channel.

    Each reference is convolved on its own segment, so padding never mixes
    neighbouring references; the segments are then joined along time.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(1, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)
        self.channels = channels

    def forward(self, refs, h=None):
        # refs: [B, k, h, d] -> [B, c, d, k*h]
        B, k, hh, d = refs.shape
        if k == 0:
            return refs.new_zeros(B, self.channels, d, h or hh or 1)
        x = refs.permute(0, 1, 3, 2).reshape(B * k * d, 1, hh)
        x = self.conv2(F.silu(self.conv1(x)))  # [B*k*d, c, h]
        x = x.reshape(B, k, d, self.channels, hh).permute(0, 3, 2, 1, 4)
        return x.reshape(B, self.channels, d, k * hh)


def extract_reference_features(extractor: ReferenceExtractor, references, h: int, d: int):
    """Concatenate references along time and run the conv extractor."""
    refs = torch.as_tensor(np.asarray(references, dtype=np.float32)) if not torch.is_tensor(references) else references
    if refs.dim() == 3:
        refs = refs.unsqueeze(0)
    if refs.shape[1] and refs.shape[2:] != (h, d):
        raise ValueError(f"references shaped {tuple(refs.shape[2:])}, expected ({h}, {d})")
    return extractor(refs, h)


class RMA(nn.Module):
    """Reference-Modulated Attention.

    out = z + W_o( softmax(W_q z (W_k r)^T / sqrt(c)) W_v r  *  sigmoid(W_s s) )

    Queries come from the current features, keys and values from the reference
    features and the side information gates the attended values. W_v and W_o
    carry no bias and W_o starts at zero, so the block is the identity at
    initialisation and whenever the references are zero.
    """

    def __init__(self, channels: int, side_dim: int | None, side_fusion: str = "gate"):
        super().__init__()
        self.channels = channels
        self.query_proj = nn.Linear(channels, channels)
        self.key_proj = nn.Linear(channels, channels)
        self.value_proj = nn.Linear(channels, channels, bias=False)
        self.side_proj = nn.Linear(side_dim, channels) if side_dim else None
        self.out_proj = nn.Linear(channels, channels, bias=False)
        self.side_fusion = side_fusion
        nn.init.zeros_(self.out_proj.weight)

    def forward(self, z, r, s=None):
        B, c, K, L = z.shape
        if r.shape[1] != c or (s is not None and self.side_proj is None):
            raise ValueError("channel mismatch in RMA inputs")
        R = r.shape[-1]
        q = self.query_proj(z.permute(0, 2, 3, 1).reshape(B * K, L, c))
        rt = r.permute(0, 2, 3, 1).reshape(B * K, R, c)
        attn = torch.softmax(q @ self.key_proj(rt).transpose(1, 2) / math.sqrt(c), dim=-1)
        y = attn @ self.value_proj(rt)
        if self.side_proj is not None and s is not None:
            side = self.side_proj(s.permute(0, 2, 3, 1).reshape(B * K, L, -1))
            y = y * torch.sigmoid(side) if self.side_fusion == "gate" else y + side
        y = self.out_proj(y).reshape(B, K, L, c).permute(0, 3, 1, 2)
        return z + y


def rma_forward(rma: RMA, z, r, s):
    return rma(z, r, s)


def _encoder_layer(c, heads, ff):
    return nn.TransformerEncoderLayer(c, heads, ff, dropout=0.0, activation="gelu", batch_first=True)


class ResidualBlock(nn.Module):
    def __init__(self, cfg: NetworkConfig, side_dim: int):
        super().__init__()
        c = cfg.channels
        self.step_proj = nn.Linear(cfg.step_embed_dim, c)
        self.cond_proj = nn.Conv1d(side_dim, 2 * c, 1)
        self.mid_proj = nn.Conv1d(c, 2 * c, 1)
        self.out_proj = nn.Conv1d(c, 2 * c, 1)
        self.time_layer = _encoder_layer(c, cfg.heads, cfg.ff_dim)
        self.feature_layer = _encoder_layer(c, cfg.heads, cfg.ff_dim)
        self.position = cfg.rma_position
        self.rma = None
        if cfg.fusion == "rma":
            self.rma = RMA(c, side_dim, cfg.side_fusion)
        elif cfg.fusion == "cross_attention":
            self.rma = RMA(c, None)

    def _time(self, y):
        B, c, K, L = y.shape
        if L == 1:
            return y
        y = y.permute(0, 2, 3, 1).reshape(B * K, L, c)
        return self.time_layer(y).reshape(B, K, L, c).permute(0, 3, 1, 2)

    def _feature(self, y):
        B, c, K, L = y.shape
        if K == 1:
            return y
        y = y.permute(0, 3, 2, 1).reshape(B * L, K, c)
        return self.feature_layer(y).reshape(B, L, K, c).permute(0, 3, 2, 1)

    def _fuse(self, y, where, ref, side):
        if self.rma is not None and self.position == where:
            y = self.rma(y, ref, side if self.rma.side_proj is not None else None)
        return y

    def forward(self, x, side, step_emb, ref):
        B, c, K, L = x.shape
        y = x + self.step_proj(step_emb)[:, :, None, None]
        y = self._fuse(y, "front", ref, side)
        y = self._time(y)
        y = self._fuse(y, "middle", ref, side)
        y = self._feature(y)
        y = self._fuse(y, "back", ref, side)
        y = self.mid_proj(y.reshape(B, c, K * L)) + self.cond_proj(side.reshape(B, -1, K * L))
        gate, filt = y.chunk(2, dim=1)
        y = self.out_proj(torch.sigmoid(gate) * torch.tanh(filt))
        residual, skip = y.chunk(2, dim=1)
        return (x + residual.reshape(x.shape)) / math.sqrt(2.0), skip.reshape(x.shape)


class Denoiser(nn.Module):
    """Predicts the clean target (or the noise) from the noisy target, history and references."""

    def __init__(self, cfg: NetworkConfig, num_steps: int, d: int, l: int, h: int, k: int,
                 target_features=None):
        super().__init__()
        self.cfg = cfg
        self.d, self.l, self.h, self.k = d, l, h, k
        tf = list(range(d)) if target_features is None else [int(i) for i in target_features]
        self.register_buffer("target_index", torch.tensor(tf, dtype=torch.long), persistent=False)
        c = cfg.channels
        self.side_dim = cfg.time_embed_dim + cfg.feature_embed_dim + 1
        in_ch = 3 if cfg.fusion == "linear" else 2
        self.feature_embed = nn.Embedding(d, cfg.feature_embed_dim)
        self.step_embed = DiffusionStepEmbedding(num_steps, cfg.step_embed_dim)
        self.input_proj = nn.Conv1d(in_ch, c, 1)
        self.ref_extractor = ReferenceExtractor(c) if cfg.fusion in ("rma", "cross_attention") else None
        self.ref_linear = nn.Linear(max(k, 1) * h, l + h) if cfg.fusion == "linear" else None
        self.blocks = nn.ModuleList(ResidualBlock(cfg, self.side_dim) for _ in range(cfg.num_blocks))
        self.skip_proj = nn.Conv1d(c, c, 1)
        self.output_proj = nn.Conv1d(c, 1, 1)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def side_info(self, positions):
        # positions: [B, L] -> [B, side_dim, d, L]
        B, L = positions.shape
        te = time_embedding(positions, self.cfg.time_embed_dim).to(self.input_proj.weight.dtype)
        te = te.permute(0, 2, 1)[:, :, None, :].expand(-1, -1, self.d, -1)
        fe = self.feature_embed.weight.T[None, :, :, None].expand(B, -1, -1, L)
        mask = torch.zeros(B, 1, self.d, L, dtype=te.dtype, device=te.device)
        mask[..., : self.l] = 1.0
        return torch.cat([te, fe, mask], dim=1)

    def forward(self, x_t, history, t, positions, refs):
        """x_t [B, h, d'], history [B, l, d], t [B], positions [B, l+h], refs [B, k, h, d] -> [B, h, d']."""
        B = x_t.shape[0]
        d, l, h = self.d, self.l, self.h
        L = l + h
        dtype = self.input_proj.weight.dtype
        cond = torch.zeros(B, d, L, dtype=dtype, device=x_t.device)
        cond[:, :, :l] = history.transpose(1, 2)
        noisy = torch.zeros(B, d, L, dtype=dtype, device=x_t.device)
        noisy[:, self.target_index, l:] = x_t.transpose(1, 2)
        chans = [cond, noisy]
        if self.ref_linear is not None:
            if refs.shape[1] == 0:
                chans.append(torch.zeros_like(cond))
            else:
                flat = refs.permute(0, 3, 1, 2).reshape(B, d, -1)
                chans.append(self.ref_linear(flat))
        x = torch.stack(chans, dim=1)  # [B, C_in, d, L]
        x = F.relu(self.input_proj(x.reshape(B, len(chans), d * L))).reshape(B, -1, d, L)

        side = self.side_info(positions)
        step = self.step_embed(t)
        ref = None
        if self.ref_extractor is not None:
            ref = self.ref_extractor(refs, h)

        skips = 0
        for i, block in enumerate(self.blocks):
            x, skip = block(x, side, step, ref)
            if not torch.isfinite(x).all():
                raise NumericalError(f"non-finite activations after residual block {i}")
            skips = skips + skip
        y = skips / math.sqrt(len(self.blocks))
        y = F.relu(self.skip_proj(y.reshape(B, -1, d * L)))
        y = self.output_proj(y).reshape(B, d, L)
        return y[:, self.target_index, l:].transpose(1, 2)
