"""Transformer encoder/decoder, projector and predictor shared by both training stages."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn


@dataclass
class ModelConfig:
    embed_dim: int = 256
    encoder_layers: int = 8
    decoder_layers: int = 5
    heads: int = 8
    ffn_hidden: int = 1024
    segment_length: int = 4
    predictor_hidden: int = 4096
    joints: int = 25
    max_segments: int = 30
    channels: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> None:
        for name in ("embed_dim", "encoder_layers", "decoder_layers", "heads", "ffn_hidden",
                     "segment_length", "predictor_hidden", "joints", "max_segments", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def token_dim(self) -> int:
        return self.segment_length * self.channels


@dataclass
class TokenBatch:
    """Token values (B, n, C_e) and the flat grid cell (t * V + v) each token occupies."""

    values: torch.Tensor
    index: torch.Tensor  # (B, n) long


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block without dropout."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StarsModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.token_embed = nn.Linear(cfg.token_dim, d)
        self.spatial_pos = nn.Parameter(torch.zeros(cfg.joints, d))
        self.temporal_pos = nn.Parameter(torch.zeros(cfg.max_segments, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.ffn_hidden) for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(d)

        self.decoder_embed = nn.Linear(d, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.decoder_spatial_pos = nn.Parameter(torch.zeros(cfg.joints, d))
        self.decoder_temporal_pos = nn.Parameter(torch.zeros(cfg.max_segments, d))
        self.decoder_blocks = nn.ModuleList(Block(d, cfg.heads, cfg.ffn_hidden) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.decoder_head = nn.Linear(d, cfg.token_dim)

        self.projector = nn.BatchNorm1d(d, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.predictor = nn.Sequential(
            nn.Linear(d, cfg.predictor_hidden), nn.GELU(), nn.Linear(cfg.predictor_hidden, d)
        )
        for p in (self.spatial_pos, self.temporal_pos, self.mask_token,
                  self.decoder_spatial_pos, self.decoder_temporal_pos):
            nn.init.trunc_normal_(p, std=0.02)

    # -- layer bookkeeping -------------------------------------------------

    def layer_of(self, name: str) -> int | str:
        """Depth tag used by the layer-wise LR schedule.

        0 for the token embedding and positional tables, i for encoder block
        i (1-based), N for the final encoder norm, and 'decoder' / 'head' for
        the stage-specific modules.
        """
        root = name.split(".")[0]
        if root in ("token_embed", "spatial_pos", "temporal_pos"):
            return 0
        if root == "blocks":
            return int(name.split(".")[1]) + 1
        if root == "norm":
            return self.cfg.encoder_layers
        if root in ("projector", "predictor"):
            return "head"
        return "decoder"

    def encoder_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if isinstance(self.layer_of(n), int)]

    # -- forward pieces ----------------------------------------------------

    def _positions(self, t_e: int, v: int, spatial: torch.Tensor, temporal: torch.Tensor) -> torch.Tensor:
        if t_e > self.cfg.max_segments or v != self.cfg.joints:
            raise ValueError(
                f"grid ({t_e}, {v}) incompatible with model (max_segments={self.cfg.max_segments}, joints={self.cfg.joints})"
            )
        return (temporal[:t_e, None, :] + spatial[None, :v, :]).reshape(t_e * v, -1)

    def embed(self, tokens: torch.Tensor) -> TokenBatch:
        """Project (B, T_e, V, l*C) tokens and add spatial + temporal positions."""
        if tokens.ndim != 4 or tokens.shape[-1] != self.cfg.token_dim:
            raise ValueError(f"expected tokens (B, T_e, V, {self.cfg.token_dim}), got {tuple(tokens.shape)}")
        b, t_e, v, _ = tokens.shape
        x = self.token_embed(tokens).reshape(b, t_e * v, -1)
        x = x + self._positions(t_e, v, self.spatial_pos, self.temporal_pos)
        index = torch.arange(t_e * v, device=tokens.device).expand(b, -1)
        return TokenBatch(x, index)

    @staticmethod
    def keep(batch: TokenBatch, keep_idx: torch.Tensor) -> TokenBatch:
        """Select tokens at the given positions of ``batch`` (per sample)."""
        gather = keep_idx.unsqueeze(-1).expand(-1, -1, batch.values.shape[-1])
        return TokenBatch(batch.values.gather(1, gather), batch.index.gather(1, keep_idx))

    def encode(self, batch: TokenBatch) -> TokenBatch:
        if batch.values.shape[1] == 0:
            raise ValueError("encode needs at least one token per sample")
        x = batch.values
        for blk in self.blocks:
            x = blk(x)
        return TokenBatch(self.norm(x), batch.index)

    def assemble_grid(self, latents: TokenBatch, mask_idx: torch.Tensor, cells: int) -> torch.Tensor:
        """Scatter decoder-space latents and mask tokens into a full (B, cells, C_e) grid."""
        b = latents.values.shape[0]
        occupied = torch.zeros(b, cells, dtype=torch.long, device=mask_idx.device)
        occupied.scatter_add_(1, latents.index, torch.ones_like(latents.index))
        occupied.scatter_add_(1, mask_idx, torch.ones_like(mask_idx))
        if bool((occupied > 1).any()):
            raise ValueError("masked indices overlap the encoded token positions")
        x = self.decoder_embed(latents.values)
        d = x.shape[-1]
        grid = self.mask_token.to(x.dtype).expand(b, cells, d).clone()
        return grid.scatter(1, latents.index.unsqueeze(-1).expand(-1, -1, d), x)

    def decode(self, latents: TokenBatch, mask_idx: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        """Motion predictions (B, K, l*C) at the masked cells, in ``mask_idx`` order."""
        t_e, v = grid
        x = self.assemble_grid(latents, mask_idx, t_e * v)
        x = x + self._positions(t_e, v, self.decoder_spatial_pos, self.decoder_temporal_pos)
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_head(self.decoder_norm(x))
        return x.gather(1, mask_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]))

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        if self.projector.training and pooled.shape[0] < 2:
            raise ValueError("projector batch norm needs a batch of at least 2 in train mode")
        return self.projector(pooled)

    def predict(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"predictor expects dim {self.cfg.embed_dim}, got {z.shape[-1]}")
        return self.predictor(z)

    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        """Mean-pooled encoder output over the full, unmasked grid."""
        return mean_pool(self.encode(self.embed(tokens)))

    def mamp_forward(self, tokens, keep_idx, mask_idx) -> torch.Tensor:
        b, t_e, v, _ = tokens.shape
        latents = self.encode(self.keep(self.embed(tokens), keep_idx))
        return self.decode(latents, mask_idx, (t_e, v))


def mean_pool(tokens: TokenBatch | torch.Tensor) -> torch.Tensor:
    x = tokens.values if isinstance(tokens, TokenBatch) else tokens
    if x.shape[1] == 0:
        raise ValueError("cannot pool an empty token set")
    return x.mean(dim=1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: params.bin + meta.json


def _pack_tensors(state: dict[str, torch.Tensor]) -> bytes:
    out = bytearray()
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    return bytes(out)


def _unpack_tensors(raw: bytes) -> dict[str, np.ndarray]:
    pos, out = 0, {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(raw):
            raise ValueError(f"params.bin truncated in tensor {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    return out


def content_hash(raw: bytes) -> str:
    """git blob-style sha1 of the parameter payload."""
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def save_checkpoint(path: str | Path, model: StarsModel, stage: str, seed: int, epoch: int,
                    extra: dict[str, Any] | None = None) -> str:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    raw = _pack_tensors(model.state_dict())
    (path / "params.bin").write_bytes(raw)
    digest = content_hash(raw)
    meta = {"config": asdict(model.cfg), "stage": stage, "seed": seed, "epoch": epoch, "hash": digest}
    meta.update(extra or {})
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return digest


def read_meta(path: str | Path) -> dict[str, Any]:
    return json.loads((Path(path) / "meta.json").read_text())


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> tuple[StarsModel, dict[str, Any]]:
    path = Path(path)
    meta = read_meta(path)
    stored = ModelConfig(**meta["config"])
    if cfg is not None and asdict(cfg) != asdict(stored):
        raise ValueError(f"checkpoint {path} was built with {asdict(stored)}, not {asdict(cfg)}")
    raw = (path / "params.bin").read_bytes()
    if content_hash(raw) != meta["hash"]:
        raise ValueError(f"checkpoint {path}: params.bin does not match its recorded hash")
    tensors = _unpack_tensors(raw)
    model = StarsModel(stored)
    state = model.state_dict()
    if set(tensors) != set(state):
        raise ValueError(f"checkpoint {path}: tensor names do not match the model")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype).reshape(state[k].shape)
                           for k, v in tensors.items()})
    return model, meta

