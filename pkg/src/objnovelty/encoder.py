"""Vision-transformer backbone with token dropping and CLS-attention readout.

Parameter names follow the common ``timm`` layout (``patch_embed.proj``,
``cls_token``, ``pos_embed``, ``blocks.{i}.attn.qkv`` ...), so ViT checkpoints
saved from that ecosystem load directly with :func:`load_backbone`.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalFailure, RangeError, UnsupportedArchitecture

logger = logging.getLogger(__name__)

ARCHITECTURES = {
    # desk-scale stand-in used by the synthetic benchmarks
    "vit_toy": dict(img_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4),
    "vit_small_patch16_224": dict(img_size=224, patch_size=16, embed_dim=384, depth=12, num_heads=6),
    "vit_base_patch16_224": dict(img_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
}


def set_determinism(seed: int) -> None:
    """Seed every RNG the pipeline touches and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_chans, embed_dim):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ConfigurationError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn=False):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        # the weights are recomputed for readout so the token outputs stay
        # bitwise identical whether or not attention is requested
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1) if return_attn else None
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(B, T, C)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, return_attn=False):
        y, attn = self.attn(self.norm1(x), return_attn=return_attn)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    """Plain pre-norm ViT. Instances double as the backbone handle.

    ``arch_id`` and ``pretrain_tag`` travel with the module so checkpoints and
    reports can name what they were produced from.
    """

    def __init__(self, img_size=224, patch_size=16, in_chans=3, embed_dim=768, depth=12,
                 num_heads=12, mlp_ratio=4.0, class_token=True, arch_id="custom",
                 pretrain_tag="random"):
        super().__init__()
        if img_size % patch_size:
            raise ConfigurationError(f"img_size {img_size} not divisible by patch size {patch_size}")
        self.arch_id = arch_id
        self.pretrain_tag = pretrain_tag
        self.img_size = img_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.has_cls = class_token
        side = img_size // patch_size
        self.base_grid = (side, side)
        self.patch_embed = PatchEmbed(patch_size, in_chans, embed_dim)
        n_prefix = 1 if class_token else 0
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim)) if class_token else None
        self.pos_embed = nn.Parameter(torch.zeros(1, side * side + n_prefix, embed_dim))
        self.blocks = nn.ModuleList([Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        self._init_weights()

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cls_token is not None:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def spatial_pos_embed(self, rows, cols):
        n_prefix = 1 if self.has_cls else 0
        pos = self.pos_embed[:, n_prefix:]
        if (rows, cols) == self.base_grid:
            return pos
        r0, c0 = self.base_grid
        pos = pos.reshape(1, r0, c0, -1).permute(0, 3, 1, 2)
        pos = F.interpolate(pos, size=(rows, cols), mode="bicubic", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, rows * cols, -1)

    def forward_features(self, images, keep_index=None, n_layers=1, return_attn=False):
        """Run the transformer.

        keep_index: optional (B, n) long tensor of retained patch positions,
            sorted ascending; only those patch embeddings enter the blocks.
        Returns ``(layers, attn, grid)``: the outputs of the final ``n_layers``
        blocks (the last one after the output norm), the final block's
        attention probabilities when requested, and the patch grid.
        """
        B, _, H, W = images.shape
        P = self.patch_size
        if H % P or W % P:
            raise ConfigurationError(f"image size {H}x{W} not divisible by patch size {P}")
        if not 1 <= n_layers <= self.depth:
            raise RangeError(f"n_layers must be in [1, {self.depth}], got {n_layers}")
        grid = (H // P, W // P)
        x = self.patch_embed(images) + self.spatial_pos_embed(*grid)
        if keep_index is not None:
            x = torch.gather(x, 1, keep_index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        if self.has_cls:
            cls = (self.cls_token + self.pos_embed[:, :1]).expand(B, -1, -1)
            x = torch.cat([cls, x], dim=1)
        outputs = []
        attn = None
        first_kept = self.depth - n_layers
        for i, blk in enumerate(self.blocks):
            last = i == self.depth - 1
            x, a = blk(x, return_attn=return_attn and last)
            if not torch.isfinite(x).all():
                raise NumericalFailure(f"non-finite activations in blocks.{i}")
            if last:
                attn = a
                x = self.norm(x)
            if i >= first_kept:
                outputs.append(x)
        return outputs, attn, grid


def build_backbone(arch_id: str, pretrain_tag="random", seed: Optional[int] = None, **overrides) -> VisionTransformer:
    if arch_id not in ARCHITECTURES:
        raise UnsupportedArchitecture(f"unknown architecture '{arch_id}'; known: {sorted(ARCHITECTURES)}")
    kwargs = dict(ARCHITECTURES[arch_id], **overrides)
    if seed is None:
        return VisionTransformer(arch_id=arch_id, pretrain_tag=pretrain_tag, **kwargs)
    with seeded(seed):
        return VisionTransformer(arch_id=arch_id, pretrain_tag=pretrain_tag, **kwargs)


def _unwrap_state_dict(obj):
    for key in ("model", "state_dict", "backbone"):
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            obj = obj[key]
    return obj


BUILTIN_PREFIX = "builtin:"


def resolve_checkpoint(checkpoint):
    """Map ``builtin:<name>`` to a weights file shipped in the package's data directory."""
    if isinstance(checkpoint, str) and checkpoint.startswith(BUILTIN_PREFIX):
        path = Path(__file__).parent / "data" / (checkpoint[len(BUILTIN_PREFIX):] + ".pt")
        if not path.exists():
            raise ConfigurationError(f"no bundled checkpoint named {checkpoint!r}")
        return path
    return checkpoint


def load_backbone(arch_id: str, checkpoint=None, pretrain_tag="supervised", **overrides) -> VisionTransformer:
    """Build ``arch_id`` and load weights from a serialized state dict.

    Classifier-head keys (``head.*``, ``fc_norm.*``) are dropped; a position
    embedding trained at another resolution is resampled to the model's grid.
    """
    model = build_backbone(arch_id, pretrain_tag=pretrain_tag if checkpoint else "random", **overrides)
    if checkpoint is None:
        return model
    checkpoint = resolve_checkpoint(checkpoint)
    state = _unwrap_state_dict(torch.load(checkpoint, map_location="cpu", weights_only=True))
    state = {k: v for k, v in state.items() if not k.startswith(("head.", "fc_norm.", "pretrain_head."))}
    pos = state.get("pos_embed")
    if pos is not None and pos.shape != model.pos_embed.shape:
        n_prefix = 1 if model.has_cls else 0
        old = pos[:, n_prefix:]
        side = int(math.isqrt(old.shape[1]))
        old = old.reshape(1, side, side, -1).permute(0, 3, 1, 2)
        new = F.interpolate(old, size=model.base_grid, mode="bicubic", align_corners=False)
        state["pos_embed"] = torch.cat([pos[:, :n_prefix], new.permute(0, 2, 3, 1).flatten(1, 2)], dim=1)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ConfigurationError(
            f"checkpoint {checkpoint} does not match {arch_id}: missing={missing[:5]} unexpected={unexpected[:5]}")
    logger.info("loaded %s weights from %s", arch_id, checkpoint)
    return model


# --------------------------------------------------------------------------
# Token sets and operations
# --------------------------------------------------------------------------


@dataclass
class TokenSet:
    """Last-layer tokens for a batch.

    spatial: (B, n, D); cls: (B, D) or None; grid: full patch grid (rows, cols);
    visible_index: (B, n) original grid positions of the spatial rows when
    patches were dropped, else None; layers: per-layer (B, 1 + n, D) outputs of
    the final blocks, last entry equal to ``cat(cls, spatial)``.
    """

    spatial: torch.Tensor
    cls: Optional[torch.Tensor]
    grid: tuple
    visible_index: Optional[torch.Tensor] = None
    layers: Optional[list] = None

    @property
    def n_tokens(self) -> int:
        return self.spatial.shape[1]

    def positions(self) -> torch.Tensor:
        """(B, n) grid positions of the spatial rows."""
        if self.visible_index is not None:
            return self.visible_index
        B, n = self.spatial.shape[:2]
        return torch.arange(n, device=self.spatial.device).expand(B, n)


def keep_to_index(keep, batch: int, n_patches: int) -> torch.Tensor:
    """Convert a boolean keep plan (N,), (B, N) or a MaskPlan sequence to sorted indices."""
    if hasattr(keep, "keep"):
        keep = [keep]
    if isinstance(keep, (list, tuple)) and keep and hasattr(keep[0], "keep"):
        keep = np.stack([np.asarray(p.keep, dtype=bool) for p in keep])
    keep = torch.as_tensor(np.asarray(keep) if not torch.is_tensor(keep) else keep, dtype=torch.bool)
    if keep.dim() == 1:
        keep = keep.expand(batch, -1)
    if keep.shape != (batch, n_patches):
        raise ConfigurationError(f"keep plan shape {tuple(keep.shape)} does not match (batch, N)=({batch}, {n_patches})")
    counts = keep.sum(dim=1)
    if not bool((counts == counts[0]).all()):
        raise ConfigurationError("keep plans in one batch must retain the same number of patches")
    if int(counts[0]) == 0:
        raise ConfigurationError("keep plan retains no patches")
    # stable argsort on ~keep puts kept positions first in ascending order
    order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)
    return order[:, : int(counts[0])]


def encode(model: VisionTransformer, images: torch.Tensor, keep=None, n_layers: int = 1) -> TokenSet:
    """Encode a batch, optionally dropping patches not marked in ``keep``."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    P = model.patch_size
    B, _, H, W = images.shape
    if H % P or W % P:
        raise ConfigurationError(f"image size {H}x{W} not divisible by patch size {P}")
    N = (H // P) * (W // P)
    keep_index = None if keep is None else keep_to_index(keep, B, N).to(images.device)
    layers, _, grid = model.forward_features(images, keep_index=keep_index, n_layers=n_layers)
    out = layers[-1]
    off = 1 if model.has_cls else 0
    return TokenSet(spatial=out[:, off:], cls=out[:, 0] if off else None, grid=grid,
                    visible_index=keep_index, layers=layers)


def saliency_from_attention(attn: torch.Tensor) -> torch.Tensor:
    """(B, heads, T, T) final-block attention -> (B, N) CLS-to-patch saliency."""
    w = attn.mean(dim=1)[:, 0, 1:]
    return w / w.sum(dim=1, keepdim=True)


def encode_with_saliency(model: VisionTransformer, images: torch.Tensor, n_layers: int = 1):
    """Full forward returning both the TokenSet and the CLS saliency (one pass)."""
    if not model.has_cls:
        raise UnsupportedArchitecture(f"{model.arch_id} has no classification token")
    layers, attn, grid = model.forward_features(images, n_layers=n_layers, return_attn=True)
    out = layers[-1]
    tokens = TokenSet(spatial=out[:, 1:], cls=out[:, 0], grid=grid, layers=layers)
    return tokens, saliency_from_attention(attn)


def cls_attention(model: VisionTransformer, images: torch.Tensor) -> torch.Tensor:
    """Head-averaged final-block CLS attention over patches, renormalised to sum to 1.

    The CLS self-attention entry is excluded before renormalising.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    with torch.no_grad():
        return encode_with_saliency(model, images)[1]


def set_trainable(model: VisionTransformer, last_k_layers: int) -> VisionTransformer:
    """Freeze everything except the final ``last_k_layers`` transformer blocks."""
    if not 0 <= last_k_layers <= model.depth:
        raise RangeError(f"last_k_layers must be in [0, {model.depth}], got {last_k_layers}")
    for p in model.parameters():
        p.requires_grad_(False)
    for blk in model.blocks[model.depth - last_k_layers:]:
        for p in blk.parameters():
            p.requires_grad_(True)
    n_train = sum(p.numel() for p in model.parameters() if p.requires_grad)
    n_total = sum(p.numel() for p in model.parameters())
    logger.info("%s: training last %d/%d blocks (%d/%d parameters)",
                model.arch_id, last_k_layers, model.depth, n_train, n_total)
    return model


def trainable_blocks(model: VisionTransformer) -> list:
    """Indices of blocks that currently have trainable parameters."""
    return [i for i, b in enumerate(model.blocks) if any(p.requires_grad for p in b.parameters())]


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def parameter_checksum(model: nn.Module, names: Optional[Sequence[str]] = None) -> str:
    """SHA-256 over the raw bytes of (optionally selected) parameters."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if names is None or name in names:
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
