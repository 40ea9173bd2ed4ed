"""Dense feature fine-tuning on normal data.

A random crop of each normal image is encoded alongside the full image. The
full image's patch projections are softly assigned to K prototypes with a
balanced Sinkhorn solve; the assignment is resampled onto the crop's patch
grid and used as the target of a temperature-scaled cross-entropy over the
crop's prototype similarities. Only the last backbone blocks, the projection
head and the prototypes are updated.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .encoder import TokenSet, VisionTransformer, encode, set_trainable
from .errors import ConfigurationError, NumericalFailure, RangeError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class DefendConfig:
    temperature: float = 0.1
    n_prototypes: int = 5
    epochs: int = 3
    batch_size: int = 32
    lr_backbone: float = 1e-5
    lr_head: float = 1e-4
    weight_decay: float = 0.01
    trainable_blocks: int = 2
    head_hidden: int = 2048
    head_out: int = 256
    sinkhorn_iters: int = 3
    sinkhorn_epsilon: float = 0.05
    sinkhorn_tol: float = 0.0  # >0 enables early stopping
    sinkhorn_per_image: bool = False
    crop_size: int = 96
    crop_scale: tuple = (0.3, 0.9)
    crop_ratio: tuple = (3 / 4, 4 / 3)

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        self.validate()

    def validate(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.sinkhorn_iters < 1:
            raise ConfigurationError(f"sinkhorn_iters must be >= 1, got {self.sinkhorn_iters}")
        if self.sinkhorn_epsilon <= 0:
            raise ConfigurationError(f"sinkhorn_epsilon must be > 0, got {self.sinkhorn_epsilon}")
        if self.n_prototypes < 2:
            raise ConfigurationError(f"need at least 2 prototypes, got {self.n_prototypes}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")


# --------------------------------------------------------------------------
# Head and prototypes
# --------------------------------------------------------------------------


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + NORM_EPS)


class ProjectionHead(nn.Module):
    """Three linear layers with GELU in between, L2-normalised output."""

    def __init__(self, in_dim: int, hidden: int = 2048, out_dim: int = 256):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, out_dim),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return l2_normalize(self.mlp(x))


class PrototypeBank(nn.Module):
    def __init__(self, n_prototypes: int, dim: int):
        super().__init__()
        if n_prototypes < 2:
            raise ConfigurationError(f"need at least 2 prototypes, got {n_prototypes}")
        self.vectors = nn.Parameter(l2_normalize(torch.randn(n_prototypes, dim)))

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @torch.no_grad()
    def normalize_(self):
        self.vectors.copy_(l2_normalize(self.vectors))


def project(tokens, head: ProjectionHead, prototypes: Optional[PrototypeBank] = None) -> torch.Tensor:
    """Unit-norm projection of every spatial token (CLS excluded).

    Accepts a TokenSet or a raw (..., D) tensor; a zero-token input yields an
    empty (..., 0, out_dim) result.
    """
    x = tokens.spatial if isinstance(tokens, TokenSet) else tokens
    if x.shape[-1] != head.in_dim:
        raise ConfigurationError(f"token width {x.shape[-1]} does not match head input {head.in_dim}")
    if prototypes is not None and prototypes.dim != head.out_dim:
        raise ConfigurationError(f"head output {head.out_dim} does not match prototype width {prototypes.dim}")
    if x.shape[-2] == 0:
        return x.new_zeros(*x.shape[:-1], head.out_dim)
    return head(x)


# --------------------------------------------------------------------------
# Assignment, similarity, crop alignment, loss
# --------------------------------------------------------------------------


@dataclass
class ClusterAssignment:
    """Row-stochastic soft assignment with (approximately) equal column mass."""

    q: np.ndarray
    residual: float
    iterations: int
    converged: bool
    warning: Optional[str] = None


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def sinkhorn_assign(z, prototypes, cfg: DefendConfig, check_tol: float = 1e-3) -> ClusterAssignment:
    """Balanced soft assignment of ``z`` (N, D) to the prototypes.

    Entropic OT between uniform marginals over rows and prototypes, solved by
    alternating scaling of ``exp(z p^T / epsilon)``. Returns a constant
    (gradient-free) target. When the column marginal is still off by more than
    ``check_tol`` (or ``cfg.sinkhorn_tol`` if set) after the iteration budget,
    the current iterate is returned with ``converged=False`` and a warning
    message carrying the residual.
    """
    p = prototypes.vectors if isinstance(prototypes, PrototypeBank) else prototypes
    z = _as_numpy(z)
    p = _as_numpy(p)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ConfigurationError(f"expected a non-empty (N, D) feature matrix, got shape {z.shape}")
    if z.shape[1] != p.shape[1]:
        raise ConfigurationError(f"feature width {z.shape[1]} does not match prototypes {p.shape[1]}")
    logits = (z @ p.T) / cfg.sinkhorn_epsilon
    q, residual, iters = kernels.sinkhorn_scale(logits, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    tol = cfg.sinkhorn_tol if cfg.sinkhorn_tol > 0 else check_tol
    converged = residual <= tol
    warning = None
    if not converged:
        warning = f"sinkhorn not converged after {iters} iterations: column residual {residual:.3e}"
        logger.debug(warning)
    return ClusterAssignment(q=q, residual=residual, iterations=iters, converged=converged, warning=warning)


def cosine_map(z_crop: torch.Tensor, prototypes) -> torch.Tensor:
    """Cosine similarities (M, K) between unit-norm crop projections and prototypes."""
    p = prototypes.vectors if isinstance(prototypes, PrototypeBank) else prototypes
    if z_crop.shape[-1] != p.shape[-1]:
        raise ConfigurationError(f"feature width {z_crop.shape[-1]} does not match prototypes {p.shape[-1]}")
    return z_crop @ p.T


@dataclass(frozen=True)
class CropGeometry:
    """Crop box ``(x0, y0, w, h)`` in source pixels, resized to ``resize_to``."""

    box: tuple
    image_size: tuple  # (H, W)
    patch_size: int
    resize_to: int

    def __post_init__(self):
        x0, y0, w, h = self.box
        H, W = self.image_size
        P = self.patch_size
        if w < P or h < P:
            raise RangeError(f"crop {w}x{h} smaller than one {P}px patch")
        if x0 < 0 or y0 < 0 or x0 + w > W or y0 + h > H:
            raise RangeError(f"crop box {self.box} outside {W}x{H} image")
        if self.resize_to % P or H % P or W % P:
            raise ConfigurationError(f"image {H}x{W} and crop side {self.resize_to} must be multiples of {P}")

    @property
    def source_grid(self) -> tuple:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def crop_grid(self) -> tuple:
        side = self.resize_to // self.patch_size
        return side, side

    @classmethod
    def full(cls, image_size, patch_size, resize_to=None):
        H, W = image_size
        return cls((0, 0, W, H), (H, W), patch_size, resize_to or H)


def sample_crop(rng: np.random.Generator, image_size, patch_size: int, resize_to: int,
                scale=(0.3, 0.9), ratio=(3 / 4, 4 / 3), attempts: int = 10) -> CropGeometry:
    """Random-resized-crop box: area fraction ~ U(scale), log aspect ~ U(log ratio)."""
    H, W = image_size
    area = H * W
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if patch_size <= w <= W and patch_size <= h <= H:
            x0 = int(rng.integers(0, W - w + 1))
            y0 = int(rng.integers(0, H - h + 1))
            return CropGeometry((x0, y0, w, h), (H, W), patch_size, resize_to)
    # central crop fallback
    side = max(patch_size, min(H, W, int(round(math.sqrt(area * np.mean(scale))))))
    return CropGeometry(((W - side) // 2, (H - side) // 2, side, side), (H, W), patch_size, resize_to)


def crop_images(images: torch.Tensor, geoms: Sequence[CropGeometry]) -> torch.Tensor:
    out = []
    for img, g in zip(images, geoms):
        x0, y0, w, h = g.box
        patch = img[:, y0:y0 + h, x0:x0 + w].unsqueeze(0)
        if (h, w) != (g.resize_to, g.resize_to):
            patch = F.interpolate(patch, size=(g.resize_to, g.resize_to), mode="bilinear",
                                  align_corners=False, antialias=True)
        out.append(patch)
    return torch.cat(out)


def crop_sample_coords(geom: CropGeometry):
    """Source patch-grid coordinates of the crop's patch centres (rows, cols)."""
    x0, y0, w, h = geom.box
    P = geom.patch_size
    r2, c2 = geom.crop_grid
    ys = (y0 + (np.arange(r2) + 0.5) * h / r2) / P - 0.5
    xs = (x0 + (np.arange(c2) + 0.5) * w / c2) / P - 0.5
    return ys, xs


def align_crop(q, geom: CropGeometry) -> np.ndarray:
    """Resample the full-image assignment (N, K) onto the crop's patch grid (M, K).

    Bilinear interpolation at the crop patch centres, rows renormalised to 1.
    """
    q = _as_numpy(q.q if isinstance(q, ClusterAssignment) else q)
    rows, cols = geom.source_grid
    if q.shape[0] != rows * cols:
        raise ConfigurationError(f"assignment has {q.shape[0]} rows, source grid has {rows * cols}")
    ys, xs = crop_sample_coords(geom)
    out = kernels.bilinear_grid(q.reshape(rows, cols, -1), ys, xs).reshape(len(ys) * len(xs), -1)
    return out / out.sum(axis=1, keepdims=True)


def dense_loss(s: torch.Tensor, target, temperature: float, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of softmax(s / T) against a fixed soft target, per patch."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    target = torch.as_tensor(target, dtype=s.dtype, device=s.device).detach()
    if target.shape != s.shape:
        raise ConfigurationError(f"target shape {tuple(target.shape)} does not match logits {tuple(s.shape)}")
    per_patch = -(target * F.log_softmax(s / temperature, dim=-1)).sum(dim=-1)
    if reduction == "none":
        return per_patch
    if reduction == "mean":
        return per_patch.mean()
    raise ConfigurationError(f"unknown reduction {reduction!r}")


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class DefendStepResult:
    loss: float
    per_image: np.ndarray
    residual: float
    converged: bool


class DefendTrainer:
    """Owns the backbone, head, prototypes and optimizer for stage one."""

    def __init__(self, model: VisionTransformer, cfg: DefendConfig, seed: int = 0,
                 dump_dir: Optional[Path] = None):
        cfg.validate()
        self.cfg = cfg
        self.model = set_trainable(model, cfg.trainable_blocks)
        g = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            self.head = ProjectionHead(model.embed_dim, cfg.head_hidden, cfg.head_out)
            self.prototypes = PrototypeBank(cfg.n_prototypes, cfg.head_out)
        backbone_params = [p for p in model.parameters() if p.requires_grad]
        groups = [{"params": list(self.head.parameters()) + list(self.prototypes.parameters()), "lr": cfg.lr_head}]
        if backbone_params:
            groups.insert(0, {"params": backbone_params, "lr": cfg.lr_backbone})
        self.optimizer = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([seed, 1])
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.step_count = 0

    def sample_geometries(self, images: torch.Tensor) -> list:
        H, W = images.shape[-2:]
        return [sample_crop(self.rng, (H, W), self.model.patch_size, self.cfg.crop_size,
                            self.cfg.crop_scale, self.cfg.crop_ratio) for _ in range(images.shape[0])]

    def targets(self, images: torch.Tensor, geoms: Sequence[CropGeometry]):
        """Gradient-free full-image assignments aligned to each crop grid."""
        with torch.no_grad():
            z = project(encode(self.model, images), self.head, self.prototypes)
        B, N, _ = z.shape
        if self.cfg.sinkhorn_per_image:
            assigns = [sinkhorn_assign(z[b], self.prototypes, self.cfg) for b in range(B)]
            qs = [a.q for a in assigns]
            residual = max(a.residual for a in assigns)
            converged = all(a.converged for a in assigns)
        else:
            a = sinkhorn_assign(z.reshape(B * N, -1), self.prototypes, self.cfg)
            qs = np.split(a.q, B)
            residual, converged = a.residual, a.converged
        targets = np.stack([align_crop(q, g) for q, g in zip(qs, geoms)])
        return torch.as_tensor(targets, dtype=z.dtype), residual, converged

    def loss(self, images: torch.Tensor, geoms: Optional[Sequence[CropGeometry]] = None):
        """Per-image dense losses (B,) with graph, plus Sinkhorn diagnostics."""
        if geoms is None:
            geoms = self.sample_geometries(images)
        target, residual, converged = self.targets(images, geoms)
        crops = crop_images(images, geoms)
        z_crop = project(encode(self.model, crops), self.head, self.prototypes)
        s = cosine_map(z_crop, self.prototypes)
        per_patch = dense_loss(s, target, self.cfg.temperature, reduction="none")
        return per_patch.mean(dim=1), residual, converged

    def step(self, images: torch.Tensor, geoms: Optional[Sequence[CropGeometry]] = None) -> DefendStepResult:
        self.model.train()
        per_image, residual, converged = self.loss(images, geoms)
        loss = per_image.mean()
        if not torch.isfinite(loss):
            self.dump_state("non-finite dense loss")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.prototypes.normalize_()
        self.step_count += 1
        return DefendStepResult(loss.item(), per_image.detach().cpu().numpy(), residual, converged)

    def dump_state(self, reason: str):
        path = None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            path = self.dump_dir / f"defend_failure_step{self.step_count}.pt"
            torch.save(self.state_dict(), path)
        raise NumericalFailure(f"{reason} at DEFEND step {self.step_count}; state dumped to {path}")

    def state_dict(self) -> dict:
        blocks = {k: v for k, v in self.model.state_dict().items()
                  if k.startswith("blocks.") and int(k.split(".")[1]) >= self.model.depth - self.cfg.trainable_blocks}
        return {
            "backbone_delta": blocks,
            "head": self.head.state_dict(),
            "prototypes": self.prototypes.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "step": self.step_count,
            "cfg": asdict(self.cfg),
            "arch_id": self.model.arch_id,
        }

    def load_state_dict(self, state: dict):
        self.model.load_state_dict(state["backbone_delta"], strict=False)
        self.head.load_state_dict(state["head"])
        self.prototypes.load_state_dict(state["prototypes"])
        if "optimizer" in state:
            self.optimizer.load_state_dict(state["optimizer"])
        if "rng" in state:
            self.rng.bit_generator.state = state["rng"]
        self.step_count = state.get("step", 0)


def defend_step(trainer: DefendTrainer, images: torch.Tensor, geoms=None) -> DefendStepResult:
    """One DEFEND optimisation step on a batch of normal images."""
    return trainer.step(images, geoms)


def iter_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_defend(trainer: DefendTrainer, images: torch.Tensor, curve_path=None, checkpoint_dir=None,
                 start_epoch: int = 0, extra_meta: Optional[dict] = None) -> list:
    """Run ``cfg.epochs`` epochs over ``images`` (N, 3, H, W).

    Appends (epoch, step, dense loss, Sinkhorn residual) rows to
    ``curve_path`` and writes an epoch checkpoint into ``checkpoint_dir``.
    """
    cfg = trainer.cfg
    rows = []
    writer = None
    fh = None
    if curve_path is not None:
        new = start_epoch == 0 or not Path(curve_path).exists()
        fh = open(curve_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "step", "dense_loss", "sinkhorn_residual", "config_hash"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            for idx in iter_batches(len(images), cfg.batch_size, trainer.rng):
                res = trainer.step(images[torch.as_tensor(idx)])
                row = (epoch, trainer.step_count, res.loss, res.residual)
                rows.append(row)
                if writer:
                    writer.writerow([*row, (extra_meta or {}).get("config_hash", "")])
            logger.info("defend epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, rows[-1][2])
            if checkpoint_dir is not None:
                state = trainer.state_dict()
                state["epoch"] = epoch + 1
                state.update(extra_meta or {})
                torch.save(state, Path(checkpoint_dir) / "defend_last.pt")
    finally:
        if fh:
            fh.close()
    return rows


def apply_defend_checkpoint(model: VisionTransformer, path) -> VisionTransformer:
    """Load stage-one backbone deltas into ``model``."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    missing = set(state["backbone_delta"]) - set(model.state_dict())
    if missing:
        raise ConfigurationError(f"DEFEND checkpoint {path} does not fit {model.arch_id}")
    model.load_state_dict(state["backbone_delta"], strict=False)
    return model
