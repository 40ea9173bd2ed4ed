"""Masked knowledge distillation.

A frozen teacher sees the full image; a randomly initialised student of the
same architecture sees only the patches left after masking out the teacher's
most-attended regions, and learns to reproduce the teacher's normalised
last-layer tokens.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import TokenSet, VisionTransformer, encode, encode_with_saliency, freeze, seeded
from .errors import ConfigurationError, NumericalFailure, RangeError

logger = logging.getLogger(__name__)

MASK_MODES = ("guided", "random", "proportional", "none")
LOSSES = ("mse", "smooth_l1")
NORMS = ("l2", "layer", "none")


@dataclass
class DistillConfig:
    loss: str = "mse"
    norm: str = "l2"
    norm_target: str = "both"  # or "teacher"
    n_layers: int = 1
    mask_mode: str = "guided"
    mask_ratio: float = 0.5
    include_cls: bool = True
    eval_masking: bool = True
    smooth_l1_beta: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    student_seed: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.norm not in NORMS:
            raise ConfigurationError(f"unknown normalization {self.norm!r}; expected one of {NORMS}")
        if self.norm_target not in ("both", "teacher"):
            raise ConfigurationError(f"norm_target must be 'both' or 'teacher', got {self.norm_target!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigurationError(f"unknown mask mode {self.mask_mode!r}; expected one of {MASK_MODES}")
        if not 0 <= self.mask_ratio < 1:
            raise RangeError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")
        if self.n_layers < 1:
            raise RangeError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")


# --------------------------------------------------------------------------
# Masking
# --------------------------------------------------------------------------


def n_masked(n_patches: int, ratio: float) -> int:
    """round(ratio * N), halves rounded up."""
    return int(np.floor(ratio * n_patches + 0.5))


@dataclass
class MaskPlan:
    keep: np.ndarray
    ratio: float
    mode: str

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(~self.keep)


def build_mask(saliency, ratio: float, mode: str = "guided", seed: Optional[int] = None) -> MaskPlan:
    """Choose which patches the student loses.

    guided: the highest-saliency patches (ties: lower index first);
    random: uniform without replacement from ``seed``;
    proportional: sampled without replacement with probability ~ saliency;
    none: keep everything.
    """
    if not 0 <= ratio < 1:
        raise RangeError(f"mask ratio must be in [0, 1), got {ratio}")
    if mode not in MASK_MODES:
        raise ConfigurationError(f"unknown mask mode {mode!r}")
    sal = saliency.detach().cpu().double().numpy() if torch.is_tensor(saliency) else np.asarray(saliency, dtype=float)
    N = sal.shape[0]
    keep = np.ones(N, dtype=bool)
    m = n_masked(N, ratio)
    if mode == "none" or m == 0:
        return MaskPlan(keep, ratio if mode != "none" else 0.0, mode)
    if mode == "guided":
        drop = np.argsort(-sal, kind="stable")[:m]
    elif mode == "random":
        drop = np.random.default_rng(seed).choice(N, size=m, replace=False)
    else:
        w = np.clip(sal, 0, None) + 1e-12
        drop = np.random.default_rng(seed).choice(N, size=m, replace=False, p=w / w.sum())
    keep[drop] = False
    return MaskPlan(keep, ratio, mode)


def build_masks(saliency: torch.Tensor, ratio: float, mode: str, seed: Optional[int] = None) -> list:
    """One plan per row of a (B, N) saliency batch; per-row seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(saliency.shape[0]) if seed is not None else [None] * saliency.shape[0]
    return [build_mask(s, ratio, mode, None if sd is None else int(sd)) for s, sd in zip(saliency, seeds)]


def student_forward_cost(n_patches: int, ratio: float) -> int:
    """Tokens the student's transformer blocks process (kept patches + CLS)."""
    if not 0 <= ratio < 1:
        raise RangeError(f"mask ratio must be in [0, 1), got {ratio}")
    return n_patches - n_masked(n_patches, ratio) + 1


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def normalize_tokens(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "l2":
        return F.normalize(x, dim=-1, eps=1e-12)
    if kind == "layer":
        return F.layer_norm(x, x.shape[-1:], eps=1e-6)
    return x


def token_loss(t: torch.Tensor, s: torch.Tensor, cfg: DistillConfig) -> torch.Tensor:
    """Per-token distance summed over channels: (..., D) x2 -> (...)."""
    t = normalize_tokens(t, cfg.norm)
    s = normalize_tokens(s, cfg.norm if cfg.norm_target == "both" else "none")
    if cfg.loss == "mse":
        return (t - s).pow(2).sum(dim=-1)
    return F.smooth_l1_loss(s, t, reduction="none", beta=cfg.smooth_l1_beta).sum(dim=-1)


@dataclass
class TokenLosses:
    """Layer-averaged per-token losses: cls (B,) or None, spatial (B, n) at grid positions ``positions``."""

    cls: Optional[torch.Tensor]
    spatial: torch.Tensor
    positions: torch.Tensor

    def per_image(self) -> torch.Tensor:
        total = self.spatial.sum(dim=1)
        count = self.spatial.shape[1]
        if self.cls is not None:
            total = total + self.cls
            count += 1
        return total / count


def distill_token_losses(F_t: TokenSet, F_s: TokenSet, cfg: DistillConfig) -> TokenLosses:
    """Compare student tokens with the teacher tokens at the same grid positions."""
    if F_t.spatial.shape[-1] != F_s.spatial.shape[-1]:
        raise ConfigurationError(f"teacher width {F_t.spatial.shape[-1]} != student width {F_s.spatial.shape[-1]}")
    k = cfg.n_layers
    t_layers = F_t.layers or [torch.cat([F_t.cls.unsqueeze(1), F_t.spatial], 1)]
    s_layers = F_s.layers or [torch.cat([F_s.cls.unsqueeze(1), F_s.spatial], 1)]
    if len(t_layers) < k or len(s_layers) < k:
        raise ConfigurationError(f"need {k} layers; teacher has {len(t_layers)}, student {len(s_layers)}")
    pos = F_s.positions()
    has_cls = F_t.cls is not None and F_s.cls is not None and cfg.include_cls
    cls_sum, sp_sum = None, None
    for t, s in zip(t_layers[-k:], s_layers[-k:]):
        t_sp = torch.gather(t[:, 1:], 1, pos.unsqueeze(-1).expand(-1, -1, t.shape[-1]))
        sp = token_loss(t_sp, s[:, 1:], cfg)
        sp_sum = sp if sp_sum is None else sp_sum + sp
        if has_cls:
            c = token_loss(t[:, 0], s[:, 0], cfg)
            cls_sum = c if cls_sum is None else cls_sum + c
    return TokenLosses(cls=None if cls_sum is None else cls_sum / k, spatial=sp_sum / k, positions=pos)


def distill_features(F_t: TokenSet, F_s: TokenSet, cfg: DistillConfig, reduction: str = "mean") -> torch.Tensor:
    """Mean per-token loss over CLS plus the student's visible spatial tokens."""
    per_image = distill_token_losses(F_t, F_s, cfg).per_image()
    if reduction == "none":
        return per_image
    if reduction == "mean":
        return per_image.mean()
    raise ConfigurationError(f"unknown reduction {reduction!r}")


# --------------------------------------------------------------------------
# Teacher/student forward shared by training and scoring
# --------------------------------------------------------------------------


def build_student(teacher: VisionTransformer, seed: int) -> VisionTransformer:
    """Fresh, fully trainable copy of the teacher's architecture."""
    mlp_ratio = teacher.blocks[0].mlp.fc1.out_features / teacher.embed_dim
    with seeded(seed):
        return VisionTransformer(img_size=teacher.img_size, patch_size=teacher.patch_size,
                                 embed_dim=teacher.embed_dim, depth=teacher.depth, num_heads=teacher.num_heads,
                                 mlp_ratio=mlp_ratio, class_token=teacher.has_cls, arch_id=teacher.arch_id,
                                 pretrain_tag="random")


def teacher_forward(teacher: VisionTransformer, images: torch.Tensor, cfg: DistillConfig):
    with torch.no_grad():
        return encode_with_saliency(teacher, images, n_layers=cfg.n_layers)


def distill_forward(teacher: VisionTransformer, student: VisionTransformer, images: torch.Tensor,
                    cfg: DistillConfig, mask_mode: Optional[str] = None, seed: Optional[int] = None):
    """Teacher tokens, mask plans, student tokens and per-token losses for a batch."""
    F_t, saliency = teacher_forward(teacher, images, cfg)
    mode = cfg.mask_mode if mask_mode is None else mask_mode
    plans = build_masks(saliency, cfg.mask_ratio, mode, seed)
    keep = None if mode == "none" else plans
    F_s = encode(student, images, keep=keep, n_layers=cfg.n_layers)
    return F_t, plans, F_s, distill_token_losses(F_t, F_s, cfg)


class MKDTrainer:
    def __init__(self, teacher: VisionTransformer, cfg: DistillConfig, student: Optional[VisionTransformer] = None,
                 seed: int = 0, dump_dir: Optional[Path] = None):
        cfg.validate()
        self.cfg = cfg
        self.teacher = freeze(teacher)
        self.student = student if student is not None else build_student(teacher, cfg.student_seed)
        for p in self.student.parameters():
            p.requires_grad_(True)
        self.optimizer = torch.optim.AdamW(self.student.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([seed, 2])
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.step_count = 0

    def _mask_seed(self) -> Optional[int]:
        return int(self.rng.integers(0, 2**31 - 1)) if self.cfg.mask_mode in ("random", "proportional") else None

    def step(self, images: torch.Tensor) -> float:
        self.student.train()
        _, _, _, losses = distill_forward(self.teacher, self.student, images, self.cfg, seed=self._mask_seed())
        loss = losses.per_image().mean()
        if not torch.isfinite(loss):
            self.dump_state("non-finite distillation loss")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        return loss.item()

    def dump_state(self, reason: str):
        path = None
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            path = self.dump_dir / f"mkd_failure_step{self.step_count}.pt"
            torch.save(self.state_dict(), path)
        raise NumericalFailure(f"{reason} at MKD step {self.step_count}; state dumped to {path}")

    def state_dict(self) -> dict:
        return {
            "student": self.student.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "step": self.step_count,
            "cfg": asdict(self.cfg),
            "arch_id": self.student.arch_id,
        }

    def load_state_dict(self, state: dict):
        self.student.load_state_dict(state["student"])
        if "optimizer" in state:
            self.optimizer.load_state_dict(state["optimizer"])
        if "rng" in state:
            self.rng.bit_generator.state = state["rng"]
        self.step_count = state.get("step", 0)


def mkd_step(trainer: MKDTrainer, images: torch.Tensor) -> float:
    """One distillation step; returns the batch loss before the update."""
    return trainer.step(images)


def train_mkd(trainer: MKDTrainer, images: torch.Tensor, curve_path=None, checkpoint_dir=None,
              start_epoch: int = 0, extra_meta: Optional[dict] = None) -> list:
    from .defend import iter_batches

    cfg = trainer.cfg
    rows = []
    fh = writer = None
    if curve_path is not None:
        new = start_epoch == 0 or not Path(curve_path).exists()
        fh = open(curve_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "step", "distill_loss", "config_hash"])
    try:
        for epoch in range(start_epoch, cfg.epochs):
            for idx in iter_batches(len(images), cfg.batch_size, trainer.rng):
                loss = trainer.step(images[torch.as_tensor(idx)])
                rows.append((epoch, trainer.step_count, loss))
                if writer:
                    writer.writerow([epoch, trainer.step_count, loss, (extra_meta or {}).get("config_hash", "")])
            logger.info("mkd epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, rows[-1][2])
            if checkpoint_dir is not None:
                state = trainer.state_dict()
                state["epoch"] = epoch + 1
                state.update(extra_meta or {})
                torch.save(state, Path(checkpoint_dir) / "mkd_last.pt")
    finally:
        if fh:
            fh.close()
    return rows


# --------------------------------------------------------------------------
# Efficiency
# --------------------------------------------------------------------------


def time_forward(model: VisionTransformer, images: torch.Tensor, keep=None, repeats: int = 5) -> float:
    """Median wall-clock seconds of a no-grad forward."""
    times = []
    with torch.no_grad():
        encode(model, images, keep=keep)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            encode(model, images, keep=keep)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def efficiency_report(student: VisionTransformer, images: torch.Tensor, ratio: float = 0.5,
                      repeats: int = 5, seed: int = 0) -> list:
    """Tokens per forward and wall-clock for a full and a masked student forward."""
    B, _, H, W = images.shape
    N = (H // student.patch_size) * (W // student.patch_size)
    rng = np.random.default_rng(seed)
    plans = [build_mask(rng.random(N), ratio, "guided") for _ in range(B)]
    rows = []
    for label, keep, r in (("full", None, 0.0), ("masked", plans, ratio)):
        rows.append({
            "mode": label,
            "batch": B,
            "tokens_per_image": student_forward_cost(N, r),
            "seconds": time_forward(student, images, keep, repeats),
        })
    return rows


def write_efficiency_csv(rows: Sequence[dict], path, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*rows[0].keys(), "config_hash"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_hash": config_hash})
