"""Novelty scores, AUROC and per-patch discrepancy maps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import kernels
from .encoder import VisionTransformer
from .errors import ConfigurationError, UndefinedMetricError
from .mkd import DistillConfig, distill_forward

EVAL_SEED = 12345


@dataclass
class NoveltyRecord:
    sample_id: object
    score: float
    label: str  # "normal" | "abnormal"

    def __post_init__(self):
        if self.label not in ("normal", "abnormal"):
            raise ConfigurationError(f"label must be 'normal' or 'abnormal', got {self.label!r}")
        if not np.isfinite(self.score):
            raise ConfigurationError(f"non-finite score for sample {self.sample_id}")


@dataclass
class EvalReport:
    auroc: float
    counts: dict
    score_stats: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=str))


def _check_pair(teacher: VisionTransformer, student: VisionTransformer):
    if (teacher.arch_id, teacher.embed_dim, teacher.patch_size, teacher.depth) != (
            student.arch_id, student.embed_dim, student.patch_size, student.depth):
        raise ConfigurationError(
            f"teacher {teacher.arch_id}/{teacher.embed_dim}d and student {student.arch_id}/{student.embed_dim}d differ")


def _eval_mode(cfg: DistillConfig) -> str:
    return cfg.mask_mode if cfg.eval_masking else "none"


def novelty_losses(images: torch.Tensor, teacher, student, cfg: DistillConfig, seed: int = EVAL_SEED):
    _check_pair(teacher, student)
    teacher.eval()
    student.eval()
    with torch.no_grad():
        return distill_forward(teacher, student, images, cfg, mask_mode=_eval_mode(cfg), seed=seed)


def novelty_scores(images: torch.Tensor, teacher, student, cfg: DistillConfig, batch_size: int = 64,
                   seed: int = EVAL_SEED) -> np.ndarray:
    """Per-image distillation loss; higher means more novel."""
    out = []
    for i in range(0, len(images), batch_size):
        batch = images[i:i + batch_size]
        # each batch gets its own seed so scores do not depend on batch composition in random mode
        losses = novelty_losses(batch, teacher, student, cfg, seed=None if seed is None else seed + i)[3]
        out.append(losses.per_image().cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def novelty_score(x: torch.Tensor, teacher, student, cfg: DistillConfig, seed: int = EVAL_SEED) -> float:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return float(novelty_losses(x, teacher, student, cfg, seed=seed)[3].per_image()[0])


def discrepancy_map(x: torch.Tensor, teacher, student, cfg: DistillConfig, seed: int = EVAL_SEED) -> np.ndarray:
    """Per-patch normalised feature distance on the patch grid; masked patches are NaN."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    F_t, _, _, losses = novelty_losses(x, teacher, student, cfg, seed=seed)
    rows, cols = F_t.grid
    B = x.shape[0]
    grid = np.full((B, rows * cols), np.nan)
    pos = losses.positions.cpu().numpy()
    vals = losses.spatial.cpu().double().numpy()
    for b in range(B):
        grid[b, pos[b]] = vals[b]
    grid = grid.reshape(B, rows, cols)
    return grid[0] if B == 1 else grid


def heatmap_image(grid: np.ndarray, size: Optional[tuple] = None, vmax: Optional[float] = None):
    """Render a score grid as an RGB PIL image (masked cells grey)."""
    from PIL import Image

    g = np.asarray(grid, dtype=float)
    finite = np.isfinite(g)
    top = vmax if vmax is not None else (g[finite].max() if finite.any() else 1.0)
    v = np.where(finite, np.clip(g / (top + 1e-12), 0, 1), 0.0)
    rgb = np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)
    rgb[~finite] = 0.5
    img = Image.fromarray((rgb * 255).astype(np.uint8))
    if size is not None:
        img = img.resize(size, Image.NEAREST)
    return img


def save_heatmap_png(grid, path, size=None, metadata: Optional[dict] = None):
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    for k, v in (metadata or {}).items():
        info.add_text(str(k), str(v))
    heatmap_image(grid, size).save(path, pnginfo=info)


def auroc_from_scores(scores, labels) -> float:
    """Mann-Whitney AUROC with abnormal (label 1 / True) as the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels).astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one normal and one abnormal sample")
    u = kernels.positive_rank_sum(scores, pos) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auroc(records: Sequence[NoveltyRecord]) -> float:
    return auroc_from_scores([r.score for r in records], [r.label == "abnormal" for r in records])


def make_records(ids, scores, labels) -> list:
    return [NoveltyRecord(i, float(s), "abnormal" if y else "normal") for i, s, y in zip(ids, scores, labels)]


def evaluate(records: Sequence[NoveltyRecord], metadata: Optional[dict] = None) -> EvalReport:
    scores = np.array([r.score for r in records])
    stats = {}
    counts = {}
    for label in ("normal", "abnormal"):
        s = scores[[r.label == label for r in records]]
        counts[label] = int(len(s))
        stats[label] = {"mean": float(s.mean()), "std": float(s.std()), "min": float(s.min()),
                        "max": float(s.max())} if len(s) else {}
    return EvalReport(auroc=auroc(records), counts=counts, score_stats=stats, metadata=dict(metadata or {}))


def write_scores_csv(records: Sequence[NoveltyRecord], path, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "label", "config_hash"])
        for r in records:
            w.writerow([r.sample_id, repr(r.score), r.label, config_hash])


def read_scores_csv(path) -> list:
    with open(path, newline="") as fh:
        return [NoveltyRecord(row["sample_id"], float(row["score"]), row["label"]) for row in csv.DictReader(fh)]
