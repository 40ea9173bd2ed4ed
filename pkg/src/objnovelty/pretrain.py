"""Supervised pretraining of the desk-scale ``vit_toy`` backbone.

Large backbones come with public pretrained checkpoints; the toy one does not,
so we fit it to predict which glyph shapes appear in synthetic scenes (a
multi-label task over single- and multi-object scenes). The resulting state
dict is saved in the same format :func:`objnovelty.encoder.load_backbone`
reads.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import build_backbone, seeded
from .splits import SyntheticSceneSpec, generate_synthetic

logger = logging.getLogger(__name__)


def normalize_images(images) -> torch.Tensor:
    """[0, 1] float images -> the [-1, 1] range the backbones expect."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return (x - 0.5) / 0.5


def pretraining_data(n_single: int, n_multi: int, seed: int):
    single = SyntheticSceneSpec(objects_per_image=(1, 1), glyph_size=(0.35, 0.75), seed=seed)
    multi = SyntheticSceneSpec(objects_per_image=(1, 4), glyph_size=(0.5, 0.9), seed=seed + 1)
    a1, x1 = generate_synthetic(single, n_single)
    a2, x2 = generate_synthetic(multi, n_multi)
    n_cat = len(single.vocabulary)
    y = np.zeros((n_single + n_multi, n_cat), dtype=np.float32)
    for i, a in enumerate(a1 + a2):
        y[i, list(a.categories)] = 1.0
    return normalize_images(np.concatenate([x1, x2])), torch.from_numpy(y)


def pretrain_toy_backbone(steps: int = 1500, batch_size: int = 64, seed: int = 1000,
                          n_single: int = 3000, n_multi: int = 3000, lr: float = 1e-3):
    """Return ``(model, final_accuracy)``; accuracy is exact-match on held-in data."""
    x, y = pretraining_data(n_single, n_multi, seed)
    model = build_backbone("vit_toy", pretrain_tag="synthetic-supervised", seed=seed)
    with seeded(seed + 7):
        head = nn.Linear(model.embed_dim, y.shape[1])
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.05)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    rng = np.random.default_rng(seed)
    model.train()
    for step in range(steps):
        idx = torch.as_tensor(rng.choice(len(x), size=batch_size, replace=False))
        layers, _, _ = model.forward_features(x[idx])
        logits = head(layers[-1][:, 0])
        loss = F.binary_cross_entropy_with_logits(logits, y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            logger.info("pretrain step %d loss %.4f", step, loss.item())
    model.eval()
    with torch.no_grad():
        correct = 0
        for i in range(0, len(x), 256):
            pred = head(model.forward_features(x[i:i + 256])[0][-1][:, 0]) > 0
            correct += int((pred == y[i:i + 256].bool()).all(dim=1).sum())
    return model, correct / len(x)


def save_backbone(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    return path
