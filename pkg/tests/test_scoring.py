import copy

import numpy as np
import pytest
import torch
from PIL import Image

from objnovelty.encoder import VisionTransformer
from objnovelty.errors import ConfigurationError, UndefinedMetricError
from objnovelty.mkd import DistillConfig, MKDTrainer, build_student, distill_forward
from objnovelty.pretrain import normalize_images
from objnovelty.scoring import (NoveltyRecord, auroc, auroc_from_scores, discrepancy_map, evaluate, make_records,
                                novelty_score, novelty_scores, read_scores_csv, save_heatmap_png, write_scores_csv)
from objnovelty.splits import SyntheticSceneSpec, generate_synthetic

from oracles import auroc_pairs


# ---------------------------------------------------------------- AUROC


def test_auroc_perfect_separation():
    assert auroc_from_scores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auroc_reversed():
    assert auroc_from_scores([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auroc_all_tied_is_half():
    assert auroc_from_scores([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_small_example():
    # abnormal beats normal in 3 of the 4 pairs
    assert auroc_from_scores([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_matches_pairwise_enumeration(rng):
    for _ in range(200):
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 8, size=n) / 4.0  # coarse grid forces ties
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        assert auroc_from_scores(scores, labels) == auroc_pairs(scores, labels)


def test_auroc_invariant_to_monotone_transform(rng):
    s = rng.normal(size=40)
    y = rng.random(40) < 0.4
    y[:2] = [True, False]
    assert auroc_from_scores(s, y) == pytest.approx(auroc_from_scores(np.exp(3 * s) + 7, y), abs=1e-15)


def test_auroc_label_flip_complements(rng):
    s = rng.normal(size=30)
    y = rng.random(30) < 0.5
    y[:2] = [True, False]
    assert auroc_from_scores(s, y) + auroc_from_scores(s, ~y) == pytest.approx(1.0, abs=1e-12)


def test_auroc_single_label_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc_from_scores([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc(make_records([0, 1], [0.1, 0.2], [0, 0]))


def test_record_validation():
    with pytest.raises(ConfigurationError):
        NoveltyRecord(0, float("nan"), "normal")
    with pytest.raises(ConfigurationError):
        NoveltyRecord(0, 0.3, "anomalous")


# ---------------------------------------------------------------- scores


def test_identical_networks_score_zero(tiny_vit, images):
    cfg = DistillConfig(eval_masking=False)
    assert np.all(novelty_scores(images, tiny_vit, copy.deepcopy(tiny_vit), cfg) == 0.0)


def test_guided_scores_deterministic(tiny_vit, images):
    student = build_student(tiny_vit, 3)
    cfg = DistillConfig()
    a = novelty_score(images[0], tiny_vit, student, cfg)
    b = novelty_score(images[0], tiny_vit, student, cfg)
    assert a == b > 0


def test_random_mode_uses_fixed_eval_seed(tiny_vit, images):
    student = build_student(tiny_vit, 3)
    cfg = DistillConfig(mask_mode="random")
    np.testing.assert_array_equal(novelty_scores(images, tiny_vit, student, cfg),
                                  novelty_scores(images, tiny_vit, student, cfg))


def test_score_equals_training_loss(tiny_vit, images):
    student = build_student(tiny_vit, 3)
    cfg = DistillConfig()
    got = novelty_score(images[1], tiny_vit, student, cfg)
    with torch.no_grad():
        want = distill_forward(tiny_vit, student, images[1:2], cfg)[3].per_image()[0].item()
    assert got == pytest.approx(want, rel=1e-6)


def test_batching_does_not_change_guided_scores(tiny_vit, images):
    student = build_student(tiny_vit, 3)
    cfg = DistillConfig()
    np.testing.assert_allclose(novelty_scores(images, tiny_vit, student, cfg, batch_size=1),
                               novelty_scores(images, tiny_vit, student, cfg, batch_size=4), rtol=1e-5)


def test_architecture_mismatch(tiny_vit, images):
    other = VisionTransformer(img_size=32, patch_size=8, embed_dim=16, depth=2, num_heads=2, arch_id="other")
    with pytest.raises(ConfigurationError):
        novelty_score(images[0], tiny_vit, other, DistillConfig())


# ---------------------------------------------------------------- discrepancy map


def test_map_zero_for_identical_networks(tiny_vit, images):
    grid = discrepancy_map(images[0], tiny_vit, copy.deepcopy(tiny_vit), DistillConfig(eval_masking=False))
    assert grid.shape == (4, 4)
    assert np.all(grid == 0.0)


def test_map_masked_cells_absent(tiny_vit, images):
    grid = discrepancy_map(images[:2], tiny_vit, build_student(tiny_vit, 3), DistillConfig())
    assert grid.shape == (2, 4, 4)
    assert (np.isnan(grid).sum(axis=(1, 2)) == 8).all()


def test_map_mean_matches_spatial_part_of_score(tiny_vit, images):
    student = build_student(tiny_vit, 3)
    for cfg in (DistillConfig(include_cls=False), DistillConfig(include_cls=False, eval_masking=False)):
        grid = discrepancy_map(images[2], tiny_vit, student, cfg)
        assert np.nanmean(grid) == pytest.approx(novelty_score(images[2], tiny_vit, student, cfg), abs=1e-6)
    cfg = DistillConfig()
    grid = discrepancy_map(images[2], tiny_vit, student, cfg)
    with torch.no_grad():
        losses = distill_forward(tiny_vit, student, images[2:3], cfg)[3]
    assert np.nanmean(grid) == pytest.approx(losses.spatial.mean().item(), abs=1e-6)


def test_heatmap_png(tmp_path, rng):
    grid = rng.random((4, 4))
    grid[0, 0] = np.nan
    path = tmp_path / "h.png"
    save_heatmap_png(grid, path, size=(32, 32), metadata={"config_hash": "abc"})
    with Image.open(path) as im:
        assert im.size == (32, 32)
        assert im.text["config_hash"] == "abc"
        assert im.getpixel((0, 0)) == (127, 127, 127)


# ---------------------------------------------------------------- I/O


def test_scores_csv_round_trip(tmp_path, rng):
    recs = make_records(range(10), rng.normal(size=10), [i % 2 for i in range(10)])
    write_scores_csv(recs, tmp_path / "s.csv", config_hash="h1")
    back = read_scores_csv(tmp_path / "s.csv")
    assert [r.score for r in back] == [r.score for r in recs]
    assert [r.label for r in back] == [r.label for r in recs]
    assert "h1" in (tmp_path / "s.csv").read_text()


def test_evaluate_report(tmp_path):
    recs = make_records("abcd", [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    rep = evaluate(recs, metadata={"config_hash": "h"})
    assert rep.auroc == 0.75
    assert rep.counts == {"normal": 2, "abnormal": 2}
    assert rep.score_stats["abnormal"]["max"] == 0.8
    rep.to_json(tmp_path / "r.json")
    assert '"config_hash": "h"' in (tmp_path / "r.json").read_text()


# ---------------------------------------------------------------- trained fixture


def mosaic(tiles):
    """Four (3, 16, 16) tiles -> one (3, 32, 32) image, row-major quadrants."""
    return np.concatenate([np.concatenate(tiles[:2], axis=2), np.concatenate(tiles[2:], axis=2)], axis=1)


@pytest.fixture(scope="module")
def trained_pair():
    """Random teacher; student distilled on 2x2 mosaics of circle tiles."""
    spec = SyntheticSceneSpec(canvas=16, objects_per_image=(1, 1), glyph_size=(0.6, 0.9), seed=11)
    anns, tiles = generate_synthetic(spec, 1200, "train")
    cats = np.array([next(iter(a.categories)) for a in anns])
    circles, others = tiles[cats == 0], tiles[cats != 0]
    gen = np.random.default_rng(0)
    normal = np.stack([mosaic(circles[gen.choice(len(circles), 4)]) for _ in range(96)])
    torch.manual_seed(5)
    teacher = VisionTransformer(img_size=32, patch_size=8, embed_dim=32, depth=2, num_heads=2, arch_id="tiny")
    trainer = MKDTrainer(teacher, DistillConfig(lr=1e-3), seed=0)
    x = normalize_images(normal)
    for _ in range(200):
        trainer.step(x)
    return teacher, trainer.student, circles, others


def test_trained_fixture_abnormal_scores_higher(trained_pair):
    teacher, student, circles, others = trained_pair
    gen = np.random.default_rng(1)
    normal = np.stack([mosaic(circles[gen.choice(len(circles), 4)]) for _ in range(40)])
    abnormal = np.stack([mosaic(others[gen.choice(len(others), 4)]) for _ in range(40)])
    s_n = novelty_scores(normalize_images(normal), teacher, student, DistillConfig())
    s_a = novelty_scores(normalize_images(abnormal), teacher, student, DistillConfig())
    assert s_a.mean() > s_n.mean()


def test_ood_quadrant_lights_up(trained_pair):
    teacher, student, circles, others = trained_pair
    gen = np.random.default_rng(2)
    cfg = DistillConfig(eval_masking=False)
    odd, rest = [], []
    for _ in range(20):
        tiles = list(circles[gen.choice(len(circles), 4)])
        tiles[0] = others[gen.integers(len(others))]
        grid = discrepancy_map(normalize_images(mosaic(tiles)), teacher, student, cfg)
        odd.append(grid[:2, :2].mean())
        rest.append(np.mean([grid[:2, 2:].mean(), grid[2:, :2].mean(), grid[2:, 2:].mean()]))
    assert np.mean(odd) > np.mean(rest)
