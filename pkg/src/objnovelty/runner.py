"""Two-stage experiment orchestration: split -> DEFEND -> MKD -> score -> eval.

Every stage writes its artifact atomically into the run directory and is
skipped on a rerun once that artifact exists, so an interrupted run resumes
from the last completed stage (or the last finished epoch inside a stage).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .defend import DefendConfig, DefendTrainer, apply_defend_checkpoint, train_defend
from .encoder import freeze, load_backbone, set_determinism
from .errors import AggregationError, ConfigurationError, ObjNoveltyError, StageError
from .mkd import DistillConfig, MKDTrainer, build_student, efficiency_report, train_mkd, write_efficiency_csv
from .pretrain import normalize_images
from .scoring import (discrepancy_map, evaluate, make_records, novelty_scores, save_heatmap_png,
                      write_scores_csv)
from .splits import (AnnotatedImage, Split, SplitSpec, SyntheticSceneSpec, build_split, eligible_categories,
                     generate_synthetic, load_coco, load_folder, load_voc, normal_sets, prototype_count_for)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "OBJNOVELTY_OUTPUT_ROOT"
STAGES = ("split", "defend", "distill", "score", "eval")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class BackboneConfig:
    arch: str = "vit_toy"
    checkpoint: Optional[str] = None
    pretrain_tag: str = "supervised"


@dataclass
class DatasetConfig:
    """``kind``: synthetic | coco | voc | folder."""

    kind: str = "synthetic"
    name: str = "synthetic-glyphs"
    image_size: int = 224
    # synthetic
    canvas: int = 64
    objects_per_image: tuple = (1, 1)
    vocabulary: Optional[list] = None  # glyph names; None means all
    n_train: int = 600
    n_test: int = 600
    seed: int = 0
    # file-based
    root: Optional[str] = None
    train_annotations: Optional[str] = None
    train_images: Optional[str] = None
    train_ids: Optional[str] = None
    test_annotations: Optional[str] = None
    test_images: Optional[str] = None
    test_ids: Optional[str] = None

    def __post_init__(self):
        self.objects_per_image = tuple(self.objects_per_image)
        if self.kind not in ("synthetic", "coco", "voc", "folder"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")


@dataclass
class SplitConfig:
    rule: str = "image-class"
    setting: str = "uni-class"
    normal: object = "each"  # list of class ids, or "each" to loop over the protocol's normal sets
    size: Optional[int] = None
    n_splits: int = 1
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    deterministic: bool = True
    defend_enabled: bool = True
    prototype_override: Optional[int] = None
    eval_batch_size: int = 64
    heatmaps: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    defend: DefendConfig = field(default_factory=DefendConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    @property
    def method(self) -> str:
        return "MKD+DEFEND" if self.defend_enabled else "MKD"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        data = self.to_dict()
        data.pop("output_dir")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def validate(self):
        self.defend.validate()
        self.distill.validate()
        if self.split.rule == "image-class" and self.dataset.kind in ("coco", "voc"):
            raise ConfigurationError(f"{self.dataset.kind} datasets are multi-object; use rule 'object-presence'")
        if self.dataset.kind == "synthetic" and self.backbone.arch == "vit_toy" and self.dataset.canvas != 64:
            raise ConfigurationError("vit_toy expects 64x64 inputs")
        return self


_SECTIONS = {"backbone": BackboneConfig, "dataset": DatasetConfig, "split": SplitConfig,
             "defend": DefendConfig, "distill": DistillConfig}


def _coerce(cls, values: dict) -> dict:
    # YAML 1.1 reads "1e-4" as a string; accept it wherever the field is a float
    out = dict(values)
    for f in dataclasses.fields(cls):
        if isinstance(f.default, float) and isinstance(out.get(f.name), str):
            try:
                out[f.name] = float(out[f.name])
            except ValueError as exc:
                raise ConfigurationError(f"{cls.__name__}.{f.name}: expected a number, got {out[f.name]!r}") from exc
    return out


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS:
            cls = _SECTIONS[k]
            fields = {f.name for f in dataclasses.fields(cls)}
            bad = set(v or {}) - fields
            if bad:
                raise ConfigurationError(f"unknown keys in '{k}': {sorted(bad)}")
            kwargs[k] = cls(**_coerce(cls, v or {}))
        else:
            kwargs[k] = v
    return RunConfig(**kwargs).validate()


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) if path else {}
    return config_from_dict(apply_overrides(data or {}, overrides))


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


class ImageStore:
    """Image tensors by image id; synthetic sets live in memory, files load lazily."""

    def __init__(self, images: Optional[dict] = None, paths: Optional[dict] = None, size: int = 224):
        self._images = images or {}
        self._paths = paths or {}
        self.size = size

    def _load(self, image_id):
        from PIL import Image

        with Image.open(self._paths[image_id]) as im:
            im = im.convert("RGB").resize((self.size, self.size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        return normalize_images(arr)

    def get(self, ids: Sequence) -> torch.Tensor:
        out = []
        for i in ids:
            if i not in self._images:
                self._images[i] = self._load(i)
            out.append(self._images[i])
        return torch.stack(out) if out else torch.zeros(0)


def load_dataset(cfg: DatasetConfig):
    """Returns ``(annotations, ImageStore)``."""
    if cfg.kind == "synthetic":
        kw = {"vocabulary": tuple(cfg.vocabulary)} if cfg.vocabulary else {}
        spec = SyntheticSceneSpec(canvas=cfg.canvas, objects_per_image=cfg.objects_per_image, seed=cfg.seed, **kw)
        a_tr, x_tr = generate_synthetic(spec, cfg.n_train, "train")
        a_te, x_te = generate_synthetic(spec, cfg.n_test, "test", id_offset=cfg.n_train)
        x = normalize_images(np.concatenate([x_tr, x_te]))
        anns = a_tr + a_te
        return anns, ImageStore(images={a.image_id: x[i] for i, a in enumerate(anns)}, size=cfg.canvas)

    required = {"coco": ("train_annotations", "test_annotations"), "voc": ("train_annotations",),
                "folder": ("root",)}[cfg.kind]
    missing = [k for k in required if getattr(cfg, k) is None]
    if missing:
        raise ConfigurationError(f"dataset kind {cfg.kind!r} needs {', '.join('dataset.' + k for k in missing)}")

    def ids(path):
        return Path(path).read_text().split() if path else None

    if cfg.kind == "coco":
        tr = load_coco(cfg.train_annotations, cfg.train_images, "train")
        te = load_coco(cfg.test_annotations, cfg.test_images, "test", id_offset=1 + max(a.image_id for a in tr))
    elif cfg.kind == "voc":
        tr = load_voc(cfg.train_annotations, cfg.train_images, "train", ids(cfg.train_ids))
        te = load_voc(cfg.test_annotations or cfg.train_annotations, cfg.test_images or cfg.train_images, "test",
                      ids(cfg.test_ids), id_offset=len(tr))
    else:
        anns, _ = load_folder(cfg.root)
        return anns, ImageStore(paths={a.image_id: a.path for a in anns}, size=cfg.image_size)
    anns = tr + te
    return anns, ImageStore(paths={a.image_id: a.path for a in anns}, size=cfg.image_size)


# --------------------------------------------------------------------------
# Result tables
# --------------------------------------------------------------------------


@dataclass
class ResultTable:
    setting: str
    method: str
    rows: list = field(default_factory=list)  # (split_id, auroc)
    config_hash: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean([a for _, a in self.rows])) if self.rows else float("nan")

    def to_dict(self) -> dict:
        return {"setting": self.setting, "method": self.method, "config_hash": self.config_hash,
                "rows": [{"split": s, "auroc": a} for s, a in self.rows], "mean": self.mean}

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["setting", "method", "split", "auroc", "config_hash"])
            for s, a in self.rows:
                w.writerow([self.setting, self.method, s, repr(a), self.config_hash])
            w.writerow([self.setting, self.method, "AVG", repr(self.mean), self.config_hash])
        if json_path:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def read(cls, csv_path) -> "ResultTable":
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ConfigurationError(f"{csv_path} is empty")
        t = cls(setting=rows[0]["setting"], method=rows[0]["method"], config_hash=rows[0].get("config_hash", ""))
        t.rows = [(r["split"], float(r["auroc"])) for r in rows if r["split"] != "AVG"]
        return t


@dataclass
class PerClassReport:
    setting: str
    methods: list
    rows: list  # (split_id, [auroc per method, None when missing])
    averages: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", *self.methods])
            for s, vals in self.rows:
                w.writerow([s, *["" if v is None else repr(v) for v in vals]])
            w.writerow(["AVG", *[repr(v) for v in self.averages]])

    def to_text(self, scale: float = 1.0) -> str:
        width = max(8, *(len(m) for m in self.methods))
        head = f"{'split':<10}" + "".join(f"{m:>{width + 2}}" for m in self.methods)
        lines = [f"setting: {self.setting}", head]
        for s, vals in [*self.rows, ("AVG", self.averages)]:
            cells = "".join(f"{'-' if v is None else f'{v * scale:.2f}':>{width + 2}}" for v in vals)
            lines.append(f"{str(s):<10}{cells}")
        return "\n".join(lines) + "\n"


def report_per_class(tables: Sequence[ResultTable]) -> PerClassReport:
    """Per-split AUROC for one or more methods under a shared setting, with AVG."""
    if not tables:
        raise AggregationError("no tables to report")
    settings = {t.setting for t in tables}
    if len(settings) > 1:
        raise AggregationError(f"cannot aggregate tables from different settings: {sorted(settings)}")
    methods = [t.method for t in tables]
    splits = []
    for t in tables:
        for s, _ in t.rows:
            if s not in splits:
                splits.append(s)
    lookup = [dict(t.rows) for t in tables]
    rows = [(s, [d.get(s) for d in lookup]) for s in splits]
    averages = [t.mean for t in tables]
    return PerClassReport(setting=tables[0].setting, methods=methods, rows=rows, averages=averages)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def _atomic_save(obj, path):
    tmp = Path(str(path) + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def _stage_seed(seed: int, stage: str, split_id: str) -> int:
    h = hashlib.sha256(f"{seed}/{stage}/{split_id}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


class Experiment:
    """One run directory: all stages for every normal set in the config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        self.out = cfg.resolved_output_dir()
        self.hash = cfg.config_hash()
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_dataset(self.cfg.dataset)
        return self._data

    def meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "method": self.cfg.method, **extra}

    def specs(self) -> list:
        s = self.cfg.split
        anns = self.data[0]
        if s.normal == "each":
            eligible, _ = eligible_categories(anns)
            sets = normal_sets(eligible, s.setting, s.size, s.n_splits, s.seed)
        else:
            normal = s.normal if isinstance(s.normal, (list, tuple)) else [s.normal]
            sets = [tuple(normal)]
        return [SplitSpec(dataset=self.cfg.dataset.name, rule=s.rule, setting=s.setting, normal=n, seed=s.seed)
                for n in sets]

    def split_dir(self, spec: SplitSpec) -> Path:
        d = self.out / self.cfg.method.replace("+", "_") / f"normal_{spec.split_id}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def write_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        data = self.cfg.to_dict()
        data["config_hash"] = self.hash
        (self.out / "config.yaml").write_text(yaml.safe_dump(data, sort_keys=False))

    # -- stages -------------------------------------------------------------

    def stage_split(self, spec: SplitSpec) -> Split:
        path = self.split_dir(spec) / "split.json"
        if path.exists():
            return Split.load(path)
        split = build_split(self.data[0], spec)
        split.save(path, extra={"config_hash": self.hash})
        return split

    def base_teacher(self):
        b = self.cfg.backbone
        return load_backbone(b.arch, b.checkpoint, pretrain_tag=b.pretrain_tag)

    def stage_defend(self, spec: SplitSpec, split: Split) -> Optional[Path]:
        if not self.cfg.defend_enabled:
            return None
        d = self.split_dir(spec)
        final = d / "defend.pt"
        if final.exists():
            return final
        seed = _stage_seed(self.cfg.seed, "defend", spec.split_id)
        set_determinism(seed)
        dcfg = dataclasses.replace(self.cfg.defend)
        dcfg.n_prototypes = prototype_count_for(spec, self.data[0], self.cfg.prototype_override)
        trainer = DefendTrainer(self.base_teacher(), dcfg, seed=seed, dump_dir=d)
        start = 0
        last = d / "defend_last.pt"
        if last.exists():
            state = torch.load(last, map_location="cpu", weights_only=False)
            trainer.load_state_dict(state)
            start = state["epoch"]
            logger.info("resuming DEFEND for %s from epoch %d", spec.split_id, start)
        images = self.data[1].get(split.train_ids)
        train_defend(trainer, images, curve_path=d / "defend_curve.csv", checkpoint_dir=d,
                     start_epoch=start, extra_meta=self.meta())
        state = trainer.state_dict()
        state.pop("optimizer")
        state.update(self.meta(prototype_count=dcfg.n_prototypes))
        _atomic_save(state, final)
        return final

    def teacher(self, defend_ckpt: Optional[Path]):
        t = self.base_teacher()
        if defend_ckpt is not None:
            apply_defend_checkpoint(t, defend_ckpt)
        return freeze(t)

    def stage_distill(self, spec: SplitSpec, split: Split, defend_ckpt: Optional[Path]) -> Path:
        d = self.split_dir(spec)
        final = d / "student.pt"
        if final.exists():
            return final
        seed = _stage_seed(self.cfg.seed, "distill", spec.split_id)
        set_determinism(seed)
        teacher = self.teacher(defend_ckpt)
        student = build_student(teacher, self.cfg.distill.student_seed + self.cfg.seed)
        trainer = MKDTrainer(teacher, self.cfg.distill, student=student, seed=seed, dump_dir=d)
        start = 0
        last = d / "mkd_last.pt"
        if last.exists():
            state = torch.load(last, map_location="cpu", weights_only=False)
            trainer.load_state_dict(state)
            start = state["epoch"]
            logger.info("resuming MKD for %s from epoch %d", spec.split_id, start)
        images = self.data[1].get(split.train_ids)
        train_mkd(trainer, images, curve_path=d / "mkd_curve.csv", checkpoint_dir=d,
                  start_epoch=start, extra_meta=self.meta())
        rows = efficiency_report(trainer.student, images[: min(len(images), 32)], self.cfg.distill.mask_ratio or 0.5,
                                 repeats=3)
        write_efficiency_csv(rows, d / "efficiency.csv", self.hash)
        state = {"student": trainer.student.state_dict(), "cfg": asdict(self.cfg.distill),
                 "arch_id": trainer.student.arch_id, **self.meta()}
        _atomic_save(state, final)
        return final

    def load_student(self, teacher, path: Path):
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state.get("arch_id") != teacher.arch_id:
            raise ConfigurationError(f"student checkpoint {path} is {state.get('arch_id')}, teacher is {teacher.arch_id}")
        student = build_student(teacher, 0)
        student.load_state_dict(state["student"])
        return freeze(student)

    def stage_score(self, spec: SplitSpec, split: Split, defend_ckpt, student_ckpt) -> Path:
        d = self.split_dir(spec)
        path = d / "scores.csv"
        if path.exists():
            return path
        teacher = self.teacher(defend_ckpt)
        student = self.load_student(teacher, student_ckpt)
        images = self.data[1].get(split.test_ids)
        scores = novelty_scores(images, teacher, student, self.cfg.distill, batch_size=self.cfg.eval_batch_size)
        records = make_records(split.test_ids, scores, split.test_labels)
        tmp = d / "scores.csv.tmp"
        write_scores_csv(records, tmp, self.hash)
        os.replace(tmp, path)
        if self.cfg.heatmaps:
            hdir = d / "heatmaps"
            hdir.mkdir(exist_ok=True)
            n = min(self.cfg.heatmaps, len(images))
            grids = discrepancy_map(images[:n], teacher, student, self.cfg.distill)
            grids = grids.reshape(n, *grids.shape[-2:])
            size = tuple(images.shape[-2:][::-1])
            for i in range(n):
                save_heatmap_png(grids[i], hdir / f"{split.test_ids[i]}.png", size=size,
                                 metadata={"config_hash": self.hash, "score": scores[i]})
        return path

    def stage_eval(self, spec: SplitSpec, scores_path: Path):
        from .scoring import read_scores_csv

        d = self.split_dir(spec)
        records = read_scores_csv(scores_path)
        report = evaluate(records, metadata=self.meta(split=spec.split_id, normal=list(spec.normal),
                                                      backbone=self.cfg.backbone.arch))
        report.to_json(d / "report.json")
        return report

    # -- driver -------------------------------------------------------------

    def run(self, stop_after: Optional[str] = None) -> Optional[ResultTable]:
        if stop_after is not None and stop_after not in STAGES:
            raise ConfigurationError(f"unknown stage {stop_after!r}; expected one of {STAGES}")
        self.write_config()
        last = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
        table = ResultTable(setting=self.cfg.split.setting, method=self.cfg.method, config_hash=self.hash)
        for spec in self.specs():
            stage = "split"
            try:
                split = self.stage_split(spec)
                if last < 1:
                    continue
                stage = "defend"
                defend_ckpt = self.stage_defend(spec, split)
                if last < 2:
                    continue
                stage = "distill"
                student_ckpt = self.stage_distill(spec, split, defend_ckpt)
                if last < 3:
                    continue
                stage = "score"
                scores_path = self.stage_score(spec, split, defend_ckpt, student_ckpt)
                if last < 4:
                    continue
                stage = "eval"
                report = self.stage_eval(spec, scores_path)
            except ObjNoveltyError as exc:
                self._record_failure(spec, stage, exc)
                raise StageError(stage, exc) from exc
            except Exception as exc:
                self._record_failure(spec, stage, exc)
                raise StageError(stage, exc) from exc
            table.rows.append((spec.split_id, report.auroc))
        if last < len(STAGES) - 1:
            return None
        table.write(self.out / f"results_{self.cfg.method.replace('+', '_')}.csv",
                    self.out / f"results_{self.cfg.method.replace('+', '_')}.json")
        return table

    def _record_failure(self, spec, stage, exc):
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "failures.log", "a") as fh:
            fh.write(f"{spec.split_id}\t{stage}\t{type(exc).__name__}: {exc}\n")


def run_experiment(cfg: RunConfig, stop_after: Optional[str] = None) -> Optional[ResultTable]:
    return Experiment(cfg).run(stop_after)
