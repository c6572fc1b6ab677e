"""End-to-end experiment stages: slides, pretrained encoders, fine-tuning, MIL evaluation."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, serialize
from .data import ContextWindow, SyntheticSlide, extract_context_windows, generate_slide, tissue_filter
from .encoders import TEACHER_STEPS, TEACHER_TARGET_ACC, PatchEncoder, PretrainConfig, clone, pretrain_encoder
from .heatmap import lesion_contrast
from .mcm import TrainReport, Variant, build_model, finetune_epoch
from .mil import AttentionMIL, Bag, MilHistory, SplitSpec, auroc, make_splits, predict, train_mil
from .rng import derive_seed, stream

BASELINE = "baseline"
ARMS = (BASELINE, "mcm", "kd", "cm-kd", "mcm-kd", "mcm-sd")
# bump when a change alters what pretraining produces, to invalidate caches
PRETRAIN_CACHE_TAG = "pretrain-v2"
STD_FLOOR = 1e-6


@dataclass
class Replicate:
    """Slides, kept windows and splits for one seed."""
    seed: int
    slides: list[SyntheticSlide]
    windows: list[list[ContextWindow]]
    splits: dict[str, list[int]]

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.slides]

    def split_windows(self, split: str) -> list[ContextWindow]:
        return [w for i in self.splits[split] for w in self.windows[i]]


def make_replicate(cfg: ExperimentConfig, seed: int) -> Replicate:
    scfg = cfg.slide_config()
    slides, windows = [], []
    for i in range(cfg.n_slides):
        slide = generate_slide(scfg, derive_seed(seed, "slide", i), slide_id=f"slide_{i:04d}")
        slides.append(slide)
        windows.append(tissue_filter(extract_context_windows(slide, cfg.s, cfg.patch), cfg.min_tissue))
    keep = [i for i, w in enumerate(windows) if w]
    if len(keep) < len(slides):
        slides = [slides[i] for i in keep]
        windows = [windows[i] for i in keep]
    splits = make_splits([s.label for s in slides], SplitSpec(seed=derive_seed(seed, "splits")))
    return Replicate(seed, slides, windows, splits)


# -- pretrained encoders, cached by content hash --


def _pretrain_configs(cfg: ExperimentConfig) -> tuple[PretrainConfig, PretrainConfig]:
    teacher = PretrainConfig(noise=cfg.noise, steps=TEACHER_STEPS, target_acc=TEACHER_TARGET_ACC)
    student = PretrainConfig(noise=cfg.student_noise, source_stain=cfg.student_source_stain)
    return teacher, student


def pretrain_key(cfg: ExperimentConfig, seed: int) -> str:
    t_cfg, s_cfg = _pretrain_configs(cfg)
    payload = {
        "tag": PRETRAIN_CACHE_TAG, "seed": seed,
        "slides": asdict(cfg.slide_config()),
        "teacher": [asdict(cfg.teacher_spec()), asdict(t_cfg)],
        "student": [asdict(cfg.student_spec()), asdict(s_cfg)],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def pretrained_encoders(cfg: ExperimentConfig, seed: int,
                        cache_dir: str | Path | None = None) -> tuple[PatchEncoder, PatchEncoder, dict]:
    """Frozen (teacher, student) for ``seed``; reused from ``cache_dir`` when present."""
    key = pretrain_key(cfg, seed)
    if cache_dir is not None:
        cache = Path(cache_dir)
        t_path, s_path = cache / f"teacher-{key}.mckp", cache / f"student-{key}.mckp"
        if t_path.exists() and s_path.exists():
            return (checkpoint.load_encoder(t_path, cfg.patch), checkpoint.load_encoder(s_path, cfg.patch),
                    {"cache": "hit", "key": key})
    t_cfg, s_cfg = _pretrain_configs(cfg)
    scfg = cfg.slide_config()
    teacher, t_info = pretrain_encoder(cfg.teacher_spec(), scfg, t_cfg, seed, role="teacher")
    student, s_info = pretrain_encoder(cfg.student_spec(), scfg, s_cfg, seed, role="student")
    info = {"cache": "miss", "key": key,
            "teacher_acc": t_info["heldout_acc"], "student_acc": s_info["heldout_acc"],
            "teacher_steps": t_info["steps"], "student_steps": s_info["steps"]}
    if cache_dir is not None:
        cache.mkdir(parents=True, exist_ok=True)
        checkpoint.save_encoder(t_path, teacher)
        checkpoint.save_encoder(s_path, student)
    return teacher, student, info


# -- fine-tuning and MIL --


def finetune(cfg: ExperimentConfig, windows: Sequence[ContextWindow], teacher: PatchEncoder,
             student: PatchEncoder, variant: str, seed: int, lr: float | None = None):
    """Fine-tune a copy of ``student``; returns (student, model, reports)."""
    st = clone(student)
    model = build_model(Variant(variant), st, teacher, cfg.s, cfg.context_config(), derive_seed(seed, "model"))
    reports: list[TrainReport] = []
    for epoch in range(cfg.finetune_epochs):
        if epoch:
            st.unfreeze()
        reports.append(finetune_epoch(model, windows, cfg.finetune_config(lr), derive_seed(seed, "epoch", epoch)))
    return st, model, reports


def slide_features(enc: PatchEncoder, rep: Replicate) -> list[np.ndarray]:
    return [enc.encode(np.concatenate([w.patches for w in ws])) for ws in rep.windows]


def standardize(features: Sequence[np.ndarray], train_idx: Sequence[int]) -> list[np.ndarray]:
    """Per-dimension z-scores using statistics of the training slides only."""
    pooled = np.concatenate([features[i] for i in train_idx])
    mu, sd = pooled.mean(axis=0), pooled.std(axis=0)
    sd = np.maximum(sd, STD_FLOOR)
    return [(f - mu) / sd for f in features]


@dataclass
class MilResult:
    auroc: dict[str, float]
    history: MilHistory = field(repr=False)
    clf: AttentionMIL = field(repr=False)


def evaluate_features(cfg: ExperimentConfig, rep: Replicate, features: Sequence[np.ndarray],
                      seed: int) -> MilResult:
    feats = standardize(features, rep.splits["train"])
    bags = [Bag(f, s.label, s.slide_id) for f, s in zip(feats, rep.slides)]
    by = {k: [bags[i] for i in idx] for k, idx in rep.splits.items()}
    clf = AttentionMIL(feats[0].shape[1], cfg.mil_hidden, stream(seed, "mil-init"))
    clf, hist = train_mil(clf, by["train"], by["val"], cfg.mil_config(), derive_seed(seed, "mil"))
    scores = {k: auroc(predict(clf, b), [x.label for x in b]) for k, b in by.items()}
    return MilResult(scores, hist, clf)


@dataclass
class ArmResult:
    arm: str
    auroc: dict[str, float]
    contrast: float
    lr: float | None = None
    losses: list[float] = field(default_factory=list, repr=False)
    seconds: float = 0.0


def heatmap_contrast(enc: PatchEncoder, rep: Replicate, split: str = "test") -> float:
    """Mean lesion contrast over the split's slides that hold at least two lesion patches."""
    vals = []
    for i in rep.splits[split]:
        ws = rep.windows[i]
        feats = enc.encode(np.concatenate([w.patches for w in ws]))
        c = lesion_contrast(feats, np.concatenate([w.classes for w in ws]))
        if c is not None:
            vals.append(c)
    return float(np.mean(vals)) if vals else float("nan")


def run_arm(cfg: ExperimentConfig, rep: Replicate, teacher: PatchEncoder, student: PatchEncoder,
            arm: str) -> ArmResult:
    """Fine-tune for ``arm`` (or not, for the baseline) and evaluate downstream.

    With a non-empty ``finetune_lr_sweep`` every listed rate is tried and the
    one with the best validation AUROC is kept.
    """
    t0 = time.perf_counter()
    seed = rep.seed
    if arm == BASELINE:
        res = evaluate_features(cfg, rep, slide_features(student, rep), seed)
        return ArmResult(arm, res.auroc, heatmap_contrast(student, rep), seconds=time.perf_counter() - t0)
    lrs = cfg.finetune_lr_sweep or (cfg.finetune_lr,)
    best = None
    windows = rep.split_windows("train")
    for lr in lrs:
        st, _, reports = finetune(cfg, windows, teacher, student, arm, derive_seed(seed, "finetune", arm), lr)
        res = evaluate_features(cfg, rep, slide_features(st, rep), seed)
        if best is None or res.auroc["val"] > best[1].auroc["val"]:
            best = (lr, res, st, [x for r in reports for x in r.losses])
    lr, res, st, losses = best
    return ArmResult(arm, res.auroc, heatmap_contrast(st, rep), lr, losses, time.perf_counter() - t0)


def run_replicate(cfg: ExperimentConfig, seed: int, arms: Sequence[str] = ARMS,
                  cache_dir: str | Path | None = None) -> dict[str, ArmResult]:
    rep = make_replicate(cfg, seed)
    teacher, student, _ = pretrained_encoders(cfg, seed, cache_dir)
    return {arm: run_arm(cfg, rep, teacher, student, arm) for arm in arms}


# -- run manifest --


def manifest_hash(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> str:
    payload = {"config": serialize(cfg), "command": command, "extra": extra or {}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: ExperimentConfig
    seeds: list[int]
    extra: dict = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    components: dict[str, bool] = field(default_factory=dict)
    derived: dict[str, int] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    @property
    def hash(self) -> str:
        return manifest_hash(self.config, self.command, self.extra)

    def to_json(self) -> str:
        doc = {
            "command": self.command, "hash": self.hash, "config": serialize(self.config),
            "seeds": self.seeds, "derived_seeds": self.derived, "inputs": self.extra,
            "components": self.components, "artifacts": self.artifacts,
            "started": self.started, "finished": self.finished,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / f"manifest-{self.command}.json"
        path.write_text(self.to_json())
        return path


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
