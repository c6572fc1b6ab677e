"""Pretrain a teacher and a student, then run one epoch of masked context distillation.

Takes about a minute on one core.

Run:  python demos/03_finetune_mcmkd.py
"""

import numpy as np

from mcmkd import pipeline
from mcmkd.config import ExperimentConfig

cfg = ExperimentConfig(n_slides=60)
seed = 0

rep = pipeline.make_replicate(cfg, seed)
print(f"{len(rep.slides)} slides, {sum(rep.labels)} positive, "
      f"{len(rep.split_windows('train'))} training windows")

teacher, student, info = pipeline.pretrained_encoders(cfg, seed)
print(f"teacher held-out acc {info['teacher_acc']:.3f}, student {info['student_acc']:.3f} "
      f"(student saw a shifted stain)")

st, model, reports = pipeline.finetune(cfg, rep.split_windows("train"), teacher, student, "mcm-kd", seed)
losses = reports[0].losses
k = max(1, len(losses) // 10)
print(f"{len(losses)} batches, loss {np.mean(losses[:k]):.4f} -> {np.mean(losses[-k:]):.4f}")
print("discarded after training:", ", ".join(reports[0].discardable))

for name, enc in (("before", student), ("after", st)):
    print(f"lesion contrast {name}: {pipeline.heatmap_contrast(enc, rep, 'train'):.4f}")
