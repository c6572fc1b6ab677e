"""Compare downstream MIL AUROC for the frozen student and each fine-tuning variant.

A reduced configuration keeps this to a few minutes; the full comparison
is `mcmkd ablate`.

Run:  python demos/04_mil_ablation.py
"""

from mcmkd import pipeline
from mcmkd.config import ExperimentConfig

cfg = ExperimentConfig(n_slides=80, mil_epochs=40)
seed = 0

results = pipeline.run_replicate(cfg, seed)
print(f"{'arm':<10}{'train':>8}{'val':>8}{'test':>8}{'contrast':>10}{'sec':>7}")
for arm, r in results.items():
    a = r.auroc
    print(f"{arm:<10}{a['train']:>8.3f}{a['val']:>8.3f}{a['test']:>8.3f}{r.contrast:>10.3f}{r.seconds:>7.1f}")
