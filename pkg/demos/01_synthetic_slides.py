"""Generate a few synthetic slides, tile them into context windows and save previews.

Run:  python demos/01_synthetic_slides.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from mcmkd.data import (LESION, PATCH_CLASSES, SlideConfig, extract_context_windows, generate_slide,
                        lesion_components, tissue_filter, write_ppm)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_slides")
out.mkdir(parents=True, exist_ok=True)
cfg = SlideConfig()

for seed in range(4):
    slide = generate_slide(cfg, seed, slide_id=f"demo_{seed}")
    _, sizes = lesion_components(slide.grid)
    windows = extract_context_windows(slide, s=4, p=cfg.patch)
    kept = tissue_filter(windows, 0.6)
    counts = {name: int((slide.grid == k).sum()) for k, name in enumerate(PATCH_CLASSES)}
    print(f"slide {seed}: label {slide.label}, largest lesion cluster {sizes.max(initial=0)}, "
          f"{len(kept)}/{len(windows)} windows kept, patches {counts}")
    write_ppm(out / f"{slide.slide_id}.ppm", slide.pixels)

# label depends on the shape of the lesion, not on how much of it there is
for seed in (0, 1):
    slide = generate_slide(cfg, seed)
    print(f"slide {seed}: {int((slide.grid == LESION).sum())} lesion patches, label {slide.label}")
print(f"previews written to {out}/")
