"""Tissue masking and tiling of a toy slide image.

Builds a bright slide with one dark tissue region, masks it with Otsu
thresholding, and cuts it into overlapping tiles; tiles with less than 20%
tissue are dropped.
"""

from pathlib import Path

import numpy as np

from gleasonmil.data import save_png
from gleasonmil.preprocess import tile_slide, tissue_mask

out_dir = Path(__file__).parent / "output"
out_dir.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
slide = np.full((256, 384, 3), 246, dtype=np.uint8)              # white background
slide[40:200, 60:300] = rng.integers(60, 150, size=(160, 240, 3))  # stained tissue

mask = tissue_mask(slide)
print(f"tissue fraction of the slide: {mask.mean():.3f}")

patches = tile_slide(slide, window=64, stride=32, min_tissue=0.20)
print(f"kept {len(patches)} tiles (window 64, stride 32, >= 20% tissue)")
for patch in patches[:5]:
    x, y = patch.offsets(32)
    print(f"  grid ({patch.grid_col}, {patch.grid_row}) at ({x}, {y}): "
          f"{patch.tissue_fraction:.2f} tissue")

save_png(slide, out_dir / "toy_slide.png")
save_png(np.where(mask[..., None], slide, 255).astype(np.uint8), out_dir / "toy_slide_masked.png")
print(f"wrote {out_dir}/toy_slide.png and toy_slide_masked.png")
