"""
Structure/detail labels and synthetic rain
==========================================

The training targets come from splitting a clean image with a fixed
Gaussian low-pass: the blurred image is the structure map and the
remainder is the signed detail map. Rain is added as anti-aliased
streaks whose count scales with image area.
"""

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from dfdnet.image import (RainParams, decompose_label, detail_to_display, save_image, streak_count,
                          synthesize_rain, toy_clean_image)

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="dfdnet_demo_"))
out.mkdir(parents=True, exist_ok=True)

clean = toy_clean_image(np.random.default_rng(4), size=96)

# %%
structure, detail = decompose_label(clean)
print("reconstruction error", float(np.abs(structure + detail - clean).max()))
print("detail range", float(detail.min()), float(detail.max()))

# the detail map is signed, so it is shown as 0.5 + d/2
save_image(clean, out / "clean.png")
save_image(structure, out / "structure.png")
save_image(detail_to_display(detail), out / "detail.png")

# %%
params = RainParams(angle_degrees=10, density=2.0, intensity=0.6, seed=7)
rainy = synthesize_rain(clean, params)
print("streaks on a 96x96 image:", streak_count(96, 96, params.density))
save_image(rainy, out / "rainy.png")

# the same seed always gives the same rain
assert np.array_equal(rainy, synthesize_rain(clean, params))
print("images written to", out)
