"""Render a gallery of synthetic inspection images.

Writes ``gallery.png``: four rows (clean, debris, broken wire, misplaced
weld) by six columns, drawn across the three simulated production lines so
the illumination and tint differences are visible.

Run:  python3 demos/synthetic_gallery.py [output.png]
"""

import sys

import numpy as np
from PIL import Image

from tcnn.data import (
    KIND_BROKEN_WIRE,
    KIND_DEBRIS,
    KIND_MISPLACED_WELD,
    generate_synthetic,
)

SIZE = 96
COLS = 6
rows = [
    ("clean", None),
    ("debris", KIND_DEBRIS),
    ("broken wire", KIND_BROKEN_WIRE),
    ("misplaced weld", KIND_MISPLACED_WELD),
]

# draw from a large pool so each row can pick its kind
records = generate_synthetic(400, 0.75, seed=20, size=SIZE)

tiles = []
for name, kind in rows:
    matching = [r for r in records if r.defect_kind == kind]
    row_imgs = [matching[i * 7].image for i in range(COLS)]
    tiles.append(np.concatenate(row_imgs, axis=1))
    print(f"{name:>15}: {len(matching)} candidates rendered")

gallery = np.concatenate(tiles, axis=0)
out_path = sys.argv[1] if len(sys.argv) > 1 else "gallery.png"
Image.fromarray(gallery).save(out_path)
print(f"wrote {gallery.shape[1]}x{gallery.shape[0]} gallery to {out_path}")
