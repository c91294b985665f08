"""Why the fractional precision must be searched, not guessed.

Too few digits and near-tied logits flip; too many and intermediate values
leave the safe range of the 64-bit ring.  A model with weights scaled by
10^3 makes both failures show up within p = 1..16.

    python demos/03_choosing_the_precision.py
"""

import numpy as np

from ppids import harness as H
from ppids.ring import FixedPointCodec, representable_range

for p in (1, 4, 8, 12, 16):
    lo, hi = representable_range(FixedPointCodec(10, p))
    print(f"p={p:2d}: values up to +/-{hi:.4g}")

model = H.engineered_model(seed=0, scale=1e3)
ties = H.near_tie_inputs(model, 12, rel_gap=1e-3)
data = np.concatenate([ties, np.random.default_rng(0).random((20, 3, 32, 32))])
report = H.sweep_precision(model, data, range(1, 17))

print(f"\n{len(data)} inputs, 12 of them built to sit on a decision boundary")
for row in report.rows:
    bar = "#" * int(20 * row.matched / row.total)
    print(f"p={row.precision:2d} {row.matched:2d}/{row.total} {bar:20s} {row.mode}")
print("precisions that work for every input:", report.band())
