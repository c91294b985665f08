"""Walk through the building blocks: fixed point, additive shares, Beaver
products, truncation and a secret comparison, each checked in the clear.

    python demos/01_shares_and_comparisons.py
"""

import numpy as np

from ppids.fss import eval_dcf, gen_compare_material, gen_dcf, sign_from_opened, sign_mask
from ppids.protocol.transport import run_pair
from ppids.rand import Rng
from ppids.ring import FixedPointCodec, decode, encode, representable_range
from ppids.sharing import beaver_mul, gen_triple, gen_truncation_pairs, reconstruct, share, truncate_shared

codec = FixedPointCodec(base=10, precision=4, word_size=64)
ring = codec.ring
rng = Rng(2024)

lo, hi = representable_range(codec)
print(f"codec b=10 p=4 s=64 holds values in [{lo:.3g}, {hi:.3g}]")

x = np.array([3.25, -1.5, 0.0001, 1234.5678])
y = np.array([2.0, 4.0, -7.5, 0.5])
qx, qy = encode(x, codec), encode(y, codec)
print("encoded x:", ring.signed(qx))

# Split x: either share alone is a uniformly random word.
x0, x1 = share(qx, rng, ring)
y0, y1 = share(qy, rng, ring)
print("party 0 holds", x0.data[:2], "... party 1 holds", x1.data[:2], "...")
print("together they give back", decode(reconstruct(x0, x1), codec))

# A product costs one exchange of masked values, the rescale two more.
triple = gen_triple(qx.shape, ring, rng)
pairs = gen_truncation_pairs(qx.shape, codec, rng)
xs, ys = (x0, x1), (y0, y1)


def party(b):
    def run(opener):
        z = beaver_mul(xs[b], ys[b], triple[b], opener)
        return truncate_shared(z, pairs[b], opener, codec), opener.rounds
    return run


(z0, rounds), (z1, _) = run_pair(party(0), party(1), ring)
print(f"secret x*y = {decode(reconstruct(z0, z1), codec)} in {rounds} rounds")
print("plain  x*y =", x * y)
print("(the secret product is floored to 4 fractional digits, like the plain fixed-point rule)")

# A distributed comparison function: two keys whose outputs sum to beta when x < alpha.
k0, k1 = gen_dcf(alpha=100, beta=1, rng=rng, n=10)
pts = np.array([0, 99, 100, 1023])
print("[x < 100] at", pts.tolist(), "->",
      ring.add(eval_dcf(0, k0, pts), eval_dcf(1, k1, pts)).tolist())

# The sign test behind ReLU and max: open x + r once, evaluate the key locally.
v = encode(np.array([-3.5, 0.0, 2.25, -0.0001]), codec)
units = gen_compare_material(v.shape, ring, rng)
v0, v1 = share(v, rng, ring)
for u in units:
    u.consume()
z = ring.add(sign_mask(0, v0.data, units[0]), sign_mask(1, v1.data, units[1]))
bits = ring.add(sign_from_opened(0, units[0], z), sign_from_opened(1, units[1], z))
print("[x >= 0] for -3.5, 0, 2.25, -0.0001 ->", bits.tolist())
