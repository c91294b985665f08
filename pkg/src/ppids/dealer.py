"""Offline planning and generation of correlated randomness.

The plan is produced by running the network driver over shapes only, so
the needs it lists (and their order) are exactly what the secure backend will
consume.  Material is generated layer by layer from a seed derived per layer,
which lets a dealer stream or regenerate any layer independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .engine import Driver, tournament_schedule
from .errors import MaterialExhausted, UnsupportedLayer
from .fss import CompareUnits, gen_compare_material
from .rand import Rng, derive_seed
from .ring import FixedPointCodec
from .sharing import BeaverTriple, TruncationPair, gen_matmul_triple, gen_triple, gen_truncation_pairs

ROUNDS = {"matmul": 1, "mul": 1, "cmp": 1, "trunc": 2}


@dataclass(frozen=True)
class Need:
    """One batch of material: kind in {matmul, mul, trunc, cmp}.

    ``shape`` is (m, k, n) for matmul, the tensor shape otherwise; ``divisor``
    is set for truncations (the public integer divided by).
    """

    kind: str
    shape: tuple
    divisor: int | None = None

    @property
    def elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "shape": list(self.shape)}
        if self.divisor is not None:
            d["divisor"] = self.divisor
        return d


@dataclass
class LayerPlan:
    label: str
    needs: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return sum(ROUNDS[n.kind] for n in self.needs)


@dataclass
class PreprocessingPlan:
    input_shape: tuple
    codec: FixedPointCodec
    layers: list

    def totals(self) -> dict:
        out = {"triple_elements": 0, "mul_elements": 0, "truncation_pairs": 0,
               "comparison_units": 0}
        for layer in self.layers:
            for n in layer.needs:
                key = {"matmul": "triple_elements", "mul": "mul_elements",
                       "trunc": "truncation_pairs", "cmp": "comparison_units"}[n.kind]
                out[key] += n.elements
        return out

    @property
    def rounds(self) -> int:
        return sum(layer.rounds for layer in self.layers)

    def byte_estimate(self) -> int:
        """Approximate serialized size of one party's material."""
        s = self.codec.word_size
        w = (s + 7) // 8

        def key(n_bits, count):
            return 7 + count * (16 + n_bits * (16 + w + 2) + w)

        total = 0
        for layer in self.layers:
            for n in layer.needs:
                e = n.elements
                if n.kind == "matmul":
                    m, k, nn = n.shape
                    total += w * (m * k + k * nn + m * nn)
                elif n.kind == "mul":
                    total += 3 * w * e
                elif n.kind == "cmp":
                    total += 2 * w * e + key(s - 1, e)
                else:
                    bits = max(1, ((n.divisor or self.codec.scale) - 1).bit_length())
                    total += 6 * w * e + key(s, e) + 2 * key(bits, e)
        return total

    def summary(self) -> dict:
        return {"layers": len(self.layers), "rounds": self.rounds,
                "bytes": self.byte_estimate(), **self.totals()}


class PlanBackend:
    """Driver backend over per-item shapes that records material needs."""

    def __init__(self, codec: FixedPointCodec, batch: int = 1):
        self.codec, self.batch = codec, batch
        self.layers: list[LayerPlan] = []

    def begin(self, label):
        self.layers.append(LayerPlan(label))

    def need(self, kind, shape, divisor=None):
        self.layers[-1].needs.append(Need(kind, tuple(int(d) for d in shape), divisor))

    def conv2d(self, x, layer):
        c, h, w = x
        out = M.layer_output_shape(layer, x)
        m = self.batch * out[1] * out[2]
        self.need("matmul", (m, c * layer.kernel ** 2, layer.out_ch))
        self.need("trunc", (m, layer.out_ch), self.codec.scale)
        return out

    def affine(self, x, layer):
        self.need("mul", (self.batch,) + x)
        self.need("trunc", (self.batch,) + x, self.codec.scale)
        return x

    def batchnorm(self, x, layer):
        raise UnsupportedLayer(f"{layer.name}: batchnorm must be folded before planning")

    def relu(self, x):
        self.need("cmp", (self.batch,) + x)
        self.need("mul", (self.batch,) + x)
        return x

    def maxpool(self, x, layer):
        out = M.layer_output_shape(layer, x)
        windows = self.batch * int(np.prod(out))
        for pairs in tournament_schedule(layer.k ** 2):
            self.need("cmp", (windows, pairs))
            self.need("mul", (windows, pairs))
        return out

    def avgpool(self, x, layer):
        out = M.layer_output_shape(layer, x)
        self.need("trunc", (self.batch,) + out, layer.k ** 2)
        return out

    def global_avgpool(self, x):
        self.need("trunc", (self.batch, x[0]), x[1] * x[2])
        return (x[0],)

    def dense(self, x, layer):
        self.need("matmul", (self.batch, layer.in_features, layer.out_features))
        self.need("trunc", (self.batch, layer.out_features), self.codec.scale)
        return (layer.out_features,)

    def add(self, a, b):
        return a


def plan_preprocessing(spec: M.ModelSpec, input_shape=None,
                       codec: FixedPointCodec = FixedPointCodec(), batch: int = 1) -> PreprocessingPlan:
    """Material needs per driver step; depends only on the model spec and shapes."""
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        spec = replace(spec, input_shape=tuple(input_shape))
    for layer in M.iter_primitive(spec.layers):
        if isinstance(layer, M.BatchNorm):
            raise UnsupportedLayer(f"{layer.name}: batchnorm must be folded before planning")
    M.shape_check(spec)
    be = PlanBackend(codec, batch)
    Driver(be).run(spec, tuple(spec.input_shape))
    return PreprocessingPlan(tuple(spec.input_shape), codec, be.layers)


# --- material -------------------------------------------------------------------


def generate_layer(plan: PreprocessingPlan, index: int, seed) -> tuple[list, list]:
    """Both parties' items for one plan layer, from a per-layer derived seed."""
    rng = Rng(derive_seed(seed, "layer", index))
    ring = plan.codec.ring
    items0, items1 = [], []
    for n in plan.layers[index].needs:
        if n.kind == "matmul":
            a, b = gen_matmul_triple(*n.shape, ring, rng)
        elif n.kind == "mul":
            a, b = gen_triple(n.shape, ring, rng)
        elif n.kind == "trunc":
            a, b = gen_truncation_pairs(n.shape, plan.codec, rng, n.divisor)
        elif n.kind == "cmp":
            a, b = gen_compare_material(n.shape, ring, rng)
        else:
            raise UnsupportedLayer(f"unknown material kind {n.kind}")
        items0.append(a)
        items1.append(b)
    return items0, items1


def item_matches(item, need: Need) -> bool:
    if need.kind in ("mul", "matmul"):
        if not isinstance(item, BeaverTriple) or item.kind != need.kind:
            return False
        if need.kind == "matmul":
            m, k, n = need.shape
            return item.a.shape == (m, k) and item.b.shape == (k, n)
        return item.a.size == need.elements
    if need.kind == "trunc":
        return isinstance(item, TruncationPair) and item.r.size == need.elements
    return isinstance(item, CompareUnits) and item.count == need.elements


@dataclass
class CorrelatedMaterial:
    """One party's material for one inference, consumed strictly in plan order."""

    party: int
    layers: list
    session: str = ""
    layer_cursor: int = field(default=-1)
    item_cursor: int = field(default=0)

    def next_layer(self) -> None:
        self.layer_cursor += 1
        self.item_cursor = 0
        if self.layer_cursor >= len(self.layers):
            raise MaterialExhausted(f"no material for step {self.layer_cursor}")

    def take(self, kind: str, elements: int | None = None):
        if not 0 <= self.layer_cursor < len(self.layers):
            raise MaterialExhausted("material cursor is not on a layer")
        items = self.layers[self.layer_cursor]
        if self.item_cursor >= len(items):
            raise MaterialExhausted(
                f"step {self.layer_cursor}: no {kind} material left")
        item = items[self.item_cursor]
        got = ("trunc" if isinstance(item, TruncationPair)
               else "cmp" if isinstance(item, CompareUnits) else item.kind)
        if got != kind:
            raise MaterialExhausted(f"step {self.layer_cursor}: wanted {kind}, next item is {got}")
        if elements is not None:
            size = item.count if isinstance(item, CompareUnits) else (
                item.r.size if isinstance(item, TruncationPair) else None)
            if size is not None and size != elements:
                raise MaterialExhausted(
                    f"step {self.layer_cursor}: {kind} material holds {size} elements, need {elements}")
        self.item_cursor += 1
        return item

    @property
    def exhausted(self) -> bool:
        return (self.layer_cursor == len(self.layers) - 1
                and self.item_cursor == len(self.layers[-1])) or not self.layers

    def remaining(self) -> int:
        """Unconsumed items after the cursor."""
        if self.layer_cursor < 0:
            return sum(len(x) for x in self.layers)
        rest = len(self.layers[self.layer_cursor]) - self.item_cursor
        return rest + sum(len(x) for x in self.layers[self.layer_cursor + 1:])

    def counts(self) -> dict:
        out = {"matmul": 0, "mul": 0, "trunc": 0, "cmp": 0}
        for items in self.layers:
            for it in items:
                if isinstance(it, TruncationPair):
                    out["trunc"] += it.r.size
                elif isinstance(it, CompareUnits):
                    out["cmp"] += it.count
                elif it.kind == "matmul":
                    out["matmul"] += it.a.shape[0] * it.a.shape[1] * it.b.shape[1]
                else:
                    out["mul"] += it.a.size
        return out


def generate_material(plan: PreprocessingPlan, seed=None,
                      session: str = "") -> tuple[CorrelatedMaterial, CorrelatedMaterial]:
    """All layers for both parties; deterministic given ``seed``."""
    if seed is None:
        seed = Rng().bytes(16)
    l0, l1 = [], []
    for i in range(len(plan.layers)):
        a, b = generate_layer(plan, i, seed)
        l0.append(a)
        l1.append(b)
    return CorrelatedMaterial(0, l0, session), CorrelatedMaterial(1, l1, session)


def plan_counts(plan: PreprocessingPlan) -> dict:
    """Element counts per kind, in the same units as ``CorrelatedMaterial.counts``."""
    out = {"matmul": 0, "mul": 0, "trunc": 0, "cmp": 0}
    for layer in plan.layers:
        for n in layer.needs:
            out[n.kind] += n.elements
    return out
