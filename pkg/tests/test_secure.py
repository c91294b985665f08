import numpy as np
import pytest

from ppids import model as M
from ppids.dealer import PlanBackend, PreprocessingPlan, generate_material, plan_preprocessing
from ppids.engine import Driver, FixedBackend, encode_input, infer_plain_fixed, quantize_weights
from ppids.errors import MaterialExhausted
from ppids.protocol.transport import run_pair
from ppids.rand import Rng
from ppids.ring import FixedPointCodec, decode, encode
from ppids.secure import SecureBackend, SecureSession, secure_infer_local, share_weights
from ppids.sharing import ShareTensor, reconstruct, share

CODEC = FixedPointCodec()


def secure_layers(layers, x, weights, codec=CODEC, seed=0):
    """Run ``layers`` securely on float ``x``; returns (secure, oracle, rounds, materials)."""
    ring = codec.ring
    qx = np.asarray(encode(np.asarray(x, np.float64), codec), ring.dtype)
    q = quantize_weights(weights, codec)
    be = PlanBackend(codec, batch=qx.shape[0])
    Driver(be).run_layers(layers, tuple(qx.shape[1:]))
    plan = PreprocessingPlan(tuple(qx.shape[1:]), codec, be.layers)
    mats = generate_material(plan, seed)
    rng = Rng(seed + 1)
    xs = share(qx, rng, ring)
    ws = share_weights(q, rng, codec)

    def party(b):
        def run(opener):
            sess = SecureSession(b, codec, mats[b], opener)
            return Driver(SecureBackend(sess, ws[b])).run_layers(layers, xs[b]), sess.rounds
        return run

    (y0, r0), (y1, r1) = run_pair(party(0), party(1), ring)
    assert r0 == r1 == plan.rounds
    oracle = Driver(FixedBackend(q, codec)).run_layers(layers, qx)
    return reconstruct(y0, y1), oracle, r0, mats


def check(layers, x, weights, **kw):
    got, want, rounds, mats = secure_layers(layers, x, weights, **kw)
    assert np.array_equal(got, want)
    assert all(m.exhausted for m in mats)
    return decode(got, CODEC), rounds


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
    w = {"c.weight": np.eye(2).reshape(2, 2, 1, 1)}
    out, rounds = check([M.Conv2d("c", 2, 1, bias=False)], x, w)
    assert np.array_equal(out, decode(encode(x, CODEC), CODEC)) and rounds == 3


def test_conv_all_ones_on_constant_image():
    w = {"c.weight": np.ones((1, 1, 3, 3)), "c.bias": np.zeros(1)}
    out, _ = check([M.Conv2d("c", 1, 3, pad=1)], np.full((1, 1, 5, 5), 0.5), w)
    assert np.all(out[0, 0, 1:-1, 1:-1] == 4.5) and out[0, 0, 0, 0] == 2.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_random(stride, pad):
    g = np.random.default_rng(stride + pad)
    w = {"c.weight": g.normal(size=(3, 2, 3, 3)), "c.bias": g.normal(size=3)}
    check([M.Conv2d("c", 3, 3, stride, pad)], g.normal(size=(2, 2, 5, 5)), w)


def test_dense_cases():
    x = np.random.default_rng(1).normal(size=(3, 4))
    out, _ = check([M.Dense("d", 4, 4)], x, {"d.weight": np.eye(4), "d.bias": np.zeros(4)})
    assert np.array_equal(out, decode(encode(x, CODEC), CODEC))
    b = np.array([0.5, -1.25, 3.0])
    out, _ = check([M.Dense("d", 4, 3)], x, {"d.weight": np.zeros((4, 3)), "d.bias": b})
    assert np.array_equal(out, np.broadcast_to(b, (3, 3)))
    g = np.random.default_rng(2)
    check([M.Dense("d", 16, 8)], g.normal(size=(5, 16)),
          {"d.weight": g.normal(size=(16, 8)), "d.bias": g.normal(size=8)})


def test_relu_cases():
    out, rounds = check([M.ReLU()], np.array([[-3.5, 2.25, 0.0, -0.0001]]), {})
    assert out.tolist() == [[0.0, 2.25, 0.0, 0.0]] and rounds == 2
    x = np.random.default_rng(3).normal(scale=1e3, size=(1, 10 ** 4))
    x[0, :10] = 0.0
    check([M.ReLU()], x, {})


def test_maxpool_cases():
    out, _ = check([M.MaxPool(2)], np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), {})
    assert out[0, 0, 0, 0] == 4.0
    out, _ = check([M.MaxPool(2)], np.full((1, 1, 2, 2), -1.5), {})
    assert out[0, 0, 0, 0] == -1.5
    g = np.random.default_rng(4)
    check([M.MaxPool(2)], g.normal(size=(2, 3, 8, 8)), {})
    check([M.MaxPool(3, 2, 1)], g.normal(size=(1, 2, 8, 8)), {})


def test_average_pool_cases():
    out, _ = check([M.AvgPool(2)], np.full((1, 2, 4, 4), 1.2345), {})
    assert np.all(out == 1.2345)
    for p in (1, 2, 4, 8):
        codec = FixedPointCodec(10, p)
        got, want, _, _ = secure_layers([M.GlobalAvgPool()], np.array([[[[1.0, 3.0], [5.0, 7.0]]]]),
                                        {}, codec=codec)
        assert np.array_equal(got, want) and decode(got, codec)[0, 0] == 4.0
    out, _ = check([M.GlobalAvgPool()], np.zeros((1, 3, 3, 3)), {})
    assert not out.any()
    check([M.AvgPool(2)], np.random.default_rng(5).normal(size=(2, 2, 5, 5)), {})


def test_residual_cases():
    g = np.random.default_rng(6)
    zero = {"a.scale": np.zeros(2), "a.shift": np.zeros(2)}
    x = g.normal(size=(1, 2, 3, 3))
    out, _ = check([M.Residual((M.Affine("a"),))], x, zero)
    assert np.array_equal(out, decode(encode(x, CODEC), CODEC))
    neg = {"a.scale": -np.ones(2), "a.shift": np.zeros(2)}
    out, _ = check([M.Residual((M.Affine("a"),))], x, neg)
    assert not out.any()
    w = {"c.weight": g.normal(size=(2, 2, 3, 3)), "c.bias": g.normal(size=2),
         "s.scale": g.normal(size=2), "s.shift": g.normal(size=2)}
    check([M.Residual((M.Conv2d("c", 2, 3, 1, 1), M.ReLU()), (M.Affine("s"),))], x, w)


def test_affine_cases():
    x = np.random.default_rng(7).normal(size=(2, 3, 2, 2))
    out, _ = check([M.Affine("a")], x, {"a.scale": np.ones(3), "a.shift": np.zeros(3)})
    assert np.array_equal(out, decode(encode(x, CODEC), CODEC))
    shift = np.array([1.0, -2.0, 0.5])
    out, _ = check([M.Affine("a")], x, {"a.scale": np.zeros(3), "a.shift": shift})
    assert np.array_equal(out, np.broadcast_to(shift.reshape(1, 3, 1, 1), x.shape))
    g = np.random.default_rng(8)
    check([M.Affine("a")], x, {"a.scale": g.normal(size=3), "a.shift": g.normal(size=3)})


def test_desk_network_oracle_equivalence(desk):
    spec, w = desk
    q = quantize_weights(w, CODEC)
    for seed in range(3):
        qx = encode_input(spec, np.random.default_rng(seed).normal(size=(1, 3, 32, 32)), CODEC)
        got, rounds = secure_infer_local(spec, q, qx, CODEC, seed=seed)
        assert np.array_equal(got, infer_plain_fixed(spec, q, qx, CODEC))
        assert rounds == plan_preprocessing(spec).rounds == 19


def test_bottleneck_network_oracle_equivalence():
    spec = M.ModelSpec((3, 12, 12), (
        M.Conv2d("stem", 4, 3, 2, 1, bias=False), M.BatchNorm("bn"), M.ReLU(), M.MaxPool(3, 2, 1),
        M.Bottleneck("b1", 4, 2, 8, 1), M.Bottleneck("b2", 8, 2, 8, 1), M.AvgPool(2),
        M.GlobalAvgPool(), M.Dense("fc", 8, 8)))
    spec, w = M.fold_batchnorm(spec, M.gen_synthetic_weights(spec, 3))
    q = quantize_weights(w, CODEC)
    qx = encode_input(spec, np.random.default_rng(9).normal(size=(1, 3, 12, 12)), CODEC)
    got, rounds = secure_infer_local(spec, q, qx, CODEC, seed=4)
    assert np.array_equal(got, infer_plain_fixed(spec, q, qx, CODEC))
    assert rounds == plan_preprocessing(spec).rounds


def test_wrong_material_is_detected():
    x = np.ones((1, 4))
    be = PlanBackend(CODEC)
    Driver(be).run_layers([M.ReLU()], (4,))
    mats = generate_material(PreprocessingPlan((4,), CODEC, be.layers), 0)
    sess = SecureSession(0, CODEC, mats[0], None)
    q = quantize_weights({"d.weight": np.ones((4, 2)), "d.bias": np.zeros(2)}, CODEC)
    backend = SecureBackend(sess, {k: ShareTensor(0, v) for k, v in q.items()})
    with pytest.raises(MaterialExhausted):
        Driver(backend).run_layers([M.Dense("d", 4, 2)], ShareTensor(0, encode(x, CODEC)))
