import dataclasses

import numpy as np
import pytest

from ppids import model as M
from ppids.engine import infer_plain_float
from ppids.errors import ChecksumError, FormatError, MissingStats, SpecError, UnsupportedLayer


def test_desk_spec_shapes():
    trace = M.shape_check(M.make_desk_spec())
    assert trace[0][1] == (3, 32, 32) and trace[-1][2] == (8,)


def test_resnet50_structure():
    spec = M.make_resnet50_spec()
    assert sum(isinstance(x, M.Bottleneck) for x in spec.layers) == 3 + 4 + 6 + 3
    assert M.shape_check(spec)[-1][2] == (8,)
    shapes = M.param_shapes(spec)
    trainable = sum(int(np.prod(s)) for k, s in shapes.items()
                    if not k.endswith((".mean", ".var")))
    # torchvision resnet50 has 25,557,032 parameters with a 1000-way head
    assert trainable == 25_557_032 - (2048 * 1000 + 1000) + (2048 * 8 + 8)


def test_resnet50_input_size_variant():
    assert M.shape_check(M.make_resnet50_spec(input_size=64))[-1][2] == (8,)


def test_three_class_variant():
    assert M.shape_check(M.make_desk_spec(3))[-1][2] == (3,)


def _desk_layers():
    return list(M.make_desk_spec().layers)


def _with(i, layer):
    layers = _desk_layers()
    layers[i] = layer
    return M.ModelSpec((3, 32, 32), tuple(layers))


BAD_SPECS = [
    M.ModelSpec((32, 32), tuple(_desk_layers())),
    M.ModelSpec((0, 32, 32), tuple(_desk_layers())),
    _with(0, M.Conv2d("conv1", 8, 40)),
    _with(0, M.Conv2d("conv1", 8, 0)),
    _with(0, M.Conv2d("conv1", 8, 3, stride=0)),
    _with(0, M.Conv2d("conv1", 8, 3, pad=-1)),
    _with(6, M.Dense("fc", 15, 8)),
    M.ModelSpec((3, 32, 32), tuple(_desk_layers()[:5] + [M.Dense("fc", 16, 8)])),
    M.ModelSpec((3, 32, 32), tuple(_desk_layers()), class_count=10),
    _with(3, M.Conv2d("conv1", 16, 3)),
    _with(2, M.MaxPool(64)),
    _with(2, M.MaxPool(2, 2, pad=2)),
    _with(2, M.AvgPool(40)),
    _with(2, M.Residual((M.Conv2d("r", 4, 1),))),
    _with(2, M.Bottleneck("b", 16, 4, 8)),
    M.ModelSpec((3, 32, 32), tuple(_desk_layers()[:6] + [M.Conv2d("x", 8, 1)])),
    dataclasses.replace(M.make_desk_spec(), normalize=((0.5, 0.5), (1.0, 1.0))),
    dataclasses.replace(M.make_desk_spec(), normalize=((0, 0, 0), (1.0, 0.0, 1.0))),
    _with(6, M.Dense("fc", 16, 0)),
    M.ModelSpec((3, 5, 5), tuple(_desk_layers())),
]


@pytest.mark.parametrize("spec", BAD_SPECS, ids=[f"mutant{i}" for i in range(len(BAD_SPECS))])
def test_invalid_specs_rejected(spec):
    with pytest.raises(SpecError):
        M.shape_check(spec)


def test_twenty_mutants():
    assert len(BAD_SPECS) == 20


def test_spec_json_roundtrip_and_unknown_type():
    spec = M.make_resnet50_spec()
    assert M.ModelSpec.from_text(spec.canonical()) == spec
    d = M.make_desk_spec().to_dict()
    d["layers"][1] = {"type": "softmax"}
    with pytest.raises(UnsupportedLayer):
        M.ModelSpec.from_dict(d)
    with pytest.raises(SpecError):
        M.ModelSpec.from_text("{not json")
    with pytest.raises(SpecError):
        M.ModelSpec.from_dict({"layers": []})


def test_synthetic_weights_deterministic_and_scaled():
    spec = M.make_desk_spec()
    a, b = M.gen_synthetic_weights(spec, 3), M.gen_synthetic_weights(spec, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    big = M.gen_synthetic_weights(spec, 3, scale=1e3)
    assert np.allclose(big["conv1.weight"], 1e3 * a["conv1.weight"])
    M.check_weights(spec, a)


def _bn_spec():
    return M.ModelSpec((2, 6, 6), (M.Conv2d("c", 4, 3, pad=1), M.BatchNorm("bn"), M.ReLU(),
                                   M.Bottleneck("blk", 4, 2, 6, 2), M.GlobalAvgPool(),
                                   M.Dense("fc", 6, 3)), 3)


def test_fold_identity_batchnorm():
    spec = M.ModelSpec((2, 4, 4), (M.BatchNorm("bn", eps=0.0), M.GlobalAvgPool(),
                                   M.Dense("fc", 2, 2)), 2)
    w = {"bn.gamma": np.ones(2), "bn.beta": np.zeros(2), "bn.mean": np.zeros(2),
         "bn.var": np.ones(2), "fc.weight": np.eye(2), "fc.bias": np.zeros(2)}
    fs, fw = M.fold_batchnorm(spec, w)
    assert isinstance(fs.layers[0], M.Affine)
    assert np.array_equal(fw["bn.scale"], np.ones(2)) and np.array_equal(fw["bn.shift"], np.zeros(2))


def test_fold_constant_input_formula():
    g, b, m, v, eps, c = 1.7, -0.3, 0.4, 2.5, 1e-5, 0.9
    spec = M.ModelSpec((1, 3, 3), (M.BatchNorm("bn", eps), M.GlobalAvgPool(), M.Dense("fc", 1, 1)), 1)
    w = {"bn.gamma": np.array([g]), "bn.beta": np.array([b]), "bn.mean": np.array([m]),
         "bn.var": np.array([v]), "fc.weight": np.ones((1, 1)), "fc.bias": np.zeros(1)}
    want = g * (c - m) / np.sqrt(v + eps) + b
    x = np.full((1, 1, 3, 3), c)
    fs, fw = M.fold_batchnorm(spec, w)
    assert np.isclose(infer_plain_float(fs, fw, x)[0, 0], want, rtol=1e-12)
    assert np.isclose(infer_plain_float(spec, w, x)[0, 0], want, rtol=1e-12)


def test_fold_idempotent_and_preserves_outputs():
    spec = _bn_spec()
    w = M.gen_synthetic_weights(spec, 4)
    fs, fw = M.fold_batchnorm(spec, w)
    fs2, fw2 = M.fold_batchnorm(fs, fw)
    assert fs2 == fs and fw2.keys() == fw.keys()
    assert not any(isinstance(x, M.BatchNorm) for x in M.iter_primitive(fs.layers))
    x = np.random.default_rng(0).normal(size=(5, 2, 6, 6))
    a, b = infer_plain_float(spec, w, x), infer_plain_float(fs, fw, x)
    assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(a))


def test_missing_statistics():
    spec = _bn_spec()
    w = M.gen_synthetic_weights(spec, 4)
    del w["bn.var"]
    with pytest.raises(MissingStats):
        M.fold_batchnorm(spec, w)
    with pytest.raises(MissingStats):
        M.check_weights(spec, w)


def test_model_file_roundtrip(tmp_path):
    spec = _bn_spec()
    model = M.Model(spec, M.gen_synthetic_weights(spec, 1))
    path = tmp_path / "m.sinf"
    M.save_model(model, path)
    back = M.load_model(path)
    assert back.spec == spec and back.to_bytes() == path.read_bytes()
    assert back.digest() == model.digest()


def test_model_file_corruption(tmp_path):
    blob = bytearray(M.Model(M.make_desk_spec(), M.gen_synthetic_weights(M.make_desk_spec())).to_bytes())
    blob[200] ^= 1
    with pytest.raises(ChecksumError):
        M.Model.from_bytes(bytes(blob))
    with pytest.raises(FormatError):
        M.Model.from_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(FormatError):
        M.Model.from_bytes(b"SINF")
