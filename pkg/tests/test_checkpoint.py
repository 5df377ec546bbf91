import numpy as np
import pytest

from safectl.diffcore import init_mlp, adam_init
from safectl.diffcore.checkpoint import (
    CheckpointError, adam_from_doc, adam_to_doc, decode_array, encode_array,
    mlp_from_doc, mlp_to_doc, read_doc, write_doc,
)


def test_array_roundtrip_is_bit_exact():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(17, 3)) * np.exp(rng.normal(size=(17, 3)) * 20)
    b = decode_array(encode_array(a))
    assert a.shape == b.shape
    assert np.array_equal(a, b)


def test_mlp_document_roundtrip_through_file(tmp_path):
    rng = np.random.default_rng(1)
    net = init_mlp([7, 32, 32, 2], rng, activation="relu",
                   output_activation="tanh",
                   input_scale=np.full(7, 0.125), output_scale=[2.0, 0.5],
                   out_bias=0.1)
    path = tmp_path / "net.json"
    write_doc(path, "mlp", {"net": mlp_to_doc(net)})
    doc = read_doc(path, expect_kind="mlp")
    back = mlp_from_doc(doc["net"])
    assert back.layer_shapes == net.layer_shapes
    assert back.activation == net.activation
    assert back.output_activation == net.output_activation
    assert np.array_equal(back.params, net.params)
    assert np.array_equal(back.input_scale, net.input_scale)
    assert np.array_equal(back.output_scale, net.output_scale)


def test_adam_state_roundtrip():
    st = adam_init(5, lr=3e-4)
    st.m += 0.123456789123456789
    st.v += 1e-300
    st.t = 7
    back = adam_from_doc(adam_to_doc(st))
    assert back.t == 7 and back.lr == st.lr
    assert np.array_equal(back.m, st.m) and np.array_equal(back.v, st.v)


def test_version_and_kind_are_checked(tmp_path):
    path = tmp_path / "doc.json"
    write_doc(path, "mlp", {})
    with pytest.raises(CheckpointError):
        read_doc(path, expect_kind="other")
    path.write_text('{"format_version": 99, "kind": "mlp"}')
    with pytest.raises(CheckpointError):
        read_doc(path)
