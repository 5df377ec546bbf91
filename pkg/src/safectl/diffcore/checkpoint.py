"""Structured-text checkpoints with bit-exact float round-trips.

Documents are JSON with every float array encoded as a whitespace-separated
string of 17-significant-digit decimals (row-major), which uniquely
round-trips IEEE float64.  Every document carries ``format_version``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mlp import Mlp
from .optim import AdamState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint document."""


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": " ".join(format(v, ".17g") for v in a.reshape(-1)),
    }


def decode_array(d: dict) -> np.ndarray:
    data = d["data"]
    flat = np.array([float(tok) for tok in data.split()], dtype=np.float64) \
        if data else np.zeros(0)
    return flat.reshape(d["shape"])


def mlp_to_doc(net: Mlp) -> dict:
    doc = {
        "layer_shapes": [list(s) for s in net.layer_shapes],
        "activation": net.activation,
        "output_activation": net.output_activation,
        "params": encode_array(net.params),
    }
    if net.input_scale is not None:
        doc["input_scale"] = encode_array(net.input_scale)
    if net.output_scale is not None:
        doc["output_scale"] = encode_array(net.output_scale)
    return doc


def mlp_from_doc(doc: dict) -> Mlp:
    return Mlp(
        layer_shapes=[tuple(s) for s in doc["layer_shapes"]],
        params=decode_array(doc["params"]),
        activation=doc["activation"],
        output_activation=doc["output_activation"],
        input_scale=decode_array(doc["input_scale"]) if "input_scale" in doc else None,
        output_scale=decode_array(doc["output_scale"]) if "output_scale" in doc else None,
    )


def adam_to_doc(st: AdamState) -> dict:
    return {
        "m": encode_array(st.m),
        "v": encode_array(st.v),
        "t": st.t,
        "lr": st.lr,
        "beta1": st.beta1,
        "beta2": st.beta2,
        "eps": st.eps,
    }


def adam_from_doc(doc: dict) -> AdamState:
    return AdamState(m=decode_array(doc["m"]), v=decode_array(doc["v"]),
                     t=int(doc["t"]), lr=float(doc["lr"]),
                     beta1=float(doc["beta1"]), beta2=float(doc["beta2"]),
                     eps=float(doc["eps"]))


def write_doc(path, kind: str, payload: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": kind}
    doc.update(payload)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_doc(path, expect_kind: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    ver = doc.get("format_version")
    if ver != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {ver!r}")
    if expect_kind is not None and doc.get("kind") != expect_kind:
        raise CheckpointError(
            f"expected kind {expect_kind!r}, found {doc.get('kind')!r}")
    return doc
