"""JSON model files with bit-exact parameter storage.

Stored words are written as hexadecimal strings and binarizer thresholds
with ``float.hex`` so a load/save round trip reproduces every bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .formats import AffineQuantLayerParams, BitWord, format_from_tag
from .netsim import DenseLayer, LutLayer, LutNetwork, MLPNetwork, Thermometer

SCHEMA = "flipsim-model/1"


class ModelFormatError(ValueError):
    """The file is not a valid model description."""


def _hex(codes) -> list:
    return [format(int(c), "x") for c in np.asarray(codes, dtype=np.uint64).ravel()]


def _unhex(items, shape) -> np.ndarray:
    return np.array([int(s, 16) for s in items], dtype=np.uint64).reshape(shape)


def to_dict(net) -> dict:
    if isinstance(net, MLPNetwork):
        layers = []
        for layer in net.layers:
            entry = {
                "format": layer.fmt.tag,
                "activation": layer.activation,
                "tau": float(layer.tau).hex(),
                "bias": bool(layer.bias),
                "shape": list(layer.codes.shape),
                "codes": _hex(layer.codes),
                "mask": None if layer.mask is None else
                "".join("1" if m else "0" for m in layer.mask.ravel()),
                "affine": None,
            }
            if layer.aq is not None:
                aq = layer.aq
                entry["affine"] = {
                    "scale_format": aq.scale_format.tag,
                    "scale": format(aq.scale_word.code, "x"),
                    "zero_point_format": aq.zero_point_format.tag,
                    "zero_point": format(aq.zero_point_word.code, "x"),
                }
            layers.append(entry)
        return {"schema": SCHEMA, "kind": "mlp", "n_classes": net.n_classes, "layers": layers}
    if isinstance(net, LutNetwork):
        return {
            "schema": SCHEMA,
            "kind": "lut",
            "n_classes": net.n_classes,
            "thresholds": [[float(t).hex() for t in row] for row in net.binarizer.thresholds],
            "layers": [{"k": layer.k, "tables": _hex(layer.tables),
                        "connections": layer.connections.tolist()} for layer in net.layers],
            "head": net.head.tolist(),
        }
    raise TypeError(f"cannot serialize {type(net).__name__}")


def from_dict(doc: dict):
    try:
        if doc.get("schema") != SCHEMA:
            raise ModelFormatError(f"unsupported model schema {doc.get('schema')!r}")
        kind = doc["kind"]
        if kind == "mlp":
            layers = []
            for e in doc["layers"]:
                fmt = format_from_tag(e["format"])
                shape = tuple(e["shape"])
                mask = None
                if e["mask"] is not None:
                    mask = np.array([c == "1" for c in e["mask"]]).reshape(shape)
                aq = None
                if e["affine"] is not None:
                    a = e["affine"]
                    sfmt = format_from_tag(a["scale_format"])
                    zfmt = format_from_tag(a["zero_point_format"])
                    aq = AffineQuantLayerParams(BitWord(int(a["scale"], 16), sfmt.width), sfmt,
                                                BitWord(int(a["zero_point"], 16), zfmt.width),
                                                zfmt, fmt)
                layers.append(DenseLayer(_unhex(e["codes"], shape), fmt, e["activation"],
                                         float.fromhex(e["tau"]), e["bias"], aq, mask))
            return MLPNetwork(layers, int(doc["n_classes"]))
        if kind == "lut":
            thresholds = np.array([[float.fromhex(t) for t in row] for row in doc["thresholds"]])
            layers = [LutLayer(_unhex(e["tables"], (len(e["tables"]),)),
                               np.array(e["connections"], dtype=np.int64), int(e["k"]))
                      for e in doc["layers"]]
            return LutNetwork(Thermometer(thresholds), layers, np.array(doc["head"]),
                              int(doc["n_classes"]))
        raise ModelFormatError(f"unknown model kind {kind!r}")
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model description: {exc}") from None


def save_model(net, path) -> None:
    Path(path).write_text(json.dumps(to_dict(net), indent=1, sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not JSON ({exc})") from None
    return from_dict(doc)
