"""Model files: a versioned little-endian binary format and a JSON twin.

Binary layout (all integers little-endian)::

    magic      4 bytes  b"NBTS"
    version    u16
    tag        u16 length + UTF-8 method tag
    n_layers   u32, then n_layers + 1 u32 layer sizes
    acts       n_layers u8 activation codes, then one u8 output-head code
    S          u32 (width of the final feature layer)
    seed       u8 present flag + u64 assignment seed
    p          f64 dropout probability (0 when unused)
    members    u32 (0 for a single network)
    params     float64, layer by layer: weight (row-major, members first) then bias

Binary round trips are bit-exact. JSON stores the same fields with floats
written by ``repr``, which also round-trips for finite values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import nn
from .baselines import METHOD_TAGS, DropoutPredictor, EnsembleOfNets
from .errors import DataError
from .generator import GeneratorNet

MAGIC = b"NBTS"
FORMAT_VERSION = 1
ACT_CODES = {name: i for i, name in enumerate(nn.ACTIVATIONS)}
HEAD_CODES = {name: i for i, name in enumerate(nn.OUTPUT_HEADS)}
GENERATOR_TAG = "neuboots"
DROPOUT_TAG = "mc_dropout"

Model = GeneratorNet | EnsembleOfNets | DropoutPredictor


def _describe(model: Model):
    if isinstance(model, GeneratorNet):
        return model.net, GENERATOR_TAG, model.assignment_seed, 0.0
    if isinstance(model, EnsembleOfNets):
        return model.stacked, model.method_tag, None, 0.0
    if isinstance(model, DropoutPredictor):
        return model.net, DROPOUT_TAG, None, float(model.p)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _build(net: nn.DenseNet, tag: str, seed, p) -> Model:
    if tag == GENERATOR_TAG:
        return GeneratorNet(net, seed)
    if tag == DROPOUT_TAG:
        return DropoutPredictor(net, p)
    if tag in METHOD_TAGS:
        return EnsembleOfNets(net, tag)
    raise DataError(f"unknown method tag {tag!r} in model file")


def dumps(model: Model) -> bytes:
    net, tag, seed, p = _describe(model)
    members = net.members
    if len(members) > 1:
        raise ValueError("only one member axis can be serialized")
    tag_b = tag.encode("utf-8")
    sizes = net.sizes
    out = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(tag_b)), tag_b,
           struct.pack(f"<I{len(sizes)}I", len(sizes) - 1, *sizes),
           bytes(ACT_CODES[a] for a in net.activations), bytes([HEAD_CODES[net.output]]),
           struct.pack("<IBQdI", sizes[-2], seed is not None, seed or 0, p, members[0] if members else 0)]
    for w, b in zip(net.weights, net.biases):
        out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError(f"model file truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Model:
    r = _Reader(memoryview(buf))
    if bytes(r.take(4)) != MAGIC:
        raise DataError("not a model file (bad magic bytes)")
    version, tag_len = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {version} (this build reads {FORMAT_VERSION})")
    tag = bytes(r.take(tag_len)).decode("utf-8")
    (n_layers,) = r.unpack("<I")
    sizes = r.unpack(f"<{n_layers + 1}I")
    acts_inv = {v: k for k, v in ACT_CODES.items()}
    heads_inv = {v: k for k, v in HEAD_CODES.items()}
    try:
        acts = tuple(acts_inv[c] for c in bytes(r.take(n_layers)))
        head = heads_inv[bytes(r.take(1))[0]]
    except KeyError as exc:
        raise DataError(f"unknown activation or head code {exc}") from None
    S, has_seed, seed, p, n_members = r.unpack("<IBQdI")
    if S != sizes[-2]:
        raise DataError(f"stored S={S} disagrees with the feature width {sizes[-2]}")
    lead = (n_members,) if n_members else ()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape, into in (((*lead, fan_out, fan_in), weights), ((*lead, fan_out), biases)):
            count = int(np.prod(shape))
            into.append(np.frombuffer(bytes(r.take(8 * count)), dtype="<f8").astype(float).reshape(shape))
    if r.pos != len(buf):
        raise DataError(f"{len(buf) - r.pos} trailing bytes after the parameters")
    net = nn.DenseNet(weights, biases, acts, head)
    return _build(net, tag, seed if has_seed else None, p)


def to_json(model: Model) -> str:
    net, tag, seed, p = _describe(model)
    doc = {
        "format": "neuboots-model",
        "version": FORMAT_VERSION,
        "method_tag": tag,
        "sizes": net.sizes,
        "activations": list(net.activations),
        "output": net.output,
        "S": net.sizes[-2],
        "assignment_seed": seed,
        "dropout_p": p,
        "members": list(net.members),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    return json.dumps(doc)


def from_json(text: str) -> Model:
    try:
        doc = json.loads(text)
        if doc.get("format") != "neuboots-model":
            raise DataError("JSON document is not a neuboots model")
        if doc["version"] != FORMAT_VERSION:
            raise DataError(f"unsupported model format version {doc['version']}")
        net = nn.DenseNet([np.array(w, dtype=float) for w in doc["weights"]],
                          [np.array(b, dtype=float) for b in doc["biases"]],
                          tuple(doc["activations"]), doc["output"])
        return _build(net, doc["method_tag"], doc["assignment_seed"], doc["dropout_p"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed model JSON: {exc}") from exc


def save_model(path, model: Model, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(dumps(model))
    elif fmt == "json":
        path.write_text(to_json(model), encoding="utf-8")
    else:
        raise ValueError(f"format must be 'binary' or 'json', got {fmt!r}")


def load_model(path) -> Model:
    """Load either format; the magic bytes decide which."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    if raw[:4] == MAGIC:
        return loads(raw)
    try:
        return from_json(raw.decode("utf-8"))
    except UnicodeDecodeError:
        raise DataError(f"{path} is neither a binary nor a JSON model file") from None
