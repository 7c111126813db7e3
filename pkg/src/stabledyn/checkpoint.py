"""Binary checkpoint container shared by every model kind.

Layout: an ASCII manifest (one ``record`` line per array with name, shape,
byte offset and element count) terminated by ``end``, followed by the raw
little-endian float64 payload.  Round trips are bit-exact.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

__all__ = ["CheckpointError", "KINDS", "save", "load", "save_model", "load_model"]

_MAGIC = "stabledyn-checkpoint v1"
KINDS = ("shnd", "phs", "sd-mlp", "sd-icnn")


class CheckpointError(Exception):
    pass


def _shape_token(shape) -> str:
    return "-" if shape == () else "x".join(str(s) for s in shape)


def _parse_shape(token: str):
    if token == "-":
        return ()
    return tuple(int(s) for s in token.split("x"))


def save(path, kind: str, records: "OrderedDict[str, np.ndarray]"):
    if kind not in KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    lines = [_MAGIC, f"kind {kind}"]
    payload = bytearray()
    for name, value in records.items():
        if " " in name:
            raise CheckpointError(f"record name {name!r} contains a space")
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        lines.append(f"record {name} {_shape_token(arr.shape)} "
                     f"{len(payload)} {arr.size}")
        payload.extend(arr.astype("<f8", copy=False).tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(bytes(payload))


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(_MAGIC.encode("ascii")):
        raise CheckpointError(f"{path} is not a {_MAGIC} file")
    header = blob[:cut].decode("ascii").splitlines()
    payload = blob[cut + len(marker):]
    kind = None
    records: OrderedDict[str, np.ndarray] = OrderedDict()
    for line in header[1:]:
        fields = line.split(" ")
        if fields[0] == "kind":
            kind = fields[1]
        elif fields[0] == "record":
            _, name, token, offset, count = fields
            shape = _parse_shape(token)
            start = int(offset)
            n = int(count)
            arr = np.frombuffer(payload, dtype="<f8", count=n,
                                offset=start).astype(np.float64).reshape(shape)
            records[name] = arr
        else:
            raise CheckpointError(f"unrecognized manifest line {line!r}")
    if kind not in KINDS:
        raise CheckpointError(f"manifest is missing a valid kind (got {kind!r})")
    return kind, records


def save_model(path, model):
    save(path, model.kind, model.to_records())


def load_model(path):
    kind, records = load(path)
    # imported here so the container stays importable from the model modules
    from .baselines import ProjectedField
    from .dynamics import HamiltonianField, PortHamiltonianField

    if kind == "shnd":
        return HamiltonianField.from_records(records)
    if kind == "phs":
        return PortHamiltonianField.from_records(records)
    return ProjectedField.from_records(records, kind)
