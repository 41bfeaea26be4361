"""Binary cloud/label files and JSON box/params/report documents.

Binary layouts (all little-endian)::

    cloud  : b"VINP" | u32 N | N x (f32 x, f32 y, f32 z, f32 intensity)          8 + 16N bytes
    labels : b"VINL" | u32 N | N x (u16 class_id, f32 score, u32 instance_id)    8 + 10N bytes

``class_id == 0xFFFF`` marks an ignored point. Text documents are JSON; floats
are written with ``repr`` which round-trips float64 exactly.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .head import HeadParams
from .types import IGNORE, BoundingBox7, PointCloud

PathLike = Union[str, os.PathLike]

CLOUD_MAGIC = b"VINP"
LABEL_MAGIC = b"VINL"
CLOUD_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
LABEL_DTYPE = np.dtype([("class_id", "<u2"), ("score", "<f4"), ("instance_id", "<u4")])
assert CLOUD_DTYPE.itemsize == 16 and LABEL_DTYPE.itemsize == 10


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _check_header(buf: bytes, magic: bytes, record: int) -> int:
    if len(buf) < 4:
        raise FormatError("truncated header", len(buf))
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    (n,) = struct.unpack_from("<I", buf, 4)
    expected = 8 + record * n
    if len(buf) < expected:
        raise FormatError(f"truncated payload: header says {n} records, need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"count mismatch: {len(buf) - expected} trailing bytes after {n} records", expected)
    return n


def cloud_to_bytes(cloud: PointCloud) -> bytes:
    rec = np.empty(len(cloud), dtype=CLOUD_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["intensity"] = cloud.intensity
    return CLOUD_MAGIC + struct.pack("<I", len(cloud)) + rec.tobytes()


def cloud_from_bytes(buf: bytes) -> PointCloud:
    n = _check_header(buf, CLOUD_MAGIC, CLOUD_DTYPE.itemsize)
    rec = np.frombuffer(buf, dtype=CLOUD_DTYPE, count=n, offset=8)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    return PointCloud(xyz, rec["intensity"].copy())


def labels_to_bytes(sem_label, sem_score=None, instance=None) -> bytes:
    sem_label = np.asarray(sem_label).reshape(-1)
    n = len(sem_label)
    if np.any((sem_label < 0) | (sem_label > IGNORE)):
        raise ValueError("class ids must fit in u16")
    rec = np.empty(n, dtype=LABEL_DTYPE)
    rec["class_id"] = sem_label
    rec["score"] = 0.0 if sem_score is None else np.asarray(sem_score)
    rec["instance_id"] = 0 if instance is None else np.asarray(instance)
    return LABEL_MAGIC + struct.pack("<I", n) + rec.tobytes()


def labels_from_bytes(buf: bytes):
    """Returns ``(class_id int64, score float64, instance int64)`` arrays."""
    n = _check_header(buf, LABEL_MAGIC, LABEL_DTYPE.itemsize)
    rec = np.frombuffer(buf, dtype=LABEL_DTYPE, count=n, offset=8)
    return rec["class_id"].astype(np.int64), rec["score"].astype(np.float64), rec["instance_id"].astype(np.int64)


def write_cloud(path: PathLike, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud_to_bytes(cloud))


def read_cloud(path: PathLike) -> PointCloud:
    return cloud_from_bytes(Path(path).read_bytes())


def write_labels(path: PathLike, sem_label, sem_score=None, instance=None) -> None:
    Path(path).write_bytes(labels_to_bytes(sem_label, sem_score, instance))


def read_labels(path: PathLike):
    return labels_from_bytes(Path(path).read_bytes())


def attach_labels(cloud: PointCloud, labels) -> PointCloud:
    cls, score, inst = labels
    if len(cls) != len(cloud):
        raise FormatError(f"label file has {len(cls)} records, cloud has {len(cloud)} points", 4)
    out = cloud.copy()
    out.sem_label, out.sem_score, out.instance = cls, score, inst
    out.__post_init__()
    return out


# --- text documents ---------------------------------------------------------


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def dumps(doc) -> str:
    return json.dumps(_json_safe(doc), indent=1, allow_nan=False) + "\n"


def _loads(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid {what} document: {e.msg}", e.pos) from None


def boxes_to_doc(boxes: Sequence[BoundingBox7]) -> dict:
    fields = ["cx", "cy", "cz", "l", "w", "h", "yaw", "class_id", "score", "instance_id"]
    rows = []
    for b in boxes:
        rows.append([float(getattr(b, f)) if i < 7 or f == "score" else int(getattr(b, f)) for i, f in enumerate(fields)])
    return {"format": "vin-boxes", "fields": fields, "boxes": rows}


def boxes_from_doc(doc) -> list[BoundingBox7]:
    if not isinstance(doc, dict) or doc.get("format") != "vin-boxes":
        raise FormatError("not a box document", 0)
    out = []
    for i, row in enumerate(doc.get("boxes", [])):
        try:
            out.append(BoundingBox7.from_array(row))
        except (TypeError, ValueError) as e:
            raise FormatError(f"box {i}: {e}", 0) from None
    return out


def write_boxes(path: PathLike, boxes: Sequence[BoundingBox7]) -> None:
    Path(path).write_text(dumps(boxes_to_doc(boxes)))


def read_boxes(path: PathLike) -> list[BoundingBox7]:
    return boxes_from_doc(_loads(Path(path).read_text(), "box"))


def params_to_doc(params: HeadParams) -> dict:
    layers = []
    for w, b in zip(params.weights, params.biases):
        layers.append({"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()})
    return {"format": "vin-params", "layer_sizes": params.layer_sizes, "layers": layers}


def params_from_doc(doc) -> HeadParams:
    if not isinstance(doc, dict) or doc.get("format") != "vin-params":
        raise FormatError("not a params document", 0)
    ws, bs = [], []
    for i, layer in enumerate(doc["layers"]):
        shape = tuple(layer["shape"])
        w = np.asarray(layer["weight"], dtype=np.float64)
        if len(shape) != 2 or w.size != shape[0] * shape[1] or len(layer["bias"]) != shape[1]:
            raise FormatError(f"layer {i}: weight/bias sizes disagree with shape {shape}", 0)
        ws.append(w.reshape(shape))
        bs.append(np.asarray(layer["bias"], dtype=np.float64))
    return HeadParams(ws, bs)


def write_params(path: PathLike, params: HeadParams) -> None:
    Path(path).write_text(dumps(params_to_doc(params)))


def read_params(path: PathLike) -> HeadParams:
    return params_from_doc(_loads(Path(path).read_text(), "params"))


def report_to_doc(report) -> dict:
    return {
        "format": "vin-report",
        "aggregate": report.aggregates(),
        "per_class": report.rows(),
        "confusion": None if report.confusion is None else report.confusion.tolist(),
    }


def write_report(path: PathLike, report) -> None:
    Path(path).write_text(dumps(report_to_doc(report)))


def read_report(path: PathLike) -> dict:
    doc = _loads(Path(path).read_text(), "report")
    if not isinstance(doc, dict) or doc.get("format") != "vin-report":
        raise FormatError("not a report document", 0)
    return doc


def report_rows_csv(doc: dict) -> str:
    """Per-class metric rows as comma-separated text (header included)."""
    cols = ["class_id", "name", "kind", "iou", "pq", "sq", "rq", "tp", "fp", "fn"]
    lines = [",".join(cols)]
    for row in doc["per_class"]:
        lines.append(",".join("" if row[c] is None else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
