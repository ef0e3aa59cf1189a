"""Bit-exact persistence: volume container, ECG CSV, checkpoints, manifests.

Volume container ``<name>.cvol.json`` + ``<name>.cvol.raw``: a JSON header
(schema cvol/1) and a little-endian blob, frame-major then z, y, x with x
fastest. Checkpoints ``<name>.ckpt.json`` + ``<name>.ckpt.raw`` hold JSON
metadata plus a float64 parameter blob. All writes are atomic
(write-temp-then-rename).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .ecg import LEAD_NAMES, EcgRecord
from .errors import FormatError, ManifestError, ShapeError
from .flowmatch import FlowModelConfig, VelocityNet
from .registration import DeformationSet, VelocityGrid
from .volgrid import DisplacementField, LabelVolume, Volume3D, Volume4D

CVOL_SCHEMA = "cvol/1"
CKPT_SCHEMA = "ckpt/1"

MANIFEST_COLUMNS = ("subject_id", "volume_path", "labels_path", "ecg_path", "category")


@dataclass
class LabelSequence:
    """A 4D label sequence: T LabelVolumes on a shared time grid."""

    labels: list
    frame_times: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ShapeError("LabelSequence needs T >= 2 frames")
        ref = self.labels[0]
        for lab in self.labels[1:]:
            if lab.dims != ref.dims or lab.spacing_mm != ref.spacing_mm:
                raise ShapeError("all label frames must share dims and spacing")
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if self.frame_times.shape != (len(self.labels),):
            raise ShapeError("frame_times length must equal frame count")


def _atomic_write_bytes(path: str, payload: bytes):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _atomic_write_text(path: str, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))


def _cvol_base(path: str) -> str:
    for suffix in (".cvol.json", ".cvol.raw", ".cvol"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _frame_bytes(arr: np.ndarray, dtype) -> bytes:
    # x-fastest serialization of an [x, y, z]-indexed array.
    return np.ascontiguousarray(arr.ravel(order="F").astype(dtype)).tobytes()


def write_volume(path: str, obj) -> str:
    """Write a Volume3D/Volume4D/LabelVolume/LabelSequence; returns the base path."""
    base = _cvol_base(path)
    if isinstance(obj, Volume3D):
        frames, times, dtype_tag = [obj], [0.0], "f32"
    elif isinstance(obj, Volume4D):
        frames, times, dtype_tag = obj.frames, obj.frame_times.tolist(), "f32"
    elif isinstance(obj, LabelVolume):
        frames, times, dtype_tag = [obj], [0.0], "u8"
    elif isinstance(obj, LabelSequence):
        frames, times, dtype_tag = obj.labels, obj.frame_times.tolist(), "u8"
    else:
        raise FormatError(f"unsupported volume object {type(obj).__name__}")

    first = frames[0]
    if dtype_tag == "f32":
        for k, f in enumerate(frames):
            if not np.isfinite(f.data).all():
                raise FormatError(f"non-finite values in frame {k} (field 'data')")
        payload = b"".join(_frame_bytes(f.data, "<f4") for f in frames)
    else:
        payload = b"".join(_frame_bytes(f.labels, "u1") for f in frames)

    header = {
        "schema": CVOL_SCHEMA,
        "dims": list(first.dims),
        "spacing_mm": list(first.spacing_mm),
        "dtype": dtype_tag,
        "frames": len(frames),
        "frame_times": [float(t) for t in times],
        "order": "x-fastest",
        "byte_order": "little",
    }
    _atomic_write_text(base + ".cvol.json", json.dumps(header, indent=1))
    _atomic_write_bytes(base + ".cvol.raw", payload)
    return base


def _require(header: dict, key: str):
    if key not in header:
        raise FormatError(f"header missing field '{key}'")
    return header[key]


def read_volume(path: str):
    """Read a cvol container; the return type follows the header.

    f32/frames=1 -> Volume3D; f32/frames>1 -> Volume4D; u8/frames=1 ->
    LabelVolume; u8/frames>1 -> LabelSequence.
    """
    base = _cvol_base(path)
    try:
        with open(base + ".cvol.json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON header: {exc}") from exc
    if _require(header, "schema") != CVOL_SCHEMA:
        raise FormatError(f"unknown schema '{header['schema']}' (field 'schema')")
    dims = tuple(int(d) for d in _require(header, "dims"))
    spacing = tuple(float(s) for s in _require(header, "spacing_mm"))
    dtype_tag = _require(header, "dtype")
    n_frames = int(_require(header, "frames"))
    times = [float(t) for t in _require(header, "frame_times")]
    if dtype_tag not in ("f32", "u8"):
        raise FormatError(f"unknown dtype '{dtype_tag}' (field 'dtype')")
    if len(times) != n_frames:
        raise FormatError("field 'frame_times' length does not match 'frames'")

    elem = 4 if dtype_tag == "f32" else 1
    expected = elem * int(np.prod(dims)) * n_frames
    with open(base + ".cvol.raw", "rb") as fh:
        blob = fh.read()
    if len(blob) != expected:
        raise FormatError(
            f"blob length mismatch: expected {expected} bytes, found {len(blob)}"
        )

    per_frame = int(np.prod(dims))
    np_dtype = np.dtype("<f4") if dtype_tag == "f32" else np.dtype("u1")
    flat = np.frombuffer(blob, dtype=np_dtype)
    frames = []
    for k in range(n_frames):
        arr = flat[k * per_frame : (k + 1) * per_frame].reshape(dims, order="F")
        if dtype_tag == "f32":
            if not np.isfinite(arr).all():
                raise FormatError(f"non-finite values in frame {k} (field 'data')")
            frames.append(Volume3D(dims, spacing, arr.copy()))
        else:
            frames.append(LabelVolume(dims, spacing, arr.copy()))

    if dtype_tag == "f32":
        if n_frames == 1:
            return frames[0]
        return Volume4D(frames, np.asarray(times))
    if n_frames == 1:
        return frames[0]
    return LabelSequence(frames, np.asarray(times))


# ---------------------------------------------------------------------------
# ECG CSV.


def write_ecg(path: str, rec: EcgRecord) -> str:
    lines = ["time_s," + ",".join(LEAD_NAMES)]
    dt = 1.0 / rec.sample_rate_hz
    for i in range(rec.n_samples):
        vals = ",".join("%.17g" % rec.leads[ch, i] for ch in range(len(LEAD_NAMES)))
        lines.append("%.17g,%s" % (i * dt, vals))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_ecg(path: str) -> EcgRecord:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty ECG file") from None
        rows = [row for row in reader if row]
    if not header or header[0] != "time_s":
        raise FormatError("first column must be 'time_s'")
    for lead in LEAD_NAMES:
        if lead not in header[1:]:
            raise FormatError(f"missing lead column '{lead}'")
    col = {name: header.index(name) for name in LEAD_NAMES}

    try:
        times = np.array([float(r[0]) for r in rows])
        leads = np.stack(
            [np.array([float(r[col[name]]) for r in rows]) for name in LEAD_NAMES]
        )
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed ECG row: {exc}") from exc
    if times.size < 2:
        raise FormatError("ECG must contain at least 2 samples")
    dt = times[1] - times[0]
    if dt <= 0:
        raise FormatError("time column must increase")
    expected = np.arange(times.size) * dt
    if np.abs(times - expected).max() > 1e-9:
        raise FormatError("irregular time grid (tolerance 1e-9 s)")
    return EcgRecord(sample_rate_hz=1.0 / dt, leads=leads)


# ---------------------------------------------------------------------------
# Checkpoints.


def _ckpt_base(path: str) -> str:
    for suffix in (".ckpt.json", ".ckpt.raw", ".ckpt"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def write_checkpoint(path: str, obj, extra_meta: dict = None) -> str:
    """Serialize a VelocityNet, VelocityGrid, or DeformationSet."""
    base = _ckpt_base(path)
    meta = {"schema": CKPT_SCHEMA}
    if extra_meta:
        meta["run"] = extra_meta
    if isinstance(obj, VelocityNet):
        params = [(n, p.detach().numpy()) for n, p in obj.named_parameters()]
        meta.update(
            kind="velocity_net",
            config=asdict(obj.config),
            params=[{"name": n, "shape": list(p.shape)} for n, p in params],
        )
        blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for _, p in params)
    elif isinstance(obj, VelocityGrid):
        meta.update(
            kind="velocity_grid",
            control_dims=list(obj.control_dims),
            stride=obj.stride,
        )
        blob = np.ascontiguousarray(obj.vectors, dtype="<f8").tobytes()
    elif isinstance(obj, DeformationSet):
        meta.update(
            kind="deformation_set",
            dims=list(obj.dims),
            spacing_mm=list(obj.spacing_mm),
            frame_times=obj.frame_times.tolist(),
        )
        blob = b"".join(
            np.ascontiguousarray(f.vectors, dtype="<f8").tobytes() for f in obj.fields
        )
    else:
        raise FormatError(f"unsupported checkpoint object {type(obj).__name__}")
    _atomic_write_text(base + ".ckpt.json", json.dumps(meta, indent=1))
    _atomic_write_bytes(base + ".ckpt.raw", blob)
    return base


def read_checkpoint(path: str):
    base = _ckpt_base(path)
    try:
        with open(base + ".ckpt.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON metadata: {exc}") from exc
    if _require(meta, "schema") != CKPT_SCHEMA:
        raise FormatError(f"unknown schema '{meta['schema']}' (field 'schema')")
    with open(base + ".ckpt.raw", "rb") as fh:
        blob = fh.read()
    kind = _require(meta, "kind")

    if kind == "velocity_net":
        config = FlowModelConfig(**meta["config"])
        net = VelocityNet(config)
        shapes = [(p["name"], tuple(p["shape"])) for p in meta["params"]]
        expected = sum(int(np.prod(s)) for _, s in shapes) * 8
        if len(blob) != expected:
            raise FormatError(
                f"blob length mismatch: expected {expected} bytes, found {len(blob)}"
            )
        flat = np.frombuffer(blob, dtype="<f8")
        offset = 0
        tensors = dict(net.named_parameters())
        with torch.no_grad():
            for name, shape in shapes:
                if name not in tensors or tuple(tensors[name].shape) != shape:
                    raise FormatError(f"parameter shape mismatch for '{name}'")
                count = int(np.prod(shape))
                tensors[name].copy_(
                    torch.from_numpy(flat[offset : offset + count].reshape(shape).copy())
                )
                offset += count
        return net

    if kind == "velocity_grid":
        control_dims = tuple(int(c) for c in meta["control_dims"])
        expected = int(np.prod(control_dims)) * 3 * 8
        if len(blob) != expected:
            raise FormatError(
                f"blob length mismatch: expected {expected} bytes, found {len(blob)}"
            )
        vectors = np.frombuffer(blob, dtype="<f8").reshape(control_dims + (3,))
        return VelocityGrid(control_dims, int(meta["stride"]), vectors.copy())

    if kind == "deformation_set":
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        times = np.asarray(meta["frame_times"], dtype=np.float64)
        per_field = int(np.prod(dims)) * 3
        expected = per_field * times.size * 8
        if len(blob) != expected:
            raise FormatError(
                f"blob length mismatch: expected {expected} bytes, found {len(blob)}"
            )
        flat = np.frombuffer(blob, dtype="<f8")
        fields = []
        for k in range(times.size):
            vec = flat[k * per_field : (k + 1) * per_field].reshape(dims + (3,))
            fields.append(DisplacementField(dims, spacing, vec.copy()))
        return DeformationSet(fields=fields, frame_times=times)

    raise FormatError(f"unknown checkpoint kind '{kind}' (field 'kind')")


# ---------------------------------------------------------------------------
# Cohort manifest.


@dataclass
class ManifestRow:
    subject_id: str
    volume_path: str
    labels_path: str
    ecg_path: str
    category: str
    spacing_mm: tuple = None  # optional override, e.g. "1.8x1.8x2.0"
    defs_path: str = None  # optional deformation checkpoint


def read_manifest(path: str) -> list:
    """Parse and validate a cohort manifest CSV; raise listing all offenders."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ManifestError("empty manifest")
        missing_cols = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
        if missing_cols:
            raise ManifestError(f"missing required columns: {missing_cols}")
        raw_rows = list(reader)

    rows = []
    problems = []
    seen = {}
    for i, raw in enumerate(raw_rows):
        sid = (raw.get("subject_id") or "").strip()
        if not sid:
            problems.append(f"row {i+1}: empty subject_id")
            continue
        seen.setdefault(sid, []).append(i + 1)
        spacing = None
        if raw.get("spacing_mm"):
            try:
                parts = [float(v) for v in raw["spacing_mm"].split("x")]
                if len(parts) != 3:
                    raise ValueError
                spacing = tuple(parts)
            except ValueError:
                problems.append(f"row {i+1}: bad spacing_mm '{raw['spacing_mm']}'")
        row = ManifestRow(
            subject_id=sid,
            volume_path=os.path.join(root, raw["volume_path"]),
            labels_path=os.path.join(root, raw["labels_path"]),
            ecg_path=os.path.join(root, raw["ecg_path"]),
            category=(raw.get("category") or "").strip(),
            spacing_mm=spacing,
            defs_path=os.path.join(root, raw["defs_path"]) if raw.get("defs_path") else None,
        )
        rows.append(row)

    duplicates = {sid: lines for sid, lines in seen.items() if len(lines) > 1}
    for sid, lines in sorted(duplicates.items()):
        problems.append(f"duplicate subject_id '{sid}' on rows {lines}")
    for row in rows:
        for kind, p in (
            ("volume", _cvol_base(row.volume_path) + ".cvol.json"),
            ("labels", _cvol_base(row.labels_path) + ".cvol.json"),
            ("ecg", row.ecg_path),
        ):
            if not os.path.exists(p):
                problems.append(f"{row.subject_id}: dangling {kind} path '{p}'")
    if problems:
        raise ManifestError("; ".join(problems))
    return rows
