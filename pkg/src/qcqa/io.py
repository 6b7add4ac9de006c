"""Archive, plan and front files.

Tensor archive layout (all integers little-endian)::

    offset 0   8 bytes   magic b"QKVWTS01"
    offset 8   u64       header_len
    offset 16  header    UTF-8 JSON: {"format": "QKVWTS01", "entries": [...]}
    16+len     payload   raw tensor bytes

Each entry is ``{"name", "dtype", "shape", "byte_offset", "byte_len"}`` with
``byte_offset`` counted from the start of the payload. Names are
``layers.<i>.k_proj.head.<h>`` and ``layers.<i>.v_proj.head.<h>``.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import LayerGrouping, LayerWeights, ModelPlan, WeightArchive
from .errors import FormatError, PartitionError, PlanError, QcqaError
from .kvcache import model_kv_fraction
from .wse import mean_pool

__all__ = [
    "MAGIC",
    "PLAN_FORMAT_VERSION",
    "FRONT_HEADER",
    "save_archive",
    "load_archive",
    "apply_plan",
    "layer_from_projections",
    "convert_projections",
    "PlanRecord",
    "PlanFile",
    "save_plan",
    "load_plan",
    "FrontRow",
    "save_front",
    "load_front",
]

MAGIC = b"QKVWTS01"
PLAN_FORMAT_VERSION = 1
FRONT_HEADER = ("kv_fraction", "wse", "plan_id")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAME_RE = re.compile(r"^layers\.(\d+)\.([kv])_proj\.head\.(\d+)$")


# ---------------------------------------------------------------- archives


def _entry_name(layer: int, kind: str, head: int) -> str:
    return f"layers.{layer}.{kind}_proj.head.{head}"


def save_archive(archive: WeightArchive, path, dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    np_dtype = _DTYPES[dtype]
    entries = []
    chunks = []
    offset = 0
    for i, layer in enumerate(archive.layers):
        for kind, stack in (("k", layer.keys), ("v", layer.values)):
            for h in range(stack.shape[0]):
                raw = np.ascontiguousarray(stack[h], dtype=np_dtype).tobytes()
                entries.append(
                    {
                        "name": _entry_name(i, kind, h),
                        "dtype": dtype,
                        "shape": list(stack[h].shape),
                        "byte_offset": offset,
                        "byte_len": len(raw),
                    }
                )
                chunks.append(raw)
                offset += len(raw)
    header = json.dumps({"format": MAGIC.decode(), "entries": entries}, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def _parse_entries(header: dict) -> list[dict]:
    entries = header.get("entries") if isinstance(header, dict) else None
    if not isinstance(entries, list):
        raise FormatError("malformed header: 'entries' list missing")
    out = []
    for n, e in enumerate(entries):
        if not isinstance(e, dict):
            raise FormatError(f"malformed header: entry {n} is not an object")
        missing = {"name", "dtype", "shape", "byte_offset", "byte_len"} - set(e)
        if missing:
            raise FormatError(f"malformed header: entry {n} lacks fields {sorted(missing)}")
        if e["dtype"] not in _DTYPES:
            raise FormatError(f"entry {e['name']!r}: unsupported dtype {e['dtype']!r}")
        shape = e["shape"]
        if (
            not isinstance(shape, list)
            or len(shape) != 2
            or not all(isinstance(s, int) and s >= 1 for s in shape)
        ):
            raise FormatError(f"entry {e['name']!r}: shape must be two positive ints, got {shape}")
        for key in ("byte_offset", "byte_len"):
            if not isinstance(e[key], int) or e[key] < 0:
                raise FormatError(f"entry {e['name']!r}: {key} must be a non-negative int")
        expected = shape[0] * shape[1] * _DTYPES[e["dtype"]].itemsize
        if e["byte_len"] != expected:
            raise FormatError(
                f"entry {e['name']!r}: byte_len {e['byte_len']} != {expected} implied by shape/dtype"
            )
        out.append(e)
    return out


def load_archive(path) -> WeightArchive:
    """Read a tensor archive, widening every tensor to float64."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a QKVWTS01 archive")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise FormatError(f"{path}: header length {header_len} runs past end of file")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed JSON header: {exc}") from exc
    entries = _parse_entries(header)
    payload = memoryview(data)[16 + header_len:]

    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_len"], e["name"]) for e in entries)
    for start, end, name in spans:
        if end > len(payload):
            raise FormatError(f"{path}: payload out of bounds for entry {name!r}")
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"{path}: overlapping offsets between {n0!r} and {n1!r}")

    tensors: dict[tuple[int, str, int], np.ndarray] = {}
    for e in entries:
        m = _NAME_RE.match(e["name"])
        if not m:
            raise FormatError(f"{path}: unexpected tensor name {e['name']!r}")
        key = (int(m.group(1)), m.group(2), int(m.group(3)))
        if key in tensors:
            raise FormatError(f"{path}: duplicate tensor {e['name']!r}")
        raw = payload[e["byte_offset"]:e["byte_offset"] + e["byte_len"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(np.float64)
        tensors[key] = arr.reshape(e["shape"])

    if not tensors:
        raise FormatError(f"{path}: archive contains no tensors")
    nlayers = max(k[0] for k in tensors) + 1
    layers = []
    for i in range(nlayers):
        heads = {kind: sorted(h for (l, k, h) in tensors if l == i and k == kind) for kind in "kv"}
        nh = max([len(heads["k"]), len(heads["v"]), 1])
        for kind in "kv":
            want = list(range(nh))
            if heads[kind] != want:
                gaps = sorted(set(want) - set(heads[kind]))
                raise FormatError(
                    f"{path}: layer {i} missing {kind}_proj heads {gaps or 'all'}"
                )
        try:
            layers.append(
                LayerWeights(
                    [tensors[(i, "k", h)] for h in range(nh)],
                    [tensors[(i, "v", h)] for h in range(nh)],
                )
            )
        except QcqaError as exc:
            raise FormatError(f"{path}: layer {i}: {exc}") from exc
    return WeightArchive(layers)


def apply_plan(archive: WeightArchive, plan: ModelPlan) -> WeightArchive:
    """Mean-pool K/V heads per group; MHA layers are copied unchanged."""
    plan.validate_for(archive.heads_per_layer, archive.layer_count)
    out = []
    for layer, g in zip(archive.layers, plan.per_layer):
        if g is None:
            out.append(layer)
            continue
        out.append(
            LayerWeights(
                np.stack([mean_pool(layer.keys, grp) for grp in g.groups]),
                np.stack([mean_pool(layer.values, grp) for grp in g.groups]),
            )
        )
    return WeightArchive(out)


def layer_from_projections(k_proj, v_proj, num_heads: int) -> LayerWeights:
    """Slice fused ``[H*d, d_model]`` projection matrices into per-head rows."""
    k = np.asarray(k_proj, dtype=np.float64)
    v = np.asarray(v_proj, dtype=np.float64)
    for name, m in (("k_proj", k), ("v_proj", v)):
        if m.ndim != 2 or m.shape[0] % num_heads:
            raise FormatError(f"{name} of shape {m.shape} cannot be split into {num_heads} heads")
    return LayerWeights(
        k.reshape(num_heads, k.shape[0] // num_heads, k.shape[1]),
        v.reshape(num_heads, v.shape[0] // num_heads, v.shape[1]),
    )


_PROJ_RE = re.compile(r"(?:^|\.)layers\.(\d+)\.(?:.*\.)?([kv])_proj(?:\.weight)?$")


def convert_projections(tensors: Mapping[str, np.ndarray], num_heads: int) -> WeightArchive:
    """Build an archive from a name -> array mapping of fused K/V projections.

    Matches names such as ``layers.3.k_proj`` or
    ``model.layers.3.self_attn.v_proj.weight``; other tensors are ignored.
    """
    found: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        m = _PROJ_RE.search(name)
        if m:
            slot = found.setdefault(int(m.group(1)), {})
            if m.group(2) in slot:
                raise FormatError(f"duplicate {m.group(2)}_proj for layer {m.group(1)} ({name})")
            slot[m.group(2)] = arr
    if not found:
        raise FormatError("no k_proj/v_proj tensors found")
    n = max(found) + 1
    layers = []
    for i in range(n):
        slot = found.get(i, {})
        if set(slot) != {"k", "v"}:
            raise FormatError(f"layer {i}: need both k_proj and v_proj, found {sorted(slot)}")
        layers.append(layer_from_projections(slot["k"], slot["v"], num_heads))
    return WeightArchive(layers)


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class PlanRecord:
    plan: ModelPlan
    wse: float
    kv_fraction: float


@dataclass
class PlanFile:
    num_heads: int
    layer_count: int
    encoding: str
    plans: list[PlanRecord] = field(default_factory=list)


def _plan_to_json(rec: PlanRecord, plan_id: int) -> dict:
    return {
        "plan_id": plan_id,
        "objectives": {"wse": rec.wse, "kv_fraction": rec.kv_fraction},
        "per_layer": [
            {"mode": "mha"} if g is None else {"mode": "grouped", "groups": g.as_lists()}
            for g in rec.plan.per_layer
        ],
    }


def save_plan(plan_file: PlanFile, path) -> None:
    doc = {
        "version": PLAN_FORMAT_VERSION,
        "H": plan_file.num_heads,
        "nlayers": plan_file.layer_count,
        "encoding": plan_file.encoding,
        "plans": [_plan_to_json(r, i) for i, r in enumerate(plan_file.plans)],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _need(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise FormatError(f"{where}: {msg}")


def load_plan(path) -> PlanFile:
    """Read and fully re-validate a plan file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc}") from exc
    _need(isinstance(doc, dict), str(path), "top level must be an object")
    _need(doc.get("version") == PLAN_FORMAT_VERSION, f"{path}: version", f"expected {PLAN_FORMAT_VERSION}")
    H, n = doc.get("H"), doc.get("nlayers")
    _need(isinstance(H, int) and H >= 1, f"{path}: H", "must be a positive integer")
    _need(isinstance(n, int) and n >= 1, f"{path}: nlayers", "must be a positive integer")
    _need(isinstance(doc.get("encoding"), str), f"{path}: encoding", "must be a string")
    _need(isinstance(doc.get("plans"), list), f"{path}: plans", "must be a list")
    records = []
    for pi, p in enumerate(doc["plans"]):
        where = f"{path}: plans[{pi}]"
        _need(isinstance(p, dict), where, "must be an object")
        obj = p.get("objectives")
        _need(isinstance(obj, dict), f"{where}.objectives", "missing")
        wse, kv = obj.get("wse"), obj.get("kv_fraction")
        for name, val in (("wse", wse), ("kv_fraction", kv)):
            _need(
                isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val),
                f"{where}.objectives.{name}",
                "must be a finite number",
            )
        _need(wse >= 0, f"{where}.objectives.wse", "must be non-negative")
        per_layer = p.get("per_layer")
        _need(isinstance(per_layer, list) and len(per_layer) == n, f"{where}.per_layer", f"must list {n} layers")
        entries = []
        for li, e in enumerate(per_layer):
            lw = f"{where}.per_layer[{li}]"
            _need(isinstance(e, dict) and e.get("mode") in ("mha", "grouped"), f"{lw}.mode", "must be 'mha' or 'grouped'")
            if e["mode"] == "mha":
                entries.append(None)
                continue
            groups = e.get("groups")
            _need(
                isinstance(groups, list) and all(isinstance(g, list) for g in groups),
                f"{lw}.groups",
                "must be a list of index lists",
            )
            try:
                entries.append(LayerGrouping.from_groups(groups, H))
            except (PartitionError, TypeError, ValueError) as exc:
                raise FormatError(f"{lw}.groups: {exc}") from exc
        plan = ModelPlan(tuple(entries))
        expect_kv = model_kv_fraction(plan, H)
        _need(
            math.isclose(kv, expect_kv, rel_tol=0, abs_tol=1e-12),
            f"{where}.objectives.kv_fraction",
            f"{kv} disagrees with the plan's head count ({expect_kv})",
        )
        records.append(PlanRecord(plan, float(wse), float(kv)))
    return PlanFile(H, n, doc["encoding"], records)


# ---------------------------------------------------------------- fronts


@dataclass(frozen=True)
class FrontRow:
    kv_fraction: float
    wse: float
    plan_id: int


def _check_front(rows: Sequence[FrontRow], where: str) -> None:
    for i, (a, b) in enumerate(zip(rows, rows[1:])):
        if (b.kv_fraction, b.wse) < (a.kv_fraction, a.wse):
            raise FormatError(f"{where}: row {i + 2} is out of kv_fraction order")
    # sorted by kv: a row is dominated iff some earlier row has wse <= it with a strict
    # improvement in one objective
    best_wse = math.inf
    best_kv = None
    for i, r in enumerate(rows):
        if best_kv is not None and best_wse <= r.wse and (best_kv < r.kv_fraction or best_wse < r.wse):
            raise FormatError(f"{where}: dominated row {i + 1} ({r.kv_fraction}, {r.wse})")
        if r.wse < best_wse or best_kv is None:
            best_wse, best_kv = r.wse, r.kv_fraction


def _fmt(x: float) -> str:
    return format(x, ".17g")


def save_front(rows: Iterable[FrontRow], path) -> None:
    rows = sorted(rows, key=lambda r: (r.kv_fraction, r.wse, r.plan_id))
    _check_front(rows, str(path))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONT_HEADER)
    for r in rows:
        w.writerow((_fmt(r.kv_fraction), _fmt(r.wse), r.plan_id))
    Path(path).write_text(buf.getvalue())


def load_front(path) -> list[FrontRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if tuple(header) != FRONT_HEADER:
            raise FormatError(f"{path}: line 1: expected header {','.join(FRONT_HEADER)}, got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 fields, got {len(rec)}")
            try:
                kv, wse = float(rec[0]), float(rec[1])
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric kv_fraction/wse") from None
            try:
                pid = int(rec[2])
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: plan_id must be an integer") from None
            if not (math.isfinite(kv) and 0 < kv <= 1):
                raise FormatError(f"{path}: line {lineno}: kv_fraction {kv} outside (0, 1]")
            if not (math.isfinite(wse) and wse >= 0):
                raise FormatError(f"{path}: line {lineno}: wse {wse} must be finite and >= 0")
            rows.append(FrontRow(kv, wse, pid))
    _check_front(rows, str(path))
    return rows
