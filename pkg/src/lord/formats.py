"""Bit-exact container files for models, calibration statistics, token
corpora, and plans.

Binary containers share one layout: an 8-byte magic, a u64 little-endian
header length, a UTF-8 JSON header (space-padded so the payload starts on a
64-byte boundary), then raw little-endian tensor payloads at 64-byte-aligned
offsets relative to the payload base. Offsets in the table are relative, so
files are position-independent.

Token corpora use a flat u32 little-endian framing instead: magic, vocab,
sequence count, then each sequence as a length-prefixed id run.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .decompose import DenseLayer, FactoredLayer
from .errors import CorruptionError, FormatError, UsageError, VersionError
from .linalg import OutputStats
from .model import CalibrationCapture, TokenCorpus, ToyModel
from .planner import ArchDescriptor, CompressionPlan, group_layers, tensor_census

__all__ = [
    "MODEL_MAGIC",
    "STATS_MAGIC",
    "TOKEN_MAGIC",
    "load_corpus",
    "load_model",
    "load_plan",
    "load_stats",
    "save_corpus",
    "save_model",
    "save_plan",
    "save_stats",
]

MODEL_MAGIC = b"LORDMDL1"
STATS_MAGIC = b"LORDSTA1"
TOKEN_MAGIC = b"LORDTOK1"
FORMAT_VERSION = 1

_ALIGN = 64
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u64": np.dtype("<u8")}


@dataclass
class _TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    array: np.ndarray
    role: str
    factored: bool = False
    group: str | None = None


def _align_up(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def _write_container(path: str, magic: bytes, header_extra: dict, entries: list[_TensorEntry]) -> None:
    table = []
    offset = 0
    blobs = []
    for e in entries:
        arr = np.ascontiguousarray(e.array, dtype=_DTYPES[e.dtype])
        nbytes = arr.nbytes
        row = {
            "name": e.name,
            "dtype": e.dtype,
            "shape": list(e.shape),
            "offset": offset,
            "nbytes": nbytes,
            "role": e.role,
            "factored": e.factored,
        }
        if e.group is not None:
            row["group"] = e.group
        table.append(row)
        blobs.append((offset, arr.tobytes()))
        offset = _align_up(offset + nbytes)

    header = dict(header_extra)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = table
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    pad = (-(len(magic) + 8 + len(raw))) % _ALIGN
    raw += b" " * pad

    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        base = f.tell()
        end = 0
        for off, blob in blobs:
            f.seek(base + off)
            f.write(blob)
            end = max(end, off + len(blob))
        f.seek(base + end)
        f.truncate()


def _read_container(path: str, magic: bytes) -> tuple[dict, dict[str, np.ndarray], list[dict]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(magic) + 8:
        raise FormatError(f"{path}: file too short to be a container")
    if data[: len(magic)] != magic:
        raise FormatError(
            f"{path}: bad magic {data[:8]!r}, expected {magic.decode('ascii')}"
        )
    (header_len,) = struct.unpack_from("<Q", data, len(magic))
    base = len(magic) + 8 + header_len
    if base > len(data):
        raise CorruptionError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[len(magic) + 8 : base].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version!r}")

    tensors: dict[str, np.ndarray] = {}
    prev_end = 0
    table = header.get("tensors", [])
    for row in sorted(table, key=lambda r: r["offset"]):
        name = row["name"]
        if row["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: tensor {name}: unknown dtype {row['dtype']!r}")
        dt = _DTYPES[row["dtype"]]
        shape = tuple(int(s) for s in row["shape"])
        expect = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        if row["nbytes"] != expect:
            raise CorruptionError(
                f"{path}: tensor {name}: nbytes {row['nbytes']} != {expect} for shape {shape}"
            )
        off = int(row["offset"])
        if off < prev_end:
            raise CorruptionError(f"{path}: tensor {name}: overlapping payload offsets")
        if base + off + row["nbytes"] > len(data):
            raise CorruptionError(f"{path}: tensor {name}: payload truncated")
        prev_end = off + row["nbytes"]
        buf = data[base + off : base + off + row["nbytes"]]
        arr = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        if row["dtype"] in ("f32", "f64") and not np.isfinite(arr).all():
            raise CorruptionError(f"{path}: tensor {name}: non-finite entries")
        tensors[name] = arr
    return header, tensors, table


# ---------------------------------------------------------------------------
# model container


def save_model(model: ToyModel, path: str) -> None:
    """Write a model container; factored slots store A and B as separate tensors."""
    entries: list[_TensorEntry] = []
    slots_spec, aux_spec = tensor_census(model.arch)

    def aux_role(name: str) -> str:
        if name.startswith("emb."):
            return "embedding"
        if name.startswith("lm_head"):
            return "head"
        return "norm"

    for spec in aux_spec:
        arr = model.aux[spec.name]
        entries.append(_TensorEntry(spec.name, "f32", arr.shape, arr, aux_role(spec.name)))

    group_of: dict[int, str] = {}
    menu = {g.member_suffixes: g.name for g in group_layers(model.arch)}
    by_a: dict[int, list[str]] = {}
    for spec in slots_spec:
        slot = model.slots[spec.name]
        if isinstance(slot, FactoredLayer):
            by_a.setdefault(id(slot.a), []).append(spec.name)
    for a_id, names in by_a.items():
        if len(names) > 1:
            block = names[0].rsplit(".", 1)[0]
            suffixes = tuple(n.rsplit(".", 1)[1] for n in names)
            group_of[a_id] = f"{block}.{menu[suffixes]}"

    written_a: set[int] = set()
    for spec in slots_spec:
        slot = model.slots[spec.name]
        if isinstance(slot, DenseLayer):
            entries.append(_TensorEntry(f"{spec.name}.w", "f32", slot.w.shape, slot.w, "weight"))
            if slot.bias is not None:
                entries.append(
                    _TensorEntry(f"{spec.name}.bias", "f32", slot.bias.shape, slot.bias, "bias")
                )
        else:
            group = group_of.get(id(slot.a))
            if id(slot.a) not in written_a:
                written_a.add(id(slot.a))
                a_name = f"{group}.A" if group else f"{spec.name}.A"
                entries.append(
                    _TensorEntry(a_name, "f32", slot.a.shape, slot.a, "factor_a", True, group)
                )
            entries.append(
                _TensorEntry(
                    f"{spec.name}.B", "f32", slot.b_mat.shape, slot.b_mat, "factor_b", True, group
                )
            )
            if slot.bias_tilde is not None:
                entries.append(
                    _TensorEntry(
                        f"{spec.name}.bias", "f32", slot.bias_tilde.shape,
                        slot.bias_tilde, "bias", True, group,
                    )
                )
    _write_container(path, MODEL_MAGIC, {"arch": model.arch.to_dict()}, entries)


def load_model(path: str) -> ToyModel:
    header, tensors, _table = _read_container(path, MODEL_MAGIC)
    if "arch" not in header:
        raise FormatError(f"{path}: model header missing arch descriptor")
    arch = ArchDescriptor.from_dict(header["arch"])
    slots_spec, aux_spec = tensor_census(arch)

    aux: dict[str, np.ndarray] = {}
    for spec in aux_spec:
        if spec.name not in tensors:
            raise CorruptionError(f"{path}: missing tensor {spec.name}")
        arr = tensors[spec.name]
        if arr.shape != spec.shape:
            raise CorruptionError(
                f"{path}: tensor {spec.name}: shape {arr.shape} != descriptor {spec.shape}"
            )
        aux[spec.name] = arr

    shared_a: dict[str, np.ndarray] = {}
    slots: dict[str, DenseLayer | FactoredLayer] = {}
    for spec in slots_spec:
        wname, bname = f"{spec.name}.w", f"{spec.name}.bias"
        if wname in tensors:
            w = tensors[wname]
            if w.shape != (spec.d1, spec.d2):
                raise CorruptionError(
                    f"{path}: tensor {wname}: shape {w.shape} != ({spec.d1}, {spec.d2})"
                )
            slots[spec.name] = DenseLayer(spec.name, w, tensors.get(bname))
        elif f"{spec.name}.B" in tensors:
            b_mat = tensors[f"{spec.name}.B"]
            a_name = f"{spec.name}.A"
            if a_name in tensors:
                a = tensors[a_name]
            else:
                # shared bottleneck: find the group A by matching this block's groups
                block = spec.name.rsplit(".", 1)[0]
                candidates = [
                    f"{block}.{g.name}.A"
                    for g in group_layers(arch)
                    if spec.name.rsplit(".", 1)[1] in g.member_suffixes
                ]
                found = [c for c in candidates if c in tensors]
                if not found:
                    raise CorruptionError(f"{path}: no A factor found for {spec.name}")
                a_name = found[0]
                a = shared_a.setdefault(a_name, tensors[a_name])
            rank = a.shape[0]
            if b_mat.shape != (spec.d1, rank) or a.shape[1] not in (spec.d2,):
                raise CorruptionError(
                    f"{path}: factored slot {spec.name}: inconsistent factor shapes "
                    f"{b_mat.shape} x {a.shape}"
                )
            slots[spec.name] = FactoredLayer(
                name=spec.name, a=a, b_mat=b_mat, bias_tilde=tensors.get(bname), rank=rank
            )
        else:
            raise CorruptionError(f"{path}: missing tensors for slot {spec.name}")
    return ToyModel(arch=arch, aux=aux, slots=slots)


# ---------------------------------------------------------------------------
# statistics container


def save_stats(capture: CalibrationCapture, path: str) -> None:
    entries: list[_TensorEntry] = []
    targets = []
    for name in sorted(capture.stats):
        s = capture.stats[name]
        targets.append({"name": name, "dim": s.dim})
        entries.append(_TensorEntry(f"{name}.mean", "f64", s.mean.shape, s.mean, "mean"))
        entries.append(
            _TensorEntry(f"{name}.moment2", "f64", s.moment2.shape, s.moment2, "moment2")
        )
        entries.append(
            _TensorEntry(f"{name}.count", "u64", (), np.uint64(s.count), "count")
        )
    _write_container(path, STATS_MAGIC, {"targets": targets}, entries)


def load_stats(path: str) -> CalibrationCapture:
    header, tensors, _table = _read_container(path, STATS_MAGIC)
    stats: dict[str, OutputStats] = {}
    for tgt in header.get("targets", []):
        name, dim = tgt["name"], int(tgt["dim"])
        try:
            mean = tensors[f"{name}.mean"]
            moment2 = tensors[f"{name}.moment2"]
            count = int(tensors[f"{name}.count"])
        except KeyError as exc:
            raise CorruptionError(f"{path}: missing {exc} for target {name}") from exc
        if mean.shape != (dim,) or moment2.shape != (dim, dim):
            raise CorruptionError(
                f"{path}: target {name}: stats shapes {mean.shape}/{moment2.shape} "
                f"inconsistent with dim {dim}"
            )
        if count < 0:
            raise CorruptionError(f"{path}: target {name}: negative count")
        stats[name] = OutputStats(dim=dim, count=count, mean=mean, moment2=moment2)
    return CalibrationCapture(stats=stats)


# ---------------------------------------------------------------------------
# token corpus


def save_corpus(corpus: TokenCorpus, path: str) -> None:
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<II", corpus.vocab, len(corpus.sequences)))
        for seq in corpus.sequences:
            f.write(struct.pack("<I", len(seq)))
            f.write(np.ascontiguousarray(seq, dtype="<u4").tobytes())


def load_corpus(path: str) -> TokenCorpus:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16:
        raise FormatError(f"{path}: file too short to be a token corpus")
    if data[:8] != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected LORDTOK1")
    vocab, n_seq = struct.unpack_from("<II", data, 8)
    pos = 16
    sequences = []
    for i in range(n_seq):
        if pos + 4 > len(data):
            raise CorruptionError(f"{path}: truncated at sequence {i} header")
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 4 * length > len(data):
            raise CorruptionError(f"{path}: truncated inside sequence {i}")
        seq = np.frombuffer(data, dtype="<u4", count=length, offset=pos).astype(np.int32)
        pos += 4 * length
        if length and int(seq.max()) >= vocab:
            raise CorruptionError(f"{path}: sequence {i} has token id >= vocab {vocab}")
        sequences.append(seq)
    if pos != len(data):
        raise CorruptionError(f"{path}: {len(data) - pos} trailing bytes after sequences")
    return TokenCorpus(vocab=vocab, sequences=sequences)


# ---------------------------------------------------------------------------
# plan document


def save_plan(plan: CompressionPlan, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(plan.to_dict(), f, indent=2)
        f.write("\n")


def load_plan(path: str) -> CompressionPlan:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: plan is not valid JSON: {exc}") from exc
    try:
        return CompressionPlan.from_dict(doc)
    except UsageError as exc:
        raise FormatError(f"{path}: {exc}") from exc
