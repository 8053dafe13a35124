"""Checkpoint and CSV problem I/O.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The blob is the concatenation of row-major little-endian float32 payloads;
the manifest records, per layer, the base expert tensors, the experts, and
optional routing weights and diagonal curvature.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "weights.bin"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Raised for malformed or inconsistent checkpoints and CSV problems."""


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    offset: int
    length: int
    dtype: str = "f32"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "offset": self.offset,
            "length": self.length,
        }


@dataclass
class Expert:
    name: str
    tensors: dict[str, np.ndarray]


@dataclass
class Layer:
    """One MoE layer: base expert, experts, optional routing and curvature.

    ``curvature`` maps expert name -> tensor name -> diagonal (same shape as
    the tensor). Missing entries mean identity.
    """

    index: int
    base: dict[str, np.ndarray]
    experts: list[Expert]
    routing: np.ndarray | None = None
    curvature: dict[str, dict[str, np.ndarray]] | None = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, tuple(t.shape)) for name, t in self.base.items())

    def routing_or_uniform(self) -> np.ndarray:
        if self.routing is not None:
            return np.asarray(self.routing, dtype=np.float64)
        n = self.num_experts
        return np.full(n, 1.0 / n)

    def curvature_for(self, expert: str, tensor: str) -> np.ndarray | None:
        if not self.curvature:
            return None
        return self.curvature.get(expert, {}).get(tensor)

    def validate(self) -> None:
        if not self.experts:
            raise CheckpointError(f"layer {self.index}: no experts")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise CheckpointError(f"layer {self.index}: duplicate expert names")
        for t in self.base.values():
            _check_tensor(t)
        for e in self.experts:
            if list(e.tensors) != list(self.base):
                raise CheckpointError(
                    f"layer {self.index}: shape/name mismatch in expert {e.name!r}"
                )
            for tname, t in e.tensors.items():
                _check_tensor(t)
                if t.shape != self.base[tname].shape:
                    raise CheckpointError(
                        f"layer {self.index}: shape/name mismatch in expert "
                        f"{e.name!r}, tensor {tname!r}"
                    )
        if self.routing is not None:
            s = np.asarray(self.routing, dtype=np.float64)
            if s.shape != (len(self.experts),):
                raise CheckpointError(f"layer {self.index}: routing length mismatch")
            if not np.all(np.isfinite(s)) or np.any(s < 0):
                raise CheckpointError(f"layer {self.index}: negative routing weight")
            if abs(s.sum() - 1.0) > 1e-6:
                raise CheckpointError(f"layer {self.index}: routing weights must sum to 1")
        if self.curvature:
            for ename, per_tensor in self.curvature.items():
                if ename not in names:
                    raise CheckpointError(
                        f"layer {self.index}: curvature for unknown expert {ename!r}"
                    )
                for tname, diag in per_tensor.items():
                    if tname not in self.base:
                        raise CheckpointError(
                            f"layer {self.index}: curvature for unknown tensor {tname!r}"
                        )
                    if np.shape(diag) != self.base[tname].shape:
                        raise CheckpointError(
                            f"layer {self.index}: curvature shape/name mismatch for "
                            f"{ename!r}/{tname!r}"
                        )
                    if not np.all(np.isfinite(diag)) or np.any(np.asarray(diag) < 0):
                        raise CheckpointError(
                            f"layer {self.index}: curvature entries must be nonnegative"
                        )


@dataclass
class ExpertStack:
    layers: list[Layer] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        for layer in self.layers:
            layer.validate()

    def equals(self, other: "ExpertStack") -> bool:
        """Field-for-field equality with bit-exact tensor payloads."""
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.index != b.index or not _same_tensors(a.base, b.base):
                return False
            if [e.name for e in a.experts] != [e.name for e in b.experts]:
                return False
            if not all(_same_tensors(x.tensors, y.tensors) for x, y in zip(a.experts, b.experts)):
                return False
            if (a.routing is None) != (b.routing is None):
                return False
            if a.routing is not None and not np.array_equal(a.routing, b.routing):
                return False
            ca, cb = a.curvature or {}, b.curvature or {}
            if list(ca) != list(cb):
                return False
            if not all(_same_tensors(ca[k], cb[k]) for k in ca):
                return False
        return True


def _check_tensor(t: np.ndarray) -> None:
    if t.dtype != np.float32:
        raise CheckpointError(f"unsupported dtype {t.dtype}; only f32 is stored")
    if t.ndim == 0 or any(s <= 0 for s in t.shape):
        raise CheckpointError(f"tensor shape {t.shape} must have positive dimensions")


def _same_tensors(a: dict, b: dict) -> bool:
    if list(a) != list(b):
        return False
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _encode(stack: ExpertStack) -> tuple[bytes, bytes]:
    chunks: list[bytes] = []
    offset = 0

    def record(name: str, t: np.ndarray) -> dict:
        nonlocal offset
        payload = np.ascontiguousarray(t, dtype=_F32).tobytes()
        rec = TensorRecord(name, tuple(int(s) for s in t.shape), offset, len(payload))
        chunks.append(payload)
        offset += len(payload)
        return rec.to_json()

    layers = []
    for layer in stack.layers:
        entry: dict = {
            "index": layer.index,
            "base": [record(n, t) for n, t in layer.base.items()],
            "experts": [
                {"name": e.name, "tensors": [record(n, t) for n, t in e.tensors.items()]}
                for e in layer.experts
            ],
        }
        if layer.routing is not None:
            entry["routing"] = [float(x) for x in layer.routing]
        if layer.curvature:
            entry["curvature"] = {
                ename: {tname: [float(x) for x in np.ravel(d)] for tname, d in per.items()}
                for ename, per in layer.curvature.items()
            }
        layers.append(entry)
    manifest = {"version": FORMAT_VERSION, "layers": layers}
    text = json.dumps(manifest, indent=1, allow_nan=False) + "\n"
    return text.encode("utf-8"), b"".join(chunks)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_checkpoint(stack: ExpertStack, path: str | os.PathLike) -> None:
    """Write ``stack`` to directory ``path``. Tensors are packed in manifest order."""
    stack.validate()
    manifest, blob = _encode(stack)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _atomic_write(path / BLOB, blob)
    _atomic_write(path / MANIFEST, manifest)


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


def _parse_record(raw) -> TensorRecord:
    try:
        name = raw["name"]
        shape = tuple(raw["shape"])
        dtype = raw.get("dtype", "f32")
        offset = raw["offset"]
        length = raw["length"]
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"malformed manifest: bad tensor record {raw!r}") from exc
    if not isinstance(name, str):
        raise CheckpointError("malformed manifest: tensor name must be a string")
    if dtype != "f32":
        raise CheckpointError(f"unsupported dtype {dtype!r}; only f32 is stored")
    if not shape or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape):
        raise CheckpointError(f"malformed manifest: shape {list(shape)!r} for {name!r}")
    for v in (offset, length):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise CheckpointError(f"malformed manifest: offset/length for {name!r}")
    if length != 4 * math.prod(shape):
        raise CheckpointError(f"malformed manifest: length of {name!r} does not match shape")
    return TensorRecord(name, shape, offset, length, dtype)


def read_checkpoint(path: str | os.PathLike) -> ExpertStack:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    blob = (path / BLOB).read_bytes()

    if not isinstance(manifest, dict) or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError("malformed manifest: missing or unsupported version")
    raw_layers = manifest.get("layers")
    if not isinstance(raw_layers, list):
        raise CheckpointError("malformed manifest: 'layers' must be a list")

    spans: list[tuple[int, int, str]] = []

    def load(raw) -> tuple[str, np.ndarray]:
        rec = _parse_record(raw)
        if rec.offset + rec.length > len(blob):
            raise CheckpointError(f"offset of {rec.name!r} out of blob bounds")
        spans.append((rec.offset, rec.offset + rec.length, rec.name))
        arr = np.frombuffer(blob, dtype=_F32, count=rec.length // 4, offset=rec.offset)
        return rec.name, arr.astype(np.float32).reshape(rec.shape)

    def tensor_dict(raws, where: str) -> dict[str, np.ndarray]:
        if not isinstance(raws, list):
            raise CheckpointError(f"malformed manifest: {where} must be a list")
        out: dict[str, np.ndarray] = {}
        for raw in raws:
            name, arr = load(raw)
            if name in out:
                raise CheckpointError(f"malformed manifest: duplicate tensor {name!r} in {where}")
            out[name] = arr
        return out

    layers = []
    for i, raw in enumerate(raw_layers):
        if not isinstance(raw, dict):
            raise CheckpointError(f"malformed manifest: layer {i} is not an object")
        index = raw.get("index", i)
        if not isinstance(index, int):
            raise CheckpointError(f"malformed manifest: layer {i} index")
        base = tensor_dict(raw.get("base"), f"layer {index} base")
        experts = []
        raw_experts = raw.get("experts")
        if not isinstance(raw_experts, list):
            raise CheckpointError(f"malformed manifest: layer {index} experts")
        for e in raw_experts:
            if not isinstance(e, dict) or not isinstance(e.get("name"), str):
                raise CheckpointError(f"malformed manifest: layer {index} expert entry")
            experts.append(Expert(e["name"], tensor_dict(e.get("tensors"), f"expert {e['name']!r}")))
        routing = raw.get("routing")
        if routing is not None:
            try:
                routing = np.array(routing, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise CheckpointError(f"malformed manifest: layer {index} routing") from exc
        curvature = None
        if raw.get("curvature") is not None:
            curvature = {}
            try:
                for ename, per in raw["curvature"].items():
                    curvature[ename] = {}
                    for tname, diag in per.items():
                        arr = np.array(diag, dtype=np.float64)
                        if tname in base and arr.size == base[tname].size:
                            arr = arr.reshape(base[tname].shape)
                        curvature[ename][tname] = arr
            except (AttributeError, TypeError, ValueError) as exc:
                raise CheckpointError(f"malformed manifest: layer {index} curvature") from exc
        layers.append(Layer(index, base, experts, routing, curvature))

    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"offset overlap between {n0!r} and {n1!r}")

    stack = ExpertStack(layers)
    stack.validate()
    return stack


# ---------------------------------------------------------------------------
# CSV problems
# ---------------------------------------------------------------------------


def read_problem_csv(path: str | os.PathLike):
    """Read a d x N matrix of domain vectors (column i is expert i)."""
    from .nash_core import DomainMatrix

    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise CheckpointError(f"line {lineno}: not a number ({exc})") from exc
            if not all(math.isfinite(v) for v in values):
                raise CheckpointError(f"line {lineno}: non-finite value")
            if rows and len(values) != len(rows[0]):
                raise CheckpointError(
                    f"line {lineno}: ragged row ({len(values)} columns, expected {len(rows[0])})"
                )
            rows.append(values)
    if not rows:
        raise CheckpointError("empty problem CSV")
    return DomainMatrix(np.array(rows, dtype=np.float64))


def write_problem_csv(G, path: str | os.PathLike) -> None:
    cols = np.asarray(getattr(G, "columns", G), dtype=np.float64)
    lines = [",".join(repr(float(v)) for v in row) for row in cols]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))
