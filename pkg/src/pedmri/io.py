"""On-disk formats: DVOL volumes, FSL-style gradient tables, phantom directories."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import atomic_write
from .phantom import GradientTable, GroundTruth, Phantom, PhantomSpec
from .volume import DataError, Volume4D

log = logging.getLogger(__name__)

DVOL_MAGIC = b"DVOL1\n"


def dvol_bytes(vol: Volume4D) -> bytes:
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    header = {"dims": list(vol.dims), "dtype": "f32le", "order": "row-major-last-fastest",
              "meta": vol.meta}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return DVOL_MAGIC + struct.pack("<Q", len(raw)) + raw + data.tobytes()


def write_dvol(vol: Volume4D, path) -> None:
    atomic_write(path, dvol_bytes(vol))


def read_dvol(path) -> Volume4D:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if not blob.startswith(DVOL_MAGIC):
        raise DataError(f"{path}: bad magic, not a DVOL1 container")
    start = len(DVOL_MAGIC) + 8
    if len(blob) < start:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, len(DVOL_MAGIC))
    if len(blob) < start + hlen:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: header is not UTF-8 JSON ({exc})") from exc
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 4 and all(isinstance(d, int) and d >= 0 for d in dims)):
        raise DataError(f"{path}: header dims must be four non-negative integers, got {dims!r}")
    if header.get("dtype") != "f32le" or header.get("order") != "row-major-last-fastest":
        raise DataError(f"{path}: unsupported dtype/order {header.get('dtype')!r}/{header.get('order')!r}")
    payload = blob[start + hlen:]
    need = int(np.prod(dims)) * 4
    if len(payload) != need:
        raise DataError(f"{path}: {len(payload)} data bytes, dims {dims} need {need}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume4D(data, header.get("meta") or {})


def _read_rows(path) -> list[list[float]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return [[float(t) for t in line.split()] for line in text.splitlines() if line.strip()]
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc


def read_gradient_table(bval_path, bvec_path) -> GradientTable:
    """FSL-style tables: one line of b-values, three lines of x, y, z components."""
    bval_rows = _read_rows(bval_path)
    if len(bval_rows) != 1:
        raise DataError(f"{bval_path}: expected a single line of b-values, found {len(bval_rows)}")
    bvals = np.array(bval_rows[0])
    rows = _read_rows(bvec_path)
    if len(rows) != 3 or len({len(r) for r in rows}) != 1:
        raise DataError(f"{bvec_path}: expected three equal-length lines (x, y, z)")
    bvecs = np.array(rows).T
    if len(bvecs) != len(bvals):
        raise DataError(f"{len(bvals)} b-values but {len(bvecs)} gradient directions")
    norms = np.linalg.norm(bvecs, axis=1)
    for i, (b, n) in enumerate(zip(bvals, norms)):
        if b < 50.0 and n == 0.0:
            continue
        dev = abs(n - 1.0)
        if dev > 0.10:
            raise DataError(f"direction {i} has norm {n:.4f} (deviation > 10%)")
        if dev > 0.01:
            log.warning("direction %d has norm %.4f; renormalizing", i, n)
        if dev > 1e-12:  # leave already-unit vectors bit-exact
            bvecs[i] /= n
    return GradientTable(bvals, bvecs)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_gradient_table(table: GradientTable, bval_path, bvec_path) -> None:
    atomic_write(bval_path, (" ".join(_fmt(b) for b in table.bvals) + "\n").encode("utf-8"))
    lines = "".join(" ".join(_fmt(v) for v in table.bvecs[:, c]) + "\n" for c in range(3))
    atomic_write(bvec_path, lines.encode("utf-8"))


def write_json(obj, path) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


PHANTOM_FILES = ("dwi.dvol", "gt_fwf.dvol", "gt_fod.dvol", "mask.dvol", "bvals", "bvecs", "spec.json")


def write_phantom(ph: Phantom, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    write_dvol(ph.dwi, out / "dwi.dvol")
    write_dvol(ph.truth.fwf, out / "gt_fwf.dvol")
    write_dvol(ph.truth.fod, out / "gt_fod.dvol")
    write_dvol(ph.truth.mask, out / "mask.dvol")
    write_gradient_table(ph.table, out / "bvals", out / "bvecs")
    write_json(ph.spec.to_dict(), out / "spec.json")
    return [out / f for f in PHANTOM_FILES]


def read_phantom(data_dir) -> Phantom:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    spec_path = d / "spec.json"
    spec = PhantomSpec.from_dict(read_json(spec_path)) if spec_path.exists() else PhantomSpec()
    truth = GroundTruth(read_dvol(d / "gt_fwf.dvol"), read_dvol(d / "gt_fod.dvol"),
                        read_dvol(d / "mask.dvol"))
    return Phantom(read_dvol(d / "dwi.dvol"), read_gradient_table(d / "bvals", d / "bvecs"),
                   truth, spec)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_parent(path) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.resolve().is_dir():
        raise DataError(f"parent directory {parent} does not exist")
    return p


def thread_cap() -> int | None:
    """Worker cap from PEDMRI_THREADS (0 or unset means automatic)."""
    raw = os.environ.get("PEDMRI_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise DataError(f"PEDMRI_THREADS must be an integer, got {raw!r}") from exc
    return n if n > 0 else None
