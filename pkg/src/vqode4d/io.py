"""On-disk formats: VOL1 volumes, FFT1 tensor archives, dataset manifests, CSV/PGM output."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOL_MAGIC = b"VOL1"
TENSOR_MAGIC = b"FFT1"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- VOL1

def write_volume(path, volume, mask=None) -> None:
    """Header: magic, u32 d/h/w, u8 mask flag; float32 voxels z-major; optional packed mask bits."""
    v = np.ascontiguousarray(volume, dtype="<f4")
    if v.ndim != 3:
        raise FormatError(f"volume must be 3-D, got shape {v.shape}")
    parts = [VOL_MAGIC, struct.pack("<3IB", *v.shape, 1 if mask is not None else 0), v.tobytes()]
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != v.shape:
            raise FormatError(f"mask shape {m.shape} does not match volume {v.shape}")
        parts.append(np.packbits(m.reshape(-1), bitorder="little").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_volume(path):
    """Returns (volume float32 [d, h, w], mask bool or None)."""
    buf = Path(path).read_bytes()
    if len(buf) < 17:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes, need 17)")
    if buf[:4] != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    d, h, w, flag = struct.unpack_from("<3IB", buf, 4)
    n = d * h * w
    need = 17 + 4 * n + (-(-n // 8) if flag else 0)
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(buf)} (truncated or trailing data at byte {min(need, len(buf))})")
    vol = np.frombuffer(buf, dtype="<f4", count=n, offset=17).reshape(d, h, w).astype(np.float32)
    mask = None
    if flag:
        bits = np.frombuffer(buf, dtype=np.uint8, offset=17 + 4 * n)
        mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool).reshape(d, h, w)
    return vol, mask


def volume_file_size(shape, with_mask: bool) -> int:
    n = int(np.prod(shape))
    return 17 + 4 * n + (-(-n // 8) if with_mask else 0)


# ---------------------------------------------------------------- FFT1

def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    out = [TENSOR_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = buf[pos: pos + n]
        pos += n
        return chunk

    if take(4, "magic") != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2, "name length"))
        name = take(ln, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return tensors


# ------------------------------------------------------------ manifest

@dataclass
class ScanEntry:
    time_years: float
    volume_path: str
    mask_path: str | None = None


@dataclass
class SubjectEntry:
    id: str
    scans: list[ScanEntry]
    survival: dict | None = None  # {duration_years, event}
    covariates: dict = field(default_factory=dict)


@dataclass
class Manifest:
    subjects: list[SubjectEntry]
    root: Path = Path(".")

    def subject(self, sid: str) -> SubjectEntry:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(f"subject {sid!r} not in manifest")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_scan(self, scan: ScanEntry):
        vol, embedded = read_volume(self.resolve(scan.volume_path))
        mask = embedded
        if scan.mask_path:
            mask, _ = read_volume(self.resolve(scan.mask_path))
            mask = mask > 0.5
        if mask is None:
            mask = np.ones(vol.shape, dtype=bool)
        return vol, mask

    def to_json(self) -> dict:
        return {"subjects": [
            {"id": s.id,
             "scans": [{"time_years": sc.time_years, "volume_path": sc.volume_path, "mask_path": sc.mask_path}
                       for sc in s.scans],
             "survival": s.survival,
             "covariates": s.covariates}
            for s in self.subjects]}


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def read_manifest(path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    subjects = []
    for i, s in enumerate(doc.get("subjects", [])):
        scans = [ScanEntry(float(sc["time_years"]), sc["volume_path"], sc.get("mask_path")) for sc in s["scans"]]
        times = [sc.time_years for sc in scans]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise FormatError(f"subjects[{i}] ({s['id']}): scan times not strictly increasing")
        subjects.append(SubjectEntry(str(s["id"]), scans, s.get("survival"), dict(s.get("covariates") or {})))
    m = Manifest(subjects, path.parent)
    if check_paths:
        for s in subjects:
            for sc in s.scans:
                for rel in (sc.volume_path, sc.mask_path):
                    if rel and not m.resolve(rel).exists():
                        raise FormatError(f"subject {s.id}: missing file {m.resolve(rel)}")
    return m


# ----------------------------------------------------------------- CSV

def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- PGM

def write_pgm(path, image) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
