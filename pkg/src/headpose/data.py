"""Sample records, JSON-lines / PGM file formats and the dataset-mixing sampler."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .facemodel import NUM_COEFFS, NUM_LANDMARKS
from .losses import LabelBatch, LabelMask

log = logging.getLogger(__name__)


class SampleFormatError(ValueError):
    """Malformed sample file; the message names the line and field."""


# field name -> allowed shapes
_ARRAY_FIELDS = {
    "quat": [(4,)],
    "pos": [(2,)],
    "shape": [(NUM_COEFFS,)],
    "landmarks": [(NUM_LANDMARKS, 3), (NUM_LANDMARKS, 2)],
    "bbox": [(4,)],
    "rot_cov": [(6,)],
    "pos_cov": [(6,)],
    "landmark_confidence": [(NUM_LANDMARKS,)],
}


@dataclass
class SampleRecord:
    """Ground truth or prediction for one image.

    ``pos`` is the head centre in normalized image units, ``bbox`` is
    ``(cx, cy, w, h)`` in the same units, covariances are stored as the six
    raw lower-triangular features.
    """

    id: str
    quat: np.ndarray | None = None
    pos: np.ndarray | None = None
    size: float | None = None
    shape: np.ndarray | None = None
    landmarks: np.ndarray | None = None
    bbox: np.ndarray | None = None
    rot_cov: np.ndarray | None = None
    pos_cov: np.ndarray | None = None
    landmark_confidence: np.ndarray | None = None

    def __post_init__(self):
        self.id = str(self.id)
        for name, shapes in _ARRAY_FIELDS.items():
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.array(val, dtype=float)
            if arr.shape not in shapes:
                raise ValueError(f"field {name!r}: expected shape {' or '.join(map(str, shapes))}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"field {name!r}: non-finite value")
            setattr(self, name, arr)
        if self.quat is not None and abs(np.linalg.norm(self.quat) - 1.0) > 1e-6:
            raise ValueError("field 'quat': not a unit quaternion")
        if self.size is not None:
            self.size = float(self.size)
            if not (np.isfinite(self.size) and self.size > 0):
                raise ValueError("field 'size': must be positive and finite")
        if (self.pos is None) != (self.size is None):
            raise ValueError("fields 'pos' and 'size' must be given together")

    @property
    def mask(self) -> LabelMask:
        lm = self.landmarks
        return LabelMask(
            rotation=self.quat is not None,
            pos_size=self.pos is not None,
            shape=self.shape is not None,
            landmarks3d=lm is not None and lm.shape[1] == 3,
            landmarks2d=lm is not None and lm.shape[1] == 2,
            bbox=self.bbox is not None,
        )

    def replace(self, **changes) -> SampleRecord:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return SampleRecord(**data)

    def to_json(self) -> dict:
        out = {"id": self.id}
        for f in fields(self)[1:]:
            val = getattr(self, f.name)
            if val is not None:
                out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    @classmethod
    def from_json(cls, obj: dict) -> SampleRecord:
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"field {sorted(unknown)[0]!r}: unknown field")
        if "id" not in obj:
            raise ValueError("field 'id': missing")
        return cls(**obj)

    def equals(self, other: SampleRecord) -> bool:
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


def _reject_constant(token):
    raise ValueError(f"non-finite number {token}")


def read_samples(path) -> list[SampleRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
                records.append(SampleRecord.from_json(obj))
            except (ValueError, TypeError) as exc:
                raise SampleFormatError(f"{path}: line {lineno}: {exc}") from None
    return records


def dumps_samples(records) -> str:
    return "".join(json.dumps(r.to_json(), allow_nan=False) + "\n" for r in records)


def atomic_write(path, data) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_samples(path, records) -> None:
    atomic_write(path, dumps_samples(records))


def to_label_batch(records) -> LabelBatch:
    """Stack records into zero-filled arrays with per-group masks."""
    n = len(records)
    quat = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1))
    pos = np.zeros((n, 3))
    shape = np.zeros((n, NUM_COEFFS))
    lmk = np.zeros((n, NUM_LANDMARKS, 3))
    bbox = np.zeros((n, 4))
    has = {k: np.zeros(n, bool) for k in ("rot", "pos", "shape", "bbox")}
    dims = np.zeros(n, dtype=int)
    for i, r in enumerate(records):
        if r.quat is not None:
            quat[i], has["rot"][i] = r.quat, True
        if r.pos is not None:
            pos[i] = (*r.pos, r.size)
            has["pos"][i] = True
        if r.shape is not None:
            shape[i], has["shape"][i] = r.shape, True
        if r.landmarks is not None:
            d = r.landmarks.shape[1]
            lmk[i, :, :d] = r.landmarks
            dims[i] = d
        if r.bbox is not None:
            bbox[i], has["bbox"][i] = r.bbox, True
    return LabelBatch(
        quat, pos, shape, lmk, bbox,
        has_rot=has["rot"], has_pos=has["pos"], has_shape=has["shape"], has_bbox=has["bbox"],
        landmark_dims=dims,
    )


# ---------------------------------------------------------------------------
# images


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary portable graymap (P5)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def pgm_bytes(img) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("expected a 2D uint8 image")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(path, img) -> None:
    atomic_write(path, pgm_bytes(img))


# ---------------------------------------------------------------------------
# dataset mixing


def normalize_probs(probs) -> np.ndarray:
    """Validate mixing probabilities.

    Sums within [0.99, 1.01] are rescaled onto the simplex with a warning;
    anything further off is an error.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or len(p) == 0 or np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError("probabilities must be a non-empty list of non-negative numbers")
    total = p.sum()
    if abs(total - 1.0) <= 1e-9:
        return p / total
    if 0.99 <= total <= 1.01:
        log.warning("mixing probabilities sum to %.6g; renormalizing", total)
        return p / total
    raise ValueError(f"mixing probabilities sum to {total:.6g}, expected 1")


@dataclass
class DatasetMix:
    names: list
    sizes: list
    probs: np.ndarray

    def __post_init__(self):
        if not (len(self.names) == len(self.sizes) == len(self.probs)) or not self.names:
            raise ValueError("mix needs matching, non-empty datasets and probabilities")
        for name, size in zip(self.names, self.sizes):
            if int(size) < 1:
                raise ValueError(f"dataset {name!r} is empty")
        self.sizes = [int(s) for s in self.sizes]
        self.probs = normalize_probs(self.probs)

    @classmethod
    def from_json(cls, obj: dict, base_dir=".") -> DatasetMix:
        """``{"datasets": [...], "probs": [...]}``; entries are sample-file paths or ``{"name", "size"}``."""
        names, sizes = [], []
        for entry in obj["datasets"]:
            if isinstance(entry, str):
                path = Path(base_dir) / entry
                names.append(entry)
                sizes.append(len(read_samples(path)))
            else:
                names.append(str(entry["name"]))
                sizes.append(int(entry["size"]))
        return cls(names, sizes, obj["probs"])


class MixSampler:
    """Endless stream of ``(dataset index, sample index)``, both drawn with replacement.

    Draws are generated in fixed-size blocks so the stream does not depend
    on how callers chunk their requests.
    """

    BLOCK = 4096

    def __init__(self, mix: DatasetMix, seed: int):
        self.mix = mix
        self._rng = np.random.default_rng(seed)
        self._cdf = np.cumsum(mix.probs)
        self._cdf[-1] = 1.0
        self._sizes = np.asarray(mix.sizes)
        self._buf = (np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp))

    def _refill(self):
        u_ds = self._rng.random(self.BLOCK)
        u_idx = self._rng.random(self.BLOCK)
        ds = np.minimum(np.searchsorted(self._cdf, u_ds, side="right"), len(self._cdf) - 1)
        idx = np.floor(u_idx * self._sizes[ds]).astype(np.intp)
        self._buf = (np.concatenate([self._buf[0], ds]), np.concatenate([self._buf[1], idx]))

    def draw(self, n: int):
        while len(self._buf[0]) < n:
            self._refill()
        ds, idx = self._buf
        self._buf = (ds[n:], idx[n:])
        return ds[:n], idx[:n]

    def __iter__(self):
        while True:
            ds, idx = self.draw(self.BLOCK)
            yield from zip(ds.tolist(), idx.tolist())


def mix_sampler(mix: DatasetMix, seed: int):
    return iter(MixSampler(mix, seed))
