"""Manifests, pose-availability masks, traditional augmentation and batching.

A manifest is UTF-8 JSON Lines: one header line with the pose vocabulary and
class names, then one line per sample. Image paths are written relative to
the manifest's directory and held as absolute paths in memory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidArgument, ManifestParseError, ValidationError
from .imageio import load_image, to_uint8
from .pose_space import PoseVocabulary

FORMAT_VERSION = 1
ORIGINS = ("real", "synthesized", "augmented")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    class_label: int
    instance_id: str
    pose_label: int
    synthetic_origin: str = "real"
    # continuous coordinates, only set for syntheses at non-anchor poses
    yaw: float | None = None
    pitch: float | None = None

    def to_dict(self) -> dict:
        d = {
            "image_path": self.image_path,
            "class_label": self.class_label,
            "instance_id": self.instance_id,
            "pose_label": self.pose_label,
            "synthetic_origin": self.synthetic_origin,
        }
        if self.yaw is not None:
            d["yaw"] = self.yaw
            d["pitch"] = self.pitch
        return d


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    vocabulary: PoseVocabulary
    records: tuple[SampleRecord, ...]
    class_names: tuple[str, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        validate_records(self.records, self.vocabulary, len(self.class_names))

    def __len__(self):
        return len(self.records)

    def _canonical(self):
        return tuple(replace(r, image_path=str(self.resolve(r).resolve())) for r in self.records)

    def __eq__(self, other):
        # equal when the records agree and point at the same files, however the paths are written
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return (self.vocabulary == other.vocabulary and self.class_names == other.class_names
                and self._canonical() == other._canonical())

    __hash__ = None

    def replace(self, **kw) -> "DatasetManifest":
        return replace(self, **kw)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def instances(self) -> list[str]:
        return list(dict.fromkeys(r.instance_id for r in self.records))

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p


def validate_records(records: Sequence[SampleRecord], vocab: PoseVocabulary, n_classes: int) -> None:
    for i, r in enumerate(records):
        _check_record(r, vocab, n_classes, where=f"record {i}")


def _check_record(r: SampleRecord, vocab: PoseVocabulary, n_classes: int, where: str, line=None):
    problem = None
    if not 0 <= r.pose_label < vocab.n_discrete:
        problem = f"{where}: pose_label {r.pose_label} invalid for {vocab.n_discrete} poses"
    elif not 0 <= r.class_label < n_classes:
        problem = f"{where}: class_label {r.class_label} >= {n_classes} classes"
    elif r.synthetic_origin not in ORIGINS:
        problem = f"{where}: unknown synthetic_origin {r.synthetic_origin!r}"
    if problem:
        raise ManifestParseError(problem, line) if line is not None else ValidationError(problem)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    header = {
        "kind": "header",
        "format": FORMAT_VERSION,
        "vocabulary": manifest.vocabulary.to_dict(),
        "class_names": list(manifest.class_names),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in manifest.records:
            d = r.to_dict()
            d["image_path"] = os.path.relpath(manifest.resolve(r).resolve(), base)
            fh.write(json.dumps(d) + "\n")
    os.replace(tmp, path)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestParseError("missing header", 1)
    try:
        header = json.loads(lines[0])
        vocab = PoseVocabulary.from_dict(header["vocabulary"])
        class_names = tuple(header["class_names"])
    except (ValueError, KeyError, TypeError) as e:
        raise ManifestParseError(f"bad header: {e}", 1) from None
    if header.get("format") != FORMAT_VERSION:
        raise ManifestParseError(f"unsupported manifest format {header.get('format')!r}", 1)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = SampleRecord(
                image_path=str(base / d["image_path"]),
                class_label=int(d["class_label"]),
                instance_id=str(d["instance_id"]),
                pose_label=int(d["pose_label"]),
                synthetic_origin=str(d.get("synthetic_origin", "real")),
                yaw=None if d.get("yaw") is None else float(d["yaw"]),
                pitch=None if d.get("pitch") is None else float(d["pitch"]),
            )
        except (ValueError, KeyError, TypeError) as e:
            raise ManifestParseError(f"malformed record: {e}", lineno) from None
        _check_record(rec, vocab, len(class_names), where="record", line=lineno)
        if check_files and not Path(rec.image_path).is_file():
            raise ValidationError(f"line {lineno}: missing image file {rec.image_path}")
        records.append(rec)
    return DatasetManifest(vocab, tuple(records), class_names, root=base)


def concat_manifests(*manifests: DatasetManifest) -> DatasetManifest:
    first = manifests[0]
    for m in manifests[1:]:
        if m.vocabulary != first.vocabulary or m.class_names != first.class_names:
            raise InvalidArgument("cannot concatenate manifests with different vocabularies or classes")
    recs = []
    for m in manifests:
        recs.extend(replace(r, image_path=str(m.resolve(r))) for r in m.records)
    return first.replace(records=tuple(recs))


# --- pose availability -------------------------------------------------------

@dataclass(frozen=True)
class AvailabilityMatrix:
    allowed: np.ndarray  # (n_classes, n_discrete) bool

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2:
            raise InvalidArgument("availability matrix must be 2-D (classes x poses)")
        empty = np.where(~a.any(axis=1))[0]
        if empty.size:
            raise ValidationError(f"classes {empty.tolist()} have no allowed pose")
        a.setflags(write=False)
        object.__setattr__(self, "allowed", a)

    def __eq__(self, other):
        return isinstance(other, AvailabilityMatrix) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self):
        return hash(self.allowed.tobytes())

    @property
    def shape(self):
        return self.allowed.shape

    def is_allowed(self, class_label: int, pose_label: int) -> bool:
        return bool(self.allowed[class_label, pose_label])

    def to_dict(self) -> dict:
        return {"allowed": self.allowed.astype(int).tolist()}

    @classmethod
    def full(cls, n_classes: int, n_discrete: int) -> "AvailabilityMatrix":
        return cls(np.ones((n_classes, n_discrete), dtype=bool))

    @classmethod
    def from_dict(cls, d: dict, class_names: Sequence[str] | None = None, n_discrete: int | None = None):
        if "allowed" in d:
            return cls(np.asarray(d["allowed"], dtype=bool))
        if "poses" in d:
            if class_names is None or n_discrete is None:
                raise InvalidArgument("a per-class pose list needs class names and the pose count")
            a = np.ones((len(class_names), n_discrete), dtype=bool)
            for name, labels in d["poses"].items():
                if name not in class_names:
                    raise ValidationError(f"unknown class {name!r} in availability")
                row = np.zeros(n_discrete, dtype=bool)
                row[list(labels)] = True
                a[list(class_names).index(name)] = row
            return cls(a)
        raise InvalidArgument("availability JSON needs an 'allowed' grid or a 'poses' map")


def load_availability(path, class_names=None, n_discrete=None) -> AvailabilityMatrix:
    return AvailabilityMatrix.from_dict(json.loads(Path(path).read_text()), class_names, n_discrete)


def unbalanced_matrix(n_classes: int, n_discrete: int, partial_classes: Sequence[int],
                      allowed_poses: Sequence[int] = (1, 4)) -> AvailabilityMatrix:
    """Pose-unbalanced grid: listed classes keep only ``allowed_poses``.

    The default keeps the 2nd and 5th of six yaw poses.
    """
    a = np.ones((n_classes, n_discrete), dtype=bool)
    for c in partial_classes:
        a[c] = False
        a[c, list(allowed_poses)] = True
    return AvailabilityMatrix(a)


def cyclic_matrix(n_classes: int, n_discrete: int, j: int) -> AvailabilityMatrix:
    """Class ``c`` keeps poses ``c, c+1, ..., c+j-1`` modulo ``n_discrete``."""
    if not 1 <= j <= n_discrete:
        raise InvalidArgument(f"need 1 <= j <= {n_discrete}, got {j}")
    a = np.zeros((n_classes, n_discrete), dtype=bool)
    for c in range(n_classes):
        for t in range(j):
            a[c, (c + t) % n_discrete] = True
    return AvailabilityMatrix(a)


def apply_availability(manifest: DatasetManifest, matrix: AvailabilityMatrix) -> DatasetManifest:
    if matrix.shape != (manifest.n_classes, manifest.vocabulary.n_discrete):
        raise InvalidArgument(
            f"availability is {matrix.shape}, manifest needs {(manifest.n_classes, manifest.vocabulary.n_discrete)}")
    keep = tuple(r for r in manifest.records if matrix.allowed[r.class_label, r.pose_label])
    return manifest.replace(records=keep)


# --- traditional augmentation ------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    crop_fraction: float = 0.875
    flip_prob: float = 0.5
    scale_jitter: float = 0.125


def augment_image(img: np.ndarray, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Random crop + resize back, horizontal flip, scale jitter; uint8 in/out."""
    h, w = img.shape[:2]
    pil = Image.fromarray(img)
    ch, cw = max(1, round(h * params.crop_fraction)), max(1, round(w * params.crop_fraction))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    pil = pil.crop((left, top, left + cw, top + ch)).resize((w, h), Image.BILINEAR)
    if rng.uniform() < params.flip_prob:
        pil = pil.transpose(Image.FLIP_LEFT_RIGHT)
    s = 1.0 + rng.uniform(-params.scale_jitter, params.scale_jitter)
    sh, sw = max(1, round(h * s)), max(1, round(w * s))
    scaled = np.asarray(pil.resize((sw, sh), Image.BILINEAR))
    if s >= 1.0:
        y0, x0 = (sh - h) // 2, (sw - w) // 2
        return np.ascontiguousarray(scaled[y0:y0 + h, x0:x0 + w])
    py, px = h - sh, w - sw
    return np.pad(scaled, ((py // 2, py - py // 2), (px // 2, px - px // 2), (0, 0)), mode="edge")


def traditional_augment(manifest: DatasetManifest, target_count: int, rng: np.random.Generator,
                        out_dir, params: AugmentParams = AugmentParams()) -> DatasetManifest:
    """Append augmented copies (written under ``out_dir``) until ``len == target_count``."""
    n = len(manifest)
    if target_count < n:
        raise InvalidArgument(f"target_count {target_count} < manifest size {n}")
    if n == 0 and target_count > 0:
        raise InvalidArgument("cannot augment an empty manifest")
    out = Path(out_dir)
    base = [replace(r, image_path=str(manifest.resolve(r))) for r in manifest.records]
    extra = []
    for i in range(target_count - n):
        src = base[int(rng.integers(n))]
        img = to_uint8(load_image(src.image_path))
        aug = augment_image(img, rng, params)
        dst = out / f"aug_{i:06d}_{Path(src.image_path).name}"
        dst.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(aug).save(dst)
        extra.append(replace(src, image_path=str(dst.resolve()), synthetic_origin="augmented"))
    return manifest.replace(records=tuple(base + extra))


# --- batching ----------------------------------------------------------------

def load_images(manifest: DatasetManifest) -> np.ndarray:
    """Decode every record -> float32 ``(N, H, W, 3)`` in [-1, 1]."""
    if not len(manifest):
        raise InvalidArgument("manifest is empty")
    imgs = [load_image(manifest.resolve(r)) for r in manifest.records]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValidationError(f"images have mixed shapes {sorted(shapes)}")
    h, w, _ = imgs[0].shape
    if h % 4 or w % 4:
        raise ValidationError(f"image size {h}x{w} is not divisible by 4")
    return np.stack(imgs)


@dataclass
class Batch:
    images: np.ndarray        # (B, H, W, 3)
    pose_labels: np.ndarray   # original pose
    target_labels: np.ndarray | None
    class_labels: np.ndarray
    indices: np.ndarray


class BatchIterator:
    """Epoch-indexed batch source; ``epoch(e)`` is deterministic in (seed, e)."""

    MODES = ("paired-random-target", "classify")

    def __init__(self, manifest: DatasetManifest, batch_size: int, seed: int = 0,
                 mode: str = "paired-random-target", images: np.ndarray | None = None, drop_last: bool = False):
        if batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not len(manifest):
            raise InvalidArgument("manifest is empty")
        if mode not in self.MODES:
            raise InvalidArgument(f"unknown batch mode {mode!r}")
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = seed
        self.mode = mode
        self.drop_last = drop_last and len(manifest) >= batch_size
        self.images = load_images(manifest) if images is None else images
        self.pose_labels = np.array([r.pose_label for r in manifest.records], dtype=np.int64)
        self.class_labels = np.array([r.class_label for r in manifest.records], dtype=np.int64)

    def __len__(self):
        n = len(self.manifest)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def epoch(self, e: int) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, e])
        order = rng.permutation(len(self.manifest))
        n_disc = self.manifest.vocabulary.n_discrete
        for b in range(len(self)):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            targets = None
            if self.mode == "paired-random-target":
                targets = rng.integers(0, n_disc, size=len(idx))
            yield Batch(self.images[idx], self.pose_labels[idx], targets, self.class_labels[idx], idx)


def batch_iterator(manifest: DatasetManifest, batch_size: int, seed: int = 0,
                   mode: str = "paired-random-target", epoch: int = 0, images=None) -> Iterator[Batch]:
    return BatchIterator(manifest, batch_size, seed, mode, images=images).epoch(epoch)
