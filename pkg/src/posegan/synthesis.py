"""Pose transformation at inference time and manifest rebalancing."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .data import AvailabilityMatrix, DatasetManifest, SampleRecord, load_images
from .errors import InvalidArgument, ValidationError
from .imageio import load_image, to_uint8
from .networks import mask_batch, to_numpy, to_tensor
from .pose_space import PoseTarget, check_target, label_to_target, nearest_label


def _as_target(vocab, target) -> PoseTarget:
    if isinstance(target, PoseTarget):
        return target
    if np.ndim(target) == 0:
        return label_to_target(vocab, int(target))
    return PoseTarget(float(target[0]), float(target[1]))


def transform_batch(ckpt, images: np.ndarray, targets: Sequence, batch_size: int = 32) -> np.ndarray:
    """``(B, H, W, 3)`` images in [-1, 1] -> syntheses at per-image targets."""
    nets = ckpt.nets
    images = np.asarray(images, dtype=np.float32)
    size = nets.arch.image_size
    if images.ndim != 4 or images.shape[1:] != (size, size, 3):
        raise InvalidArgument(f"expected images of shape (B, {size}, {size}, 3), got {images.shape}")
    if len(targets) != len(images):
        raise InvalidArgument("need one target per image")
    tgts = [_as_target(nets.vocab, t) for t in targets]
    for t in tgts:
        check_target(nets.vocab, t)
    nets.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            m = mask_batch(nets.arch, nets.vocab, tgts[s:s + batch_size])
            out.append(to_numpy(nets.G(to_tensor(images[s:s + batch_size]), m)))
    return np.concatenate(out) if out else images[:0]


def transform(ckpt, image: np.ndarray, target) -> np.ndarray:
    """Synthesize ``image`` (H, W, 3) at ``target`` (PoseTarget, label or (yaw, pitch))."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise InvalidArgument(f"expected an (H, W, 3) image, got shape {image.shape}")
    return transform_batch(ckpt, image[None], [target])[0]


def _pose_distance(vocab, label: int, target: PoseTarget) -> tuple:
    y, p = vocab.label_coords[label]
    return abs(y - target.yaw), abs(p - target.pitch), label


def _choose_source(vocab, candidates: Sequence[SampleRecord], target: PoseTarget) -> SampleRecord:
    # nearest allowed anchor in yaw index; ties go to the lower label
    return min(candidates, key=lambda r: _pose_distance(vocab, r.pose_label, target))


def _save(out_dir: Path, name: str, img: np.ndarray) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    dst = out_dir / name
    Image.fromarray(to_uint8(img)).save(dst)
    return str(dst.resolve())


def _sources_by_instance(manifest: DatasetManifest, matrix: AvailabilityMatrix | None):
    groups: dict[str, list[SampleRecord]] = {}
    for r in manifest.records:
        if r.synthetic_origin != "real":
            continue
        if matrix is not None and not matrix.allowed[r.class_label, r.pose_label]:
            continue
        groups.setdefault(r.instance_id, []).append(r)
    return groups


def rebalance_missing(ckpt, manifest: DatasetManifest, matrix: AvailabilityMatrix, out_dir) -> DatasetManifest:
    """Fill every pose an instance lacks with a synthesis from its nearest allowed pose.

    Existing rows are kept untouched; new rows are tagged ``synthesized``.
    Applying it to its own output adds nothing.
    """
    vocab = manifest.vocabulary
    if matrix.shape != (manifest.n_classes, vocab.n_discrete):
        raise InvalidArgument(f"availability is {matrix.shape}, manifest needs {(manifest.n_classes, vocab.n_discrete)}")
    sources = _sources_by_instance(manifest, matrix)
    have: dict[str, set[int]] = {}
    for r in manifest.records:
        if r.yaw is None:
            have.setdefault(r.instance_id, set()).add(r.pose_label)
    jobs = []
    for iid in manifest.instances():
        missing = [t for t in range(vocab.n_discrete) if t not in have.get(iid, set())]
        if not missing:
            continue
        if iid not in sources:
            raise ValidationError(f"instance {iid} has no real image at an allowed pose to synthesize from")
        for t in missing:
            jobs.append((_choose_source(vocab, sources[iid], label_to_target(vocab, t)), t))
    if not jobs:
        return manifest
    imgs = np.stack([load_image(manifest.resolve(src)) for src, _ in jobs])
    fakes = transform_batch(ckpt, imgs, [t for _, t in jobs])
    out_dir = Path(out_dir)
    new = []
    for (src, t), img in zip(jobs, fakes):
        path = _save(out_dir, f"synth_{src.instance_id}_p{t}.png", img)
        new.append(SampleRecord(path, src.class_label, src.instance_id, t, "synthesized"))
    return manifest.replace(records=manifest.records + tuple(new))


def midpoint_offsets(vocab) -> list[float]:
    return [i + 0.5 for i in range(vocab.n_yaw - 1)]


def synthesize_additional(ckpt, manifest: DatasetManifest, offsets: Sequence[float] | None, out_dir,
                          pitch: float = 0.0) -> DatasetManifest:
    """Add one synthesis per (instance, decimal yaw offset); ``None`` means anchor midpoints."""
    vocab = manifest.vocabulary
    offsets = midpoint_offsets(vocab) if offsets is None else list(offsets)
    targets = [PoseTarget(float(o), float(pitch)) for o in offsets]
    for t in targets:
        check_target(vocab, t)
    if not targets:
        return manifest
    sources = _sources_by_instance(manifest, None)
    jobs = []
    for iid in manifest.instances():
        if iid not in sources:
            continue
        for t in targets:
            jobs.append((_choose_source(vocab, sources[iid], t), t))
    if not jobs:
        return manifest
    imgs = np.stack([load_image(manifest.resolve(src)) for src, _ in jobs])
    fakes = transform_batch(ckpt, imgs, [t for _, t in jobs])
    out_dir = Path(out_dir)
    new = []
    for (src, t), img in zip(jobs, fakes):
        path = _save(out_dir, f"synth_{src.instance_id}_y{t.yaw:g}_p{t.pitch:g}.png", img)
        new.append(SampleRecord(path, src.class_label, src.instance_id, nearest_label(vocab, t), "synthesized",
                                yaw=t.yaw, pitch=t.pitch))
    return manifest.replace(records=manifest.records + tuple(new))


def sweep_targets(vocab, n_yaw_steps: int, n_pitch_steps: int) -> list[list[PoseTarget]]:
    if n_yaw_steps < 1 or n_pitch_steps < 1:
        raise InvalidArgument("sweep needs at least one step per axis")
    (y0, y1), (p0, p1) = vocab.yaw_range, vocab.pitch_range
    ys = np.linspace(y0, y1, n_yaw_steps) if n_yaw_steps > 1 else [y0]
    ps = np.linspace(p0, p1, n_pitch_steps) if n_pitch_steps > 1 else [p0]
    return [[PoseTarget(float(y), float(p)) for y in ys] for p in ps]


def sweep_grid(ckpt, image: np.ndarray, n_yaw_steps: int, n_pitch_steps: int = 1, path=None) -> np.ndarray:
    """Montage of syntheses: one row per pitch step, yaw increasing left to right.

    Returns the uint8 montage and writes it to ``path`` when given.
    """
    grid = sweep_targets(ckpt.nets.vocab, n_yaw_steps, n_pitch_steps)
    flat = [t for row in grid for t in row]
    image = np.asarray(image, dtype=np.float32)
    tiles = transform_batch(ckpt, np.repeat(image[None], len(flat), axis=0), flat)
    h, w = image.shape[:2]
    montage = np.zeros((h * n_pitch_steps, w * n_yaw_steps, 3), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, n_yaw_steps)
        montage[r * h:(r + 1) * h, c * w:(c + 1) * w] = to_uint8(tile)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(montage).save(path)
    return montage


def synthesized_images(manifest: DatasetManifest) -> np.ndarray:
    return load_images(manifest.replace(records=tuple(r for r in manifest.records
                                                      if r.synthetic_origin == "synthesized")))
