"""Foreground-masked synthesis metrics, graph-based segmentation and pose probes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, SampleRecord, load_images
from .errors import EmptyForegroundError, InvalidArgument
from .networks import PoseProbe, mask_batch, to_numpy, to_tensor
from .pose_space import PoseTarget, label_to_target

# --- segmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class SegmentationParams:
    sigma: float = 0.8
    k: float = 300.0
    min_size: int = 50

    def __post_init__(self):
        if self.sigma <= 0 or self.k <= 0 or self.min_size <= 0:
            raise InvalidArgument("segmentation parameters must all be > 0")


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def _as_255(image: np.ndarray) -> np.ndarray:
    """uint8 images pass through; float images are taken to be in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgument(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64)
    return (img.astype(np.float64) + 1.0) * 127.5


def fh_segment(image: np.ndarray, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    """Graph-based segmentation on the 8-connected pixel grid.

    Edge weights are Euclidean RGB distances (0-255 scale) after Gaussian
    smoothing. Components merge when the edge weight is at most both sides'
    internal difference plus ``k / size``; a final pass absorbs components
    smaller than ``min_size``. Labels are contiguous from 0 in raster order.
    """
    img = _as_255(image)
    h, w, _ = img.shape
    smooth = np.stack([gaussian_filter(img[..., c], params.sigma, mode="nearest", truncate=4.0)
                       for c in range(3)], axis=-1)
    idx = np.arange(h * w).reshape(h, w)
    pairs = []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ys = slice(0, h - dy)
        xs = slice(max(0, -dx), w - max(0, dx))
        ys2 = slice(dy, h)
        xs2 = slice(max(0, dx), w + min(0, dx))
        a, b = idx[ys, xs].ravel(), idx[ys2, xs2].ravel()
        wgt = np.sqrt(((smooth[ys, xs] - smooth[ys2, xs2]) ** 2).sum(-1)).ravel()
        pairs.append((a, b, wgt))
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    wgt = np.concatenate([p[2] for p in pairs])
    order = np.argsort(wgt, kind="stable")
    a, b, wgt = a[order].tolist(), b[order].tolist(), wgt[order].tolist()

    ds = _DisjointSet(h * w)
    thresh = [params.k] * (h * w)
    for u, v, wt in zip(a, b, wgt):
        ru, rv = ds.find(u), ds.find(v)
        if ru != rv and wt <= thresh[ru] and wt <= thresh[rv]:
            r = ds.union(ru, rv)
            thresh[r] = wt + params.k / ds.size[r]
    for u, v in zip(a, b):
        ru, rv = ds.find(u), ds.find(v)
        if ru != rv and (ds.size[ru] < params.min_size or ds.size[rv] < params.min_size):
            ds.union(ru, rv)

    roots = np.array([ds.find(i) for i in range(h * w)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse].reshape(h, w)


def foreground_mask(labels: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """Everything not connected-by-label to one of the four corner pixels."""
    labels = np.asarray(labels)
    corners = {labels[0, 0], labels[0, -1], labels[-1, 0], labels[-1, -1]}
    fg = ~np.isin(labels, list(corners))
    if not fg.any():
        raise EmptyForegroundError("segmentation found no foreground component")
    return fg


def segment_foreground(image: np.ndarray, params: SegmentationParams = SegmentationParams()) -> np.ndarray:
    return foreground_mask(fh_segment(image, params), image)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


# --- metrics ----------------------------------------------------------------------

def masked_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error on the 0-255 scale over masked pixels and all channels."""
    a, b, mask = np.asarray(a), np.asarray(b), np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask.shape != a.shape[:2]:
        raise InvalidArgument(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    if not mask.any():
        raise InvalidArgument("mask is empty")
    d = _as_255(a) - _as_255(b)
    return float((d[mask] ** 2).mean())


def psnr(mse: float) -> float:
    if mse < 0 or math.isnan(mse):
        raise InvalidArgument(f"MSE must be >= 0, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


@dataclass
class MetricReport:
    per_instance: dict[str, dict[str, float]] = field(default_factory=dict)
    mean_mse: float = math.nan
    mean_psnr: float = math.nan
    n_instances: int = 0
    n_pairs: int = 0
    skipped_empty_foreground: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, name: str = "model") -> str:
        return (f"{'method':<12} {'mean MSE':>10} {'mean PSNR':>10} {'instances':>10}\n"
                f"{name:<12} {self.mean_mse:>10.2f} {self.mean_psnr:>10.2f} {self.n_instances:>10d}")


# A transform maps (B, H, W, 3) float images and a list of target labels to images.
TransformFn = Callable[[np.ndarray, Sequence[int]], np.ndarray]


def identity_baseline(images: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    return np.asarray(images)


def checkpoint_transform(ckpt, batch_size: int = 32) -> TransformFn:
    nets = ckpt.nets

    def run(images, targets):
        out = []
        with torch.no_grad():
            for s in range(0, len(images), batch_size):
                x = to_tensor(images[s:s + batch_size])
                m = mask_batch(nets.arch, nets.vocab, list(targets[s:s + batch_size]))
                out.append(to_numpy(nets.G(x, m)))
        return np.concatenate(out)

    return run


def evaluate_model(model, manifest: DatasetManifest, oracle, params: SegmentationParams = SegmentationParams(),
                   images: np.ndarray | None = None) -> MetricReport:
    """Synthesize every (source image, other discrete pose) pair of each instance.

    ``model`` is a Checkpoint or a ``TransformFn``. ``oracle(instance_id,
    PoseTarget)`` returns the ground-truth image in [-1, 1]; the foreground
    mask is segmented from that ground truth.
    """
    fn = model if callable(model) else checkpoint_transform(model)
    vocab = manifest.vocabulary
    images = load_images(manifest) if images is None else images
    src_idx, targets = [], []
    for i, r in enumerate(manifest.records):
        for t in range(vocab.n_discrete):
            if t != r.pose_label:
                src_idx.append(i)
                targets.append(t)
    report = MetricReport()
    if not src_idx:
        return report
    fakes = fn(images[np.array(src_idx)], targets)
    gt_cache: dict = {}
    per_inst: dict[str, list[tuple[float, float]]] = {}
    for j, (i, t) in enumerate(zip(src_idx, targets)):
        rec = manifest.records[i]
        key = (rec.instance_id, t)
        if key not in gt_cache:
            gt = oracle(rec.instance_id, label_to_target(vocab, t))
            try:
                gt_cache[key] = (gt, segment_foreground(gt, params))
            except EmptyForegroundError:
                gt_cache[key] = (gt, None)
        gt, mask = gt_cache[key]
        if mask is None:
            report.skipped_empty_foreground += 1
            continue
        mse = masked_mse(fakes[j], gt, mask)
        per_inst.setdefault(rec.instance_id, []).append((mse, psnr(mse)))
    for iid, vals in per_inst.items():
        m = np.array(vals)
        report.per_instance[iid] = {"mse": float(m[:, 0].mean()), "psnr": float(m[:, 1].mean()), "n": len(vals)}
    report.n_instances = len(per_inst)
    report.n_pairs = sum(len(v) for v in per_inst.values())
    if per_inst:
        report.mean_mse = float(np.mean([v["mse"] for v in report.per_instance.values()]))
        report.mean_psnr = float(np.mean([v["psnr"] for v in report.per_instance.values()]))
    return report


# --- pose ranking -----------------------------------------------------------------

def pose_probabilities(ckpt, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            _, logits = ckpt.nets.D(to_tensor(images[s:s + batch_size]))
            out.append(torch.softmax(logits, dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0, ckpt.nets.arch.n_discrete))


def rank_by_pose(ckpt, manifest: DatasetManifest, pose_label: int, k: int,
                 images: np.ndarray | None = None) -> list[tuple[SampleRecord, float]]:
    """Top-``k`` records by the critic's softmax probability of ``pose_label``."""
    if not 0 <= pose_label < manifest.vocabulary.n_discrete:
        raise InvalidArgument(f"pose_label {pose_label} outside the vocabulary")
    if k < 0:
        raise InvalidArgument("k must be >= 0")
    if k == 0 or not len(manifest):
        return []
    images = load_images(manifest) if images is None else images
    probs = pose_probabilities(ckpt, images)[:, pose_label]
    order = np.argsort(-probs, kind="stable")[:k]
    return [(manifest.records[i], float(probs[i])) for i in order]


# --- fresh probes -------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    width: int = 64
    stages: int = 3
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


def canonical_features(ckpt, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen ``G.eliminate`` output, NCHW float32."""
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(ckpt.nets.G.eliminate(to_tensor(images[s:s + batch_size])).numpy())
    return np.concatenate(out)


def train_probe(inputs: np.ndarray, labels: np.ndarray, n_classes: int, cfg: ProbeConfig = ProbeConfig()) -> PoseProbe:
    """Fit a fresh PoseProbe on NCHW ``inputs``."""
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
    y = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        probe = PoseProbe(x.shape[1], x.shape[2], n_classes, cfg.width, cfg.stages)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    probe.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            loss = torch.nn.functional.cross_entropy(probe(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.eval()
    return probe


def probe_accuracy(probe: PoseProbe, inputs: np.ndarray, labels: np.ndarray) -> float:
    with torch.no_grad():
        pred = probe(torch.as_tensor(np.asarray(inputs, dtype=np.float32))).argmax(1).numpy()
    return float((pred == np.asarray(labels)).mean())


def images_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
