"""Recognition experiments: build the dataset roles, train small classifiers, compare accuracies."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import (AvailabilityMatrix, DatasetManifest, apply_availability, cyclic_matrix, load_images,
                   load_manifest, traditional_augment)
from .errors import InvalidArgument, ValidationError
from .networks import to_tensor
from .synthesis import rebalance_missing, synthesize_additional

log = logging.getLogger(__name__)

ROLES = ("P-UB", "P-B", "S-P-B", "SA-P-B", "A-P-UB")


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 32
    n_blocks: int = 4
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 1e-4

    def __post_init__(self):
        if min(self.width, self.n_blocks, self.epochs, self.batch_size) < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise InvalidArgument("classifier hyperparameters must be positive")


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.c1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.b1 = nn.BatchNorm2d(c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.b2 = nn.BatchNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        h = F.relu(self.b1(self.c1(x)))
        h = self.b2(self.c2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class ResNetSmall(nn.Module):
    """Strided stem, then ``n_blocks`` residual blocks doubling width after the first."""

    def __init__(self, n_classes: int, width: int = 32, n_blocks: int = 4):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 2, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        blocks, c = [], width
        for i in range(n_blocks):
            c_out = width * 2 ** i
            blocks.append(_Block(c, c_out, 1 if i == 0 else 2))
            c = c_out
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(c, n_classes)

    def forward(self, x):
        h = self.blocks(self.stem(x))
        return self.fc(h.mean(dim=(2, 3)))


@dataclass
class Classifier:
    net: ResNetSmall
    class_names: tuple[str, ...]
    cfg: ClassifierConfig
    seed: int

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        self.net.eval()
        out = []
        with torch.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.net(to_tensor(images[s:s + batch_size])).argmax(1).numpy())
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_classifier(manifest: DatasetManifest, cfg: ClassifierConfig = ClassifierConfig(), seed: int = 0,
                     images: np.ndarray | None = None) -> Classifier:
    if not len(manifest):
        raise InvalidArgument("training manifest is empty")
    images = load_images(manifest) if images is None else images
    x = to_tensor(images)
    y = torch.as_tensor([r.class_label for r in manifest.records], dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ResNetSmall(manifest.n_classes, cfg.width, cfg.n_blocks)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    rng = np.random.default_rng(seed)
    net.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    net.eval()
    return Classifier(net, manifest.class_names, cfg, seed)


@dataclass
class AccuracyRow:
    role: str
    seed: int
    per_class: dict[str, float]
    overall: float
    confusion: list[list[int]] = field(default_factory=list)


def accuracy_from_predictions(pred: np.ndarray, truth: np.ndarray, class_names: Sequence[str]):
    n = len(class_names)
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    per_class = {}
    for c, name in enumerate(class_names):
        tot = conf[c].sum()
        if tot:
            per_class[name] = float(conf[c, c] / tot)
    total = conf.sum()
    overall = float(np.trace(conf) / total) if total else float("nan")
    return per_class, overall, conf


def evaluate_classifier(clf: Classifier, test: DatasetManifest, role: str = "", seed: int | None = None,
                        images: np.ndarray | None = None) -> AccuracyRow:
    """Per-class accuracy plus overall accuracy pooled over all test images."""
    if tuple(test.class_names) != tuple(clf.class_names):
        raise ValidationError("test manifest class names differ from the classifier's")
    images = load_images(test) if images is None else images
    truth = np.array([r.class_label for r in test.records])
    per_class, overall, conf = accuracy_from_predictions(clf.predict(images), truth, test.class_names)
    return AccuracyRow(role, clf.seed if seed is None else seed, per_class, overall, conf.tolist())


def confusion_select(confusion: np.ndarray, m: int) -> list[int]:
    """Classes involved in the most off-diagonal mass, picked pair by pair.

    Pairs are ranked by symmetric confusion (ties to lower indices); both
    members of a pair join in index order. Remaining slots fill by index.
    """
    c = np.asarray(confusion, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n):
        raise InvalidArgument("confusion matrix must be square")
    if not 0 <= m <= n:
        raise InvalidArgument(f"m must lie in [0, {n}]")
    sym = c + c.T
    pairs = sorted(((sym[i, j], i, j) for i in range(n) for j in range(i + 1, n) if sym[i, j] > 0),
                   key=lambda t: (-t[0], t[1], t[2]))
    chosen: list[int] = []
    for _, i, j in pairs:
        for k in (i, j):
            if len(chosen) < m and k not in chosen:
                chosen.append(k)
    for k in range(n):
        if len(chosen) < m and k not in chosen:
            chosen.append(k)
    return chosen


# --- plans -------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    train_manifest: str
    test_manifest: str
    checkpoint: str | None
    out_dir: str
    availability: dict | None = None
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    roles: tuple[str, ...] = ROLES
    offsets: tuple[float, ...] | None = None
    sweep_levels: tuple[int, ...] = ()
    sweep_select: int | None = None
    augment_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        self.roles = tuple(self.roles)
        self.sweep_levels = tuple(self.sweep_levels)
        if not self.seeds:
            raise InvalidArgument("an experiment plan needs at least one seed")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise InvalidArgument(f"unknown dataset roles {sorted(bad)}")
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        if any(j < 1 for j in self.sweep_levels):
            raise InvalidArgument("sweep levels must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown plan keys {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None:
            for k in ("train_manifest", "test_manifest", "checkpoint", "out_dir"):
                if d.get(k) is not None and not Path(d[k]).is_absolute():
                    d[k] = str(Path(base_dir) / d[k])
        for k in ("seeds", "roles", "sweep_levels"):
            if k in d:
                d[k] = tuple(d[k])
        if d.get("offsets") is not None:
            d["offsets"] = tuple(float(o) for o in d["offsets"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ValidationError(f"bad experiment plan: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def _matrix(plan: ExperimentPlan, base: DatasetManifest) -> AvailabilityMatrix:
    if plan.availability is None:
        return AvailabilityMatrix.full(base.n_classes, base.vocabulary.n_discrete)
    return AvailabilityMatrix.from_dict(plan.availability, base.class_names, base.vocabulary.n_discrete)


def _check_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    shared = set(train.instances()) & set(test.instances())
    if shared:
        raise ValidationError(f"test instances also appear in training: {sorted(shared)[:5]}")


def build_datasets(base: DatasetManifest, matrix: AvailabilityMatrix, ckpt, work_dir, roles=ROLES,
                   offsets=None, augment_seed: int = 0) -> dict[str, DatasetManifest]:
    """Training manifests for each requested role; ``base`` is the full pose grid."""
    work = Path(work_dir)
    out: dict[str, DatasetManifest] = {}
    pub = apply_availability(base, matrix)
    need_spb = any(r in roles for r in ("S-P-B", "SA-P-B", "A-P-UB"))
    if need_spb and ckpt is None:
        raise InvalidArgument("synthesized roles need a pose-transformation checkpoint")
    spb = rebalance_missing(ckpt, pub, matrix, work / "synth") if need_spb else None
    for role in roles:
        if role == "P-UB":
            out[role] = pub
        elif role == "P-B":
            out[role] = base
        elif role == "S-P-B":
            out[role] = spb
        elif role == "SA-P-B":
            out[role] = synthesize_additional(ckpt, spb, offsets, work / "synth_extra")
        elif role == "A-P-UB":
            out[role] = traditional_augment(pub, len(spb), np.random.default_rng(augment_seed), work / "augment")
    return out


def _subset_classes(m: DatasetManifest, classes: Sequence[int]) -> DatasetManifest:
    keep = set(classes)
    return m.replace(records=tuple(r for r in m.records if r.class_label in keep))


def _summarize(rows: list[AccuracyRow]) -> dict[str, dict[str, float]]:
    by_role: dict[str, list[float]] = {}
    for r in rows:
        by_role.setdefault(r.role, []).append(r.overall)
    return {k: {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, "n": len(v)}
            for k, v in by_role.items()}


@dataclass
class ExperimentResult:
    rows: list[AccuracyRow]
    summary: dict
    deltas: dict
    sweep: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "summary": self.summary, "deltas": self.deltas,
                "sweep": self.sweep, "sizes": self.sizes}


def _run_roles(datasets: dict[str, DatasetManifest], test: DatasetManifest, test_images, cfg, seeds,
               tag: str = "") -> list[AccuracyRow]:
    rows = []
    cache = {role: load_images(m) for role, m in datasets.items()}
    for seed in seeds:
        for role, m in datasets.items():
            t0 = time.time()
            clf = train_classifier(m, cfg, seed, images=cache[role])
            row = evaluate_classifier(clf, test, role=tag + role, seed=seed, images=test_images)
            log.info("%s seed %d: overall %.3f (%d train images, %.0fs)", tag + role, seed, row.overall, len(m),
                     time.time() - t0)
            rows.append(row)
    return rows


def run_plan(plan: ExperimentPlan, ckpt=None) -> ExperimentResult:
    """Train and evaluate a classifier per (role, seed), plus the optional bias sweep."""
    from .trainer import load_checkpoint

    base = load_manifest(plan.train_manifest)
    test = load_manifest(plan.test_manifest)
    _check_disjoint(base, test)
    if ckpt is None and plan.checkpoint is not None:
        ckpt = load_checkpoint(plan.checkpoint)
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_images = load_images(test)
    matrix = _matrix(plan, base)
    datasets = build_datasets(base, matrix, ckpt, out / "data", plan.roles, plan.offsets, plan.augment_seed)
    rows = _run_roles(datasets, test, test_images, plan.classifier, plan.seeds)
    summary = _summarize(rows)
    deltas = {}
    for a, b in (("S-P-B", "P-UB"), ("S-P-B", "A-P-UB"), ("SA-P-B", "P-UB"), ("P-B", "P-UB")):
        if a in summary and b in summary:
            deltas[f"{a} - {b}"] = summary[a]["mean"] - summary[b]["mean"]
    sweep = {}
    if plan.sweep_levels:
        classes = list(range(base.n_classes))
        if plan.sweep_select is not None:
            ref = _run_roles({"P-B": base}, test, test_images, plan.classifier, plan.seeds[:1], tag="select/")
            classes = sorted(confusion_select(np.array(ref[0].confusion), plan.sweep_select))
        sub_base, sub_test = _subset_classes(base, classes), _subset_classes(test, classes)
        sub_imgs = load_images(sub_test)
        for j in plan.sweep_levels:
            mj = cyclic_matrix(base.n_classes, base.vocabulary.n_discrete, j)
            ds = build_datasets(sub_base, mj, ckpt, out / "data" / f"sweep{j}", ("P-UB", "S-P-B"))
            srows = _run_roles(ds, sub_test, sub_imgs, plan.classifier, plan.seeds, tag=f"{j}/")
            rows += srows
            s = _summarize(srows)
            sweep[str(j)] = {"P-UB": s[f"{j}/P-UB"], "S-P-B": s[f"{j}/S-P-B"],
                             "delta": s[f"{j}/S-P-B"]["mean"] - s[f"{j}/P-UB"]["mean"],
                             "classes": [base.class_names[c] for c in classes]}
    sizes = {role: len(m) for role, m in datasets.items()}
    result = ExperimentResult(rows, summary, deltas, sweep, sizes)
    write_results(result, base.class_names, out)
    return result


def write_results(result: ExperimentResult, class_names: Sequence[str], out_dir) -> None:
    """``results.json`` plus ``accuracy_table.csv`` (classes x roles, means over seeds)."""
    out = Path(out_dir)
    (out / "results.json").write_text(json.dumps(result.to_dict(), indent=1))
    roles = list(dict.fromkeys(r.role for r in result.rows))
    with open(out / "accuracy_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + roles)
        for name in class_names:
            vals = []
            for role in roles:
                accs = [r.per_class[name] for r in result.rows if r.role == role and name in r.per_class]
                vals.append(f"{100 * np.mean(accs):.1f}" if accs else "")
            w.writerow([name] + vals)
        w.writerow(["overall"] + [f"{100 * result.summary.get(role, {}).get('mean', float('nan')):.1f}"
                                  if role in result.summary else
                                  f"{100 * np.mean([r.overall for r in result.rows if r.role == role]):.1f}"
                                  for role in roles])
