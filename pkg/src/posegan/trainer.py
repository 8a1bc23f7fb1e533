"""Adversarial training loop, schedules, checkpoints and finetuning.

An epoch is one generator pass over the training manifest. Each generator
step is preceded by ``n_critic`` critic steps on their own shuffled batches
and followed by one pose-eliminate step on the generator's batch. From
``phase2_start`` onward each generator step draws decimal targets with
probability ``decimal_prob``; such steps use the style-consistency term in
place of the pose-classification term.

All randomness is derived statelessly from ``(seed, epoch)``, so a run
resumed from a checkpoint reproduces the uninterrupted loss log.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import shutil
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .data import Batch, BatchIterator, DatasetManifest
from .errors import CheckpointError, InvalidArgument, NonFiniteLossError
from .networks import ArchConfig, Networks, init_params, mask_batch, to_tensor
from .pose_space import PoseVocabulary, sample_decimal_pose

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "adv_d", "adv_g", "cls", "rec", "pose_g", "gp",
               "cls_real", "pose_p", "style", "decimal", "lambda_pose", "lr")


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 60
    batch_size: int = 16
    lr0: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    n_critic: int = 5
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    phase2_start: float = 0.75
    decimal_prob: float = 0.5
    lr_hold: float = 0.5
    lambda_pose_hold: float = 0.25
    adversarial_mode: str = "wgan"
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(base_width=16))
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.phase2_start <= 1:
            raise InvalidArgument(f"phase2_start must lie in (0, 1], got {self.phase2_start}")
        if self.n_critic < 1:
            raise InvalidArgument("n_critic must be >= 1")
        if self.total_epochs < 0 or self.batch_size < 1:
            raise InvalidArgument("total_epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.decimal_prob <= 1:
            raise InvalidArgument("decimal_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = L.LossWeights(**d["weights"])
        if "arch" in d:
            d["arch"] = ArchConfig(**d["arch"])
        return cls(**d)


# --- schedules -----------------------------------------------------------------

def schedule_lr(cfg: TrainConfig, epoch: float) -> float:
    """Constant ``lr0`` for the first ``lr_hold`` of training, then linear to 0."""
    E = cfg.total_epochs
    hold = cfg.lr_hold * E
    if E == 0 or epoch <= hold:
        return cfg.lr0
    return cfg.lr0 * max(0.0, (E - epoch) / (E - hold))


def schedule_lambda_pose(cfg: TrainConfig, epoch: float) -> float:
    """``lambda_pose`` held for the first ``lambda_pose_hold`` of training, then linear to 0."""
    E = cfg.total_epochs
    hold = cfg.lambda_pose_hold * E
    lp = cfg.weights.lambda_pose
    if E == 0 or epoch <= hold:
        return lp
    return lp * max(0.0, 1.0 - (epoch - hold) / (E - hold))


def in_phase2(cfg: TrainConfig, epoch: int) -> bool:
    return cfg.phase2_start < 1 and epoch >= cfg.phase2_start * cfg.total_epochs


# --- state -------------------------------------------------------------------------

@dataclass
class TrainState:
    nets: Networks
    cfg: TrainConfig
    opt_G: torch.optim.Adam
    opt_D: torch.optim.Adam
    opt_P: torch.optim.Adam
    epoch: int = 0
    step: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))

    @classmethod
    def fresh(cls, nets: Networks, cfg: TrainConfig, lr: float | None = None) -> "TrainState":
        lr = cfg.lr0 if lr is None else lr
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        return cls(nets, cfg,
                   torch.optim.Adam(nets.G.parameters(), lr=lr, betas=betas),
                   torch.optim.Adam(nets.D.parameters(), lr=lr, betas=betas),
                   torch.optim.Adam(nets.P.parameters(), lr=lr, betas=betas))

    def optimizers(self) -> dict[str, torch.optim.Adam]:
        return {"G": self.opt_G, "D": self.opt_D, "P": self.opt_P}

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers().values():
            for g in opt.param_groups:
                g["lr"] = lr


@contextlib.contextmanager
def frozen(*modules):
    """Disable parameter gradients (activations still propagate gradients)."""
    saved = [(p, p.requires_grad) for m in modules for p in m.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _check_finite(parts: dict, state: TrainState, what: str) -> None:
    for k, v in parts.items():
        if v is not None and not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            snap = {k2: (None if v2 is None else float(v2.detach() if torch.is_tensor(v2) else v2)) for k2, v2 in parts.items()}
            snap.update(epoch=state.epoch, step=state.step, stage=what)
            raise NonFiniteLossError(f"non-finite {k} in {what} at epoch {state.epoch} step {state.step}", snap)


def _targets_mask(state: TrainState, labels_or_coords) -> torch.Tensor:
    return mask_batch(state.nets.arch, state.nets.vocab, labels_or_coords)


def d_step(state: TrainState, batch: Batch, target_mask: torch.Tensor | None = None,
           gen: torch.Generator | None = None) -> dict:
    nets, cfg = state.nets, state.cfg
    x = to_tensor(batch.images)
    c_org = torch.as_tensor(batch.pose_labels)
    if target_mask is None:
        target_mask = _targets_mask(state, batch.target_labels)
    with torch.no_grad():
        fake = nets.G(x, target_mask)
    real_src, real_cls = nets.D(x)
    fake_src, _ = nets.D(fake)
    parts = {
        "adv_d": L.adv_d(real_src, fake_src, cfg.adversarial_mode),
        "cls_real": L.cls_real(real_cls, c_org),
        "gp": L.gradient_penalty(lambda t: nets.D(t)[0], x, fake, generator=gen)
        if cfg.weights.lambda_gp > 0 else None,
    }
    total = L.total_d(cfg.weights, parts)
    _check_finite({**parts, "total_d": total}, state, "d_step")
    state.opt_D.zero_grad(set_to_none=True)
    total.backward()
    state.opt_D.step()
    state.opt_D.zero_grad(set_to_none=True)
    return {k: (None if v is None else float(v.detach())) for k, v in parts.items()}


def g_step(state: TrainState, batch: Batch, decimal_targets=None, lambda_pose: float | None = None) -> dict:
    """One generator update; ``decimal_targets`` (list of PoseTarget) switches to style consistency."""
    nets, cfg = state.nets, state.cfg
    x = to_tensor(batch.images)
    c_org = torch.as_tensor(batch.pose_labels)
    decimal = decimal_targets is not None
    trg_mask = _targets_mask(state, decimal_targets if decimal else batch.target_labels)
    org_mask = _targets_mask(state, batch.pose_labels)
    with frozen(nets.D, nets.P):
        x_r = nets.G.eliminate(x)
        fake = nets.G.add_pose(x_r, trg_mask)
        fake_src, fake_cls = nets.D(fake)
        rec = L.reconstruction(x, nets.G(fake, org_mask))
        pose_g = L.pose_elim_g(nets.P(x_r))
        if decimal:
            parts = {"adv_g": None, "cls": None, "style": L.style_consistency(fake_src, cfg.adversarial_mode)}
        else:
            parts = {"adv_g": L.adv_g(fake_src, cfg.adversarial_mode),
                     "cls": L.cls_fake(fake_cls, torch.as_tensor(batch.target_labels)), "style": None}
        parts.update(rec=rec, pose_g=pose_g)
        total = L.total_g(cfg.weights, parts, lambda_pose=lambda_pose)
        _check_finite({**parts, "total_g": total}, state, "g_step")
        state.opt_G.zero_grad(set_to_none=True)
        total.backward()
    state.opt_G.step()
    state.opt_G.zero_grad(set_to_none=True)
    return {k: (None if v is None else float(v.detach())) for k, v in parts.items()}


def p_step(state: TrainState, batch: Batch) -> dict:
    nets = state.nets
    x = to_tensor(batch.images)
    with torch.no_grad():
        x_r = nets.G.eliminate(x)
    loss = L.pose_elim_p(nets.P(x_r), torch.as_tensor(batch.pose_labels))
    _check_finite({"pose_p": loss}, state, "p_step")
    state.opt_P.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_P.step()
    state.opt_P.zero_grad(set_to_none=True)
    return {"pose_p": float(loss.detach())}


# --- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    nets: Networks
    config: TrainConfig
    state: TrainState | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def vocab(self) -> PoseVocabulary:
        return self.nets.vocab

    @property
    def epoch(self) -> int:
        return self.state.epoch if self.state is not None else self.config.total_epochs


def _blob_name(*parts) -> str:
    return ".".join(str(p) for p in parts) + ".bin"


def _write_blob(path: Path, t: torch.Tensor) -> None:
    arr = t.detach().cpu().numpy().astype("<f4", copy=False)
    path.write_bytes(np.ascontiguousarray(arr).tobytes())


def _read_blob(path: Path, shape) -> torch.Tensor:
    data = path.read_bytes()
    n = int(np.prod(shape)) if len(shape) else 1
    if len(data) != 4 * n:
        raise CheckpointError(f"blob {path.name}: expected {4 * n} bytes, found {len(data)} (truncated?)")
    return torch.from_numpy(np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``meta.json`` plus one little-endian float32 blob per tensor, atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "blobs").mkdir(parents=True)
    index = []
    for net, module in ckpt.nets.modules().items():
        for name, t in module.state_dict().items():
            fname = _blob_name(net, name)
            _write_blob(tmp / "blobs" / fname, t)
            index.append({"net": net, "name": name, "shape": list(t.shape), "file": fname})
    meta = {
        "version": ckpt.version,
        "arch": ckpt.nets.arch.to_dict(),
        "vocabulary": ckpt.nets.vocab.to_dict(),
        "train_config": ckpt.config.to_dict(),
        "blobs": index,
        "state": None,
    }
    if ckpt.state is not None:
        st = ckpt.state
        opt_index = {}
        for net, opt in st.optimizers().items():
            sd = opt.state_dict()
            entries = []
            for pid, s in sorted(sd["state"].items()):
                e = {"param": pid, "step": float(s["step"])}
                for key in ("exp_avg", "exp_avg_sq"):
                    fname = _blob_name("opt", net, pid, key)
                    _write_blob(tmp / "blobs" / fname, s[key])
                    e[key] = {"file": fname, "shape": list(s[key].shape)}
                entries.append(e)
            opt_index[net] = {"lr": sd["param_groups"][0]["lr"], "moments": entries}
        meta["state"] = {"epoch": st.epoch, "step": st.step, "optimizers": opt_index,
                         "history": list(st.history)}
    (tmp / "meta.json").write_text(json.dumps(meta, indent=1))
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no meta.json in {path}") from None
    except ValueError as e:
        raise CheckpointError(f"corrupt meta.json: {e}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        arch = ArchConfig(**meta["arch"])
        vocab = PoseVocabulary.from_dict(meta["vocabulary"])
        cfg = TrainConfig.from_dict(meta["train_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"bad checkpoint metadata: {e}") from None
    nets = init_params(arch, 0, vocab)
    mods = nets.modules()
    sds = {k: {} for k in mods}
    for b in meta["blobs"]:
        f = path / "blobs" / b["file"]
        if not f.is_file():
            raise CheckpointError(f"missing blob {b['file']}")
        sds[b["net"]][b["name"]] = _read_blob(f, tuple(b["shape"]))
    for k, m in mods.items():
        try:
            m.load_state_dict(sds[k], strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"parameters for {k} do not match the architecture: {e}") from None
    state = None
    if meta.get("state"):
        st = meta["state"]
        state = TrainState.fresh(nets, cfg)
        for net, opt in state.optimizers().items():
            info = st["optimizers"][net]
            params = opt.param_groups[0]["params"]
            sd = opt.state_dict()
            sd["param_groups"][0]["lr"] = info["lr"]
            for e in info["moments"]:
                sd["state"][e["param"]] = {
                    "step": torch.tensor(e["step"]),
                    "exp_avg": _read_blob(path / "blobs" / e["exp_avg"]["file"], tuple(e["exp_avg"]["shape"])),
                    "exp_avg_sq": _read_blob(path / "blobs" / e["exp_avg_sq"]["file"],
                                             tuple(e["exp_avg_sq"]["shape"])),
                }
            assert len(params) >= len(info["moments"])
            opt.load_state_dict(sd)
        state.epoch, state.step = st["epoch"], st["step"]
        state.history.extend(st.get("history", []))
    return Checkpoint(nets, cfg, state, version=meta["version"])


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if a.config != b.config or a.nets.arch != b.nets.arch or a.nets.vocab != b.nets.vocab or a.version != b.version:
        return False
    for k, m in a.nets.modules().items():
        sa, sb = m.state_dict(), b.nets.modules()[k].state_dict()
        if sa.keys() != sb.keys() or any(not torch.equal(sa[n], sb[n]) for n in sa):
            return False
    if (a.state is None) != (b.state is None):
        return False
    if a.state is not None:
        if (a.state.epoch, a.state.step) != (b.state.epoch, b.state.step):
            return False
        for k, oa in a.state.optimizers().items():
            da, db = oa.state_dict(), b.state.optimizers()[k].state_dict()
            if da["state"].keys() != db["state"].keys():
                return False
            for pid in da["state"]:
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    if not torch.equal(torch.as_tensor(da["state"][pid][key]), torch.as_tensor(db["state"][pid][key])):
                        return False
    return True


# --- loop ----------------------------------------------------------------------------

def _mean_parts(rows: list[dict]) -> dict:
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run(state: TrainState, manifest: DatasetManifest, out_dir: Path | None, images=None,
         lr_scale: float = 1.0, progress=None) -> TrainState:
    cfg = state.cfg
    if not len(manifest):
        raise InvalidArgument("training manifest is empty")
    if manifest.vocabulary != state.nets.vocab:
        raise InvalidArgument("manifest vocabulary does not match the networks")
    g_iter = BatchIterator(manifest, cfg.batch_size, seed=cfg.seed, images=images)
    d_iter = BatchIterator(manifest, cfg.batch_size, seed=cfg.seed + 7_919, images=g_iter.images)
    vocab = state.nets.vocab
    log_path = out_dir / "loss_log.csv" if out_dir is not None else None
    if log_path is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)
    for m in state.nets.modules().values():
        m.train()
    while state.epoch < cfg.total_epochs:
        e = state.epoch
        t0 = time.time()
        lr = schedule_lr(cfg, e) * lr_scale
        lp = schedule_lambda_pose(cfg, e)
        state.set_lr(lr)
        phase2 = in_phase2(cfg, e)
        rng = np.random.default_rng([cfg.seed, e, 1])
        gp_gen = torch.Generator().manual_seed(int(np.random.default_rng([cfg.seed, e, 2]).integers(2 ** 62)))
        d_batches = _cycle(d_iter, e)
        rows = []
        for batch in g_iter.epoch(e):
            decimal = phase2 and rng.uniform() < cfg.decimal_prob
            d_rows = []
            for _ in range(cfg.n_critic):
                db = next(d_batches)
                if phase2 and rng.uniform() < cfg.decimal_prob:
                    tm = _targets_mask(state, [sample_decimal_pose(vocab, rng) for _ in range(len(db.indices))])
                else:
                    tm = None
                d_rows.append(d_step(state, db, tm, gp_gen))
            dec_targets = [sample_decimal_pose(vocab, rng) for _ in range(len(batch.indices))] if decimal else None
            g = g_step(state, batch, dec_targets, lambda_pose=lp)
            p = p_step(state, batch)
            d = _mean_parts(d_rows)
            row = {"epoch": e, "step": state.step, "adv_d": d["adv_d"],
                   "adv_g": g["adv_g"] if not decimal else g["style"], "cls": g["cls"], "rec": g["rec"],
                   "pose_g": g["pose_g"], "gp": d["gp"], "cls_real": d["cls_real"], "pose_p": p["pose_p"],
                   "style": g["style"], "decimal": int(decimal), "lambda_pose": lp, "lr": lr}
            rows.append(row)
            state.history.append(row)
            state.step += 1
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                w = csv.writer(fh)
                for row in rows:
                    w.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        state.epoch += 1
        msg = (f"epoch {e + 1}/{cfg.total_epochs} rec={np.mean([r['rec'] for r in rows]):.4f} "
               f"adv_d={np.mean([r['adv_d'] for r in rows]):.3f} pose_p={np.mean([r['pose_p'] for r in rows]):.3f} "
               f"({time.time() - t0:.1f}s)")
        log.info(msg)
        if progress is not None:
            progress(state, rows)
        if out_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_epoch{state.epoch:04d}", Checkpoint(state.nets, cfg, state))
    for m in state.nets.modules().values():
        m.eval()
    return state


def _cycle(it: BatchIterator, start_epoch: int):
    # critic batches come from an independent stream that wraps across its own epochs
    k = start_epoch * 10_000
    while True:
        yield from it.epoch(k)
        k += 1


def fit(cfg: TrainConfig, manifest: DatasetManifest, out_dir=None, images=None, resume: Checkpoint | None = None,
        progress=None) -> Checkpoint:
    """Train from scratch (or resume) and return the final checkpoint."""
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None and resume.state is not None:
        state = resume.state
        state.cfg = cfg
    else:
        arch = cfg.arch
        if arch.n_discrete != manifest.vocabulary.n_discrete:
            arch = replace(arch, n_discrete=manifest.vocabulary.n_discrete)
            cfg = replace(cfg, arch=arch)
        nets = init_params(arch, cfg.seed, manifest.vocabulary)
        state = TrainState.fresh(nets, cfg)
    state = _run(state, manifest, out_dir, images=images, progress=progress)
    ckpt = Checkpoint(state.nets, cfg, state)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint", ckpt)
    return ckpt


def finetune(ckpt: Checkpoint, manifest: DatasetManifest, out_dir=None, images=None, progress=None,
             **overrides) -> Checkpoint:
    """Continue from ``ckpt``'s parameters with fresh optimizer moments and ``lr0 / 10`` by default."""
    if "lr0" not in overrides:
        overrides["lr0"] = ckpt.config.lr0 / 10
    cfg = replace(ckpt.config, **overrides)
    if cfg.arch != ckpt.nets.arch:
        cfg = replace(cfg, arch=ckpt.nets.arch)
    state = TrainState.fresh(ckpt.nets, cfg)
    state = _run(state, manifest, Path(out_dir) if out_dir else None, images=images, progress=progress)
    out = Checkpoint(state.nets, cfg, state)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint", out)
    return out


def reconstruction_error(ckpt: Checkpoint, manifest: DatasetManifest, seed: int = 0, images=None) -> float:
    """Mean cycle L1 over the manifest, each image sent to a random pose and back."""
    nets = ckpt.nets.eval()
    it = BatchIterator(manifest, 32, seed=seed, images=images)
    total, n = 0.0, 0
    with torch.no_grad():
        for b in it.epoch(0):
            x = to_tensor(b.images)
            fake = nets.G(x, mask_batch(nets.arch, nets.vocab, b.target_labels))
            back = nets.G(fake, mask_batch(nets.arch, nets.vocab, b.pose_labels))
            total += float((x - back).abs().mean()) * len(b.indices)
            n += len(b.indices)
    return total / n


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
