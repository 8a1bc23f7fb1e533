"""Procedural turntable renderer for simple polyhedral primitives.

Flat-shaded orthographic projection, painter's algorithm, rasterized with
PIL. Every instance has an accent color on its front-facing faces so that
yaw stays recoverable for shapes whose silhouette is rotationally symmetric.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import InvalidArgument
from .pose_space import PoseTarget, PoseVocabulary
from .imageio import to_float

SHAPE_CLASSES = ("cuboid", "cylinder", "cone", "wedge", "tee", "ell", "pyramid", "step")
N_BACKGROUNDS = 4


@dataclass(frozen=True)
class PrimitiveSpec:
    shape_class: str
    length: float
    width: float
    height: float
    color: tuple[float, float, float]
    accent: tuple[float, float, float]
    background_id: int = 0

    def __post_init__(self):
        if self.shape_class not in SHAPE_CLASSES:
            raise InvalidArgument(f"unknown shape class {self.shape_class!r}")
        if min(self.length, self.width, self.height) <= 0:
            raise InvalidArgument("primitive dimensions must be positive")
        for c in (*self.color, *self.accent):
            if not 0.0 <= c <= 1.0:
                raise InvalidArgument("color components must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveSpec":
        d = dict(d)
        d["color"] = tuple(d["color"])
        d["accent"] = tuple(d["accent"])
        return cls(**d)


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 64
    n_yaw: int = 6
    n_pitch: int = 1
    yaw_span_deg: float = 360.0
    pitch_span_deg: float = 60.0
    base_elevation_deg: float = 20.0
    # keeps every anchor off the exact side-on view, where front and back
    # of mirror-symmetric shapes coincide
    yaw_offset_deg: float = 20.0
    # objects sit off the turntable axis (fraction of their length), so
    # half-turns of point-symmetric shapes still move the silhouette
    axis_offset: float = 0.05
    lighting_dir: tuple[float, float, float] = field(default=(-0.45, 0.75, 0.48))
    orthographic: bool = True
    fill: float = 0.50

    def __post_init__(self):
        if self.image_size < 4 or self.image_size % 4:
            raise InvalidArgument(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if not self.orthographic:
            raise InvalidArgument("only orthographic projection is implemented")

    @classmethod
    def for_vocabulary(cls, vocab: PoseVocabulary, **kw) -> "RenderConfig":
        return cls(n_yaw=vocab.n_yaw, n_pitch=vocab.n_pitch, **kw)

    def angles(self, target: PoseTarget) -> tuple[float, float]:
        yaw = self.yaw_offset_deg + target.yaw * self.yaw_span_deg / self.n_yaw
        pitch = self.base_elevation_deg + target.pitch * self.pitch_span_deg / max(self.n_pitch - 1, 1)
        return math.radians(yaw), math.radians(pitch)


# --- meshes -----------------------------------------------------------------
# Object frame: x forward, y up, z lateral; base on y = 0. A mesh is a vertex
# array plus faces given as counter-clockwise index lists seen from outside.

def _signed_area(pts) -> float:
    pts = np.asarray(pts, dtype=np.float64)
    u, v = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(u * np.roll(v, -1) - np.roll(u, -1) * v))


def _prism(outline, height: float):
    """Extrude an (x, z) outline upward to ``height``; faces wound outward."""
    outline = np.asarray(outline, dtype=np.float64)
    if _signed_area(outline) < 0:
        outline = outline[::-1]
    n = len(outline)
    verts = [(x, 0.0, z) for x, z in outline] + [(x, height, z) for x, z in outline]
    faces = [list(range(n)), [n + i for i in range(n)][::-1]]
    faces += [[i, n + i, n + (i + 1) % n, (i + 1) % n] for i in range(n)]
    return np.array(verts, dtype=np.float64), faces


def _profile_extrusion(profile, width: float):
    """Extrude an (x, y) side profile along z over [-w/2, w/2]."""
    profile = np.asarray(profile, dtype=np.float64)
    if _signed_area(profile) < 0:
        profile = profile[::-1]
    n = len(profile)
    h = width / 2
    verts = [(x, y, -h) for x, y in profile] + [(x, y, h) for x, y in profile]
    faces = [list(range(n))[::-1], [n + i for i in range(n)]]
    faces += [[i, (i + 1) % n, n + (i + 1) % n, n + i] for i in range(n)]
    return np.array(verts), faces


def _ellipse(a, b, n=16):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([a * np.cos(t), b * np.sin(t)], axis=1)


def build_mesh(spec: PrimitiveSpec):
    L, W, H = spec.length, spec.width, spec.height
    a, b = L / 2, W / 2
    k = spec.shape_class
    if k == "cuboid":
        verts, faces = _prism([(-a, -b), (a, -b), (a, b), (-a, b)], H)
    elif k == "cylinder":
        verts, faces = _prism(_ellipse(a, b), H)
    elif k == "cone":
        ring = _ellipse(a, b)
        n = len(ring)
        verts = [(x, 0.0, z) for x, z in ring] + [(0.0, H, 0.0)]
        faces = [list(range(n))]
        faces += [[i, n, (i + 1) % n] for i in range(n)]
        verts = np.array(verts)
        faces = _oriented_faces(verts, faces)
    elif k == "pyramid":
        verts = np.array([(-a, 0, -b), (a, 0, -b), (a, 0, b), (-a, 0, b), (0.0, H, 0.0)], dtype=np.float64)
        faces = _oriented_faces(verts, [[0, 1, 2, 3], [0, 4, 1], [1, 4, 2], [2, 4, 3], [3, 4, 0]])
    elif k == "wedge":
        verts, faces = _profile_extrusion([(-a, 0), (a, 0), (a, 0.3 * H), (-a, H)], W)
    elif k == "step":
        verts, faces = _profile_extrusion(
            [(-a, 0), (a, 0), (a, 0.45 * H), (0.0, 0.45 * H), (0.0, H), (-a, H)], W)
    elif k == "tee":
        t = 0.3 * L
        s = 0.3 * W
        outline = [(a - t, -b), (a, -b), (a, b), (a - t, b), (a - t, s / 2), (-a, s / 2), (-a, -s / 2), (a - t, -s / 2)]
        verts, faces = _prism(outline, H)
    elif k == "ell":
        t = 0.35 * W
        outline = [(-a, -b), (a, -b), (a, -b + t), (-a + 0.35 * L, -b + t), (-a + 0.35 * L, b), (-a, b)]
        verts, faces = _prism(outline, H)
    else:  # pragma: no cover - guarded by PrimitiveSpec
        raise InvalidArgument(k)
    verts = np.asarray(verts, dtype=np.float64)
    verts = verts - np.array([0.0, verts[:, 1].max() / 2, 0.0])
    return verts, [list(f) for f in faces]


def _face_normal(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    n = np.zeros(3)
    for i in range(len(p)):
        n += np.cross(p[i] - c, p[(i + 1) % len(p)] - c)
    norm = np.linalg.norm(n)
    return n / norm if norm > 0 else n


def _oriented_faces(verts, faces):
    """Flip faces whose normal points into the body; valid for convex meshes only."""
    center = verts.mean(axis=0)
    out = []
    for f in faces:
        p = verts[f]
        if np.dot(_face_normal(p), p.mean(axis=0) - center) < 0:
            f = f[::-1]
        out.append(f)
    return out


def _rotation(yaw: float, elev: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    ce, se = math.cos(elev), math.sin(elev)
    rx = np.array([[1, 0, 0], [0, ce, -se], [0, se, ce]])
    return rx @ ry


def background(background_id: int, size: int) -> np.ndarray:
    """Fixed low-contrast textured backdrop, uint8 (size, size, 3)."""
    rng = np.random.default_rng(7919 + background_id)
    top = rng.uniform(0.30, 0.45, 3)
    bottom = rng.uniform(0.20, 0.35, 3)
    v = np.linspace(0, 1, size)[:, None, None]
    img = top * (1 - v) + bottom * v
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy, ph = rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5), rng.uniform(0, 2 * np.pi)
    img = img + 0.025 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)[:, :, None]
    img = np.broadcast_to(img, (size, size, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _project(spec: PrimitiveSpec, target: PoseTarget, cfg: RenderConfig):
    verts, faces = build_mesh(spec)
    verts = verts + np.array([cfg.axis_offset * spec.length, 0.0, 0.0])
    radius = np.linalg.norm(verts, axis=1).max()
    yaw, elev = cfg.angles(target)
    cam = verts @ _rotation(yaw, elev).T
    s = cfg.fill * cfg.image_size / radius
    half = cfg.image_size / 2
    light = np.asarray(cfg.lighting_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    polys = []
    for f in faces:
        obj_n = _face_normal(verts[f])
        n = _face_normal(cam[f])
        if n[2] <= 1e-9:
            continue
        albedo = np.array(spec.accent if obj_n[0] > 0.5 else spec.color)
        shade = 0.35 + 0.65 * max(0.0, float(n @ light))
        rgb = tuple(int(round(c)) for c in np.clip(albedo * shade * 255, 0, 255))
        pts = [(half + p[0] * s, half - p[1] * s) for p in cam[f]]
        polys.append((float(cam[f][:, 2].mean()), pts, rgb))
    polys.sort(key=lambda t: t[0])
    return polys


def render_uint8(spec: PrimitiveSpec, target: PoseTarget, cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render to (uint8 RGB image, boolean foreground mask)."""
    polys = _project(spec, target, cfg)
    img = Image.fromarray(background(spec.background_id, cfg.image_size))
    mask = Image.new("L", (cfg.image_size, cfg.image_size), 0)
    draw, mdraw = ImageDraw.Draw(img), ImageDraw.Draw(mask)
    for _, pts, rgb in polys:
        draw.polygon(pts, fill=rgb)
        mdraw.polygon(pts, fill=255)
    return np.asarray(img, dtype=np.uint8), np.asarray(mask) > 0


def render_view(spec: PrimitiveSpec, target: PoseTarget, cfg: RenderConfig) -> np.ndarray:
    """Deterministic ``(H, W, 3)`` float32 image in [-1, 1]."""
    if target.yaw < 0 or target.yaw > cfg.n_yaw - 1 or target.pitch < 0 or target.pitch > cfg.n_pitch - 1:
        raise InvalidArgument(f"target {target} outside the {cfg.n_yaw}x{cfg.n_pitch} pose grid")
    return to_float(render_uint8(spec, target, cfg)[0])


def render_mask(spec: PrimitiveSpec, target: PoseTarget, cfg: RenderConfig) -> np.ndarray:
    return render_uint8(spec, target, cfg)[1]


def random_spec(shape_class: str, rng: np.random.Generator) -> PrimitiveSpec:
    hue = rng.uniform()
    color = colorsys.hsv_to_rgb(hue, rng.uniform(0.45, 0.85), rng.uniform(0.7, 0.95))
    accent = colorsys.hsv_to_rgb((hue + rng.uniform(0.35, 0.65)) % 1.0, rng.uniform(0.5, 0.9), rng.uniform(0.75, 1.0))
    return PrimitiveSpec(
        shape_class=shape_class,
        length=float(rng.uniform(1.6, 2.4)),
        width=float(rng.uniform(0.8, 1.2)),
        height=float(rng.uniform(0.6, 1.1)),
        color=tuple(float(c) for c in color),
        accent=tuple(float(c) for c in accent),
        background_id=int(rng.integers(N_BACKGROUNDS)),
    )


def image_filename(class_name: str, instance_idx: int, yaw_idx: int, pitch_idx: int) -> str:
    return f"{class_name}_{instance_idx:03d}_{yaw_idx}_{pitch_idx}.png"


def generate_dataset(out_dir, n_classes: int, instances_per_class: int, vocab: PoseVocabulary,
                     cfg: RenderConfig | None = None, seed: int = 0, train_fraction: float = 0.75,
                     instance_offset: int = 0):
    """Render every (instance, discrete pose) and write manifests.

    Writes PNGs, ``instances.json`` (the primitive spec of every instance,
    used as the ground-truth oracle), ``render.json`` and the manifests
    ``all.jsonl``, ``train.jsonl``, ``test.jsonl``. The split is by instance.
    Returns the full manifest.
    """
    from .data import DatasetManifest, SampleRecord, write_manifest

    if n_classes < 1 or instances_per_class < 1:
        raise InvalidArgument("n_classes and instances_per_class must be >= 1")
    if n_classes > len(SHAPE_CLASSES):
        raise InvalidArgument(f"at most {len(SHAPE_CLASSES)} shape classes are available")
    cfg = cfg or RenderConfig.for_vocabulary(vocab)
    if (cfg.n_yaw, cfg.n_pitch) != (vocab.n_yaw, vocab.n_pitch):
        raise InvalidArgument("render config pose grid does not match the vocabulary")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    class_names = list(SHAPE_CLASSES[:n_classes])
    specs, records, split = {}, [], {}
    for ci, name in enumerate(class_names):
        order = rng.permutation(instances_per_class)
        n_train = int(round(train_fraction * instances_per_class))
        if instances_per_class >= 2:
            n_train = min(max(n_train, 1), instances_per_class - 1)
        for k in range(instances_per_class):
            idx = k + instance_offset
            iid = f"{name}_{idx:03d}"
            spec = random_spec(name, rng)
            specs[iid] = spec.to_dict()
            split[iid] = "train" if int(np.where(order == k)[0][0]) < n_train else "test"
            for label in range(vocab.n_discrete):
                y, p = vocab.label_coords[label]
                fname = image_filename(name, idx, y, p)
                img, _ = render_uint8(spec, PoseTarget(float(y), float(p)), cfg)
                Image.fromarray(img).save(out / fname)
                records.append(SampleRecord(fname, ci, iid, label, "real"))
    (out / "instances.json").write_text(json.dumps({"specs": specs, "split": split}, indent=1))
    (out / "render.json").write_text(json.dumps(asdict(cfg), indent=1))
    full = DatasetManifest(vocab, tuple(records), tuple(class_names), root=out)
    write_manifest(full, out / "all.jsonl")
    for part in ("train", "test"):
        sub = full.replace(records=tuple(r for r in records if split[r.instance_id] == part))
        write_manifest(sub, out / f"{part}.jsonl")
    return full


class RenderOracle:
    """Ground-truth source: re-renders any instance of a generated dataset at any pose."""

    def __init__(self, specs: dict[str, PrimitiveSpec], cfg: RenderConfig):
        self.specs = specs
        self.cfg = cfg

    @classmethod
    def from_dataset(cls, root) -> "RenderOracle":
        root = Path(root)
        info = json.loads((root / "instances.json").read_text())
        cfg_d = json.loads((root / "render.json").read_text())
        cfg_d["lighting_dir"] = tuple(cfg_d["lighting_dir"])
        specs = {k: PrimitiveSpec.from_dict(v) for k, v in info["specs"].items()}
        return cls(specs, RenderConfig(**cfg_d))

    def __call__(self, instance_id: str, target: PoseTarget) -> np.ndarray:
        return render_view(self.specs[instance_id], target, self.cfg)

    def mask(self, instance_id: str, target: PoseTarget) -> np.ndarray:
        return render_mask(self.specs[instance_id], target, self.cfg)
