"""Cameras, synthetic refractive scenes, datasets on disk and box estimation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .fields import (Box, EAField, GaussianBlob, IorBase, Luneburg, cylinder_row, plane_row,
                     sphere_row)
from .transport import Model, TraceConfig, intersect_box, render_rays


class ConfigError(ValueError):
    """Invalid scene, camera or dataset configuration."""


class DatasetError(ValueError):
    pass


# ------------------------------------------------------------------- cameras

@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float  # degrees
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not 0.0 < self.fov_y < 180.0:
            raise ConfigError(f"fov_y must be in (0, 180), got {self.fov_y}")
        if min(self.resolution) < 1:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        self.basis()

    def basis(self):
        """(right, true_up, forward) with right = forward x up."""
        fwd = self.look_at - self.position
        nf = np.linalg.norm(fwd)
        if nf == 0.0:
            raise ConfigError("camera position equals look_at")
        fwd = fwd / nf
        right = np.cross(fwd, self.up)
        nr = np.linalg.norm(right)
        if nr < 1e-9 * max(1.0, np.linalg.norm(self.up)):
            raise ConfigError("camera up vector is parallel to the view direction")
        right /= nr
        return right, np.cross(right, fwd), fwd

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(),
                "up": self.up.tolist(), "fov_y_degrees": float(self.fov_y),
                "resolution": list(self.resolution)}

    @classmethod
    def from_json(cls, d) -> "Camera":
        try:
            return cls(d["position"], d["look_at"], d["up"], float(d["fov_y_degrees"]),
                       tuple(d["resolution"]))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad camera record {d!r}: {e}") from None


def generate_rays(camera: Camera):
    """Pinhole rays through pixel centers: origins and unit directions, each (H, W, 3)."""
    w, h = camera.resolution
    right, up, fwd = camera.basis()
    th = math.tan(math.radians(camera.fov_y) / 2.0)
    tw = th * w / h
    x = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tw
    y = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * th
    X, Y = np.meshgrid(x, y)
    d = fwd + X[..., None] * right + Y[..., None] * up
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def orbit_cameras(count, radius, target=(0.0, 0.0, 0.0), azimuth=(-40.0, 40.0),
                  elevation=(-25.0, 25.0), fov_y=30.0, resolution=(64, 64)):
    """Cameras on a sphere around target, facing it; azimuth sweeps evenly and
    elevation follows a golden-ratio sequence so views are spread over the arc."""
    if count < 1:
        raise ConfigError("camera count must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(count):
        t = i / (count - 1) if count > 1 else 0.5
        az = math.radians(azimuth[0] + t * (azimuth[1] - azimuth[0]))
        u = (i * 0.6180339887498949 + 0.5) % 1.0
        el = math.radians(elevation[0] + u * (elevation[1] - elevation[0]))
        off = radius * np.array([math.sin(az) * math.cos(el), math.sin(el),
                                 math.cos(az) * math.cos(el)])
        cams.append(Camera(target + off, target, (0.0, 1.0, 0.0), fov_y, resolution))
    return cams


# -------------------------------------------------------------- scene specs

@dataclass
class PlaneSpec:
    point: list = field(default_factory=lambda: [0.0, 0.0, -1.5])
    normal: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    texture: str = "checker"
    scale: float = 0.25
    color0: list = field(default_factory=lambda: [0.1, 0.15, 0.3])
    color1: list = field(default_factory=lambda: [0.95, 0.85, 0.6])
    thickness: float = 0.1
    sigma: float = 1e3
    seed: int = 0


@dataclass
class StickSpec:
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    axis: list = field(default_factory=lambda: [0.0, 1.0, 0.0])
    radius: float = 0.05
    half_length: float = 0.35
    sigma: float = 200.0
    color: list = field(default_factory=lambda: [0.9, 0.2, 0.1])


@dataclass
class OrbitSpec:
    count: int = 24
    radius: float = 4.0
    target: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    azimuth: list = field(default_factory=lambda: [-40.0, 40.0])
    elevation: list = field(default_factory=lambda: [-25.0, 25.0])
    fov_y: float = 30.0
    resolution: list = field(default_factory=lambda: [64, 64])


@dataclass
class SceneSpec:
    name: str = "blob-lens"
    planes: list = field(default_factory=lambda: [PlaneSpec()])
    sticks: list = field(default_factory=list)
    ior: dict = field(default_factory=lambda: {"kind": "blob", "amplitude": 0.3,
                                               "radius_frac": 0.15})
    box_min: list = field(default_factory=lambda: [-0.5, -0.5, -0.5])
    box_max: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    cameras: OrbitSpec = field(default_factory=OrbitSpec)
    # world region for background grids; must hold every visible surface
    bounds_min: list = field(default_factory=lambda: [-3.5, -3.5, -2.0])
    bounds_max: list = field(default_factory=lambda: [3.5, 3.5, 0.6])
    far_bound: float = 10.0
    mask_angle: float = 1e-3  # radians of deflection that marks a refractive pixel
    depth_threshold: float = 1e-3  # n - 1 above which a point counts as refractive

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "SceneSpec":
        d = dict(d)
        try:
            d["planes"] = [PlaneSpec(**p) for p in d.get("planes", [])]
            d["sticks"] = [StickSpec(**p) for p in d.get("sticks", [])]
            if "cameras" in d:
                d["cameras"] = OrbitSpec(**d["cameras"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad scene spec: {e}") from None


def default_spec(name="blob-lens") -> SceneSpec:
    if name == "blob-lens":
        return SceneSpec()
    if name == "no-refraction":
        return SceneSpec(name=name, ior={"kind": "none"})
    if name == "blob-stick":
        return SceneSpec(name=name, sticks=[StickSpec()])
    if name == "empty":
        return SceneSpec(name=name, planes=[], ior={"kind": "none"})
    raise ConfigError(f"unknown scene preset {name!r}")


@dataclass
class Scene:
    spec: SceneSpec
    exterior: EAField
    ior: IorBase | None
    box: Box
    cameras: list
    interior: EAField | None = None

    def model(self) -> Model:
        return Model(self.exterior, self.ior, self.box, self.interior)

    def trace_config(self, steps_outside=128) -> TraceConfig:
        return TraceConfig(far_bound=self.spec.far_bound, steps_outside=steps_outside)


def build_ior(spec: SceneSpec, box: Box):
    kind = spec.ior.get("kind", "none")
    center = np.asarray(spec.ior.get("center", box.center), dtype=np.float64)
    if kind == "none":
        return None
    if kind == "blob":
        rho = spec.ior.get("radius", spec.ior.get("radius_frac", 0.15) * box.diag)
        return GaussianBlob(center, float(spec.ior.get("amplitude", 0.3)), float(rho))
    if kind == "luneburg":
        return Luneburg(center, float(spec.ior.get("radius", 0.5 * float(box.size.min()))))
    raise ConfigError(f"unknown IoR kind {kind!r}")


def build_scene(spec: SceneSpec) -> Scene:
    try:
        box = Box(spec.box_min, spec.box_max)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if spec.cameras.count < 1:
        raise ConfigError("scene needs at least one camera")
    if not spec.far_bound > 0:
        raise ConfigError("far_bound must be positive")
    rows = [plane_row(p.point, p.normal, thickness=p.thickness, sigma=p.sigma,
                      texture=p.texture, scale=p.scale, color0=p.color0, color1=p.color1,
                      seed=p.seed) for p in spec.planes]
    for p in spec.planes:
        if np.any(box.contains(np.asarray(p.point))):
            raise ConfigError("backdrop plane anchor lies inside the refractive box")
    exterior = EAField(prims=np.array(rows).reshape(-1, 24)).masked(box)
    interior = None
    if spec.sticks:
        srows = [cylinder_row(s.center, s.axis, s.radius, s.half_length, s.sigma, s.color)
                 for s in spec.sticks]
        interior = EAField(prims=np.array(srows))
    c = spec.cameras
    cams = orbit_cameras(c.count, c.radius, c.target, c.azimuth, c.elevation, c.fov_y,
                         c.resolution)
    for cam in cams:
        if box.contains(cam.position):
            raise ConfigError("camera inside the refractive box")
    return Scene(spec, exterior, build_ior(spec, box), box, cams, interior)


# --------------------------------------------------------- masks and depth

def refraction_mask(scene: Scene, camera: Camera, config: TraceConfig | None = None):
    """Pixels whose ray crosses the box and leaves it deflected by more than mask_angle."""
    cfg = config or scene.trace_config()
    o, d = generate_rays(camera)
    h, w = o.shape[:2]
    if scene.ior is None:
        return np.zeros((h, w), dtype=bool)
    # exterior-free trace: only the geometry of the path matters here
    probe = Model(EAField.empty(), scene.ior, scene.box)
    outs = render_rays(o, d, probe, cfg)
    cosang = np.clip(np.sum(outs[:, 7:10] * d.reshape(-1, 3), axis=1), -1.0, 1.0)
    ang = np.arccos(cosang)
    return (ang > scene.spec.mask_angle).reshape(h, w)


def refraction_depth(scene: Scene, camera: Camera, samples=256):
    """Distance along each straight pixel ray to the middle of its refractive chord
    (points with n - 1 above depth_threshold); inf where the ray sees none."""
    o, d = generate_rays(camera)
    h, w = o.shape[:2]
    depth = np.full(h * w, np.inf)
    if scene.ior is None:
        return depth.reshape(h, w)
    o = o.reshape(-1, 3)
    d = d.reshape(-1, 3)
    for i in range(len(o)):
        hit = intersect_box(o[i], d[i], scene.box)
        if hit is None:
            continue
        t = np.linspace(hit[0], hit[1], samples)
        n = scene.ior.eval(o[i] + t[:, None] * d[i])
        sel = t[n - 1.0 > scene.spec.depth_threshold]
        if len(sel):
            depth[i] = 0.5 * (sel[0] + sel[-1])
    return depth.reshape(h, w)


def estimate_box(masks, depth_maps, cameras, lo_pct=0.02, hi_pct=0.98, scale=1.2) -> Box:
    """Unproject masked pixels by depth, trim per axis to percentiles, grow about the center."""
    pts = []
    for m, dep, cam in zip(masks, depth_maps, cameras):
        if m is None or dep is None:
            continue
        o, d = generate_rays(cam)
        sel = np.asarray(m, dtype=bool) & np.isfinite(dep)
        pts.append(o[sel] + dep[sel][:, None] * d[sel])
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    return box_from_points(pts, lo_pct, hi_pct, scale)


def box_from_points(pts, lo_pct=0.02, hi_pct=0.98, scale=1.2) -> Box:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ConfigError("box estimation: empty point cloud")
    lo = np.quantile(pts, lo_pct, axis=0)
    hi = np.quantile(pts, hi_pct, axis=0)
    c = 0.5 * (lo + hi)
    half = 0.5 * scale * (hi - lo)
    if np.any(half <= 0):
        raise ConfigError("box estimation: degenerate point cloud")
    return Box(c - half, c + half)


# ------------------------------------------------------------------ datasets

def split_views(count, seed, test_fraction=0.1):
    """Held-out indices: round(count * fraction) views (at least one when count > 1)."""
    if count < 1:
        raise ConfigError("dataset needs at least one view")
    n_test = int(round(count * test_fraction))
    if count > 1:
        n_test = min(max(1, n_test), count - 1)
    else:
        n_test = 0
    perm = np.random.default_rng(seed).permutation(count)
    test = sorted(int(i) for i in perm[:n_test])
    train = [i for i in range(count) if i not in set(test)]
    return {"train": train, "test": test}


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None


@dataclass
class Dataset:
    views: list
    split: dict
    seed: int
    root: Path | None = None

    def train_views(self):
        return [self.views[i] for i in self.split["train"]]

    def test_views(self):
        return [self.views[i] for i in self.split["test"]]

    def box(self) -> Box | None:
        if self.root is None or not (self.root / "box.json").exists():
            return None
        return Box.from_json(json.loads((self.root / "box.json").read_text()))

    def scene_spec(self) -> SceneSpec | None:
        if self.root is None or not (self.root / "scene.json").exists():
            return None
        return SceneSpec.from_json(json.loads((self.root / "scene.json").read_text()))


def save_dataset(path, dataset: Dataset) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, v in enumerate(dataset.views):
        rec = {"image": f"images/view_{i:03d}.pfm"}
        imageio.write_pfm(root / rec["image"], v.image)
        if v.mask is not None:
            rec["mask"] = f"images/mask_{i:03d}.ppm"
            imageio.write_mask_ppm(root / rec["mask"], v.mask)
        if v.depth is not None:
            rec["depth"] = f"images/depth_{i:03d}.pfm"
            dep = np.where(np.isfinite(v.depth), v.depth, -1.0)
            imageio.write_pfm(root / rec["depth"], dep[:, :, None])
        rec["camera"] = v.camera.to_json()
        records.append(rec)
    manifest = {"views": records, "split": dataset.split, "seed": int(dataset.seed)}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    dataset.root = root
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    if root.is_file():
        root = root.parent
    mpath = root / "dataset.json"
    if not mpath.exists():
        raise DatasetError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid JSON ({e})") from None
    views = []
    for rec in manifest.get("views", []):
        def need(key):
            p = root / rec[key]
            if not p.exists():
                raise DatasetError(f"{p}: referenced by {mpath} but missing")
            return p

        try:
            img = imageio.read_pfm(need("image"))
            mask = imageio.read_mask_ppm(need("mask")) if "mask" in rec else None
            depth = None
            if "depth" in rec:
                depth = imageio.read_pfm(need("depth"))[:, :, 0].astype(np.float64)
                depth[depth < 0] = np.inf
        except (imageio.PfmError, ValueError) as e:
            if isinstance(e, DatasetError):
                raise
            raise DatasetError(f"{root}: corrupt view file: {e}") from None
        views.append(View(Camera.from_json(rec["camera"]), img, mask, depth))
    split = manifest.get("split", {})
    n = len(views)
    train, test = list(split.get("train", [])), list(split.get("test", []))
    if set(train) & set(test) or any(not 0 <= i < n for i in train + test):
        raise DatasetError(f"{mpath}: invalid split")
    return Dataset(views, {"train": train, "test": test}, int(manifest.get("seed", 0)), root)


def make_dataset(scene: Scene, seed=0, with_masks=True, config: TraceConfig | None = None):
    """Render every camera with the ground-truth fields and return a Dataset."""
    cfg = config or scene.trace_config()
    model = scene.model()
    views = []
    for cam in scene.cameras:
        o, d = generate_rays(cam)
        w, h = cam.resolution
        outs = render_rays(o, d, model, cfg)
        img = outs[:, 0:3].reshape(h, w, 3).astype(np.float32)
        mask = depth = None
        if with_masks:
            mask = refraction_mask(scene, cam, cfg)
            depth = refraction_depth(scene, cam)
        views.append(View(cam, img, mask, depth))
    return Dataset(views, split_views(len(views), seed), seed)
