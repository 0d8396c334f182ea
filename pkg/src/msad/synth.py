"""Deterministic synthetic multi-sensor datasets with controlled defect visibility.

Each object is a superellipsoid seen three ways: a textured top-view RGB image, a
smooth thermal field in the infrared image, and a sampled surface point cloud.
All three share one pose (yaw plus planar shift), so a defect location maps
consistently across modalities. A defect only touches the modalities in its
visibility set and ground truth is emitted only for those.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import MODALITY_ORDER, Modality, ModalityLabels, derive_object_label
from .ingest import save_image, save_point_cloud, save_point_labels

log = logging.getLogger(__name__)

KIND_VISIBILITY = {
    "surface_blob": (Modality.RGB,),
    "thermal_spot": (Modality.INFRARED,),
    "geometric_dent": (Modality.POINTCLOUD,),
}

DEFAULT_MIX = {"surface_blob": 1 / 3, "thermal_spot": 1 / 3, "geometric_dent": 1 / 3}


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    visibility: tuple[Modality, ...]
    magnitude: dict = field(default_factory=dict)  # modality -> amplitude
    extent: float = 0.2  # radius as a fraction of the object's smaller semi-axis

    def __post_init__(self):
        if not self.visibility:
            raise ValueError("defect visibility set must be nonempty")
        if self.kind in KIND_VISIBILITY and tuple(self.visibility) != KIND_VISIBILITY[self.kind]:
            raise ValueError(f"{self.kind} is visible only in {KIND_VISIBILITY[self.kind]}")
        for m in self.visibility:
            if not self.magnitude.get(m, 0) > 0:
                raise ValueError(f"defect magnitude for {m.value} must be > 0")
        if not self.extent > 0:
            raise ValueError("defect extent must be > 0")

    @property
    def dirname(self) -> str:
        if self.kind == "cross_modal":
            return "cross_modal_" + "_".join(m.short for m in MODALITY_ORDER if m in self.visibility)
        return self.kind


def parse_mix_key(key: str) -> tuple[str, tuple[Modality, ...]]:
    """``"surface_blob"`` or ``"cross_modal:rgb+pc"`` -> (kind, visibility)."""
    if key in KIND_VISIBILITY:
        return key, KIND_VISIBILITY[key]
    if key.startswith("cross_modal:"):
        mods = {Modality.parse(t) for t in key.split(":", 1)[1].split("+")}
        return "cross_modal", tuple(m for m in MODALITY_ORDER if m in mods)
    raise ValueError(f"unknown defect kind {key!r}")


@dataclass
class SynthConfig:
    categories: list[str] = field(default_factory=lambda: ["shape_a", "shape_b", "shape_c"])
    train_count: int = 60
    test_normal: int = 10
    test_abnormal: int = 30
    defect_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    rgb_noise: float = 3.0  # grey levels
    ir_noise: float = 8.0  # grey levels
    pc_noise: float = 0.2  # mm
    defect_snr: float = 5.0  # defect magnitude in units of the modality's noise std
    defect_extent: float = 0.3
    seed: int = 7
    rgb_size: tuple[int, int] = (120, 160)  # (height, width)
    ir_size: tuple[int, int] = (96, 128)
    cloud_points: int = 1024
    yaw_jitter_deg: float = 8.0
    shift_jitter_mm: float = 1.5

    def __post_init__(self):
        if self.train_count < 1 or self.test_normal < 0 or self.test_abnormal < 0:
            raise ValueError("sample counts must be non-negative (train >= 1)")
        if self.test_normal + self.test_abnormal < 1:
            raise ValueError("need at least one test sample")
        if self.cloud_points < 4:
            raise ValueError("cloud_points must be >= 4")
        for key in self.defect_mix:
            parse_mix_key(key)
        self.rgb_size = tuple(self.rgb_size)
        self.ir_size = tuple(self.ir_size)
        self.categories = list(self.categories)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rgb_size"] = list(self.rgb_size)
        d["ir_size"] = list(self.ir_size)
        return d

    def magnitude(self, modality: Modality) -> float:
        noise = {Modality.RGB: self.rgb_noise, Modality.INFRARED: self.ir_noise, Modality.POINTCLOUD: self.pc_noise}[modality]
        return self.defect_snr * noise


@dataclass(frozen=True)
class CategoryParams:
    axes: tuple[float, float, float]  # semi-axes in mm
    exponents: tuple[float, float]  # (vertical, horizontal) squareness
    base_color: tuple[float, float, float]
    texture_amp: float
    texture_period: float  # mm
    texture_angle: float
    thermal_base: float
    thermal_gradient: float
    thermal_angle: float

    @property
    def half_fov(self) -> float:
        return 1.3 * self.axes[0]


def category_params(seed: int, index: int) -> CategoryParams:
    rng = np.random.default_rng([seed, index, 991])
    a = rng.uniform(16, 22)
    return CategoryParams(
        axes=(a, a * rng.uniform(0.6, 0.85), rng.uniform(5, 8)),
        exponents=(rng.uniform(0.7, 1.0), rng.uniform(0.6, 1.0)),
        base_color=tuple(rng.uniform(90, 170, size=3)),
        texture_amp=rng.uniform(15, 25),
        texture_period=rng.uniform(6, 10),
        texture_angle=rng.uniform(0, np.pi),
        thermal_base=rng.uniform(110, 140),
        thermal_gradient=rng.uniform(15, 30),
        thermal_angle=rng.uniform(0, 2 * np.pi),
    )


@dataclass(frozen=True)
class Pose:
    yaw: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)

    def to_object(self, x, y):
        """World (x, y) -> object-frame (x, y)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = x - self.shift[0], y - self.shift[1]
        return c * dx + s * dy, -s * dx + c * dy

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return pts @ r.T + np.array([self.shift[0], self.shift[1], 0.0])


@dataclass
class SynthObject:
    rgb: np.ndarray
    ir: np.ndarray
    cloud: np.ndarray
    params: CategoryParams
    pose: Pose
    cloud_object: np.ndarray  # noise-free object-frame surface points


@dataclass
class GroundTruth:
    labels: ModalityLabels
    rgb_mask: np.ndarray | None = None
    ir_mask: np.ndarray | None = None
    point_indices: np.ndarray | None = None


def _pixel_object_coords(shape, params: CategoryParams, pose: Pose):
    h, w = shape
    half_x = params.half_fov
    half_y = half_x * h / w
    xs = (np.arange(w) + 0.5) / w * 2 * half_x - half_x
    ys = half_y - (np.arange(h) + 0.5) / h * 2 * half_y
    x, y = np.meshgrid(xs, ys)
    return pose.to_object(x, y)


def _footprint(xo, yo, params: CategoryParams):
    a, b, _ = params.axes
    e2 = params.exponents[1]
    return np.abs(xo / a) ** (2 / e2) + np.abs(yo / b) ** (2 / e2) <= 1.0


def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def superellipsoid_surface(params: CategoryParams, n: int) -> np.ndarray:
    """Deterministic surface sample: radial projection of Fibonacci directions."""
    d = _fibonacci_directions(n)
    a, b, c = params.axes
    e1, e2 = params.exponents
    f = (np.abs(d[:, 0] / a) ** (2 / e2) + np.abs(d[:, 1] / b) ** (2 / e2)) ** (e2 / e1) + np.abs(d[:, 2] / c) ** (2 / e1)
    return d * (f ** (-e1 / 2))[:, None]


def generate_object(config: SynthConfig, params: CategoryParams, rng: np.random.Generator) -> SynthObject:
    """Render one defect-free object. Deterministic given the rng state."""
    pose = Pose(
        math.radians(rng.uniform(-config.yaw_jitter_deg, config.yaw_jitter_deg)),
        tuple(rng.uniform(-config.shift_jitter_mm, config.shift_jitter_mm, size=2)),
    )
    # RGB: stripes along a fixed colour direction on a dark background
    xo, yo = _pixel_object_coords(config.rgb_size, params, pose)
    inside = _footprint(xo, yo, params)
    base = np.asarray(params.base_color)
    tdir = base / np.linalg.norm(base)
    ca, sa = math.cos(params.texture_angle), math.sin(params.texture_angle)
    wave = np.sin(2 * np.pi * (ca * xo + sa * yo) / params.texture_period)
    obj = base + params.texture_amp * wave[..., None] * tdir
    rgb = np.where(inside[..., None], obj, 30.0)
    rgb = rgb + rng.normal(0, config.rgb_noise, size=rgb.shape) if config.rgb_noise > 0 else rgb
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    # infrared: warm object with a linear thermal gradient
    xo, yo = _pixel_object_coords(config.ir_size, params, pose)
    inside = _footprint(xo, yo, params)
    ct, st = math.cos(params.thermal_angle), math.sin(params.thermal_angle)
    a, b, _ = params.axes
    temp = params.thermal_base + params.thermal_gradient * (ct * xo / a + st * yo / b)
    ir = np.where(inside, temp, 40.0)
    ir = ir + rng.normal(0, config.ir_noise, size=ir.shape) if config.ir_noise > 0 else ir
    ir = np.clip(np.rint(ir), 0, 255).astype(np.uint8)

    surface = superellipsoid_surface(params, config.cloud_points)
    cloud = pose.to_world(surface)
    if config.pc_noise > 0:
        cloud = cloud + rng.normal(0, config.pc_noise, size=cloud.shape)
    return SynthObject(rgb, ir, cloud, params, pose, surface)


def _profile(dist: np.ndarray, radius: float) -> np.ndarray:
    # raised cosine with a floor of 1/2, so every point of the support changes
    return 0.5 + 0.25 * (1 + np.cos(np.pi * np.clip(dist / radius, 0, 1)))


def _image_support(shape, obj: SynthObject, center, radius):
    xo, yo = _pixel_object_coords(shape, obj.params, obj.pose)
    dist = np.hypot(xo - center[0], yo - center[1])
    return (dist <= radius) & _footprint(xo, yo, obj.params), dist


def inject_defect(obj: SynthObject, spec: DefectSpec, rng: np.random.Generator) -> tuple[SynthObject, GroundTruth]:
    """Apply a defect to the modalities in ``spec.visibility`` only.

    Returns a new object; the input is not modified. Ground truth marks exactly
    the pixels/points that changed.
    """
    a, b, c = obj.params.axes
    radius = spec.extent * min(a, b)
    if radius > 0.5 * min(a, b):
        raise ValueError(f"defect extent {spec.extent} exceeds object bounds")
    # location on the top face, inside the inner part of the footprint
    while True:
        cand = rng.uniform(-0.4, 0.4, size=2) * np.array([a, b])
        if _footprint(np.array([cand[0] * 1.4]), np.array([cand[1] * 1.4]), obj.params)[0]:
            break
    center = cand
    rgb, ir, cloud = obj.rgb, obj.ir, obj.cloud
    labels = {m: 0 for m in MODALITY_ORDER}
    gt = GroundTruth(ModalityLabels())
    if Modality.RGB in spec.visibility:
        support, dist = _image_support(rgb.shape[:2], obj, center, radius)
        base = np.asarray(obj.params.base_color)
        tdir = base / np.linalg.norm(base)
        hue = np.cross(tdir, [0.0, 0.0, 1.0])
        hue /= np.linalg.norm(hue)
        shift = spec.magnitude[Modality.RGB] * _profile(dist, radius)[..., None] * hue
        rgb = rgb.astype(np.float64)
        rgb[support] += shift[support]
        rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        gt.rgb_mask = np.where(support & np.any(rgb != obj.rgb, axis=-1), 255, 0).astype(np.uint8)
        labels[Modality.RGB] = 1
    if Modality.INFRARED in spec.visibility:
        support, dist = _image_support(ir.shape, obj, center, radius)
        ir = ir.astype(np.float64)
        ir[support] += spec.magnitude[Modality.INFRARED] * _profile(dist[support], radius)
        ir = np.clip(np.rint(ir), 0, 255).astype(np.uint8)
        gt.ir_mask = np.where(support & (ir != obj.ir), 255, 0).astype(np.uint8)
        labels[Modality.INFRARED] = 1
    if Modality.POINTCLOUD in spec.visibility:
        s = obj.cloud_object
        top = s[:, 2] > 0
        dist = np.sqrt((s[:, 0] - center[0]) ** 2 + (s[:, 1] - center[1]) ** 2)
        hit = top & (dist <= radius)
        idx = np.nonzero(hit)[0]
        cloud = cloud.copy()
        # flat-bottomed pit: the rim step is what changes local geometry
        cloud[idx, 2] -= spec.magnitude[Modality.POINTCLOUD]
        gt.point_indices = idx
        labels[Modality.POINTCLOUD] = 1
    gt.labels = ModalityLabels.from_mapping(labels)
    return replace(obj, rgb=rgb, ir=ir, cloud=cloud), gt


def _allocate(mix: dict, total: int) -> list[tuple[str, int]]:
    """Largest-remainder allocation of ``total`` samples over the mix."""
    keys = list(mix)
    weights = np.array([float(mix[k]) for k in keys])
    if total == 0 or not keys:
        return [(k, 0) for k in keys]
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("defect mix weights must be non-negative with a positive sum")
    exact = weights / weights.sum() * total
    counts = np.floor(exact + 1e-9).astype(int)
    rema = exact - counts
    for i in sorted(range(len(keys)), key=lambda i: (-rema[i], i))[: total - counts.sum()]:
        counts[i] += 1
    return list(zip(keys, counts.tolist()))


def _sample_rng(seed: int, cat_index: int, split: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, cat_index, split, i])


def defect_spec_for(key: str, config: SynthConfig) -> DefectSpec:
    kind, vis = parse_mix_key(key)
    return DefectSpec(kind, vis, {m: config.magnitude(m) for m in vis}, config.defect_extent)


def _write_sample(root: Path, cat: str, split: str, defect: str, sid: str, obj: SynthObject, gt: GroundTruth | None) -> dict:
    sub = "train" if split == "train" else f"test/{defect}"
    paths = {
        Modality.RGB: f"{cat}/RGB/{sub}/{sid}.png",
        Modality.INFRARED: f"{cat}/Infrared/{sub}/{sid}.png",
        Modality.POINTCLOUD: f"{cat}/Pointcloud/{sub}/{sid}.txt",
    }
    save_image(obj.rgb, root / paths[Modality.RGB])
    save_image(obj.ir, root / paths[Modality.INFRARED])
    save_point_cloud(obj.cloud, root / paths[Modality.POINTCLOUD])
    ann = {}
    if gt is not None:
        if gt.rgb_mask is not None:
            ann[Modality.RGB] = f"{cat}/RGB/GT/{defect}/{sid}.png"
            save_image(gt.rgb_mask, root / ann[Modality.RGB])
        if gt.ir_mask is not None:
            ann[Modality.INFRARED] = f"{cat}/Infrared/GT/{defect}/{sid}.png"
            save_image(gt.ir_mask, root / ann[Modality.INFRARED])
        if gt.point_indices is not None:
            ann[Modality.POINTCLOUD] = f"{cat}/Pointcloud/GT/{defect}/{sid}.txt"
            save_point_labels(gt.point_indices, root / ann[Modality.POINTCLOUD])
        labels = gt.labels
    else:
        labels = ModalityLabels(0, 0, 0)
    return {
        "split": split,
        "defect": defect,
        "id": sid,
        "paths": {m.value: p for m, p in paths.items()},
        "annotations": {m.value: p for m, p in ann.items()},
        "labels": {m.value: labels.get(m) for m in MODALITY_ORDER},
        "visibility": [m.value for m in MODALITY_ORDER if labels.get(m) == 1],
        "object_label": derive_object_label(labels),
    }


def generate_category(config: SynthConfig, cat_index: int) -> list[tuple]:
    """All samples of one category as ``(split, defect, id, object, gt)`` tuples."""
    params = category_params(config.seed, cat_index)
    out = []
    for i in range(config.train_count):
        obj = generate_object(config, params, _sample_rng(config.seed, cat_index, 0, i))
        out.append(("train", "good", f"{i:03d}", obj, None))
    t = 0
    for _ in range(config.test_normal):
        obj = generate_object(config, params, _sample_rng(config.seed, cat_index, 1, t))
        out.append(("test", "good", f"{t:03d}", obj, None))
        t += 1
    for key, count in _allocate(config.defect_mix, config.test_abnormal):
        spec = defect_spec_for(key, config)
        for _ in range(count):
            rng = _sample_rng(config.seed, cat_index, 1, t)
            obj = generate_object(config, params, rng)
            bad, gt = inject_defect(obj, spec, rng)
            out.append(("test", spec.dirname, f"{t:03d}", bad, gt))
            t += 1
    return out


def generate_dataset(config: SynthConfig, root) -> dict:
    """Write a dataset under ``root`` in the standard layout plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_dict(), "categories": {}}
    for ci, cat in enumerate(config.categories):
        params = category_params(config.seed, ci)
        samples = [
            _write_sample(root, cat, split, defect, sid, obj, gt)
            for split, defect, sid, obj, gt in generate_category(config, ci)
        ]
        manifest["categories"][cat] = {"params": asdict(params), "samples": samples}
        log.info("synth: wrote category %s (%d samples)", cat, len(samples))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
