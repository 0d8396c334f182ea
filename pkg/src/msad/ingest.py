"""Dataset layout scanning and file formats.

Layout (mirrors the released dataset)::

    <root>/<category>/<Modality>/train/<id>.<ext>
    <root>/<category>/<Modality>/test/<defect>/<id>.<ext>
    <root>/<category>/<Modality>/GT/<defect>/<id>.<ext>

``<Modality>`` is one of ``RGB``, ``Infrared``, ``Pointcloud``. Image masks are
PNG/PGM, point annotations are text files listing 0-based anomalous point indices.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import MODALITY_ORDER, DataError, Modality, PatchFeatureMap, SampleRef

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".ppm", ".pgm")
CLOUD_EXTS = (".txt", ".xyz", ".ply")
MASK_THRESHOLD = 128

# Relative to <category>/<Modality>/GT; configurable through scan_dataset.
GT_TEMPLATE = "{defect}/{id}"


def _exts(modality: Modality) -> tuple[str, ...]:
    return CLOUD_EXTS if modality is Modality.POINTCLOUD else IMAGE_EXTS


def _gt_exts(modality: Modality) -> tuple[str, ...]:
    return (".txt",) if modality is Modality.POINTCLOUD else (".png", ".pgm")


@dataclass
class CategoryIndex:
    name: str
    train: list[SampleRef]
    test: list[SampleRef]
    # (sample key, modality) -> annotation path
    annotations: dict[tuple[str, Modality], Path] = field(default_factory=dict)

    def annotation(self, sample: SampleRef, modality: Modality) -> Path | None:
        return self.annotations.get((sample.key, modality))

    def samples(self, split: str) -> list[SampleRef]:
        return self.train if split == "train" else self.test


@dataclass
class DatasetIndex:
    root: Path
    modalities: tuple[Modality, ...]
    categories: dict[str, CategoryIndex]

    def __getitem__(self, name: str) -> CategoryIndex:
        return self.categories[name]

    def counts(self) -> dict[str, dict[str, int]]:
        return {
            name: {"train": len(c.train), "test": len(c.test)}
            for name, c in self.categories.items()
        }


def _list_files(directory: Path, exts: tuple[str, ...]) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if not p.is_file() or p.name.startswith("."):
            continue
        if p.suffix.lower() not in exts:
            log.debug("ignoring %s", p)
            continue
        if p.stem in found:
            raise DataError(f"duplicate sample id {p.stem!r} in {directory}")
        found[p.stem] = p
    return found


def scan_dataset(
    root,
    modalities: tuple[Modality, ...] = tuple(Modality),
    gt_template: str = GT_TEMPLATE,
) -> DatasetIndex:
    """Index a dataset root. Ordering is lexicographic and independent of the
    filesystem's enumeration order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    categories: dict[str, CategoryIndex] = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        cat = cat_dir.name
        # (split, defect, id) -> {modality: path}
        entries: dict[tuple[str, str, str], dict[Modality, Path]] = {}
        annotations: dict[tuple[str, Modality], Path] = {}
        for m in modalities:
            mdir = cat_dir / m.dirname
            if not mdir.is_dir():
                raise DataError(f"category {cat!r} is missing modality directory {m.dirname}")
            train_dir = mdir / "train"
            if train_dir.is_dir():
                for sid, p in _list_files(train_dir, _exts(m)).items():
                    entries.setdefault(("train", "good", sid), {})[m] = p
            test_dir = mdir / "test"
            if test_dir.is_dir():
                for ddir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
                    for sid, p in _list_files(ddir, _exts(m)).items():
                        entries.setdefault(("test", ddir.name, sid), {})[m] = p
        train, test = [], []
        for (split, defect, sid), paths in sorted(entries.items()):
            ref = SampleRef(cat, split, defect, sid, dict(paths))
            (train if split == "train" else test).append(ref)
        if not train:
            raise DataError(f"category {cat!r}: no training samples")
        for ref in test:
            if ref.is_normal:
                continue
            # every modality's GT counts toward the object label, selected or not
            for m in MODALITY_ORDER:
                rel = gt_template.format(defect=ref.defect, id=ref.sample_id)
                for ext in _gt_exts(m):
                    p = cat_dir / m.dirname / "GT" / (rel + ext)
                    if p.is_file():
                        annotations[(ref.key, m)] = p
                        break
            if not any((ref.key, m) in annotations for m in MODALITY_ORDER):
                raise DataError(f"category {cat!r}: anomalous test sample {ref.key} has no annotation")
        categories[cat] = CategoryIndex(cat, train, test, annotations)
    if not categories:
        raise DataError(f"no categories found under {root}")
    return DatasetIndex(root, tuple(modalities), categories)


# ----------------------------------------------------------------------------
# Point clouds


def _parse_float(tok: str, path: Path, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse {tok!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{lineno}: non-finite coordinate {tok!r}")
    return v


def _load_ply(path: Path, lines: list[str]) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    elements_before = 0  # lines belonging to elements declared before "vertex"
    header_end = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise DataError(f"{path}: only ASCII PLY is supported (got {tok[1]})")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                elements_before += int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None or n_vertex is None:
        raise DataError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise DataError(f"{path}: PLY vertex element lacks x/y/z properties") from None
    start = header_end + 1 + elements_before
    body = lines[start : start + n_vertex]
    if len(body) < n_vertex:
        raise DataError(f"{path}: PLY declares {n_vertex} vertices, found {len(body)}")
    pts = np.empty((n_vertex, 3))
    for j, line in enumerate(body):
        tok = line.split()
        if len(tok) < len(props):
            raise DataError(f"{path}:{start + j + 1}: expected {len(props)} values")
        pts[j] = [_parse_float(tok[c], path, start + j + 1) for c in cols]
    return pts


def load_point_cloud(path) -> np.ndarray:
    """Load an ``(N, 3)`` float64 array from XYZ text or ASCII PLY (millimetres)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
        pts = _load_ply(path, lines)
    else:
        rows = []
        for lineno, line in enumerate(lines, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            tok = s.split()
            if len(tok) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 coordinates, got {len(tok)}")
            rows.append([_parse_float(t, path, lineno) for t in tok])
        pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise DataError(f"{path}: point cloud has zero points")
    return pts


def save_point_cloud(points: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(points)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        body = "".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in points)
        path.write_text(header + body)
    else:
        path.write_text("".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in points))


def load_point_labels(path, n_points: int) -> np.ndarray:
    """Per-point 0/1 labels from a file of 0-based anomalous indices, one per line."""
    path = Path(path)
    labels = np.zeros(n_points, dtype=np.uint8)
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        try:
            idx = int(s)
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected an integer index, got {s!r}") from None
        if idx < 0 or idx >= n_points:
            raise DataError(f"{path}:{lineno}: index {idx} out of range for {n_points} points")
        if idx in seen:
            log.warning("%s:%d: duplicate index %d", path, lineno, idx)
        seen.add(idx)
        labels[idx] = 1
    return labels


def save_point_labels(indices, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{int(i)}\n" for i in indices))


# ----------------------------------------------------------------------------
# Images


def load_image(path) -> np.ndarray:
    """Decode PNG/PPM/PGM into ``(H, W)`` or ``(H, W, 3)`` uint8."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise DataError(f"{path}: unsupported image format {im.format}")
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.uint32) >> 8
                return arr.astype(np.uint8)
            if im.mode in ("1", "L", "LA"):
                im = im.convert("L")
            else:
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from None


def load_mask(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Load a single-channel mask binarized to {0, 255} at threshold 128.

    ``shape`` is the ``(H, W)`` of the paired image; a mismatch raises.
    """
    img = load_image(path)
    if img.ndim == 3:
        img = img.max(axis=2)
    if shape is not None and img.shape != tuple(shape[:2]):
        raise DataError(f"{path}: mask size {img.shape[1]}x{img.shape[0]} does not match image {shape[1]}x{shape[0]}")
    return np.where(img >= MASK_THRESHOLD, 255, 0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path)


def write_pgm16(values: np.ndarray, path) -> dict:
    """Write a float map as a 16-bit binary PGM and a JSON scale sidecar.

    Pixel value ``v`` decodes as ``offset + v * scale``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 1.0
    q = np.rint((values - lo) / scale).astype(">u2")
    h, w = values.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())
    meta = {"offset": lo, "scale": scale, "width": w, "height": h}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return meta


def read_pgm16(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = path.read_bytes()
    header_end = data.index(b"65535\n") + len(b"65535\n")
    q = np.frombuffer(data[header_end:], dtype=">u2").reshape(meta["height"], meta["width"])
    return meta["offset"] + q.astype(np.float64) * meta["scale"]


def write_point_scores(scores: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i} {float(s)!r}\n" for i, s in enumerate(scores)))


# ----------------------------------------------------------------------------
# MSFT feature matrices

MSFT_MAGIC = b"MSFT"
MSFT_VERSION = 1
_MSFT_HEADER = struct.Struct("<4sHBBIIII")


def write_feature_matrix(fmap: PatchFeatureMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f = np.ascontiguousarray(fmap.features, dtype="<f4")
    rows, cols = fmap.grid
    header = _MSFT_HEADER.pack(MSFT_MAGIC, MSFT_VERSION, fmap.modality.code, 0, rows, cols, f.shape[0], f.shape[1])
    path.write_bytes(header + f.tobytes())


def read_feature_matrix(path) -> PatchFeatureMap:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _MSFT_HEADER.size or data[:4] != MSFT_MAGIC:
        raise DataError(f"{path}: not a MSFT file")
    _, version, mcode, _, rows, cols, n, d = _MSFT_HEADER.unpack_from(data)
    if version != MSFT_VERSION:
        raise DataError(f"{path}: unsupported MSFT version {version}")
    try:
        modality = Modality.from_code(mcode)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if (rows, cols) != (0, 0) and rows * cols != n:
        raise DataError(f"{path}: grid {rows}x{cols} inconsistent with row count {n}")
    expected = _MSFT_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise DataError(f"{path}: truncated payload ({len(data)} bytes, expected {expected})")
    f = np.frombuffer(data, dtype="<f4", offset=_MSFT_HEADER.size).reshape(n, d)
    if not np.all(np.isfinite(f)):
        raise DataError(f"{path}: feature matrix contains non-finite values")
    return PatchFeatureMap(modality, f.astype(np.float32), (rows, cols))
