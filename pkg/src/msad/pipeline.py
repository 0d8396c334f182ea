"""Stage orchestration: dataset directory in, artifact directory out.

Output layout under ``RunConfig.out``::

    features/<modality>/<category>/<split>/<defect>/<id>.msft
    banks/<modality>/<category>.msbk           (+ .train.json: self-excluded training scores)
    scores/<modality>/<category>.json          object scores per test sample
    scores/<modality>/<category>/<split>/<defect>/<id>.npy   patch scores
    maps/<modality>/<category>/<defect>/<id>.pgm (+ .json) or .txt for clouds
    gates/<subset>/<category>.json
    report/report.json, report.txt, report.csv, object_scores.json, figures/*.png
    runs/<command>.json                        run manifest
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .core import MODALITY_ORDER, ConfigError, DataError, Modality, PatchFeatureMap, SampleRef, parse_modalities, subset_key
from .features_image import DEFAULT_GRID, WORKING_RESOLUTION, extract_patch_features
from .features_pc import DEFAULT_K_FPFH, DEFAULT_K_NORMALS, compute_fpfh
from .fusion import DEFAULT_NU, FUSION_RULES, GatingModel, assemble_score_vectors, fit_gating, load_gating, save_gating
from .ingest import (
    GT_TEMPLATE,
    DatasetIndex,
    load_image,
    load_point_cloud,
    read_feature_matrix,
    scan_dataset,
    write_feature_matrix,
    write_pgm16,
    write_point_scores,
)
from .memory_bank import DEFAULT_CORESET_RATIO, DEFAULT_SIGMA, build_bank, read_bank, render_score_map, score_sample, write_bank
from .metrics import EvalReport, default_configurations, evaluate

log = logging.getLogger(__name__)

WORKERS_ENV = "MSAD_WORKERS"
FEATURE_MODES = ("handcrafted", "import")
FUSION_CHOICES = ("gate",) + tuple(r for r in FUSION_RULES if r != "single")
KERNELS = ("rbf", "linear")


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


@dataclass
class RunConfig:
    dataset: str | None = None
    out: str = "msad_out"
    modalities: tuple[Modality, ...] = MODALITY_ORDER
    feature_mode: dict = field(default_factory=dict)  # modality value -> handcrafted | import
    import_dir: str | None = None
    grid: tuple[int, int] = DEFAULT_GRID
    resolution: int = WORKING_RESOLUTION
    k_normals: int = DEFAULT_K_NORMALS
    k_fpfh: int = DEFAULT_K_FPFH
    coreset_ratio: float = DEFAULT_CORESET_RATIO
    seed: int = 0
    fusion: str = "gate"
    nu: float = DEFAULT_NU
    gamma: float | None = None
    kernel: str = "rbf"
    sigma: float = DEFAULT_SIGMA
    gt_template: str = GT_TEMPLATE
    workers: int | None = None
    synth: dict = field(default_factory=dict)  # SynthConfig overrides for the synth command

    # fields that change where or how fast things run, never what is computed
    _NON_SEMANTIC = ("out", "workers")

    def __post_init__(self):
        if isinstance(self.modalities, str):
            self.modalities = parse_modalities(self.modalities)
        else:
            mods = {Modality.parse(m) if isinstance(m, str) else m for m in self.modalities}
            self.modalities = tuple(m for m in MODALITY_ORDER if m in mods)
        if isinstance(self.feature_mode, str):
            self.feature_mode = {m.value: self.feature_mode for m in MODALITY_ORDER}
        self.feature_mode = {Modality.parse(k).value: v for k, v in dict(self.feature_mode).items()}
        self.grid = tuple(int(g) for g in self.grid)
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(len(self.modalities) > 0, "modality subset must be nonempty")
        for m, mode in self.feature_mode.items():
            need(mode in FEATURE_MODES, f"feature mode for {m} must be one of {FEATURE_MODES}, got {mode!r}")
        if "import" in self.feature_mode.values():
            need(self.import_dir is not None, "feature mode 'import' needs import_dir")
        need(len(self.grid) == 2 and min(self.grid) >= 1, f"grid must be two positive integers, got {self.grid}")
        need(self.resolution >= max(self.grid), "resolution must be at least the grid size")
        need(self.k_normals >= 3, "k_normals must be >= 3")
        need(self.k_fpfh >= 1, "k_fpfh must be >= 1")
        need(0 < self.coreset_ratio <= 1, f"coreset ratio must be in (0, 1], got {self.coreset_ratio}")
        need(int(self.seed) == self.seed and self.seed >= 0, "seed must be a non-negative integer")
        need(self.fusion in FUSION_CHOICES, f"fusion must be one of {FUSION_CHOICES}, got {self.fusion!r}")
        need(0 < self.nu <= 1, f"nu must be in (0, 1], got {self.nu}")
        need(self.gamma is None or self.gamma > 0, "gamma must be > 0")
        need(self.kernel in KERNELS, f"kernel must be one of {KERNELS}")
        need(self.sigma >= 0, "sigma must be >= 0")
        need(self.workers is None or self.workers >= 1, "workers must be >= 1")

    def mode(self, modality: Modality) -> str:
        return self.feature_mode.get(modality.value, "handcrafted")

    @property
    def n_workers(self) -> int:
        return self.workers or default_workers()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "out": self.out,
            "modalities": [m.value for m in self.modalities],
            "feature_mode": {m.value: self.mode(m) for m in self.modalities},
            "import_dir": self.import_dir,
            "grid": list(self.grid),
            "resolution": self.resolution,
            "k_normals": self.k_normals,
            "k_fpfh": self.k_fpfh,
            "coreset_ratio": self.coreset_ratio,
            "seed": self.seed,
            "fusion": self.fusion,
            "nu": self.nu,
            "gamma": self.gamma,
            "kernel": self.kernel,
            "sigma": self.sigma,
            "gt_template": self.gt_template,
            "workers": self.workers,
            "synth": self.synth,
        }

    def config_hash(self) -> str:
        doc = {k: v for k, v in self.to_dict().items() if k not in self._NON_SEMANTIC}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__) - {"_NON_SEMANTIC"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ----------------------------------------------------------------------------
# paths


def _sample_parts(ref: SampleRef) -> Path:
    return Path(ref.category) / ref.split / ref.defect / ref.sample_id


def feature_path(out, modality: Modality, ref: SampleRef) -> Path:
    return Path(out) / "features" / modality.value / _sample_parts(ref).with_suffix(".msft")


def bank_path(out, modality: Modality, category: str) -> Path:
    return Path(out) / "banks" / modality.value / f"{category}.msbk"


def train_scores_path(out, modality: Modality, category: str) -> Path:
    return Path(out) / "banks" / modality.value / f"{category}.train.json"


def score_table_path(out, modality: Modality, category: str) -> Path:
    return Path(out) / "scores" / modality.value / f"{category}.json"


def patch_score_path(out, modality: Modality, ref: SampleRef) -> Path:
    return Path(out) / "scores" / modality.value / _sample_parts(ref).with_suffix(".npy")


def map_path(out, modality: Modality, ref: SampleRef) -> Path:
    suffix = ".txt" if modality is Modality.POINTCLOUD else ".pgm"
    return Path(out) / "maps" / modality.value / ref.category / ref.defect / f"{ref.sample_id}{suffix}"


def gate_path(out, subset: Sequence[Modality], category: str) -> Path:
    return Path(out) / "gates" / subset_key(subset) / f"{category}.json"


def report_dir(out) -> Path:
    return Path(out) / "report"


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path, what: str):
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return json.loads(path.read_text())


# ----------------------------------------------------------------------------
# execution helpers


def parallel_map(fn: Callable, items: list, workers: int) -> list:
    """Order-preserving map; runs in-process for a single worker."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def open_index(cfg: RunConfig) -> DatasetIndex:
    if not cfg.dataset:
        raise ConfigError("no dataset root configured (use --dataset or the config file)")
    if not Path(cfg.dataset).is_dir():
        raise DataError(f"dataset root does not exist: {cfg.dataset}")
    return scan_dataset(cfg.dataset, cfg.modalities, cfg.gt_template)


def write_manifest(cfg: RunConfig, command: str, timings: dict, extra: dict | None = None) -> Path:
    import matplotlib
    import scipy

    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "msad": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "platform": platform.platform(),
        "timings": {k: round(v, 4) for k, v in timings.items()},
    }
    if extra:
        doc.update(extra)
    path = Path(cfg.out) / "runs" / f"{command}.json"
    _write_json(path, doc)
    return path


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t

        return _Ctx()


# ----------------------------------------------------------------------------
# extract


def extract_features(modality: Modality, path, grid=DEFAULT_GRID, resolution=WORKING_RESOLUTION,
                     k_normals=DEFAULT_K_NORMALS, k_fpfh=DEFAULT_K_FPFH) -> PatchFeatureMap:
    """Handcrafted features of one input file."""
    if modality is Modality.POINTCLOUD:
        return compute_fpfh(load_point_cloud(path), k_normals, k_fpfh)
    return extract_patch_features(load_image(path), tuple(grid), modality=modality, resolution=resolution)


def _extract_task(task) -> int:
    mvalue, src, dst, grid, resolution, k_normals, k_fpfh = task
    try:
        fmap = extract_features(Modality(mvalue), src, grid, resolution, k_normals, k_fpfh)
    except ValueError as exc:
        raise DataError(f"{src}: {exc}") from None
    write_feature_matrix(fmap, dst)
    return fmap.count


def _import_task(task) -> int:
    mvalue, src, dst = task
    src = Path(src)
    if not src.is_file():
        raise DataError(f"imported feature file not found: {src}")
    fmap = read_feature_matrix(src)
    if fmap.modality is not Modality(mvalue):
        raise DataError(f"{src}: holds {fmap.modality.value} features, expected {mvalue}")
    write_feature_matrix(fmap, dst)
    return fmap.count


def run_extract(cfg: RunConfig, index: DatasetIndex | None = None) -> dict:
    index = index or open_index(cfg)
    timer = _Timer()
    counts = {}
    for m in cfg.modalities:
        refs = [r for cat in sorted(index.categories) for r in index[cat].train + index[cat].test if m in r.paths]
        with timer(f"extract/{m.value}"):
            if cfg.mode(m) == "import":
                root = Path(cfg.import_dir) / m.value
                tasks = [(m.value, str(root / _sample_parts(r).with_suffix(".msft")), str(feature_path(cfg.out, m, r))) for r in refs]
                parallel_map(_import_task, tasks, cfg.n_workers)
            else:
                tasks = [
                    (m.value, str(r.paths[m]), str(feature_path(cfg.out, m, r)), cfg.grid, cfg.resolution, cfg.k_normals, cfg.k_fpfh)
                    for r in refs
                ]
                parallel_map(_extract_task, tasks, cfg.n_workers)
        counts[m.value] = len(refs)
        log.info("extract: %s features for %d samples", m.value, len(refs))
    write_manifest(cfg, "extract", timer.timings, {"samples": counts})
    return counts


# ----------------------------------------------------------------------------
# build-bank


def _load_features(out, m: Modality, ref: SampleRef) -> PatchFeatureMap:
    path = feature_path(out, m, ref)
    if not path.is_file():
        raise DataError(f"features not found: {path} (run extract first)")
    return read_feature_matrix(path)


def _bank_task(task) -> dict:
    out, mvalue, cat, refs, ratio, seed = task
    m = Modality(mvalue)
    maps = [_load_features(out, m, r) for r in refs]
    if not maps:
        raise DataError(f"{cat}/{m.dirname}: no training samples")
    built = build_bank(maps, ratio, seed, m)
    write_bank(built.bank, bank_path(out, m, cat))
    doc = {
        "keys": [r.key for r in refs],
        "scores": [float(s) for s in built.training_scores],
        "median": built.bank.scaler.median,
        "iqr": built.bank.scaler.iqr,
        "bank_size": built.bank.size,
        "source_rows": int(sum(mp.count for mp in maps)),
    }
    _write_json(train_scores_path(out, m, cat), doc)
    return {"category": cat, "modality": mvalue, "bank_size": built.bank.size}


def run_build_bank(cfg: RunConfig, index: DatasetIndex | None = None) -> list[dict]:
    index = index or open_index(cfg)
    tasks = []
    for m in cfg.modalities:
        for cat in sorted(index.categories):
            refs = [r for r in index[cat].train if m in r.paths]
            tasks.append((cfg.out, m.value, cat, refs, cfg.coreset_ratio, cfg.seed))
    timer = _Timer()
    with timer("build-bank"):
        results = parallel_map(_bank_task, tasks, cfg.n_workers)
    for r in results:
        log.info("build-bank: %s/%s -> %d vectors", r["category"], r["modality"], r["bank_size"])
    write_manifest(cfg, "build-bank", timer.timings, {"banks": results})
    return results


# ----------------------------------------------------------------------------
# score


def _image_shape(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        return im.size[1], im.size[0]


def _score_task(task) -> dict:
    out, mvalue, cat, refs, sigma = task
    m = Modality(mvalue)
    bank = read_bank(bank_path(out, m, cat))
    table = {}
    for ref in refs:
        fmap = _load_features(out, m, ref)
        try:
            res = score_sample(bank, fmap)
        except ValueError as exc:
            raise DataError(f"{ref.category}/{m.dirname}/{ref.key}: {exc}") from None
        p = patch_score_path(out, m, ref)
        p.parent.mkdir(parents=True, exist_ok=True)
        np.save(p, res.patch_scores)
        entry = {"raw": res.object_score, "normalized": res.normalized_score, "argmax": res.argmax_patch,
                 "grid": list(fmap.grid)}
        if m is Modality.POINTCLOUD:
            write_point_scores(res.patch_scores, map_path(out, m, ref))
            entry["shape"] = [fmap.count]
        else:
            shape = _image_shape(ref.paths[m])
            write_pgm16(render_score_map(res.patch_scores, fmap.grid, shape, sigma), map_path(out, m, ref))
            entry["shape"] = list(shape)
        table[ref.key] = entry
    _write_json(score_table_path(out, m, cat), table)
    return {"category": cat, "modality": mvalue, "samples": len(table)}


def run_score(cfg: RunConfig, index: DatasetIndex | None = None) -> list[dict]:
    index = index or open_index(cfg)
    tasks = []
    for m in cfg.modalities:
        for cat in sorted(index.categories):
            if not bank_path(cfg.out, m, cat).is_file():
                raise DataError(f"bank not found: {bank_path(cfg.out, m, cat)} (run build-bank first)")
            refs = [r for r in index[cat].test if m in r.paths]
            tasks.append((cfg.out, m.value, cat, refs, cfg.sigma))
    timer = _Timer()
    with timer("score"):
        results = parallel_map(_score_task, tasks, cfg.n_workers)
    write_manifest(cfg, "score", timer.timings, {"tables": results})
    return results


# ----------------------------------------------------------------------------
# fit-gate


def fusion_subsets(modalities: Sequence[Modality]) -> list[tuple[Modality, ...]]:
    mods = [m for m in MODALITY_ORDER if m in modalities]
    return [c for r in range(2, len(mods) + 1) for c in combinations(mods, r)]


def training_score_vectors(out, category: str, subset: Sequence[Modality]) -> tuple[list[str], np.ndarray, dict]:
    """Normalised self-excluded training scores aligned across ``subset``."""
    tables, scalers = {}, {}
    for m in subset:
        doc = _read_json(train_scores_path(out, m, category), "training scores")
        if not doc["scores"]:
            raise DataError(f"{category}/{m.dirname}: gating needs at least two training samples")
        div = doc["iqr"] if doc["iqr"] > 0 else 1.0
        tables[m] = {k: (s - doc["median"]) / div for k, s in zip(doc["keys"], doc["scores"])}
        scalers[m.value] = {"median": doc["median"], "iqr": doc["iqr"]}
    ids, vecs = assemble_score_vectors(tables, subset)
    return ids, vecs, scalers


def run_fit_gate(cfg: RunConfig, index: DatasetIndex | None = None) -> list[dict]:
    index = index or open_index(cfg)
    timer = _Timer()
    results = []
    with timer("fit-gate"):
        for subset in fusion_subsets(cfg.modalities):
            for cat in sorted(index.categories):
                _, vecs, scalers = training_score_vectors(cfg.out, cat, subset)
                model = fit_gating(vecs, nu=cfg.nu, gamma=cfg.gamma, kernel=cfg.kernel, subset=subset)
                model.scalers = scalers
                save_gating(model, gate_path(cfg.out, subset, cat))
                results.append({"category": cat, "subset": subset_key(subset), "support_vectors": len(model.alphas),
                                "kkt_gap": model.kkt_gap})
                log.info("fit-gate: %s/%s, %d support vectors, KKT gap %.2g",
                         cat, subset_key(subset), len(model.alphas), model.kkt_gap)
    write_manifest(cfg, "fit-gate", timer.timings, {"gates": results})
    return results


# ----------------------------------------------------------------------------
# evaluate


class DirectoryStore:
    """Score artifacts read back from an output directory."""

    def __init__(self, out):
        self.out = Path(out)
        self._tables: dict = {}
        self._refs: dict = {}

    def register(self, index: DatasetIndex) -> None:
        for cat in index.categories:
            for ref in index[cat].test:
                self._refs[(cat, ref.key)] = ref

    def object_scores(self, category: str, modality: Modality) -> dict[str, dict]:
        key = (category, modality)
        if key not in self._tables:
            self._tables[key] = _read_json(score_table_path(self.out, modality, category), "score table")
        return self._tables[key]

    def patch_scores(self, category: str, modality: Modality, key: str) -> np.ndarray:
        ref = self._refs[(category, key)]
        path = patch_score_path(self.out, modality, ref)
        if not path.is_file():
            raise DataError(f"patch scores not found: {path}")
        return np.load(path)

    def gate(self, category: str, subset: tuple[Modality, ...]) -> GatingModel | None:
        path = gate_path(self.out, subset, category)
        return load_gating(path) if path.is_file() else None


def write_report_files(report: EvalReport, out) -> Path:
    rdir = report_dir(out)
    rdir.mkdir(parents=True, exist_ok=True)
    _write_json(rdir / "report.json", report.to_json())
    _write_json(rdir / "object_scores.json", report.object_scores)
    (rdir / "report.txt").write_text(report.to_text())
    (rdir / "report.csv").write_text(report.to_csv())
    return rdir


def run_evaluate(cfg: RunConfig, index: DatasetIndex | None = None) -> EvalReport:
    index = index or open_index(cfg)
    store = DirectoryStore(cfg.out)
    store.register(index)
    timer = _Timer()
    with timer("evaluate"):
        report = evaluate(index, store, default_configurations(cfg.modalities, cfg.fusion), cfg.modalities, cfg.sigma)
        write_report_files(report, cfg.out)
    write_manifest(cfg, "evaluate", timer.timings, {"mean": report.mean_row()})
    return report


def load_report(out) -> EvalReport:
    rdir = report_dir(out)
    doc = _read_json(rdir / "report.json", "evaluation report")
    scores_path = rdir / "object_scores.json"
    scores = json.loads(scores_path.read_text()) if scores_path.is_file() else {}
    return EvalReport.from_json(doc, scores)


def run_all(cfg: RunConfig) -> EvalReport:
    """extract -> build-bank -> score -> fit-gate -> evaluate -> report."""
    from .report import render_report

    index = open_index(cfg)
    run_extract(cfg, index)
    run_build_bank(cfg, index)
    run_score(cfg, index)
    if len(cfg.modalities) > 1:
        run_fit_gate(cfg, index)
    report = run_evaluate(cfg, index)
    render_report(report, report_dir(cfg.out))
    return report
