from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest

from msad.core import Modality, ModalityLabels, derive_object_label
from msad.ingest import scan_dataset
from msad.synth import (
    DefectSpec,
    SynthConfig,
    category_params,
    defect_spec_for,
    generate_category,
    generate_dataset,
    generate_object,
    inject_defect,
    parse_mix_key,
)

SMALL = dict(cloud_points=400, rgb_size=(48, 64), ir_size=(40, 52))


def _obj(seed=0, **kw):
    cfg = SynthConfig(**{**SMALL, **kw})
    return cfg, generate_object(cfg, category_params(cfg.seed, 0), np.random.default_rng(seed))


def test_generation_is_deterministic():
    _, a = _obj(5)
    _, b = _obj(5)
    for m in ("rgb", "ir", "cloud"):
        np.testing.assert_array_equal(getattr(a, m), getattr(b, m))
    assert a.cloud.shape == (400, 3)


def test_zero_noise_samples_identical_up_to_pose():
    cfg, a = _obj(1, rgb_noise=0, ir_noise=0, pc_noise=0)
    _, b = _obj(2, rgb_noise=0, ir_noise=0, pc_noise=0)
    np.testing.assert_array_equal(a.cloud_object, b.cloud_object)
    for o in (a, b):
        x, y = o.pose.to_object(o.cloud[:, 0], o.cloud[:, 1])
        np.testing.assert_allclose(np.stack([x, y, o.cloud[:, 2]], 1), o.cloud_object, atol=1e-9)
    _, c = _obj(1, rgb_noise=0, ir_noise=0, pc_noise=0, yaw_jitter_deg=0, shift_jitter_mm=0)
    _, d = _obj(2, rgb_noise=0, ir_noise=0, pc_noise=0, yaw_jitter_deg=0, shift_jitter_mm=0)
    np.testing.assert_array_equal(c.rgb, d.rgb)
    np.testing.assert_array_equal(c.ir, d.ir)
    np.testing.assert_array_equal(c.cloud, d.cloud)


@pytest.mark.parametrize("key", ["surface_blob", "thermal_spot", "geometric_dent", "cross_modal:rgb+pc"])
def test_visibility_contract_and_diff_oracle(key):
    cfg, obj = _obj(3)
    spec = defect_spec_for(key, cfg)
    bad, gt = inject_defect(obj, spec, np.random.default_rng(9))
    vis = set(spec.visibility)
    assert gt.labels == ModalityLabels.from_mapping({m: int(m in vis) for m in Modality})
    # diff against the clean object recovers the emitted ground truth exactly
    rgb_diff = np.any(bad.rgb != obj.rgb, axis=-1)
    ir_diff = bad.ir != obj.ir
    pc_diff = np.nonzero(np.any(bad.cloud != obj.cloud, axis=1))[0]
    if Modality.RGB in vis:
        np.testing.assert_array_equal(gt.rgb_mask > 0, rgb_diff)
        assert rgb_diff.any()
    else:
        assert gt.rgb_mask is None and not rgb_diff.any()
    if Modality.INFRARED in vis:
        np.testing.assert_array_equal(gt.ir_mask > 0, ir_diff)
        assert ir_diff.any()
    else:
        assert gt.ir_mask is None and not ir_diff.any()
    if Modality.POINTCLOUD in vis:
        np.testing.assert_array_equal(np.sort(gt.point_indices), pc_diff)
        assert len(pc_diff) > 0
    else:
        assert gt.point_indices is None and len(pc_diff) == 0
    # the input object is not modified
    _, again = _obj(3)
    np.testing.assert_array_equal(again.rgb, obj.rgb)


def test_defect_spec_validation():
    cfg, obj = _obj(0)
    assert parse_mix_key("cross_modal:pc+ir") == ("cross_modal", (Modality.INFRARED, Modality.POINTCLOUD))
    with pytest.raises(ValueError):
        parse_mix_key("scratch")
    with pytest.raises(ValueError):
        DefectSpec("surface_blob", (), {}, 0.2)
    with pytest.raises(ValueError):
        DefectSpec("surface_blob", (Modality.RGB,), {Modality.RGB: 0.0}, 0.2)
    with pytest.raises(ValueError, match="exceeds"):
        inject_defect(obj, DefectSpec("surface_blob", (Modality.RGB,), {Modality.RGB: 10.0}, 0.6), np.random.default_rng(0))


def test_default_magnitudes_are_five_noise_stds():
    cfg = SynthConfig()
    assert cfg.magnitude(Modality.RGB) == 5 * cfg.rgb_noise
    assert cfg.magnitude(Modality.INFRARED) == 5 * cfg.ir_noise
    assert cfg.magnitude(Modality.POINTCLOUD) == 5 * cfg.pc_noise


def test_default_mix_counts():
    samples = generate_category(SynthConfig(train_count=1, test_normal=0, **SMALL), 0)
    counts = Counter(d for s, d, *_ in samples if s == "test")
    assert counts == {"surface_blob": 10, "thermal_spot": 10, "geometric_dent": 10}


def test_per_sample_streams_are_independent_of_counts():
    a = generate_category(SynthConfig(train_count=2, test_normal=1, test_abnormal=3, **SMALL), 0)
    b = generate_category(SynthConfig(train_count=5, test_normal=1, test_abnormal=3, **SMALL), 0)
    test_a = [x for x in a if x[0] == "test"]
    test_b = [x for x in b if x[0] == "test"]
    for x, y in zip(a[:2] + test_a, b[:2] + test_b):
        assert x[:3] == y[:3]
        np.testing.assert_array_equal(x[3].cloud, y[3].cloud)


def test_dataset_manifest_round_trip(tmp_path):
    mix = {"surface_blob": 0.25, "cross_modal:rgb+ir": 0.25, "cross_modal:ir+pc": 0.5}
    cfg = SynthConfig(categories=["k"], train_count=2, test_normal=2, test_abnormal=8, defect_mix=mix, **SMALL)
    manifest = generate_dataset(cfg, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text()) == json.loads(json.dumps(manifest))
    samples = manifest["categories"]["k"]["samples"]
    venn = Counter(tuple(s["visibility"]) for s in samples if s["split"] == "test" and s["defect"] != "good")
    assert venn == {("rgb",): 2, ("rgb", "infrared"): 2, ("infrared", "pointcloud"): 4}
    for s in samples:
        labels = ModalityLabels(**s["labels"])
        assert derive_object_label(labels) == s["object_label"]
    index = scan_dataset(tmp_path)
    assert len(index["k"].train) == 2 and len(index["k"].test) == 10


def test_zero_abnormal_dataset_has_no_ground_truth(tmp_path):
    cfg = SynthConfig(categories=["k"], train_count=2, test_normal=3, test_abnormal=0, **SMALL)
    generate_dataset(cfg, tmp_path)
    assert not list(tmp_path.glob("k/*/GT"))
    assert all(r.is_normal for r in scan_dataset(tmp_path)["k"].test)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(train_count=0)
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"colour": 1})
    assert SynthConfig.from_dict(SynthConfig().to_dict()) == SynthConfig()
