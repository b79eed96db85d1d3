import json

import numpy as np
import pytest

from panfuse.container import read_tensor, write_tensor
from panfuse.errors import FormatError, GenerationError
from panfuse.scene import (
    Box,
    SynthConfig,
    load_scene,
    save_scene,
    synth_scene,
    tight_box,
    validate_scene,
)


def scenes_equal(a, b):
    if not np.array_equal(a.semantic_probs, b.semantic_probs):
        return False
    if not np.array_equal(a.features, b.features):
        return False
    if len(a.detections) != len(b.detections):
        return False
    for da, db in zip(a.detections, b.detections):
        if (da.box, da.score, da.class_id) != (db.box, db.score, db.class_id):
            return False
        if (da.mask is None) != (db.mask is None):
            return False
        if da.mask is not None and not np.array_equal(da.mask, db.mask):
            return False
    return True


def test_synth_deterministic():
    cfg = SynthConfig(with_masks=True, box_truncation=0.2, confusion_rate=0.2)
    s1, g1 = synth_scene(cfg, seed=5)
    s2, g2 = synth_scene(cfg, seed=5)
    assert scenes_equal(s1, s2)
    assert np.array_equal(g1.label_map, g2.label_map)
    assert g1.segments == g2.segments


def test_synth_valid_and_fully_labeled():
    for seed in range(5):
        scene, gt = synth_scene(SynthConfig(with_masks=True), seed=seed)
        assert validate_scene(scene) == []
        assert gt.label_map.min() >= 0  # generator never emits IGNORE
        indices = {s.index for s in gt.segments}
        assert set(np.unique(gt.label_map)) == indices


def test_synth_exact_boxes_without_truncation():
    scene, gt = synth_scene(SynthConfig(box_truncation=0.0, box_jitter=0.0), seed=9)
    thing_segments = [s for s in gt.segments if s.class_id >= scene.catalog.n_stuff]
    assert len(thing_segments) == len(scene.detections)
    for seg, det in zip(thing_segments, scene.detections):
        assert det.box == seg.box


def test_truncation_shrink_rule():
    # 20x20 at truncation 0.4 -> each side scaled by 0.6, centered: 12x12.
    from panfuse.scene import _truncate_box

    shrunk = _truncate_box(Box(10, 10, 30, 30), 0.4)
    assert (shrunk.width, shrunk.height) == (12, 12)
    assert shrunk == Box(14, 14, 26, 26)


def test_tight_boxes_recomputable_from_label_map():
    for seed in (0, 3, 8):
        _, gt = synth_scene(SynthConfig(), seed=seed)
        for seg in gt.segments:
            assert tight_box(gt.label_map == seg.index) == seg.box
            assert int((gt.label_map == seg.index).sum()) == seg.area


def test_confusion_mass_expectation():
    # Expected mass on a thing pixel's true class: (1 - r) + r / n_classes.
    r = 0.3
    cfg = SynthConfig(height=128, width=128, n_instances=8, instance_min=20,
                      instance_max=30, confusion_rate=r)
    masses = []
    for seed in range(3):
        scene, gt = synth_scene(cfg, seed=seed)
        classes = {s.index: s.class_id for s in gt.segments}
        class_map = np.vectorize(classes.get)(gt.label_map)
        thing = class_map >= cfg.n_stuff
        v_true = np.take_along_axis(scene.semantic_probs,
                                    class_map[..., None], axis=2)[..., 0]
        masses.append(v_true[thing])
    masses = np.concatenate(masses)
    assert masses.size >= 10_000
    expected = (1 - r) + r / (cfg.n_stuff + cfg.n_thing)
    # Bernoulli flip std over >= 1e4 pixels leaves ~0.5% slack.
    assert abs(masses.mean() - expected) < 0.02


def test_generation_error_when_unplaceable():
    cfg = SynthConfig(height=16, width=16, n_instances=12,
                      instance_min=10, instance_max=12)
    with pytest.raises(GenerationError):
        synth_scene(cfg, seed=0)


def test_masks_confined_to_box_and_instance():
    cfg = SynthConfig(with_masks=True, box_truncation=0.3)
    scene, gt = synth_scene(cfg, seed=4)
    assert validate_scene(scene) == []
    for det in scene.detections:
        assert det.mask is not None
        b = det.box
        outside = det.mask.copy()
        outside[b.y0:b.y1, b.x0:b.x1] = 0.0
        assert not outside.any()


def test_validate_reports_bad_normalization():
    scene, _ = synth_scene(SynthConfig(), seed=0)
    scene.semantic_probs[3, 3] *= 0.8
    violations = validate_scene(scene)
    assert len(violations) == 1
    assert "normalization" in violations[0]


def test_validate_reports_degenerate_box():
    scene, _ = synth_scene(SynthConfig(), seed=0)
    det = scene.detections[0]
    object.__setattr__(det.box, "x1", det.box.x0)  # bypass Box validation
    violations = validate_scene(scene)
    assert any("degenerate" in v for v in violations)


def test_scene_roundtrip_bit_exact(tmp_path):
    cfg = SynthConfig(with_masks=True, box_truncation=0.25, confusion_rate=0.15,
                      box_jitter=1.0)
    scene, gt = synth_scene(cfg, seed=21)
    save_scene(scene, tmp_path / "scene", gt=gt, synth=cfg)
    loaded, loaded_gt = load_scene(tmp_path / "scene")
    assert scenes_equal(scene, loaded)
    assert np.array_equal(gt.label_map, loaded_gt.label_map)
    assert gt.segments == loaded_gt.segments
    manifest = json.loads((tmp_path / "scene" / "manifest.json").read_text())
    assert manifest["synth"]["box_truncation"] == 0.25


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.panc"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError) as exc:
        read_tensor(path)
    assert exc.value.offset == 0


def test_tensor_truncated_payload(tmp_path):
    path = tmp_path / "t.panc"
    write_tensor(path, np.zeros((4, 4), dtype=np.float64))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FormatError, match="payload size mismatch"):
        read_tensor(path)


def test_tensor_roundtrip_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    for arr in (rng.normal(size=(3, 5, 2)),
                rng.normal(size=(4, 4)).astype(np.float32),
                rng.integers(0, 2**32 - 1, size=(6,), dtype=np.uint32)):
        write_tensor(tmp_path / "x.panc", arr)
        back = read_tensor(tmp_path / "x.panc")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)


def test_manifest_shape_mismatch(tmp_path):
    scene, gt = synth_scene(SynthConfig(), seed=2)
    save_scene(scene, tmp_path / "scene", gt=gt)
    # Rewrite the semantic tensor with an extra channel.
    bigger = np.concatenate([scene.semantic_probs,
                             scene.semantic_probs[:, :, :1]], axis=2)
    write_tensor(tmp_path / "scene" / "semantic_probs.panc", bigger)
    with pytest.raises(FormatError, match="shape"):
        load_scene(tmp_path / "scene")
