"""Scene data model, synthetic scene generation, and container IO.

A scene bundles the cues consumed by the fusion pipeline: per-pixel
semantic class probabilities, object detections (boxes, scores, classes,
optional masks), and per-pixel features feeding the affinity head.
Ground truth is a per-pixel segment labeling plus segment metadata.

On disk a scene is a directory holding ``manifest.json`` plus one PANC
tensor file per array (see :mod:`panfuse.container`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import DimensionError, FormatError, GenerationError
from .numerics import DEFAULT_DTYPE, IGNORE

_LABEL_SENTINEL_U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class ClassCatalog:
    """Fixed class ordering: ids 0..n_stuff-1 are stuff, the rest things."""

    n_stuff: int
    n_thing: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_stuff < 1 or self.n_thing < 0:
            raise DimensionError(
                f"catalog needs n_stuff >= 1 and n_thing >= 0, "
                f"got ({self.n_stuff}, {self.n_thing})"
            )
        if self.names is not None and len(self.names) != self.n_classes:
            raise DimensionError(
                f"catalog names has {len(self.names)} entries, "
                f"expected {self.n_classes}"
            )

    @property
    def n_classes(self) -> int:
        return self.n_stuff + self.n_thing

    def is_stuff(self, class_id: int) -> bool:
        return 0 <= class_id < self.n_stuff

    def is_thing(self, class_id: int) -> bool:
        return self.n_stuff <= class_id < self.n_classes


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box, half-open on the right and bottom."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DimensionError(f"box must have positive area, got {self.as_tuple()}")
        if self.x0 < 0 or self.y0 < 0:
            raise DimensionError(f"box must have non-negative origin, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def clipped(self, width: int, height: int) -> "Box | None":
        """Intersection with the grid, or None when empty."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def inside(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height


def full_image_box(width: int, height: int) -> Box:
    return Box(0, 0, width, height)


@dataclass
class Detection:
    """One localisation cue: a scored, classed box with an optional mask.

    Masks live on the full downsampled grid (one plane per detection),
    values in [0, 1], nonzero only inside the box.
    """

    box: Box
    score: float
    class_id: int
    mask: np.ndarray | None = None


@dataclass
class SceneCues:
    """All per-scene inputs to the fusion pipeline."""

    catalog: ClassCatalog
    semantic_probs: np.ndarray  # (h, w, n_classes), rows sum to 1
    detections: list[Detection]
    features: np.ndarray  # (h, w, feature_dim)

    @property
    def height(self) -> int:
        return self.semantic_probs.shape[0]

    @property
    def width(self) -> int:
        return self.semantic_probs.shape[1]


@dataclass(frozen=True)
class GtSegment:
    index: int
    class_id: int
    box: Box
    area: int


@dataclass
class GroundTruthPanoptic:
    """Per-pixel segment indices plus segment metadata; IGNORE allowed."""

    label_map: np.ndarray  # (h, w) int32
    segments: list[GtSegment]

    def segment_classes(self) -> dict[int, int]:
        return {s.index: s.class_id for s in self.segments}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic scene generator.

    ``box_truncation`` shrinks each detection box side by that fraction
    (centered); ``box_jitter`` is the std-dev of integer corner noise;
    ``confusion_rate`` is the per-pixel probability that a thing pixel's
    semantic mass is handed to a uniformly random donor class;
    ``mask_noise`` is the rate of false-positive mask pixels inside the
    detection box.
    """

    height: int = 32
    width: int = 32
    n_stuff: int = 3
    n_thing: int = 3
    n_instances: int = 3
    stuff_segments: int = 3
    instance_min: int = 8
    instance_max: int = 13
    box_truncation: float = 0.0
    box_jitter: float = 0.0
    confusion_rate: float = 0.0
    feature_noise: float = 0.1
    feature_dim: int = 16
    with_masks: bool = False
    mask_noise: float = 0.0

    def validate(self) -> None:
        if not (1 <= self.height <= 128 and 1 <= self.width <= 128):
            raise GenerationError(f"grid must be within 128x128, got {self.height}x{self.width}")
        if not (0.0 <= self.box_truncation < 1.0):
            raise GenerationError("box_truncation must be in [0, 1)")
        if not (0.0 <= self.confusion_rate < 1.0):
            raise GenerationError("confusion_rate must be in [0, 1)")
        if self.box_jitter < 0 or self.feature_noise < 0 or self.mask_noise < 0:
            raise GenerationError("noise rates must be non-negative")
        if self.n_instances < 0 or self.n_stuff < 1 or self.n_thing < 1:
            raise GenerationError("need n_stuff >= 1, n_thing >= 1, n_instances >= 0")
        if not (1 <= self.instance_min <= self.instance_max):
            raise GenerationError("instance size range is empty")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _truncate_box(box: Box, fraction: float) -> Box:
    """Shrink each side by ``fraction``, keeping the center fixed."""
    if fraction <= 0.0:
        return box
    new_w = max(1, int(round(box.width * (1.0 - fraction))))
    new_h = max(1, int(round(box.height * (1.0 - fraction))))
    x0 = box.x0 + (box.width - new_w) // 2
    y0 = box.y0 + (box.height - new_h) // 2
    return Box(x0, y0, x0 + new_w, y0 + new_h)


def _jitter_box(box: Box, sigma: float, width: int, height: int,
                rng: np.random.Generator) -> Box:
    """Perturb each corner by rounded Gaussian noise, kept valid in-grid."""
    d = np.round(rng.normal(0.0, sigma, size=4)).astype(int)
    x0 = int(np.clip(box.x0 + d[0], 0, width - 1))
    y0 = int(np.clip(box.y0 + d[1], 0, height - 1))
    x1 = int(np.clip(box.x1 + d[2], x0 + 1, width))
    y1 = int(np.clip(box.y1 + d[3], y0 + 1, height))
    return Box(x0, y0, x1, y1)


def tight_box(mask: np.ndarray) -> Box:
    """Minimal half-open box containing the True pixels of a 2-D mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DimensionError("cannot bound an empty pixel set")
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def synth_scene(cfg: SynthConfig, seed: int) -> tuple[SceneCues, GroundTruthPanoptic]:
    """Generate one synthetic scene; bit-deterministic for fixed (cfg, seed).

    The background is a nearest-seed partition over a subset of stuff
    classes; thing instances are non-overlapping axis-aligned rectangles
    drawn on top. Detections are the ground-truth tight boxes after
    truncation and jitter, with scores in [0.6, 1.0].
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    catalog = ClassCatalog(cfg.n_stuff, cfg.n_thing)

    # Stuff background: one nearest-seed cell per participating class.
    n_cells = max(1, min(cfg.stuff_segments, cfg.n_stuff))
    cell_classes = np.sort(rng.choice(cfg.n_stuff, size=n_cells, replace=False))
    seeds_y = rng.integers(0, h, size=n_cells)
    seeds_x = rng.integers(0, w, size=n_cells)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = (yy[..., None] - seeds_y) ** 2 + (xx[..., None] - seeds_x) ** 2
    label = dist.argmin(axis=2).astype(np.int32)  # ties -> lowest cell index

    # Thing instances: rejection-sampled non-overlapping rectangles.
    rects: list[Box] = []
    thing_classes: list[int] = []
    for i in range(cfg.n_instances):
        placed = False
        for _ in range(200):
            bw = int(rng.integers(cfg.instance_min, cfg.instance_max + 1))
            bh = int(rng.integers(cfg.instance_min, cfg.instance_max + 1))
            if bw > w or bh > h:
                continue
            x0 = int(rng.integers(0, w - bw + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            cand = Box(x0, y0, x0 + bw, y0 + bh)
            if all(_disjoint(cand, r) for r in rects):
                rects.append(cand)
                thing_classes.append(cfg.n_stuff + int(rng.integers(0, cfg.n_thing)))
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place instance {i + 1}/{cfg.n_instances} "
                f"on a {h}x{w} grid after 200 attempts"
            )

    for i, box in enumerate(rects):
        label[box.y0:box.y1, box.x0:box.x1] = n_cells + i

    # Compact away stuff cells fully covered by instances.
    segments: list[GtSegment] = []
    remap = np.full(n_cells + len(rects), -1, dtype=np.int32)
    next_index = 0
    for cell in range(n_cells):
        pixels = label == cell
        if not pixels.any():
            continue
        remap[cell] = next_index
        segments.append(GtSegment(next_index, int(cell_classes[cell]),
                                  tight_box(pixels), int(pixels.sum())))
        next_index += 1
    for i, box in enumerate(rects):
        remap[n_cells + i] = next_index
        segments.append(GtSegment(next_index, thing_classes[i], box, box.area))
        next_index += 1
    label = remap[label]

    seg_class = np.array([s.class_id for s in segments], dtype=np.int32)
    pixel_class = seg_class[label]

    # Semantic probabilities: one-hot ground truth; thing pixels flip their
    # mass to a uniformly random donor class with probability confusion_rate.
    k = catalog.n_classes
    flip = rng.random((h, w)) < cfg.confusion_rate
    donor = rng.integers(0, k, size=(h, w))
    observed = pixel_class.copy()
    thing_flip = flip & (pixel_class >= cfg.n_stuff)
    observed[thing_flip] = donor[thing_flip]
    v = np.zeros((h, w, k), dtype=DEFAULT_DTYPE)
    np.put_along_axis(v, observed[..., None].astype(np.int64), 1.0, axis=2)
    v /= v.sum(axis=2, keepdims=True)

    # Features: per-segment embedding plus Gaussian noise. Embeddings are
    # randomly assigned one-hot "slot" vectors in a fixed basis (distinct
    # per scene while slots last), so that a single scene-independent
    # projection can in principle separate any pair of segments.
    n_seg = len(segments)
    if n_seg <= cfg.feature_dim:
        slots = rng.permutation(cfg.feature_dim)[:n_seg]
    else:
        slots = rng.integers(0, cfg.feature_dim, size=n_seg)
    emb = np.zeros((n_seg, cfg.feature_dim))
    emb[np.arange(n_seg), slots] = 1.0
    features = emb[label].astype(DEFAULT_DTYPE)
    features += cfg.feature_noise * rng.normal(size=features.shape)

    # Detections from the thing instances.
    detections: list[Detection] = []
    for i, rect in enumerate(rects):
        box = _truncate_box(rect, cfg.box_truncation)
        if cfg.box_jitter > 0:
            box = _jitter_box(box, cfg.box_jitter, w, h, rng)
        score = float(0.6 + 0.4 * rng.random())
        mask = None
        if cfg.with_masks:
            mask = np.zeros((h, w), dtype=DEFAULT_DTYPE)
            mask_region = np.zeros((h, w), dtype=bool)
            mask_region[box.y0:box.y1, box.x0:box.x1] = True
            inside_instance = np.zeros((h, w), dtype=bool)
            inside_instance[rect.y0:rect.y1, rect.x0:rect.x1] = True
            mask[mask_region & inside_instance] = 1.0
            if cfg.mask_noise > 0:
                fp = mask_region & ~inside_instance & (rng.random((h, w)) < cfg.mask_noise)
                mask[fp] = 1.0
        detections.append(Detection(box=box, score=score,
                                    class_id=thing_classes[i], mask=mask))

    scene = SceneCues(catalog=catalog, semantic_probs=v,
                      detections=detections, features=features)
    gt = GroundTruthPanoptic(label_map=label, segments=segments)
    return scene, gt


def _disjoint(a: Box, b: Box) -> bool:
    return a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0


def validate_scene(scene: SceneCues) -> list[str]:
    """Check scene invariants; returns one message per violation."""
    violations: list[str] = []
    v = scene.semantic_probs
    if v.ndim != 3:
        return [f"semantic_probs: expected rank 3, got shape {v.shape}"]
    h, w, c = v.shape
    if c != scene.catalog.n_classes:
        violations.append(
            f"semantic_probs: {c} channels but catalog has {scene.catalog.n_classes} classes"
        )
    sums = v.sum(axis=2)
    bad = np.abs(sums - 1.0) > 1e-6
    if bad.any():
        y, x = np.argwhere(bad)[0]
        violations.append(
            f"semantic_probs: normalization violated at pixel ({y}, {x}), sum {sums[y, x]:.6g}"
        )
    if scene.features.ndim != 3 or scene.features.shape[:2] != (h, w):
        violations.append(
            f"features: grid {scene.features.shape[:2]} does not match semantic_probs {(h, w)}"
        )
    for i, det in enumerate(scene.detections):
        b = det.box
        if b.x0 >= b.x1 or b.y0 >= b.y1:
            violations.append(f"detections[{i}].box: degenerate box {b.as_tuple()}")
            continue
        if not b.inside(w, h):
            violations.append(f"detections[{i}].box: {b.as_tuple()} exceeds {w}x{h} grid")
        if not (0.0 <= det.score <= 1.0):
            violations.append(f"detections[{i}].score: {det.score} outside [0, 1]")
        if not (0 <= det.class_id < scene.catalog.n_classes):
            violations.append(f"detections[{i}].class_id: {det.class_id} out of range")
        elif scene.catalog.is_stuff(det.class_id):
            if det.score != 1.0:
                violations.append(
                    f"detections[{i}]: stuff pseudo-detection must have score 1.0"
                )
            if b.as_tuple() != (0, 0, w, h):
                violations.append(
                    f"detections[{i}]: stuff pseudo-detection must use the full-image box"
                )
        if det.mask is not None:
            if det.mask.shape != (h, w):
                violations.append(f"detections[{i}].mask: shape {det.mask.shape} != {(h, w)}")
                continue
            if det.mask.min() < 0.0 or det.mask.max() > 1.0:
                violations.append(f"detections[{i}].mask: values outside [0, 1]")
            outside = det.mask.copy()
            outside[b.y0:b.y1, b.x0:b.x1] = 0.0
            if np.any(outside != 0.0):
                violations.append(f"detections[{i}].mask: nonzero outside its box")
    return violations


# ---------------------------------------------------------------------------
# Container IO
# ---------------------------------------------------------------------------

_MANIFEST = "manifest.json"


def save_scene(scene: SceneCues, path: str | Path,
               gt: GroundTruthPanoptic | None = None,
               synth: SynthConfig | None = None) -> None:
    """Write a scene directory (manifest.json plus PANC tensors)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    container.write_tensor(root / "semantic_probs.panc", scene.semantic_probs)
    container.write_tensor(root / "features.panc", scene.features)
    det_records = []
    for i, det in enumerate(scene.detections):
        rec = {
            "box": list(det.box.as_tuple()),
            "score": det.score,
            "class_id": det.class_id,
            "mask": None,
        }
        if det.mask is not None:
            name = f"mask_{i:03d}.panc"
            container.write_tensor(root / name, det.mask)
            rec["mask"] = name
        det_records.append(rec)
    manifest = {
        "format": "panfuse-scene",
        "version": 1,
        "catalog": {
            "n_stuff": scene.catalog.n_stuff,
            "n_thing": scene.catalog.n_thing,
            "names": list(scene.catalog.names) if scene.catalog.names else None,
        },
        "shape": {"height": scene.height, "width": scene.width},
        "tensors": {"semantic_probs": "semantic_probs.panc", "features": "features.panc"},
        "detections": det_records,
        "ground_truth": None,
        "synth": synth.to_dict() if synth is not None else None,
    }
    if gt is not None:
        grid = gt.label_map.astype(np.int64)
        u32 = np.where(grid == IGNORE, _LABEL_SENTINEL_U32, grid).astype(np.uint32)
        container.write_tensor(root / "gt_labels.panc", u32)
        manifest["ground_truth"] = {
            "label_map": "gt_labels.panc",
            "segments": [
                {"index": s.index, "class_id": s.class_id,
                 "box": list(s.box.as_tuple()), "area": s.area}
                for s in gt.segments
            ],
        }
    (root / _MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_scene(path: str | Path) -> tuple[SceneCues, GroundTruthPanoptic | None]:
    """Read a scene directory; save -> load round-trips bit-exactly."""
    root = Path(path)
    mpath = root / _MANIFEST
    if not mpath.is_file():
        raise FormatError(f"no {_MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unparseable manifest in {root}: {e}") from e
    if manifest.get("format") != "panfuse-scene":
        raise FormatError(f"{mpath} is not a scene manifest")
    cat = manifest["catalog"]
    catalog = ClassCatalog(cat["n_stuff"], cat["n_thing"],
                           tuple(cat["names"]) if cat.get("names") else None)
    shape = (manifest["shape"]["height"], manifest["shape"]["width"])

    v = container.read_tensor(root / manifest["tensors"]["semantic_probs"])
    features = container.read_tensor(root / manifest["tensors"]["features"])
    _check_shape(v, shape, catalog.n_classes, "semantic_probs")
    if features.shape[:2] != shape:
        raise FormatError(
            f"features grid {features.shape[:2]} does not match manifest {shape}"
        )

    detections = []
    for i, rec in enumerate(manifest["detections"]):
        mask = None
        if rec.get("mask"):
            mask = container.read_tensor(root / rec["mask"])
            if mask.shape != shape:
                raise FormatError(
                    f"mask {rec['mask']} shape {mask.shape} does not match manifest {shape}"
                )
        detections.append(Detection(box=Box(*rec["box"]), score=rec["score"],
                                    class_id=rec["class_id"], mask=mask))
    scene = SceneCues(catalog=catalog, semantic_probs=v,
                      detections=detections, features=features)

    gt = None
    if manifest.get("ground_truth"):
        g = manifest["ground_truth"]
        u32 = container.read_tensor(root / g["label_map"])
        if u32.shape != shape:
            raise FormatError(
                f"ground-truth grid {u32.shape} does not match manifest {shape}"
            )
        label = np.where(u32 == _LABEL_SENTINEL_U32, IGNORE, u32).astype(np.int32)
        segments = [GtSegment(s["index"], s["class_id"], Box(*s["box"]), s["area"])
                    for s in g["segments"]]
        gt = GroundTruthPanoptic(label_map=label, segments=segments)
    return scene, gt


def _check_shape(t: np.ndarray, grid: tuple[int, int], channels: int, name: str) -> None:
    if t.ndim != 3 or t.shape[:2] != grid or t.shape[2] != channels:
        raise FormatError(
            f"{name} has shape {t.shape}, manifest expects {grid + (channels,)}"
        )
