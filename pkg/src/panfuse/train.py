"""Desk-scale end-to-end training on synthetic scenes.

Only the affinity projection weights are trainable; semantic
probabilities, detections, and features are inputs. Optimization is
plain gradient descent, which keeps runs deterministic: identical
configs produce bit-identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affinity import AffinityParams, apply_affinity_factored, backward_affinity, project_features
from .errors import NumericError
from .inference import MergerParams, PanopticMap, heuristic_merge, infer_panoptic, panoptic_from_ground_truth
from .matching import TargetMap, build_target_map, match_segments, panoptic_matching_loss
from .metrics import PQReport, PQStats
from .potential import DynamicPotential, Variant, append_stuff_boxes, build_potential, filter_by_score
from .scene import Detection, GroundTruthPanoptic, SceneCues, SynthConfig, synth_scene

EVAL_SEED_OFFSET = 10_007
EVAL_SCORE_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 40_000
    learning_rate: float = 0.01
    seed: int = 0
    use_affinity: bool = True
    detections_source: str = "predicted"  # "predicted" | "ground_truth"
    variant: Variant = Variant.B
    match_threshold: float = 0.5
    scenes: int = 64
    scene: SynthConfig = field(default_factory=SynthConfig)
    eval_scenes: int = 6
    param_scale: float = 0.15

    def validate(self) -> None:
        if self.steps < 1:
            raise NumericError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise NumericError("learning_rate must be > 0")
        if self.detections_source not in ("predicted", "ground_truth"):
            raise NumericError(
                f"unknown detections_source {self.detections_source!r}"
            )
        self.scene.validate()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["variant"] = self.variant.value
        d["scene"] = self.scene.to_dict()
        return d


@dataclass
class TrainingReport:
    loss_curve: list[float]
    final_pq: PQReport
    config: TrainConfig
    params: AffinityParams  # trained weights; not part of the JSON form

    def to_json_dict(self) -> dict:
        return {
            "loss_curve": self.loss_curve,
            "final_pq": self.final_pq.to_json_dict(),
            "config": self.config.to_dict(),
        }


@dataclass
class SceneBundle:
    """Per-scene quantities that stay fixed while parameters change."""

    scene: SceneCues
    gt: GroundTruthPanoptic
    potential: DynamicPotential
    target: TargetMap


def ground_truth_detections(scene: SceneCues, gt: GroundTruthPanoptic) -> list[Detection]:
    """Tight ground-truth thing boxes with a uniform score of 1.0."""
    dets = []
    for seg in gt.segments:
        if not scene.catalog.is_thing(seg.class_id):
            continue
        mask = None
        if any(d.mask is not None for d in scene.detections):
            mask = (gt.label_map == seg.index).astype(scene.semantic_probs.dtype)
        dets.append(Detection(box=seg.box, score=1.0, class_id=seg.class_id, mask=mask))
    return dets


def prepare_training_scene(scene: SceneCues, gt: GroundTruthPanoptic,
                           variant: Variant, detections_source: str,
                           match_threshold: float) -> SceneBundle:
    """Assemble the fixed potential and target for one training scene.

    Detections are matched against ground truth; duplicate detections lose
    their channel before the potential is fed onward, and unmatched
    ground-truth segments become IGNORE in the target.
    """
    if detections_source == "ground_truth":
        things = ground_truth_detections(scene, gt)
    else:
        things = scene.detections
    dets = append_stuff_boxes(things, scene.catalog, scene.height, scene.width)
    match = match_segments(gt, dets, match_threshold, scene.catalog)
    potential = build_potential(scene.semantic_probs, dets, variant, scene.catalog)
    potential = potential.without_detections(match.removed_duplicates)
    target = build_target_map(gt, match, potential.channels)
    return SceneBundle(scene=scene, gt=gt, potential=potential, target=target)


def training_loss(bundle: SceneBundle, params: AffinityParams,
                  use_affinity: bool) -> tuple[float, np.ndarray]:
    """Forward pass to the scalar loss; also returns the logits gradient."""
    psi = bundle.potential.psi
    if use_affinity:
        q0, q1 = project_features(bundle.scene.features, params)
        p = apply_affinity_factored(psi, q0, q1)
    else:
        p = psi
    return panoptic_matching_loss(p, bundle.target)


def make_pool(cfg: TrainConfig) -> list[SceneBundle]:
    scenes = [synth_scene(cfg.scene, seed=cfg.seed + i) for i in range(cfg.scenes)]
    return [prepare_training_scene(s, g, cfg.variant, cfg.detections_source,
                                   cfg.match_threshold)
            for s, g in scenes]


def make_eval_pool(cfg: TrainConfig) -> list[tuple[SceneCues, GroundTruthPanoptic]]:
    return [synth_scene(cfg.scene, seed=cfg.seed + EVAL_SEED_OFFSET + i)
            for i in range(cfg.eval_scenes)]


def predict_panoptic(scene: SceneCues, params: AffinityParams | None,
                     variant: Variant = Variant.B,
                     score_threshold: float = EVAL_SCORE_THRESHOLD,
                     ) -> tuple[PanopticMap, DynamicPotential]:
    """Inference pipeline: filter, build potential, optional affinity, argmax."""
    dets = filter_by_score(scene.detections, score_threshold)
    dets = append_stuff_boxes(dets, scene.catalog, scene.height, scene.width)
    potential = build_potential(scene.semantic_probs, dets, variant, scene.catalog)
    p = potential.psi
    if params is not None:
        q0, q1 = project_features(scene.features, params)
        p = apply_affinity_factored(p, q0, q1)
    return infer_panoptic(p, potential.channels), potential


def evaluate_pq(pool: list[tuple[SceneCues, GroundTruthPanoptic]],
                params: AffinityParams | None, variant: Variant,
                mode: str = "argmax",
                merger: MergerParams | None = None) -> PQReport:
    """Held-out PQ via the argmax path or the heuristic merger."""
    stats = PQStats()
    catalog = pool[0][0].catalog
    for scene, gt in pool:
        if mode == "argmax":
            pred, _ = predict_panoptic(scene, params, variant)
        elif mode == "heuristic":
            pred = heuristic_merge(scene.semantic_probs, scene.detections,
                                   merger or MergerParams(), scene.catalog)
        else:
            raise NumericError(f"unknown inference mode {mode!r}")
        stats.accumulate(pred, panoptic_from_ground_truth(gt, catalog))
    return stats.report(catalog)


def train_toy(cfg: TrainConfig) -> TrainingReport:
    """Plain gradient descent over the affinity projections.

    Scenes are visited round-robin; the loss curve records the pre-update
    loss of each step's scene. Aborts with the step index if the loss
    goes non-finite.
    """
    cfg.validate()
    pool = make_pool(cfg)
    params = AffinityParams.init(cfg.scene.feature_dim, seed=cfg.seed,
                                 scale=cfg.param_scale)
    losses: list[float] = []
    for step in range(cfg.steps):
        bundle = pool[step % len(pool)]
        if not cfg.use_affinity:
            loss, _ = training_loss(bundle, params, use_affinity=False)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged at step {step}")
            losses.append(loss)
            continue
        psi = bundle.potential.psi
        q0, q1 = project_features(bundle.scene.features, params)
        p = apply_affinity_factored(psi, q0, q1)
        loss, grad_p = panoptic_matching_loss(p, bundle.target)
        if not np.isfinite(loss):
            raise NumericError(f"loss diverged at step {step}")
        losses.append(loss)
        grads = backward_affinity(psi, bundle.scene.features, params, grad_p)
        lr = cfg.learning_rate
        params = AffinityParams(
            w0=params.w0 - lr * grads.d_w0,
            b0=params.b0 - lr * grads.d_b0,
            w1=params.w1 - lr * grads.d_w1,
            b1=params.b1 - lr * grads.d_b1,
        )
    eval_pool = make_eval_pool(cfg)
    final_pq = evaluate_pq(eval_pool, params if cfg.use_affinity else None, cfg.variant)
    return TrainingReport(loss_curve=losses, final_pq=final_pq,
                          config=cfg, params=params)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max-norm relative error per tensor, plus the smallest rectifier
    pre-activation magnitude (finite differences are unreliable when a
    pre-activation sits within epsilon of the kink)."""

    max_rel_error: dict[str, float]
    min_preactivation: float

    def worst(self) -> float:
        return max(self.max_rel_error.values())


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(scene: SceneCues, gt: GroundTruthPanoptic, params: AffinityParams,
               epsilon: float = 1e-5, variant: Variant = Variant.B,
               match_threshold: float = 0.5) -> GradCheckReport:
    """Compare analytic gradients of the scene loss against central
    finite differences, for every input and parameter tensor."""
    if not (0.0 < epsilon <= 1e-3):
        raise NumericError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    bundle = prepare_training_scene(scene, gt, variant, "predicted", match_threshold)
    psi = bundle.potential.psi
    features = bundle.scene.features

    q0, q1 = project_features(features, params)
    p = apply_affinity_factored(psi, q0, q1)
    _, grad_p = panoptic_matching_loss(p, bundle.target)
    grads = backward_affinity(psi, features, params, grad_p)

    flat = features.reshape(-1, features.shape[2])
    pre0 = flat @ params.w0 + params.b0
    pre1 = flat @ params.w1 + params.b1
    min_pre = float(min(np.abs(pre0).min(), np.abs(pre1).min()))

    def loss_with(psi_t, feat_t, prm):
        qq0, qq1 = project_features(feat_t, prm)
        return panoptic_matching_loss(
            apply_affinity_factored(psi_t, qq0, qq1), bundle.target)[0]

    def numeric_grad(base: np.ndarray, rebuild) -> np.ndarray:
        out = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = base.copy()
            plus[idx] += epsilon
            minus = base.copy()
            minus[idx] -= epsilon
            out[idx] = (rebuild(plus) - rebuild(minus)) / (2 * epsilon)
        return out

    report: dict[str, float] = {}
    report["psi"] = _rel_error(
        grads.d_psi, numeric_grad(psi, lambda t: loss_with(t, features, params)))
    report["features"] = _rel_error(
        grads.d_features, numeric_grad(features, lambda t: loss_with(psi, t, params)))
    for name, analytic in [("w0", grads.d_w0), ("b0", grads.d_b0),
                           ("w1", grads.d_w1), ("b1", grads.d_b1)]:
        def rebuild(t, _name=name):
            kw = {"w0": params.w0, "b0": params.b0, "w1": params.w1, "b1": params.b1}
            kw[_name] = t
            return loss_with(psi, features, AffinityParams(**kw))
        report[name] = _rel_error(analytic, numeric_grad(getattr(params, name), rebuild))
    return GradCheckReport(max_rel_error=report, min_preactivation=min_pre)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    label: str
    masks: bool
    use_affinity: bool
    detections_source: str
    variant: str
    pq_argmax: tuple[float, float, float]  # all / things / stuff
    pq_heuristic: tuple[float, float, float] | None
    initial_loss: float
    final_loss: float

    def to_json_dict(self) -> dict:
        d = {
            "label": self.label,
            "masks": self.masks,
            "use_affinity": self.use_affinity,
            "detections_source": self.detections_source,
            "variant": self.variant,
            "pq_argmax": {"all": self.pq_argmax[0], "things": self.pq_argmax[1],
                          "stuff": self.pq_argmax[2]},
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        }
        if self.pq_heuristic is not None:
            d["pq_heuristic"] = {"all": self.pq_heuristic[0],
                                 "things": self.pq_heuristic[1],
                                 "stuff": self.pq_heuristic[2]}
        return d


def ablate(configs: list[TrainConfig], labels: list[str] | None = None) -> list[AblationRow]:
    """Train each config and evaluate on its held-out pool.

    Heuristic-merger PQ is reported alongside the argmax PQ whenever the
    scene pool carries masks.
    """
    rows = []
    for i, cfg in enumerate(configs):
        label = labels[i] if labels else f"config_{i}"
        report = train_toy(cfg)
        eval_pool = make_eval_pool(cfg)
        pq_heu = None
        if cfg.scene.with_masks:
            heu = evaluate_pq(eval_pool, None, cfg.variant, mode="heuristic")
            pq_heu = (heu.pq("all"), heu.pq("things"), heu.pq("stuff"))
        pq = report.final_pq
        rows.append(AblationRow(
            label=label,
            masks=cfg.scene.with_masks,
            use_affinity=cfg.use_affinity,
            detections_source=cfg.detections_source,
            variant=cfg.variant.value,
            pq_argmax=(pq.pq("all"), pq.pq("things"), pq.pq("stuff")),
            pq_heuristic=pq_heu,
            initial_loss=report.loss_curve[0],
            final_loss=report.loss_curve[-1],
        ))
    return rows


def render_ablation_table(rows: list[AblationRow]) -> str:
    header = (f"{'label':>18} {'msk':>4} {'aff':>4} {'dets':>12} {'var':>4} "
              f"{'PQ':>7} {'PQ-th':>7} {'PQ-st':>7} {'PQ-heu':>7} {'loss':>8}")
    lines = [header]
    for r in rows:
        heu = f"{r.pq_heuristic[0]:7.4f}" if r.pq_heuristic else "      -"
        lines.append(
            f"{r.label:>18} {'y' if r.masks else 'n':>4} "
            f"{'y' if r.use_affinity else 'n':>4} {r.detections_source:>12} "
            f"{r.variant:>4} {r.pq_argmax[0]:7.4f} {r.pq_argmax[1]:7.4f} "
            f"{r.pq_argmax[2]:7.4f} {heu} {r.final_loss:8.4f}"
        )
    return "\n".join(lines)


def object_recovery(scene: SceneCues, gt: GroundTruthPanoptic,
                    params: AffinityParams | None,
                    variant: Variant = Variant.B) -> list[float]:
    """Fraction of each ground-truth thing segment recovered by inference.

    A pixel counts as recovered when the argmax assigns it to the channel
    of the detection matched to that segment.
    """
    dets = filter_by_score(scene.detections, EVAL_SCORE_THRESHOLD)
    dets = append_stuff_boxes(dets, scene.catalog, scene.height, scene.width)
    match = match_segments(gt, dets, 0.1, scene.catalog)
    potential = build_potential(scene.semantic_probs, dets, variant, scene.catalog)
    p = potential.psi
    if params is not None:
        q0, q1 = project_features(scene.features, params)
        p = apply_affinity_factored(p, q0, q1)
    winners = p.argmax(axis=2)
    det_for_gt = match.detection_for_gt()
    fractions = []
    for seg in gt.segments:
        if not scene.catalog.is_thing(seg.class_id):
            continue
        det_index = det_for_gt.get(seg.index)
        if det_index is None:
            fractions.append(0.0)
            continue
        channel = potential.channel_for_detection(det_index)
        pixels = gt.label_map == seg.index
        fractions.append(float((winners[pixels] == channel).mean()))
    return fractions
