"""Dense instance affinity head.

Per-pixel features are projected twice (1x1 convolution + rectifier);
the pairwise affinity between pixels i and j is the dot product of the
two projections. Applying the affinities to the potential tensor uses
the associativity of matrix products: with flattened pixel matrices,

    out = psi + proj0 @ (proj1.T @ psi)

so the quadratic pixel-by-pixel affinity matrix is never materialized -
the intermediate is a tiny (feature_dim x n_channels) matrix. A naive
quadratic path exists as a correctness oracle, guarded by a pixel cap.
The backward pass is hand-derived reverse mode with the same factored
bracketing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import CapacityError, DimensionError, FormatError
from .numerics import require_tensor3

NAIVE_PIXEL_CAP = 4096


@dataclass
class AffinityParams:
    """Weights of the two per-pixel linear projections (rectifier fixed)."""

    w0: np.ndarray  # (c, c)
    b0: np.ndarray  # (c,)
    w1: np.ndarray  # (c, c)
    b1: np.ndarray  # (c,)

    @property
    def feature_dim(self) -> int:
        return self.w0.shape[0]

    def validate(self) -> None:
        c = self.feature_dim
        for name, arr, shape in [("w0", self.w0, (c, c)), ("b0", self.b0, (c,)),
                                 ("w1", self.w1, (c, c)), ("b1", self.b1, (c,))]:
            if arr.shape != shape:
                raise DimensionError(f"params.{name} has shape {arr.shape}, expected {shape}")

    @classmethod
    def init(cls, feature_dim: int, seed: int, scale: float = 0.15,
             jitter: float = 0.02) -> "AffinityParams":
        """Near-identity init below useful magnitude, zero biases.

        Plain fixed-rate gradient descent cannot cross the dead-rectifier
        trap around the all-zero head, so the residual projections start
        as a jittered scaled identity; training then has to grow the
        propagation scale severalfold and learn the gating biases.
        """
        rng = np.random.default_rng(seed)
        eye = np.eye(feature_dim)
        return cls(
            w0=scale * eye + jitter * rng.normal(size=(feature_dim, feature_dim)),
            b0=np.zeros(feature_dim),
            w1=scale * eye + jitter * rng.normal(size=(feature_dim, feature_dim)),
            b1=np.zeros(feature_dim),
        )

    def save(self, path: str | Path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for name in ("w0", "b0", "w1", "b1"):
            container.write_tensor(root / f"{name}.panc", getattr(self, name))
        manifest = {
            "format": "panfuse-affinity-params",
            "version": 1,
            "feature_dim": int(self.feature_dim),
            "activation": "rectifier",
            "tensors": {n: f"{n}.panc" for n in ("w0", "b0", "w1", "b1")},
        }
        (root / "params.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "AffinityParams":
        root = Path(path)
        mpath = root / "params.json"
        if not mpath.is_file():
            raise FormatError(f"no params.json in {root}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != "panfuse-affinity-params":
            raise FormatError(f"{mpath} is not an affinity-params manifest")
        arrays = {n: container.read_tensor(root / manifest["tensors"][n])
                  for n in ("w0", "b0", "w1", "b1")}
        params = cls(**arrays)
        params.validate()
        return params


@dataclass
class AffinityGrads:
    """Reverse-mode gradients; each entry has the shape of its primal."""

    d_psi: np.ndarray
    d_features: np.ndarray
    d_w0: np.ndarray
    d_b0: np.ndarray
    d_w1: np.ndarray
    d_b1: np.ndarray


@dataclass(frozen=True)
class CostReport:
    """Multiply-add and memory estimates for one applier configuration."""

    naive_flops: int
    factored_flops: int
    affinity_matrix_bytes: int
    reduction_percent: float
    projection_flops: int

    def to_dict(self) -> dict:
        return {
            "naive_flops": self.naive_flops,
            "factored_flops": self.factored_flops,
            "affinity_matrix_bytes": self.affinity_matrix_bytes,
            "reduction_percent": self.reduction_percent,
            "projection_flops": self.projection_flops,
        }


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def project_features(q: np.ndarray, params: AffinityParams) -> tuple[np.ndarray, np.ndarray]:
    """Apply both per-pixel projections: relu(q @ w + b) for each head."""
    q = require_tensor3(q, "features")
    params.validate()
    if q.shape[2] != params.feature_dim:
        raise DimensionError(
            f"features have width {q.shape[2]}, params expect {params.feature_dim}"
        )
    flat = q.reshape(-1, q.shape[2])
    q0 = _relu(flat @ params.w0 + params.b0).reshape(q.shape)
    q1 = _relu(flat @ params.w1 + params.b1).reshape(q.shape)
    return q0, q1


def _check_applier_shapes(psi: np.ndarray, q0: np.ndarray, q1: np.ndarray):
    psi = require_tensor3(psi, "potential")
    q0 = require_tensor3(q0, "projected features (head 0)")
    q1 = require_tensor3(q1, "projected features (head 1)")
    if q0.shape != q1.shape:
        raise DimensionError(f"projection shapes differ: {q0.shape} vs {q1.shape}")
    if psi.shape[:2] != q0.shape[:2]:
        raise DimensionError(
            f"potential grid {psi.shape[:2]} does not match features {q0.shape[:2]}"
        )
    return psi, q0, q1


def apply_affinity_factored(psi: np.ndarray, q0: np.ndarray, q1: np.ndarray,
                            row_parallel: bool = False) -> np.ndarray:
    """Residual affinity aggregation in linear pixel complexity.

    ``row_parallel=True`` computes the same result from per-row partial
    products combined by a fixed pairwise reduction, so row blocks can be
    farmed out without changing the answer beyond 1e-12.
    """
    psi, q0, q1 = _check_applier_shapes(psi, q0, q1)
    h, w, k = psi.shape
    c = q0.shape[2]
    psi_m = psi.reshape(-1, k)
    q0_m = q0.reshape(-1, c)
    q1_m = q1.reshape(-1, c)
    if not row_parallel:
        inner = q1_m.T @ psi_m  # (c, k): the only intermediate
        return (psi_m + q0_m @ inner).reshape(h, w, k)
    partials = [q1[r].T @ psi[r] for r in range(h)]
    inner = _pairwise_sum(partials)
    out = np.empty_like(psi)
    for r in range(h):
        out[r] = psi[r] + q0[r] @ inner
    return out


def _pairwise_sum(terms: list[np.ndarray]) -> np.ndarray:
    """Deterministic pairwise tree reduction (independent of chunking)."""
    while len(terms) > 1:
        terms = [terms[i] + terms[i + 1] if i + 1 < len(terms) else terms[i]
                 for i in range(0, len(terms), 2)]
    return terms[0]


def apply_affinity_naive(psi: np.ndarray, q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Quadratic oracle: materializes the full pixel-pair affinity matrix.

    Guarded at NAIVE_PIXEL_CAP pixels; beyond that the memory cost is the
    very thing the factored path exists to avoid.
    """
    psi, q0, q1 = _check_applier_shapes(psi, q0, q1)
    h, w, k = psi.shape
    n = h * w
    if n > NAIVE_PIXEL_CAP:
        raise CapacityError(
            f"naive path materializes a {n}x{n} affinity matrix; "
            f"cap is {NAIVE_PIXEL_CAP} pixels"
        )
    psi_m = psi.reshape(n, k)
    a = q0.reshape(n, -1) @ q1.reshape(n, -1).T  # (n, n)
    return (psi_m + a @ psi_m).reshape(h, w, k)


def affinity_map_for_pixel(q0: np.ndarray, q1: np.ndarray,
                           pixel: tuple[int, int]) -> np.ndarray:
    """Affinity of one pixel to every pixel: the corresponding row of the
    (never otherwise materialized) affinity matrix, for visualization."""
    q0 = require_tensor3(q0, "projected features (head 0)")
    q1 = require_tensor3(q1, "projected features (head 1)")
    row, col = pixel
    h, w, _ = q0.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel {pixel} outside {h}x{w} grid")
    return q1 @ q0[row, col]


def backward_affinity(psi: np.ndarray, q: np.ndarray, params: AffinityParams,
                      grad_p: np.ndarray) -> AffinityGrads:
    """Exact reverse-mode gradients of the residual affinity aggregation.

    Uses the same factored bracketing as the forward pass (no quadratic
    intermediate). The rectifier subgradient at exactly 0 is taken as 0.
    """
    psi = require_tensor3(psi, "potential")
    q = require_tensor3(q, "features")
    grad_p = require_tensor3(grad_p, "output gradient")
    params.validate()
    if grad_p.shape != psi.shape:
        raise DimensionError(
            f"output gradient shape {grad_p.shape} does not match potential {psi.shape}"
        )
    if q.shape[:2] != psi.shape[:2]:
        raise DimensionError(
            f"features grid {q.shape[:2]} does not match potential {psi.shape[:2]}"
        )
    h, w, k = psi.shape
    c = q.shape[2]
    qm = q.reshape(-1, c)
    psi_m = psi.reshape(-1, k)
    g = grad_p.reshape(-1, k)

    # Recompute forward intermediates.
    a0 = qm @ params.w0 + params.b0
    a1 = qm @ params.w1 + params.b1
    q0 = _relu(a0)
    q1 = _relu(a1)
    inner = q1.T @ psi_m  # (c, k)

    d_psi = g + q1 @ (q0.T @ g)
    d_q0 = g @ inner.T
    d_inner = q0.T @ g  # (c, k)
    d_q1 = psi_m @ d_inner.T
    d_a0 = d_q0 * (a0 > 0.0)
    d_a1 = d_q1 * (a1 > 0.0)
    d_features = d_a0 @ params.w0.T + d_a1 @ params.w1.T
    return AffinityGrads(
        d_psi=d_psi.reshape(h, w, k),
        d_features=d_features.reshape(h, w, c),
        d_w0=qm.T @ d_a0,
        d_b0=d_a0.sum(axis=0),
        d_w1=qm.T @ d_a1,
        d_b1=d_a1.sum(axis=0),
    )


def estimate_costs(h: int, w: int, d: int, c: int, n_det: int, n_stuff: int,
                   bytes_per_scalar: int) -> CostReport:
    """Multiply-add counts (1 madd = 2 FLOPs) and affinity-matrix bytes.

    Counts cover only the two applier matrix products; the two 1x1
    projections are reported separately in ``projection_flops``.
    """
    for name, val in [("h", h), ("w", w), ("d", d), ("c", c), ("n_det", n_det),
                      ("n_stuff", n_stuff), ("bytes_per_scalar", bytes_per_scalar)]:
        if val < 1:
            raise DimensionError(f"{name} must be >= 1, got {val}")
    n = (h // d) * (w // d)
    k = n_det + n_stuff
    naive = 2 * n * n * c + 2 * n * n * k
    factored = 4 * c * n * k
    reduction = 100.0 * (1.0 - factored / naive)
    return CostReport(
        naive_flops=naive,
        factored_flops=factored,
        affinity_matrix_bytes=n * n * bytes_per_scalar,
        reduction_percent=reduction,
        projection_flops=4 * n * c * c,
    )
