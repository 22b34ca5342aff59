"""Log-transmissivity fields and prior covariance matrices.

Two field families are provided: Gaussian random fields with an
exponential covariance kernel, and a rescaled Franke surface (smooth).
All fields are stored per element, as natural logs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .errors import FactorizationError, InvalidArgumentError
from .fem import Mesh2D

#: mean of ln(transmissivity) [ln(m^2/s)], i.e. a geometric mean of 1e-4 m^2/s
DEFAULT_MEAN_LOG = math.log(1e-4)
DEFAULT_STORATIVITY = 1e-5

_JITTER_START = 1e-10
_JITTER_DOUBLINGS = 6


@dataclass(frozen=True)
class CovarianceModel:
    theta: float
    corr_length: float
    kind: str = "exponential"

    def __post_init__(self):
        if not self.theta > 0:
            raise InvalidArgumentError(f"theta must be positive, got {self.theta}")
        if not self.corr_length > 0:
            raise InvalidArgumentError(f"corr_length must be positive, got {self.corr_length}")
        if self.kind != "exponential":
            raise InvalidArgumentError(f"unsupported covariance kind {self.kind!r}")

    def __call__(self, r):
        return self.theta * np.exp(-np.asarray(r) / self.corr_length)


@dataclass(frozen=True)
class FieldRealization:
    """Per-element log values of a positive parameter field."""

    log_values: np.ndarray
    mean_log: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_values)):
            raise InvalidArgumentError("log field contains non-finite values")

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)


def covariance_matrix(points, model: CovarianceModel) -> np.ndarray:
    """Dense ``theta * exp(-|x_i - x_j| / corr_length)`` matrix."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise InvalidArgumentError("need at least one point")
    Q = cdist(points, points)
    Q *= -1.0 / model.corr_length
    np.exp(Q, out=Q)
    Q *= model.theta
    return Q


def jittered_cholesky(Q: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of Q, adding a small diagonal shift on failure.

    The shift starts at ``1e-10 * max(diag Q)`` and doubles up to six times.
    A zero matrix yields a zero factor.
    """
    Q = np.asarray(Q)
    scale = float(np.max(np.diag(Q))) if Q.size else 0.0
    if scale <= 0.0:
        if np.any(Q):
            raise FactorizationError("covariance has nonpositive diagonal but nonzero entries")
        return np.zeros_like(Q)
    try:
        return sla.cholesky(Q, lower=True, check_finite=False)
    except sla.LinAlgError:
        pass
    jitter = _JITTER_START * scale
    n = Q.shape[0]
    for _ in range(_JITTER_DOUBLINGS + 1):
        A = Q.copy()
        A.flat[:: n + 1] += jitter
        try:
            return sla.cholesky(A, lower=True, overwrite_a=True, check_finite=False)
        except sla.LinAlgError:
            jitter *= 2.0
    raise FactorizationError(
        f"Cholesky failed even with diagonal jitter {jitter / 2.0:.3e}"
    )


def sample_field(Q: np.ndarray, mean_log: float, seed: int) -> FieldRealization:
    """Draw ``mean_log + C @ zeta`` with ``C C^T = Q`` and seeded normals."""
    C = jittered_cholesky(Q)
    rng = np.random.default_rng(seed)
    zeta = rng.standard_normal(C.shape[0])
    return FieldRealization(mean_log + C @ zeta, float(mean_log))


def cell_centers(mesh: Mesh2D) -> np.ndarray:
    """Centers of the ``(n-1)^2`` grid squares, ordered like the elements."""
    return 0.5 * (mesh.centroids[0::2] + mesh.centroids[1::2])


def random_field(mesh: Mesh2D, model: CovarianceModel, mean_log=DEFAULT_MEAN_LOG,
                 seed=0, resolution="cell") -> FieldRealization:
    """Sample an exponential-covariance log field on ``mesh``.

    With ``resolution="cell"`` the field is drawn at grid-square centers and
    both triangles of a square share the value; this halves the size of the
    dense covariance. ``resolution="element"`` samples every centroid.
    """
    if resolution == "cell":
        Q = covariance_matrix(cell_centers(mesh), model)
        draw = sample_field(Q, mean_log, seed)
        return FieldRealization(np.repeat(draw.log_values, 2), float(mean_log))
    if resolution == "element":
        Q = covariance_matrix(mesh.centroids, model)
        return sample_field(Q, mean_log, seed)
    raise InvalidArgumentError(f"unknown resolution {resolution!r}")


def franke(x, y):
    """Franke's bivariate test function on the unit square."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (
        0.75 * np.exp(-((9 * x - 2) ** 2 + (9 * y - 2) ** 2) / 4)
        + 0.75 * np.exp(-((9 * x + 1) ** 2) / 49 - (9 * y + 1) / 10)
        + 0.5 * np.exp(-((9 * x - 7) ** 2 + (9 * y - 3) ** 2) / 4)
        - 0.2 * np.exp(-((9 * x - 4) ** 2) - (9 * y - 7) ** 2)
    )


def franke_field(mesh: Mesh2D, target_variance: float,
                 mean_log: float = DEFAULT_MEAN_LOG) -> FieldRealization:
    """Franke surface at element centroids, affinely mapped to a given mean/variance.

    The variance is the population variance over elements.
    """
    if not target_variance > 0:
        raise InvalidArgumentError(f"target_variance must be positive, got {target_variance}")
    c = mesh.centroids / mesh.L
    raw = franke(c[:, 0], c[:, 1])
    raw = raw - raw.mean()
    log_values = mean_log + raw * math.sqrt(target_variance / raw.var())
    return FieldRealization(log_values, float(mean_log))


def write_field_csv(path, mesh: Mesh2D, field: FieldRealization) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cen = mesh.centroids
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "centroid_x", "centroid_y", "log_value"])
        for k, ((cx, cy), v) in enumerate(zip(cen, field.log_values)):
            w.writerow([k, f"{cx:.17g}", f"{cy:.17g}", f"{v:.17g}"])
    return path


def read_field_csv(path, mesh: Mesh2D | None = None) -> FieldRealization:
    """Read a field written by :func:`write_field_csv`.

    When ``mesh`` is given, the element count and centroids are checked.
    """
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["element"]))
    values = np.array([float(r["log_value"]) for r in rows])
    if mesh is not None:
        if values.size != mesh.n_elements:
            raise InvalidArgumentError(
                f"field has {values.size} elements, mesh has {mesh.n_elements}"
            )
        cen = np.array([[float(r["centroid_x"]), float(r["centroid_y"])] for r in rows])
        if not np.allclose(cen, mesh.centroids, atol=1e-9 * mesh.L):
            raise InvalidArgumentError("field centroids do not match the mesh")
    return FieldRealization(values, float(values.mean()))
