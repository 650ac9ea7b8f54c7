"""Principal-component extraction and subspace projection.

PCA is computed from the sample covariance of normalized training inputs by
cyclic Jacobi rotations.  The number of retained components is chosen by
knee detection on the log explained-variance curve, with a fixed fallback
when the curve has no knee.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .tensorio import read_tensor, write_tensor

FALLBACK_M = 5
KNEEDLE_SENSITIVITY = 1.0


@dataclass
class PrincipalBasis:
    """Orthonormal principal components (rows) in descending variance order."""

    components: np.ndarray  # (m, n_features)
    explained_variance: np.ndarray  # (m,)
    total_variance: float

    @property
    def m(self) -> int:
        return self.components.shape[0]

    @property
    def num_features(self) -> int:
        return self.components.shape[1]

    def validate(self) -> None:
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(self.m), atol=1e-8):
            raise NumericError("basis rows are not orthonormal")
        ev = self.explained_variance
        if np.any(ev < -1e-12) or np.any(np.diff(ev) > 1e-10):
            raise NumericError("explained variance must be nonnegative, nonincreasing")

    def truncate(self, m: int) -> "PrincipalBasis":
        if not 1 <= m <= self.m:
            raise DataError(f"cannot truncate basis of {self.m} components to {m}")
        return PrincipalBasis(self.components[:m], self.explained_variance[:m],
                              self.total_variance)

    def window(self, start: int, width: int) -> "PrincipalBasis":
        if start < 0 or start + width > self.m:
            raise DataError(f"component window [{start}, {start + width}) out of range")
        return PrincipalBasis(self.components[start : start + width],
                              self.explained_variance[start : start + width],
                              self.total_variance)


def jacobi_eigh(matrix: np.ndarray, rel_tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted.  Converges when
    the off-diagonal Frobenius norm drops below ``rel_tol`` times the diagonal
    norm.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError("jacobi_eigh needs a square matrix")
    if not np.allclose(a, a.T, atol=1e-10):
        raise DataError("jacobi_eigh needs a symmetric matrix")
    dim = a.shape[0]
    vecs = np.eye(dim)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.square(a - np.diag(np.diag(a)))))
        diag_norm = np.linalg.norm(np.diag(a))
        if off <= rel_tol * max(diag_norm, np.finfo(float).tiny):
            break
        for p in range(dim - 1):
            for q in range(p + 1, dim):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                vec_p = c * vecs[:, p] - s * vecs[:, q]
                vec_q = s * vecs[:, p] + c * vecs[:, q]
                vecs[:, p], vecs[:, q] = vec_p, vec_q
    return np.diag(a).copy(), vecs


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """First coordinate of each row with magnitude above 1e-12 made positive."""
    out = components.copy()
    for row in out:
        for value in row:
            if abs(value) > 1e-12:
                if value < 0:
                    row *= -1.0
                break
    return out


def fit_pca(inputs: np.ndarray) -> PrincipalBasis:
    """Full principal basis (m = num_features) of the sample covariance."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] < 2:
        raise DataError("fit_pca needs at least 2 samples")
    if not np.all(np.isfinite(inputs)):
        raise DataError("fit_pca: non-finite inputs")
    centered = inputs - inputs.mean(axis=0)
    cov = centered.T @ centered / (inputs.shape[0] - 1)
    eigvals, eigvecs = jacobi_eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = _fix_signs(eigvecs[:, order].T)
    return PrincipalBasis(
        components=components,
        explained_variance=eigvals,
        total_variance=float(np.trace(cov)),
    )


def kneedle_knee(y: np.ndarray, sensitivity: float = KNEEDLE_SENSITIVITY):
    """Knee index of a convex decreasing curve, or None when no knee exists.

    Offline normalized-difference formulation: min-max normalize, flip
    vertically into a concave increasing curve, and look for a local maximum
    of the difference to the diagonal that survives the sensitivity threshold.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 3:
        raise DataError("knee detection needs at least 3 points")
    span = y.max() - y.min()
    if span == 0.0:
        return None
    x_norm = np.arange(n) / (n - 1)
    y_norm = (y - y.min()) / span
    diff = (1.0 - y_norm) - x_norm
    threshold_drop = sensitivity / (n - 1)
    maxima = [
        i
        for i in range(1, n - 1)
        if diff[i] >= diff[i - 1] and diff[i] >= diff[i + 1]
    ]
    for pos, i in enumerate(maxima):
        threshold = diff[i] - threshold_drop
        stop = maxima[pos + 1] if pos + 1 < len(maxima) else n
        for j in range(i + 1, stop):
            if diff[j] < threshold:
                return i
    return None


@dataclass
class ComponentSelection:
    m: int
    fallback: bool


def select_m_kneedle(explained_variance: np.ndarray) -> ComponentSelection:
    """Pick m by knee detection on the log10 explained-variance curve."""
    ev = np.asarray(explained_variance, dtype=np.float64)
    if ev.size < 3:
        raise DataError("need at least 3 explained-variance values")
    if np.any(ev <= 0.0):
        raise DataError("explained variance must be positive for log knee detection")
    if np.any(np.diff(ev) > 1e-10):
        raise DataError("explained variance must be nonincreasing")
    knee = kneedle_knee(np.log10(ev))
    if knee is None:
        return ComponentSelection(m=FALLBACK_M, fallback=True)
    return ComponentSelection(m=knee + 1, fallback=False)


def project_gradient(basis: PrincipalBasis, grad: np.ndarray) -> np.ndarray:
    """Express an input-space gradient in subspace coordinates."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (basis.num_features,):
        raise DataError(
            f"gradient length {grad.shape} does not match {basis.num_features} features"
        )
    return grad @ basis.components.T


def lift_step(basis: PrincipalBasis, subspace_step: np.ndarray) -> np.ndarray:
    """Map subspace coordinates back to an input-space vector in span(P)."""
    subspace_step = np.asarray(subspace_step, dtype=np.float64)
    if subspace_step.shape != (basis.m,):
        raise DataError(
            f"subspace step length {subspace_step.shape} does not match m={basis.m}"
        )
    return subspace_step @ basis.components


def save_basis(
    basis: PrincipalBasis,
    directory: str | Path,
    name: str,
    selection: ComponentSelection | None = None,
    dataset_checksum: str | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(basis.components, directory / f"{name}_components.mpt")
    write_tensor(basis.explained_variance, directory / f"{name}_variance.mpt")
    sidecar = {
        "components": f"{name}_components.mpt",
        "explained_variance": f"{name}_variance.mpt",
        "total_variance": basis.total_variance,
        "m": selection.m if selection else basis.m,
        "kneedle_fallback": selection.fallback if selection else False,
        "dataset_checksum": dataset_checksum,
    }
    path = directory / f"{name}_basis.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_basis(sidecar_path: str | Path):
    """Returns (full basis, selected m, fallback flag, dataset checksum)."""
    sidecar_path = Path(sidecar_path)
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read basis sidecar {sidecar_path}: {exc}") from exc
    base = sidecar_path.parent
    basis = PrincipalBasis(
        components=read_tensor(base / sidecar["components"]),
        explained_variance=read_tensor(base / sidecar["explained_variance"]),
        total_variance=float(sidecar["total_variance"]),
    )
    basis.validate()
    return basis, int(sidecar["m"]), bool(sidecar["kneedle_fallback"]), sidecar.get(
        "dataset_checksum"
    )
