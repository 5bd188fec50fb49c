"""Soft-margin kernel SVM trained with sequential minimal optimization.

Devices are classified from their (normalized) coordinates into the data
class (label -1) and the alarm-capable class (label +1).

The solver works on the dual

    min_a  1/2 a'Qa - e'a   s.t.  0 <= a_i <= C,  z'a = 0,   Q_ij = z_i z_j K_ij

updating two multipliers per step. The first index is the maximal KKT
violator, the second is picked with the second-order gain heuristic.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MODEL_HEADER = "fastgrant-svm"
MODEL_VERSION = 1
_TAU = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledPoint:
    features: tuple
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    sigma: float = 0.15
    degree: int = 3
    coef0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "polynomial", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.kind == "rbf" and not self.sigma > 0:
            raise ValueError("rbf sigma must be positive")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")


def gram(spec: KernelSpec, A, B) -> np.ndarray:
    """Kernel matrix between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.kind == "rbf":
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * spec.sigma ** 2))
    dot = A @ B.T
    if spec.kind == "linear":
        return dot
    return (dot + spec.coef0) ** spec.degree


def kernel_eval(spec: KernelSpec, x, xp) -> float:
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape != xp.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")
    if spec.kind == "rbf":
        d = x - xp
        return float(np.exp(-np.dot(d, d) / (2.0 * spec.sigma ** 2)))
    if spec.kind == "linear":
        return float(np.dot(x, xp))
    return float((np.dot(x, xp) + spec.coef0) ** spec.degree)


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray
    coef: np.ndarray            # alpha_i * z_i per support vector
    bias: float
    kernel: KernelSpec
    C: float

    def __post_init__(self):
        sv = np.atleast_2d(np.asarray(self.support_vectors, dtype=float))
        coef = np.asarray(self.coef, dtype=float).reshape(-1)
        if sv.shape[0] == 0 or coef.size == 0:
            raise ValueError("an SVM model needs at least one support vector")
        if sv.shape[0] != coef.size:
            raise ValueError("support vectors and coefficients differ in length")
        if (np.abs(coef) > self.C * (1 + 1e-9)).any():
            raise ValueError("dual coefficients exceed the box constraint")
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "coef", coef)

    def save(self, path) -> None:
        k = self.kernel
        with open(path, "w") as fh:
            fh.write(f"{MODEL_HEADER} v{MODEL_VERSION}\n")
            fh.write(f"kernel {k.kind} sigma {k.sigma!r} degree {k.degree} coef0 {k.coef0!r}\n")
            fh.write(f"C {self.C!r}\nbias {self.bias!r}\n")
            fh.write(f"support_vectors {self.coef.size} dim {self.support_vectors.shape[1]}\n")
            for c, row in zip(self.coef, self.support_vectors):
                fh.write(" ".join(repr(float(v)) for v in (c, *row)) + "\n")

    @classmethod
    def load(cls, path) -> "SvmModel":
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        if not lines or lines[0] != [MODEL_HEADER, f"v{MODEL_VERSION}"]:
            raise ValueError(f"{path}: not a {MODEL_HEADER} v{MODEL_VERSION} file")
        kv = lines[1]
        kernel = KernelSpec(kv[1], float(kv[3]), int(kv[5]), float(kv[7]))
        C = float(lines[2][1])
        bias = float(lines[3][1])
        n = int(lines[4][1])
        rows = np.array([[float(v) for v in ln] for ln in lines[5:5 + n]])
        return cls(rows[:, 1:], rows[:, 0], bias, kernel, C)


def decision_value(model: SvmModel, x) -> np.ndarray | float:
    """sum_i alpha_i z_i K(x_i, x) + b, for one point or a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    K = gram(model.kernel, model.support_vectors, np.atleast_2d(x))
    out = model.coef @ K + model.bias
    return float(out[0]) if single else out


def classify(model: SvmModel, x) -> np.ndarray | int:
    """+1 for strictly positive decision values, -1 otherwise (ties go to data)."""
    f = decision_value(model, x)
    if np.ndim(f) == 0:
        return 1 if f > 0 else -1
    return np.where(f > 0, 1, -1)


@dataclass
class TrainResult:
    model: SvmModel
    alpha: np.ndarray
    iterations: int
    objective: list      # dual objective (maximization form) after each step
    converged: bool


def train_smo(X, z, C: float = 10.0, kernel: KernelSpec | None = None, tol: float = 1e-3,
              max_iter: int = 200_000, record_objective: bool = False) -> TrainResult:
    """Fit the dual with two-multiplier updates until the KKT gap drops below ``tol``."""
    kernel = kernel or KernelSpec()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = np.asarray(z, dtype=float).reshape(-1)
    if X.shape[0] != z.size:
        raise ValueError("features and labels differ in length")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    if not set(np.unique(z)) <= {-1.0, 1.0}:
        raise ValueError("labels must be -1 or +1")
    if not ((z > 0).any() and (z < 0).any()):
        raise TrainingError("training data must contain both classes")
    if not (C > 0 and tol > 0):
        raise ValueError("C and tol must be positive")

    n = z.size
    K = gram(kernel, X, X)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)          # gradient of the minimization objective
    objective = []
    it = 0
    converged = False
    while it < max_iter:
        up = ((z > 0) & (alpha < C)) | ((z < 0) & (alpha > 0))
        low = ((z > 0) & (alpha > 0)) | ((z < 0) & (alpha < C))
        score = -z * G
        s_up = np.where(up, score, -np.inf)
        i = int(np.argmax(s_up))
        m = s_up[i]
        s_low = np.where(low, score, np.inf)
        M = s_low.min()
        if m - M < tol:
            converged = True
            break
        # second-order choice among violating low-set members
        b = m - score
        cand = low & (b > 0)
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, _TAU)
        gain = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(gain))

        step = b[j] / a[j]
        step = min(step, C - alpha[i] if z[i] > 0 else alpha[i])
        step = min(step, alpha[j] if z[j] > 0 else C - alpha[j])
        alpha[i] += z[i] * step
        alpha[j] -= z[j] * step
        alpha[i] = min(max(alpha[i], 0.0), C)
        alpha[j] = min(max(alpha[j], 0.0), C)
        G += step * z * (K[:, i] - K[:, j])
        it += 1
        if record_objective:
            objective.append(float(alpha.sum() - 0.5 * alpha @ (G + 1.0)))

    if not converged:
        log.warning("SMO stopped after %d iterations without reaching tol=%g", it, tol)

    score = -z * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(score[free].mean())
    else:
        up = ((z > 0) & (alpha < C)) | ((z < 0) & (alpha > 0))
        low = ((z > 0) & (alpha > 0)) | ((z < 0) & (alpha < C))
        bias = float((score[up].max() + score[low].min()) / 2.0)

    sv = alpha > 0
    if not sv.any():
        raise TrainingError("solver produced no support vectors")
    model = SvmModel(X[sv], alpha[sv] * z[sv], bias, kernel, C)
    log.debug("SMO: %d iterations, %d support vectors", it, int(sv.sum()))
    return TrainResult(model, alpha, it, objective, converged)


def train(points: Sequence[LabeledPoint], C: float = 10.0, kernel: KernelSpec | None = None,
          tol: float = 1e-3, max_iter: int = 200_000) -> SvmModel:
    X = np.array([p.features for p in points], dtype=float)
    z = np.array([p.label for p in points], dtype=float)
    return train_smo(X, z, C, kernel, tol, max_iter).model


def kkt_violation(result: TrainResult, X, z) -> float:
    """Largest |z_i f(x_i) - 1| over free support vectors."""
    z = np.asarray(z, dtype=float)
    alpha = result.alpha
    C = result.model.C
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if not free.any():
        return 0.0
    f = decision_value(result.model, np.asarray(X)[free])
    return float(np.abs(z[free] * f - 1.0).max())


# -- dataset helpers ----------------------------------------------------------


def normalize_positions(x, y, area: float) -> np.ndarray:
    """Min-max map deployment coordinates onto the unit square."""
    return np.column_stack([np.asarray(x, dtype=float) / area, np.asarray(y, dtype=float) / area])


def undersample(X, z, max_ratio: float = 3.0, rng: np.random.Generator | None = None):
    """Randomly drop majority-class rows until it is at most ``max_ratio`` times the minority."""
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X)
    z = np.asarray(z)
    pos = np.flatnonzero(z > 0)
    neg = np.flatnonzero(z < 0)
    major, minor = (pos, neg) if pos.size > neg.size else (neg, pos)
    cap = int(np.floor(max_ratio * minor.size))
    if major.size > cap:
        major = rng.choice(major, size=cap, replace=False)
    keep = np.sort(np.concatenate([major, minor]))
    return X[keep], z[keep]


def stratified_split(z, test_fraction: float, rng: np.random.Generator):
    """Index arrays (train, test) preserving class proportions."""
    z = np.asarray(z)
    train, test = [], []
    for label in (-1, 1):
        idx = rng.permutation(np.flatnonzero(z == label))
        k = int(round(test_fraction * idx.size))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def write_dataset(path, X, z) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(np.asarray(X), np.asarray(z)):
            w.writerow([repr(float(a)), repr(float(b)), int(lab)])


def read_dataset(path):
    X, z = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                X.append((float(row["x"]), float(row["y"])))
                z.append(int(row["label"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset row {row!r}") from exc
    return np.array(X, dtype=float).reshape(-1, 2), np.array(z, dtype=int)
