"""Linear invariant-risk-minimization and empirical-risk-minimization fitting.

The model is a linear representation ``phi`` (d x p) under a fixed all-ones
last layer, so the prediction for x is the sum of the representation
coordinates: f(x) = sum_j (phi @ x)_j. The invariance penalty is the squared
gradient of each environment's risk with respect to a scalar multiplier on
the prediction, evaluated at multiplier 1:

    g_e = (2 / n_e) * sum_i (f(x_i) - y_i) * f(x_i),      penalty = sum_e g_e^2

and the fitted objective is  sum_e mean squared error_e + penalty_weight *
penalty. Fitting is full-batch gradient descent with a backtracking line
search, which keeps runs deterministic and the objective non-increasing.

Because predictions depend on phi only through its column sums, the fitter
precomputes per-environment second-moment statistics and iterates in that
reduced space; the public objective below evaluates the same quantities
directly from the data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import EnvDataset, check_unique_env_ids

__all__ = [
    "LinearIRMModel",
    "FitConfig",
    "FitError",
    "irm_objective",
    "fit_irmv1",
    "fit_erm",
    "save_model",
    "load_model",
]


class FitError(RuntimeError):
    """Gradient descent encountered a non-finite objective."""


@dataclass(frozen=True)
class LinearIRMModel:
    """Linear representation with a fixed all-ones last layer.

    Parameters
    ----------
    phi : ndarray of shape (d, p)
        Representation matrix; the representation of x is phi @ x.
    penalty_weight : float
        The invariance penalty weight the model was fitted with.
    """

    phi: np.ndarray
    penalty_weight: float = 0.0

    def __post_init__(self) -> None:
        phi = np.array(self.phi, dtype=float, copy=True)
        if phi.ndim != 2:
            raise ValueError(f"phi must be a matrix, got ndim={phi.ndim}")
        if phi.shape[0] < 2:
            raise ValueError(f"representation dimension must be >= 2, got {phi.shape[0]}")
        if not np.isfinite(phi).all():
            raise ValueError("phi must be finite")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "penalty_weight", float(self.penalty_weight))

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    @property
    def p(self) -> int:
        return self.phi.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """Effective prediction weights: column sums of phi."""
        return self.phi.sum(axis=0)

    def represent(self, x: np.ndarray) -> np.ndarray:
        """Representation phi @ x; accepts one vector (p,) or a matrix (n, p)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.p:
            raise ValueError(f"expected {self.p} features, got {x.shape[-1]}")
        if x.ndim == 1:
            return self.phi @ x
        return x @ self.phi.T

    def predict(self, x: np.ndarray) -> float | np.ndarray:
        """Sum of representation coordinates; scalar for a vector input."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.p:
            raise ValueError(f"expected {self.p} features, got {x.shape[-1]}")
        out = x @ self.weights
        return float(out) if x.ndim == 1 else out


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings for fit_erm / fit_irmv1.

    learning_rate is the initial step size (the line search adapts it),
    tolerance stops when the gradient norm with respect to phi falls below
    it, and penalty_weight is applied after warmup_iters penalty-free
    iterations. init_scale is the standard deviation of the seeded Gaussian
    initialization of phi; repr_dim defaults to the feature count.
    """

    learning_rate: float = 1e-3
    max_iters: int = 5000
    tolerance: float = 1e-6
    penalty_weight: float = 1e4
    seed: int = 0
    warmup_iters: int = 100
    init_scale: float = 0.1
    repr_dim: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.tolerance <= 0:
            raise ValueError("learning_rate and tolerance must be positive")
        if self.max_iters < 1 or self.warmup_iters < 0:
            raise ValueError("iteration counts out of range")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")
        if self.repr_dim is not None and self.repr_dim < 2:
            raise ValueError("repr_dim must be >= 2")


def irm_objective(
    model: LinearIRMModel, envs: list[EnvDataset]
) -> tuple[float, float, np.ndarray]:
    """Evaluate risk, invariance penalty, and the analytic gradient.

    Returns
    -------
    risk : float
        Sum over environments of the per-environment mean squared error.
    penalty : float
        Sum over environments of g_e^2 (see module docstring).
    gradient : ndarray, same shape as model.phi
        Exact gradient of risk + penalty_weight * penalty with respect
        to phi. Identical rows: predictions depend on phi only through
        its column sums.
    """
    check_unique_env_ids(envs)
    s = model.weights
    lam = model.penalty_weight
    risk = 0.0
    penalty = 0.0
    grad_s = np.zeros(model.p)
    for env in envs:
        x, y = env.features, env.targets
        if x.shape[1] != model.p:
            raise ValueError(
                f"env {env.env_id}: expected {model.p} features, got {x.shape[1]}"
            )
        z = x @ s
        r = z - y
        n = env.n
        risk += float(r @ r) / n
        g = 2.0 * float(r @ z) / n
        penalty += g * g
        grad_s += (2.0 / n) * (x.T @ r)
        if lam > 0:
            grad_s += lam * 2.0 * g * (2.0 / n) * (x.T @ (2.0 * z - y))
    gradient = np.tile(grad_s, (model.d, 1))
    return risk, penalty, gradient


# ---------------------------------------------------------------------------
# fitting


def _env_stats(envs: list[EnvDataset]) -> list[tuple[np.ndarray, np.ndarray, float]]:
    stats = []
    for env in envs:
        x, y = env.features, env.targets
        n = env.n
        stats.append((x.T @ x / n, x.T @ y / n, float(y @ y) / n))
    return stats


def _eval_stats(
    s: np.ndarray, stats: list[tuple[np.ndarray, np.ndarray, float]], lam: float
) -> tuple[float, np.ndarray]:
    """Objective and its gradient with respect to the prediction weights s."""
    obj = 0.0
    grad = np.zeros_like(s)
    for a, b, c in stats:
        a_s = a @ s
        risk = float(s @ a_s) - 2.0 * float(b @ s) + c
        g = 2.0 * (float(s @ a_s) - float(b @ s))
        obj += risk + lam * g * g
        grad += 2.0 * (a_s - b)
        if lam > 0:
            grad += 4.0 * lam * g * (2.0 * a_s - b)
    return obj, grad


def _hessian(
    s: np.ndarray, stats: list[tuple[np.ndarray, np.ndarray, float]], lam: float
) -> np.ndarray:
    """Hessian of the objective with respect to the prediction weights s."""
    p = s.size
    hess = np.zeros((p, p))
    for a, b, _ in stats:
        hess += 2.0 * a
        if lam > 0:
            g = 2.0 * (float(s @ (a @ s)) - float(b @ s))
            u = 2.0 * (a @ s) - b
            hess += lam * (8.0 * np.outer(u, u) + 8.0 * g * a)
    return hess


def _descend(
    s: np.ndarray,
    stats: list,
    lam: float,
    lr: float,
    max_iters: int,
    tol: float,
    d: int,
) -> np.ndarray:
    """Full-batch descent in weight space with backtracking line search.

    Steps along the Newton direction when the Hessian is positive definite
    (the penalty makes the objective quartic with curvature spanning many
    orders of magnitude across environments, where a raw gradient step
    cannot make progress) and falls back to the gradient direction
    otherwise. Backtracking halves the step until the objective does not
    increase, so accepted iterations are non-increasing by construction.

    A phi-space step of -step * gradient moves s by -step * d * grad_s, and
    the phi-space gradient norm is sqrt(d) * |grad_s|; both conversions are
    applied so learning_rate and tolerance keep their phi-space meaning.
    """
    obj, grad = _eval_stats(s, stats, lam)
    if not math.isfinite(obj):
        raise FitError("objective is non-finite at iteration 0")
    sqrt_d = math.sqrt(d)
    last_step = 1.0
    for _ in range(max_iters):
        if sqrt_d * float(np.linalg.norm(grad)) < tol:
            break
        direction = None
        try:
            cand = np.linalg.solve(_hessian(s, stats, lam), grad)
            if np.all(np.isfinite(cand)) and float(cand @ grad) > 0:
                direction = cand
        except np.linalg.LinAlgError:
            pass
        if direction is None:
            direction = (lr * d) * grad
        # warm-start the line search near the last accepted step so a
        # plateau crawl does not re-halve from 1 on every iteration
        step = min(1.0, 2.0 * last_step)
        accepted = False
        while step > 1e-20:
            s_new = s - step * direction
            # Oversized trial steps may overflow; they are rejected below,
            # so keep numpy quiet rather than leak warnings for dead ends.
            with np.errstate(over="ignore", invalid="ignore"):
                obj_new, grad_new = _eval_stats(s_new, stats, lam)
            if math.isfinite(obj_new) and obj_new <= obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        last_step = step
        progress = obj - obj_new
        s, obj, grad = s_new, obj_new, grad_new
        if progress <= 1e-14 * max(1.0, abs(obj)):
            break
    return s


def fit_irmv1(train: list[EnvDataset], config: FitConfig) -> LinearIRMModel:
    """Fit the penalized objective by seeded full-batch gradient descent.

    Runs warmup_iters penalty-free iterations first, then descends the full
    objective starting from whichever of the initial and warmed-up weights
    scores better under it, so the returned model never exceeds the initial
    objective value.
    """
    check_unique_env_ids(envs=train)
    p = train[0].p
    if any(env.p != p for env in train):
        raise ValueError("environments disagree on feature count")
    lam = config.penalty_weight
    if lam > 0 and len(train) < 2:
        warnings.warn(
            "invariance penalty is vacuous with a single environment",
            stacklevel=2,
        )
    d = config.repr_dim if config.repr_dim is not None else p
    rng = np.random.default_rng(config.seed)
    phi0 = rng.normal(0.0, config.init_scale, size=(d, p))
    stats = _env_stats(train)
    s0 = phi0.sum(axis=0)

    start = s0
    if lam > 0 and config.warmup_iters > 0:
        warmed = _descend(
            s0, stats, 0.0, config.learning_rate, config.warmup_iters,
            config.tolerance, d,
        )
        if _eval_stats(warmed, stats, lam)[0] <= _eval_stats(s0, stats, lam)[0]:
            start = warmed
    s_fin = _descend(
        start, stats, lam, config.learning_rate, config.max_iters,
        config.tolerance, d,
    )
    phi = phi0 + (s_fin - s0) / d
    return LinearIRMModel(phi=phi, penalty_weight=lam)


def fit_erm(train: list[EnvDataset], config: FitConfig) -> LinearIRMModel:
    """Fit pooled per-environment mean squared error (penalty weight 0)."""
    return fit_irmv1(train, replace(config, penalty_weight=0.0))


# ---------------------------------------------------------------------------
# serialization


def save_model(model: LinearIRMModel, path: str) -> None:
    """Write a model as a header line ``d p penalty_weight`` plus phi rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{model.d} {model.p} {model.penalty_weight!r}\n")
        for row in model.phi:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_model(path: str) -> LinearIRMModel:
    """Read a model written by save_model, validating the declared shape."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in (line.strip() for line in fh) if ln]
    if not lines:
        raise ValueError(f"{path}: empty model file")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError(f"{path}: header must be 'd p penalty_weight', got {lines[0]!r}")
    d, p = int(head[0]), int(head[1])
    lam = float(head[2])
    rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    if len(rows) != d or any(len(r) != p for r in rows):
        raise ValueError(
            f"{path}: declared shape ({d}, {p}) does not match the {len(rows)} rows given"
        )
    return LinearIRMModel(phi=np.array(rows, dtype=float), penalty_weight=lam)
