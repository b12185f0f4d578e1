"""Numerical machinery behind the forgetting bounds: finite-difference
gradients and Hessian-vector products, power iteration for the top Hessian
eigenvalue, Taylor residuals, the Frobenius pruning bound and the
expected-forgetting bound built from a Hessian eigenvalue."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

from .errors import InputError
from .nn import Network, backward, forward, loss_ce, per_sample_ce


class Oracle(Protocol):
    def loss(self, w: np.ndarray) -> float: ...

    def grad(self, w: np.ndarray) -> np.ndarray: ...


@dataclass
class LossOracle:
    """Mean cross-entropy of a fixed topology on a fixed batch, as a function
    of the flattened parameter vector."""

    template: Network
    x: np.ndarray
    y: np.ndarray

    def _net(self, w: np.ndarray) -> Network:
        return self.template.with_vector(w)

    def loss(self, w: np.ndarray) -> float:
        logits, _ = forward(self._net(w), self.x)
        return loss_ce(logits, self.y)[0]

    def grad(self, w: np.ndarray) -> np.ndarray:
        return self.loss_and_grad(w)[1]

    def loss_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        net = self._net(w)
        logits, trace = forward(net, self.x)
        loss, g = loss_ce(logits, self.y)
        return loss, backward(net, trace, g).to_vector()

    def per_sample(self, w: np.ndarray) -> np.ndarray:
        logits, _ = forward(self._net(w), self.x)
        return per_sample_ce(logits, self.y)


@dataclass
class QuadraticOracle:
    """``0.5 * w.H.w + b.w + c``: exact Hessian, handy for validation."""

    hessian: np.ndarray
    linear: np.ndarray | None = None
    const: float = 0.0

    def loss(self, w):
        w = np.asarray(w, dtype=np.float64)
        lin = 0.0 if self.linear is None else float(self.linear @ w)
        return 0.5 * float(w @ self.hessian @ w) + lin + self.const

    def grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        g = self.hessian @ w
        return g if self.linear is None else g + self.linear


def numerical_grad(oracle: Oracle, w: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if not h > 0:
        raise InputError("step h must be positive")
    w = np.array(w, dtype=np.float64)
    g = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        up = oracle.loss(w)
        w[i] = orig - h
        down = oracle.loss(w)
        w[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g


def hvp(oracle: Oracle, w: np.ndarray, v: np.ndarray, h0: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient.

    The step is scaled to ``h0 / |v|`` so the probe always moves a distance
    ``h0`` in parameter space.
    """
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InputError("hvp direction must be nonzero")
    h = h0 / norm
    return (oracle.grad(w + h * v) - oracle.grad(w - h * v)) / (2.0 * h)


@dataclass
class SpectrumEstimate:
    lambda_max: float
    iterations_used: int
    residual: float
    converged: bool


def _power(apply, v: np.ndarray, iters: int, tol: float):
    mu, r = 0.0, math.inf
    for k in range(1, iters + 1):
        u = apply(v)
        mu = float(v @ u)
        r = float(np.linalg.norm(u - mu * v))
        if r <= tol * max(abs(mu), 1.0):
            return mu, k, r, True, v
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            return 0.0, k, 0.0, True, v
        v = u / nu
    return mu, iters, r, False, v


def lambda_max(
    oracle: Oracle,
    w: np.ndarray,
    iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    h0: float = 1e-4,
) -> SpectrumEstimate:
    """Largest (most positive) Hessian eigenvalue by power iteration.

    A first pass finds the eigenvalue of largest magnitude.  If that one is
    negative the iteration is rerun on ``H + |mu| I``, whose spectrum is
    nonnegative, and the shift is removed afterwards.  ``iters`` caps the
    total number of Hessian-vector products.
    """
    if iters < 1:
        raise InputError("iters must be at least 1")
    w = np.asarray(w, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(w.size)
    v /= np.linalg.norm(v)

    def H(x):
        return hvp(oracle, w, x, h0)

    mu, used, r, ok, v1 = _power(H, v, iters, tol)
    if mu >= 0.0:
        return SpectrumEstimate(mu, used, r, ok)
    if used >= iters:
        return SpectrumEstimate(mu, used, r, False)
    shift = abs(mu)
    v2 = np.random.default_rng(seed + 1).standard_normal(w.size)
    v2 /= np.linalg.norm(v2)
    mu2, used2, r2, ok2, _ = _power(lambda x: H(x) + shift * x, v2, iters - used, tol)
    return SpectrumEstimate(mu2 - shift, used + used2, r2, ok2)


def taylor_residual(oracle: Oracle, w_star: np.ndarray, w: np.ndarray, h0: float = 1e-4) -> float:
    """Error of the second-order expansion of the loss around ``w_star``."""
    w_star = np.asarray(w_star, dtype=np.float64)
    d = np.asarray(w, dtype=np.float64) - w_star
    if not np.any(d):
        return 0.0
    f0 = oracle.loss(w_star)
    g0 = oracle.grad(w_star)
    quad = 0.5 * float(d @ hvp(oracle, w_star, d, h0))
    return abs(oracle.loss(w_star + d) - f0 - float(g0 @ d) - quad)


def frobenius_prune_bound(
    net: Network, pruned: Network, layer: int, x: np.ndarray, y: np.ndarray
) -> tuple[float, float]:
    """Relative Frobenius change of ``layer`` times the product of all layer
    norms, against the actual change in mean loss on ``(x, y)``."""
    if net.num_layers != pruned.num_layers:
        raise InputError("networks have different depth")
    for j, (a, b) in enumerate(zip(net.weights, pruned.weights)):
        if a.shape != b.shape:
            raise InputError(f"layer {j} shapes differ")
        if j != layer and not np.array_equal(a, b):
            raise InputError(f"networks differ outside layer {layer} (layer {j})")
    if net.biases is not None and pruned.biases is not None:
        if any(not np.array_equal(a, b) for a, b in zip(net.biases, pruned.biases)):
            raise InputError("networks differ in biases")
    norms = [float(np.linalg.norm(w)) for w in net.weights]
    change = float(np.linalg.norm(net.weights[layer] - pruned.weights[layer]))
    if change == 0.0:
        ratio = 0.0
    elif norms[layer] == 0.0:
        ratio = math.inf
    else:
        ratio = change / norms[layer]
    bound = ratio * math.prod(norms)
    la, _ = forward(net, x)
    lb, _ = forward(pruned, x)
    actual = abs(loss_ce(la, y)[0] - loss_ce(lb, y)[0])
    return bound, actual


def c_eps(eps: float) -> float:
    return max(eps, 2.0 * math.sqrt(eps))


def eo_bound_thm5(lam_max: float, C: float, eps: float, label_weights) -> float:
    """``0.5 * mean(y) * lam * (C + C_eps / lam)**2`` with
    ``C_eps = max(eps, 2 sqrt(eps))``."""
    if not lam_max > 0:
        raise InputError(f"lambda_max must be positive, got {lam_max}")
    if not eps > 0:
        raise InputError(f"eps must be positive, got {eps}")
    y_mean = float(np.mean(np.asarray(label_weights, dtype=np.float64)))
    return 0.5 * y_mean * lam_max * (C + c_eps(eps) / lam_max) ** 2


@dataclass
class CorrelationResult:
    pearson_r: float
    spearman_r: float
    status: str  # "ok" or "undefined"


def rank_correlation(a: Sequence[float], b: Sequence[float]) -> CorrelationResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.size != b.size or np.ptp(a) == 0 or np.ptp(b) == 0:
        return CorrelationResult(math.nan, math.nan, "undefined")
    if a.size == 2:
        s = float(np.sign((a[1] - a[0]) * (b[1] - b[0])))
        return CorrelationResult(s, s, "ok")
    return CorrelationResult(
        float(stats.pearsonr(a, b)[0]), float(stats.spearmanr(a, b)[0]), "ok"
    )


def connectivity_forgetting_corr(record) -> CorrelationResult:
    """Correlation between each task's mean layer connectivity and its
    forgetting ``O_t``."""
    if record.num_tasks < 3:
        raise InputError("need at least 3 tasks")
    mean_delta = [float(np.mean(r.deltas)) for r in record.reports[: record.num_tasks - 1]]
    return rank_correlation(mean_delta, record.forgetting)


@dataclass
class TheoryRow:
    task: int
    lambda_max: float
    lambda_residual: float
    C: float
    C_eps: float
    eo_measured: float
    eo_bound: float
    bound_satisfied: bool
    frob_layer: int
    frob_bound: float
    frob_actual: float
    taylor_residual: float


def single_weight_prune(net: Network, layer: int, index: int | None = None) -> Network:
    """Copy of ``net`` with one weight of ``layer`` zeroed (largest |w| by default)."""
    out = net.copy()
    w = out.weights[layer]
    if index is None:
        index = int(np.argmax(np.abs(w).ravel()))
    w.ravel()[index] = 0.0
    return out


def theory_report(
    checkpoints: Sequence[Network],
    trained_checkpoints: Sequence[Network],
    tasks,
    eps: float,
    encoding,
    prune_layers: Sequence[int] | None = None,
    iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> list[TheoryRow]:
    """Check the expected-forgetting bound for every task with a successor.

    For task ``t`` the Hessian is taken at the committed weights
    ``checkpoints[t]``; ``C`` is the distance from the next committed weights
    to the pre-pruning optimum ``trained_checkpoints[t]``.
    """
    rows = []
    for t in range(len(checkpoints) - 1):
        task = tasks[t]
        oracle = LossOracle(checkpoints[t], task.x_eval, task.y_eval)
        w_t = checkpoints[t].to_vector()
        w_next = checkpoints[t + 1].to_vector()
        est = lambda_max(oracle, w_t, iters=iters, tol=tol, seed=seed + t)
        C = float(np.linalg.norm(w_next - trained_checkpoints[t].to_vector()))
        y = encoding(task.y_eval)
        diff = oracle.per_sample(w_next) - oracle.per_sample(w_t)
        eo = float(np.mean(np.abs(y * diff)))
        lam = est.lambda_max
        bound = eo_bound_thm5(lam, C, eps, y) if lam > 0 else math.nan
        layer = 0 if prune_layers is None else prune_layers[t]
        pruned = single_weight_prune(checkpoints[t + 1], layer)
        fb, fa = frobenius_prune_bound(checkpoints[t + 1], pruned, layer, task.x_eval, task.y_eval)
        rows.append(
            TheoryRow(
                task.task_id, lam, est.residual, C, c_eps(eps), eo, bound,
                bool(lam > 0 and eo <= bound), layer, fb, fa,
                taylor_residual(oracle, w_t, w_next),
            )
        )
    return rows
