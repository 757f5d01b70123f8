"""Regularized primal-dual gradient method for convex programs of the form

    min_{x in X}  h(x)   s.t.  F_c(x) <= delta_c   for each constraint block c

with quadratic ``h``, a closed convex set ``X`` and convex constraint maps
``F_c`` (learned ICNN surrogates or affine maps). The solver looks for the
saddle point of the regularized Lagrangian

    L(x, lam) = h(x) + sum_c w_c lam_c . (F_c(x) - delta_c)
                + (upsilon / 2) * k * |x|^2 - (epsilon / 2) * sum_c |lam_c|^2

where ``k = OpfProblem.reg_scale`` and ``w_c > 0`` are optional block
weights (``OpfProblem.weights``, default 1) that rescale the multipliers
without changing the feasible set. When the surrogates take augmented input
``[x; -x]`` the squared norm of the augmented vector is ``2 |x|^2``, hence
``reg_scale = 2``. Iteration:

    x   <- Proj_X(x - mu * grad_x L)
    lam <- max(0, lam + mu * grad_lam L)

The map ``Phi = (grad_x L, -grad_lam L)`` is strongly monotone with constant
``eta = min(upsilon, epsilon)``; with ``L_Phi`` its Lipschitz constant the
iteration contracts at rate ``sqrt(1 - 2 mu eta + mu^2 L_Phi^2)`` whenever
``mu < 2 eta / L_Phi^2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .icnn import IcnnModel

log = logging.getLogger(__name__)

_FEAS_TOL = 1e-12


# --------------------------------------------------------------------------
# objective and feasible sets

@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``h(x) = 0.5 x' diag(d) x + c' x`` with ``d >= 0``."""

    diag: np.ndarray
    linear: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float)
        if np.any(d < 0):
            raise ValueError("cost coefficients must be nonnegative")
        object.__setattr__(self, "diag", d)
        c = np.zeros_like(d) if self.linear is None else np.asarray(self.linear, dtype=float)
        object.__setattr__(self, "linear", c)

    def value(self, x):
        return float(0.5 * x @ (self.diag * x) + self.linear @ x)

    def grad(self, x):
        return self.diag * x + self.linear


def project_box_disk(p, q, p_bar, s_bar):
    """Euclidean projection onto ``{0 <= p <= p_bar} & {p^2 + q^2 <= s_bar^2}``.

    Vectorized over devices. Case analysis: the box projection is the answer
    if it lies in the disk; otherwise the radial disk projection if it lies
    in the box; otherwise both constraints are active and the answer sits on
    the box edge nearest the radial projection with ``|q|`` clipped to the
    disk.
    """
    p, q = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(q, dtype=float))
    p_bar = np.broadcast_to(np.asarray(p_bar, dtype=float), p.shape)
    s_bar = np.broadcast_to(np.asarray(s_bar, dtype=float), p.shape)
    if np.any(s_bar <= 0) or np.any(p_bar < 0):
        raise ValueError("need s_bar > 0 and p_bar >= 0")
    s2 = s_bar ** 2

    pb = np.clip(p, 0.0, p_bar)
    # a few ulps of slack so projected points map to themselves
    in_disk = pb ** 2 + q ** 2 <= s2 * (1 + 8 * np.finfo(float).eps)

    r = np.hypot(p, q)
    outside = r > s_bar
    scale = np.where(outside, s_bar / np.where(outside, r, 1.0), 1.0)
    pr, qr = p * scale, q * scale
    in_box = (pr >= 0) & (pr <= p_bar)

    p_edge = np.where(pr < 0, 0.0, np.minimum(p_bar, s_bar))
    q_lim = np.sqrt(np.maximum(s2 - p_edge ** 2, 0.0))
    q_edge = np.clip(q, -q_lim, q_lim)

    p_out = np.where(in_disk, pb, np.where(in_box, pr, p_edge))
    q_out = np.where(in_disk, q, np.where(in_box, qr, q_edge))
    return p_out, q_out


@dataclass(frozen=True, eq=False)
class BoxSet:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    @property
    def dim(self):
        return self.lo.size

    def project(self, x):
        return np.clip(x, self.lo, self.hi)

    def contains(self, x, tol=_FEAS_TOL):
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def sample(self, rng, count):
        return rng.uniform(self.lo, self.hi, size=(count, self.dim))


@dataclass(frozen=True, eq=False)
class DeviceSet:
    """Inverter capability sets; ``x = [p^c; q^c]`` stacked over devices.

    Coordinated mode: ``0 <= p <= p_bar`` and ``p^2 + q^2 <= s_bar^2`` per
    device. VVO mode pins ``p = 0`` and keeps ``|q| <= s_bar``.
    """

    p_bar: np.ndarray
    s_bar: np.ndarray
    vvo: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p_bar", np.asarray(self.p_bar, dtype=float))
        object.__setattr__(self, "s_bar", np.asarray(self.s_bar, dtype=float))
        if np.any(self.s_bar <= 0) or np.any(self.p_bar < 0):
            raise ValueError("need s_bar > 0 and p_bar >= 0")

    @property
    def n_devices(self):
        return self.p_bar.size

    @property
    def dim(self):
        return 2 * self.n_devices

    def split(self, x):
        n = self.n_devices
        return x[:n], x[n:]

    def project(self, x):
        p, q = self.split(np.asarray(x, dtype=float))
        if self.vvo:
            return np.concatenate([np.zeros_like(p), np.clip(q, -self.s_bar, self.s_bar)])
        return np.concatenate(project_box_disk(p, q, self.p_bar, self.s_bar))

    def contains(self, x, tol=_FEAS_TOL):
        p, q = self.split(np.asarray(x, dtype=float))
        if self.vvo and np.any(p != 0):
            return False
        return bool(np.all(p >= -tol) and np.all(p <= self.p_bar + tol)
                    and np.all(p ** 2 + q ** 2 <= self.s_bar ** 2 + tol))

    def sample(self, rng, count):
        n = self.n_devices
        raw = np.hstack([rng.uniform(0.0, self.p_bar, size=(count, n)),
                         rng.uniform(-self.s_bar, self.s_bar, size=(count, n))])
        return np.array([self.project(z) for z in raw])


# --------------------------------------------------------------------------
# constraint blocks

@dataclass(frozen=True, eq=False)
class AffineConstraint:
    """``A x + c <= delta``."""

    A: np.ndarray
    c: np.ndarray
    delta: np.ndarray

    def evaluate(self, x):
        return self.A @ x + self.c, self.A


@dataclass(frozen=True, eq=False)
class SurrogateConstraint:
    """``model([s; -s]) <= delta`` with ``s = base + selector @ x``.

    ``base`` is the uncontrollable part of the surrogate's (non-augmented)
    input; ``selector`` places the controls into it. The Jacobian w.r.t. ``x``
    is accumulated forward through the network with seed ``[S; -S]``, which
    applies the augmentation chain rule exactly.
    """

    model: IcnnModel
    base: np.ndarray
    selector: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if not self.model.augmented:
            raise ValueError("surrogate constraints expect a model on augmented input")
        object.__setattr__(self, "_seed", np.vstack([self.selector, -self.selector]))

    def evaluate(self, x):
        s = self.base + self.selector @ x
        return self.model.jacobian(np.concatenate([s, -s]), self._seed)

    def value(self, x):
        s = self.base + self.selector @ x
        return self.model.predict(np.concatenate([s, -s]))


@dataclass(frozen=True, eq=False)
class OpfProblem:
    objective: QuadraticCost
    feasible: object  # BoxSet | DeviceSet
    constraints: dict  # name -> constraint block, iteration order fixed
    reg_scale: float = 1.0
    kind: str = ""
    meta: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)  # name -> positive row weight (default 1)

    def __post_init__(self):
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("constraint weights must be positive")
        for k, c in self.constraints.items():
            if c.delta.ndim != 1:
                raise ValueError(f"constraint block {k!r} needs a 1-D bound vector")

    @property
    def n_x(self):
        return self.objective.diag.size

    def weight(self, name):
        return float(self.weights.get(name, 1.0))

    def dual_sizes(self):
        return {k: c.delta.size for k, c in self.constraints.items()}


@dataclass(frozen=True)
class SolverConfig:
    upsilon: float = 1e-3
    epsilon: float = 1e-3
    mu: float | None = None
    max_iter: int = 20000
    stop_tol: float = 1e-6
    lipschitz_samples: int = 200
    safety: float = 0.9
    lambda_cap: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.upsilon <= 0 or self.epsilon <= 0:
            raise ValueError("upsilon and epsilon must be positive")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")
        if self.stop_tol <= 0 or self.max_iter < 1 or self.lipschitz_samples < 1:
            raise ValueError("stop_tol, max_iter and lipschitz_samples must be positive")

    @property
    def eta(self):
        return min(self.upsilon, self.epsilon)


@dataclass
class SaddleState:
    x_tilde: np.ndarray
    duals: dict
    iter: int = 0
    converged: bool = False
    mu: float = float("nan")
    lipschitz: float = float("nan")
    history: dict = field(default_factory=dict)

    @property
    def lambda_v(self):
        return self.duals.get("v")

    @property
    def lambda_p(self):
        return self.duals.get("p")

    def z(self):
        return np.concatenate([self.x_tilde, *self.duals.values()])


def initial_state(prob: OpfProblem, x0=None) -> SaddleState:
    x = np.zeros(prob.n_x) if x0 is None else np.asarray(x0, dtype=float)
    return SaddleState(prob.feasible.project(x), {k: np.zeros(n) for k, n in prob.dual_sizes().items()})


def _evaluate(prob, x):
    return {k: c.evaluate(x) for k, c in prob.constraints.items()}


def lagrangian_value(prob: OpfProblem, state: SaddleState, cfg: SolverConfig) -> float:
    x = state.x_tilde
    val = prob.objective.value(x) + 0.5 * cfg.upsilon * prob.reg_scale * float(x @ x)
    for k, c in prob.constraints.items():
        lam = state.duals[k]
        f, _ = c.evaluate(x)
        val += prob.weight(k) * float(lam @ (f - c.delta)) - 0.5 * cfg.epsilon * float(lam @ lam)
    return val


def _gradients(prob, x, duals, cfg, evals=None):
    evals = _evaluate(prob, x) if evals is None else evals
    gx = prob.objective.grad(x) + cfg.upsilon * prob.reg_scale * x
    gd = {}
    for k, c in prob.constraints.items():
        f, jac = evals[k]
        lam, w = duals[k], prob.weight(k)
        gx = gx + w * (jac.T @ lam)
        gd[k] = w * (f - c.delta) - cfg.epsilon * lam
    return gx, gd


def phi_eval(prob: OpfProblem, state: SaddleState, cfg: SolverConfig):
    """Gradients of the regularized Lagrangian: ``(grad_x, {block: grad_lambda})``."""
    return _gradients(prob, state.x_tilde, state.duals, cfg)


def _unpack(prob, z):
    n = prob.n_x
    duals, at = {}, n
    for k, m in prob.dual_sizes().items():
        duals[k] = z[at:at + m]
        at += m
    return z[:n], duals


def monotone_map(prob: OpfProblem, z: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    """``Phi(z) = (grad_x L, -grad_lambda L)`` on the flattened iterate."""
    x, duals = _unpack(prob, z)
    gx, gd = _gradients(prob, x, duals, cfg)
    return np.concatenate([gx, *(-g for g in gd.values())])


def sample_iterates(prob: OpfProblem, cfg: SolverConfig, rng, count: int) -> np.ndarray:
    """Random points of ``X x [0, lambda_cap]^m`` as flattened iterates."""
    xs = prob.feasible.sample(rng, count)
    m = sum(prob.dual_sizes().values())
    return np.hstack([xs, rng.uniform(0.0, cfg.lambda_cap, size=(count, m))])


def step_size_from_constants(eta: float, lipschitz: float, safety: float = 1.0) -> float:
    return safety * 2.0 * eta / lipschitz ** 2


def contraction_factor(mu: float, eta: float, lipschitz: float) -> float:
    return math.sqrt(max(0.0, 1.0 - 2.0 * mu * eta + (mu * lipschitz) ** 2))


@dataclass(frozen=True)
class StepSize:
    mu: float
    eta: float
    lipschitz: float

    @property
    def rho(self):
        return contraction_factor(self.mu, self.eta, self.lipschitz)


def estimate_step_size(prob: OpfProblem, cfg: SolverConfig, inflation: float = 2.0) -> StepSize:
    """Step size from a sampled estimate of ``L_Phi``.

    ``L_Phi`` is the largest secant ratio ``|Phi(z1) - Phi(z2)| / |z1 - z2|``
    over ``cfg.lipschitz_samples`` random pairs, inflated by ``inflation``;
    ``mu = safety * 2 eta / L_Phi^2``.
    """
    rng = np.random.default_rng(cfg.seed)
    z1 = sample_iterates(prob, cfg, rng, cfg.lipschitz_samples)
    z2 = sample_iterates(prob, cfg, rng, cfg.lipschitz_samples)
    best = 0.0
    for a, b in zip(z1, z2):
        dz = np.linalg.norm(a - b)
        if dz > 0:
            best = max(best, np.linalg.norm(monotone_map(prob, a, cfg) - monotone_map(prob, b, cfg)) / dz)
    lip = inflation * best
    if lip <= 0:
        lip = cfg.eta  # constant map; any mu up to 2/eta contracts
    mu = step_size_from_constants(cfg.eta, lip, cfg.safety)
    if mu < 1e-8:
        log.warning("estimated step size %.3g is below 1e-8; clamping", mu)
        mu = 1e-8
    return StepSize(mu, cfg.eta, lip)


def _max_violation(prob, evals):
    worst = 0.0
    for k, c in prob.constraints.items():
        worst = max(worst, float(np.max(evals[k][0] - c.delta, initial=0.0)))
    return worst


def _stacked(prob):
    blocks = list(prob.constraints.values())
    delta = np.concatenate([c.delta for c in blocks]) if blocks else np.zeros(0)
    bounds = np.cumsum([0] + [c.delta.size for c in blocks])
    weights = np.concatenate([np.full(c.delta.size, prob.weight(k)) for k, c in prob.constraints.items()]) \
        if blocks else np.zeros(0)

    def evaluate(x):
        if not blocks:
            return np.zeros(0), np.zeros((0, x.size))
        parts = [c.evaluate(x) for c in blocks]
        if len(parts) == 1:
            return parts[0]
        return np.concatenate([f for f, _ in parts]), np.vstack([j for _, j in parts])

    return evaluate, delta, bounds, weights


def solve_saddle(prob: OpfProblem, cfg: SolverConfig, x0=None, step: StepSize | None = None,
                 record_path: bool = True, duals0: dict | None = None) -> SaddleState:
    """Projected primal-dual gradient iteration from ``x0`` (projected) and
    ``duals0`` (clipped at zero; zero by default).

    Stops when the infinity norm of the iterate change is at most
    ``cfg.stop_tol`` (``converged=True``) or after ``cfg.max_iter`` steps.
    ``history`` holds per-iteration objective, max surrogate violation,
    step norm, largest dual and (with ``record_path``) the primal iterates
    and smallest dual entries.
    """
    if step is None:
        step = StepSize(cfg.mu, cfg.eta, float("nan")) if cfg.mu is not None else estimate_step_size(prob, cfg)
    mu = step.mu
    evaluate, delta, bounds, wts = _stacked(prob)
    obj, project = prob.objective, prob.feasible.project
    d, c = obj.diag, obj.linear
    ups = cfg.upsilon * prob.reg_scale
    eps = cfg.epsilon

    x = project(np.zeros(prob.n_x) if x0 is None else np.asarray(x0, dtype=float))
    lam = np.zeros(delta.size)
    if duals0 is not None:
        lam = np.maximum(np.concatenate([np.asarray(duals0[k], dtype=float) for k in prob.constraints])
                         if prob.constraints else lam, 0.0)
    has_duals = delta.size > 0
    path, violation, step_norms, lam_max, lam_min = [x], [], [], [], [lam.min() if has_duals else 0.0]

    converged = False
    it = 0
    while it < cfg.max_iter:
        f, jac = evaluate(x)
        gx = d * x + c + ups * x + jac.T @ (wts * lam)
        x_new = project(x - mu * gx)
        if has_duals:
            g = f - delta
            lam_new = np.maximum(lam + mu * (wts * g - eps * lam), 0.0)
            sn = max(np.abs(x_new - x).max(), np.abs(lam_new - lam).max())
            violation.append(max(0.0, g.max()))
            lam_max.append(lam_new.max())
            lam_min.append(lam_new.min())
        else:
            lam_new = lam
            sn = np.abs(x_new - x).max()
        if not math.isfinite(sn):
            raise FloatingPointError(f"non-finite iterate at iteration {it}; step size {mu:.3g} is too large")
        step_norms.append(sn)
        x, lam = x_new, lam_new
        path.append(x)
        it += 1
        if sn <= cfg.stop_tol:
            converged = True
            break

    if not converged:
        log.info("primal-dual iteration stopped at max_iter=%d without reaching stop_tol", cfg.max_iter)
    P = np.array(path)
    zeros = np.zeros(it)
    hist = {"objective": 0.5 * np.sum(P[:-1] * P[:-1] * d, axis=1) + P[:-1] @ c,
            "max_violation": np.array(violation, dtype=float) if has_duals else zeros,
            "step_norm": np.array(step_norms, dtype=float),
            "lambda_max": np.array(lam_max, dtype=float) if has_duals else zeros}
    if record_path:
        hist["x"] = P
        hist["lambda_min"] = np.array(lam_min, dtype=float) if has_duals else np.zeros(it + 1)
    duals = {k: lam[bounds[i]:bounds[i + 1]].copy() for i, k in enumerate(prob.constraints)}
    return SaddleState(x, duals, it, converged, mu, step.lipschitz, hist)


def fixed_point_residual(prob: OpfProblem, state: SaddleState, cfg: SolverConfig, mu: float | None = None) -> float:
    """``|z - Proj(z - mu Phi(z))|_inf``; zero exactly at the regularized saddle point."""
    mu = state.mu if mu is None else mu
    gx, gd = phi_eval(prob, state, cfg)
    res = np.abs(prob.feasible.project(state.x_tilde - mu * gx) - state.x_tilde)
    worst = float(np.max(res, initial=0.0))
    for k, lam in state.duals.items():
        worst = max(worst, float(np.max(np.abs(np.maximum(lam + mu * gd[k], 0.0) - lam), initial=0.0)))
    return worst


@dataclass(frozen=True)
class SweepRow:
    upsilon: float
    epsilon: float
    objective: float
    max_violation: float
    iterations: int
    converged: bool
    x_tilde: np.ndarray


def regularization_sweep(prob: OpfProblem, cfg: SolverConfig, halvings: int, x0=None,
                         warm_start: bool = True) -> list[SweepRow]:
    """Re-solve with ``(upsilon, epsilon)`` halved ``halvings`` times.

    With ``warm_start`` each level starts from the previous level's saddle
    point (primal and dual); otherwise every level starts from ``x0`` and
    zero duals. The step size is re-estimated for every pair unless
    ``cfg.mu`` is fixed.
    """
    if halvings < 1:
        raise ValueError("halvings must be >= 1")
    rows = []
    start, duals = x0, None
    for i in range(halvings + 1):
        sub = SolverConfig(**{**cfg.__dict__, "upsilon": cfg.upsilon / 2 ** i, "epsilon": cfg.epsilon / 2 ** i})
        st = solve_saddle(prob, sub, start, record_path=False, duals0=duals)
        if warm_start:
            start, duals = st.x_tilde, st.duals
        viol = _max_violation(prob, _evaluate(prob, st.x_tilde))
        rows.append(SweepRow(sub.upsilon, sub.epsilon, prob.objective.value(st.x_tilde), viol,
                             st.iter, st.converged, st.x_tilde.copy()))
    return rows


def project_feasible(prob: OpfProblem, x_tilde: np.ndarray) -> np.ndarray:
    return prob.feasible.project(np.asarray(x_tilde, dtype=float))


def balanced_weights(prob: OpfProblem, x=None) -> dict:
    """Per-block weights ``1 / max_i |grad F_i|`` at ``x`` (projected zero by default).

    Weighting a block rescales its multipliers without changing the feasible
    set; unit-size constraint gradients keep the dual dynamics on the same
    time scale as the primal ones.
    """
    x = prob.feasible.project(np.zeros(prob.n_x) if x is None else np.asarray(x, dtype=float))
    out = {}
    for k, c in prob.constraints.items():
        _, jac = c.evaluate(x)
        peak = float(np.max(np.linalg.norm(jac, axis=1), initial=0.0))
        out[k] = 1.0 / peak if peak > 1e-12 else 1.0
    return out
