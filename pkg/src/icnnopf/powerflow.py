"""AC power flow (full Newton-Raphson), LinDistFlow, and deviation targets.

Injection convention: generation positive, load negative, per-unit. The
slack entries of an injection are ignored; the slack bus balances the
system at a fixed voltage of ``v_slack`` at angle zero. Branch flows are
sending-end (``from_bus``) real power.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .network import NetworkCase


class PowerFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Injection:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be 1-D vectors of equal length")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


def nominal_injection(case: NetworkCase, scale: float = 1.0) -> Injection:
    """Net injection of the case's own loads, optionally scaled."""
    return Injection(-scale * case.bus_array("p_load"), -scale * case.bus_array("q_load"))


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    branch_p: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    method: str = "newton"
    message: str = ""


@dataclass(frozen=True)
class DeviationTargets:
    v_dev: np.ndarray
    p_dev: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray

    def violated_buses(self, allowance: float = 0.0) -> np.ndarray:
        return np.flatnonzero(self.v_dev > self.delta_v + allowance)

    def violated_branches(self, allowance: float = 0.0) -> np.ndarray:
        return np.flatnonzero(self.p_dev > self.delta_p + allowance)


def admittance_matrix(case: NetworkCase) -> np.ndarray:
    n = case.n_bus
    y = 1.0 / (case.branch_array("r") + 1j * case.branch_array("x"))
    f, t = case.from_idx, case.to_idx
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (f, f), y)
    np.add.at(Y, (t, t), y)
    np.add.at(Y, (f, t), -y)
    np.add.at(Y, (t, f), -y)
    return Y


def branch_flows(case: NetworkCase, V: np.ndarray) -> np.ndarray:
    """Sending-end real power of every branch for complex bus voltages ``V``."""
    y = 1.0 / (case.branch_array("r") + 1j * case.branch_array("x"))
    vf, vt = V[case.from_idx], V[case.to_idx]
    return np.real(vf * np.conj((vf - vt) * y))


def newton_power_flow(case: NetworkCase, inj: Injection, tol: float = 1e-8,
                      max_iter: int = 50, v_slack: float = 1.0) -> PowerFlowSolution:
    """Full Newton-Raphson on the polar power-balance equations, flat start.

    Works for radial and meshed cases alike. A singular Jacobian or
    non-convergence is reported through ``converged=False`` and ``message``
    with the last iterate, never raised.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = case.n_bus
    if inj.p.shape != (n,):
        raise ValueError(f"injection has {inj.p.size} entries, case has {n} buses")
    Y = admittance_matrix(case)
    pq = case.non_slack
    npq = pq.size
    s_spec = (inj.p + 1j * inj.q)[pq]

    vm = np.ones(n)
    va = np.zeros(n)
    vm[case.slack] = v_slack
    message = ""
    it = 0
    while True:
        V = vm * np.exp(1j * va)
        ibus = Y @ V
        mis = (V * np.conj(ibus))[pq] - s_spec
        F = np.concatenate([mis.real, mis.imag])
        err = float(np.max(np.abs(F))) if npq else 0.0
        if err <= tol or it >= max_iter:
            break
        vnorm = V / np.abs(V)
        dS_dVm = np.diag(V) @ np.conj(Y @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(ibus) - Y @ np.diag(V))
        sub_a = dS_dVa[np.ix_(pq, pq)]
        sub_m = dS_dVm[np.ix_(pq, pq)]
        J = np.block([[sub_a.real, sub_m.real], [sub_a.imag, sub_m.imag]])
        try:
            dx = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            message = "singular Jacobian"
            break
        va[pq] -= dx[:npq]
        vm[pq] -= dx[npq:]
        it += 1
        if not np.all(np.isfinite(vm)):
            message = "diverged"
            break

    converged = err <= tol and not message
    if not converged and not message:
        message = f"no convergence after {it} iterations"
    V = vm * np.exp(1j * va)
    return PowerFlowSolution(
        v_mag=np.abs(V), v_ang=np.angle(V), branch_p=branch_flows(case, V),
        converged=converged, iterations=it, max_mismatch=err, method="newton", message=message,
    )


def _radial_tree(case: NetworkCase):
    """BFS from the slack: parent branch of every bus and visiting order."""
    if case.topology_kind != "radial":
        raise PowerFlowError("LinDistFlow requires radial topology")
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(case.n_bus)}
    for k, (f, t) in enumerate(zip(case.from_idx, case.to_idx)):
        adj[f].append((t, k))
        adj[t].append((f, k))
    parent_branch = np.full(case.n_bus, -1)
    parent = np.full(case.n_bus, -1)
    order = [case.slack]
    seen = {case.slack}
    queue = deque([case.slack])
    while queue:
        i = queue.popleft()
        for j, k in adj[i]:
            if j not in seen:
                seen.add(j)
                parent[j], parent_branch[j] = i, k
                order.append(j)
                queue.append(j)
    return np.array(order), parent, parent_branch


def lindistflow_matrices(case: NetworkCase):
    """Linear maps of the LinDistFlow model.

    Returns ``(R, X, T)`` such that, for injections ``p, q`` (per bus),
    squared voltages are ``v_slack**2 + 2 (R @ p + X @ q)`` and sending-end
    branch flows are ``T @ p``. Slack columns of ``R``, ``X``, ``T`` are zero.
    """
    order, parent, parent_branch = _radial_tree(case)
    n, nb = case.n_bus, case.n_branch
    r, x = case.branch_array("r"), case.branch_array("x")
    # path incidence: A[k, j] = 1 when branch k lies on the slack->j path
    A = np.zeros((nb, n))
    for j in order[1:]:
        k = parent_branch[j]
        A[:, j] = A[:, parent[j]]
        A[k, j] = 1.0
    A[:, case.slack] = 0.0
    R = A.T @ (r[:, None] * A)
    X = A.T @ (x[:, None] * A)
    # flow on branch k (parent -> child) equals minus the injections below it
    sign = np.where(case.from_idx == parent[case.to_idx], 1.0, -1.0)
    T = -sign[:, None] * A
    return R, X, T


def lindistflow(case: NetworkCase, inj: Injection, v_slack: float = 1.0) -> PowerFlowSolution:
    """Loss-free linearized DistFlow solution (angles reported as zero)."""
    R, X, T = lindistflow_matrices(case)
    v2 = v_slack ** 2 + 2.0 * (R @ inj.p + X @ inj.q)
    if np.any(v2 <= 0):
        raise PowerFlowError("LinDistFlow produced non-positive squared voltage")
    return PowerFlowSolution(
        v_mag=np.sqrt(v2), v_ang=np.zeros(case.n_bus), branch_p=T @ inj.p,
        converged=True, iterations=0, max_mismatch=0.0, method="lindistflow",
    )


def deviation_targets(case: NetworkCase, sol: PowerFlowSolution) -> DeviationTargets:
    """Distances of V and P from the midpoints of their bounds.

    A bound ``lo <= y <= hi`` holds exactly when ``|y - (lo+hi)/2| <= (hi-lo)/2``.
    """
    if not sol.converged:
        raise PowerFlowError(f"power flow did not converge: {sol.message}")
    vmin, vmax = case.bus_array("v_min"), case.bus_array("v_max")
    pmin, pmax = case.branch_array("p_min"), case.branch_array("p_max")
    return DeviationTargets(
        v_dev=np.abs(sol.v_mag - 0.5 * (vmin + vmax)),
        p_dev=np.abs(sol.branch_p - 0.5 * (pmin + pmax)),
        delta_v=0.5 * (vmax - vmin),
        delta_p=0.5 * (pmax - pmin),
    )
