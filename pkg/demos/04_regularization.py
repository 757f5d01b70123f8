"""Regularized saddle points of min x^2 s.t. x >= 1 approach the true optimum."""

import numpy as np

from icnnopf.saddle import (AffineConstraint, BoxSet, OpfProblem, QuadraticCost, SolverConfig,
                            estimate_step_size, regularization_sweep, solve_saddle)

prob = OpfProblem(QuadraticCost([2.0]), BoxSet([-5.0], [5.0]),
                  {"g": AffineConstraint(np.array([[-1.0]]), np.array([1.0]), np.array([0.0]))})

cfg = SolverConfig(upsilon=0.01, epsilon=0.01, stop_tol=1e-11, max_iter=200000)
step = estimate_step_size(prob, cfg)
print(f"L_Phi ~ {step.lipschitz:.3f}, mu = {step.mu:.3e}, contraction factor {step.rho:.8f}")

st = solve_saddle(prob, cfg, step=step)
x = st.x_tilde[0]
closed = 1 / (1 + cfg.epsilon * (2 + cfg.upsilon))
print(f"x = {x:.9f} after {st.iter} iterations (closed form {closed:.9f}), lambda = {st.duals['g'][0]:.6f}")

# shrink the regularization: the saddle point moves toward x* = 1
cfg = SolverConfig(upsilon=0.01, epsilon=0.01, stop_tol=1e-9, max_iter=400000, safety=1.0)
for row in regularization_sweep(prob, cfg, 3):
    xr = row.x_tilde[0]
    print(f"upsilon = eps = {row.epsilon:.5f}: x = {xr:.6f}, gap to 1 = {1 - xr:.2e}, "
          f"bound {2 * row.epsilon * (2 + row.upsilon):.2e}, {row.iterations} iterations")
