"""Rollout metrics and numerical certification of closed-loop dissipation.

The certificate estimates, over a low-discrepancy sample box around the
target state, the model/plant gap constants (worst field error, dissipation
and input-matrix errors, gradient bound, interconnection conditioning),
the dissipation residual of the true closed loop, and the resulting
practical-stability radius sqrt((xi + eps_diss)/rho), then checks sampled
true closed-loop trajectories against the corresponding sublevel set.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .control import (ControllerHandle, added_energy_gradient,
                      damping_block, embed_input_matrix,
                      energy_rate_quadratic_form, interconnection_matrix)
from .odeint import rollout_batch
from .phmodel import _dot, _mv

GUARD_DENOM = 1e-9
GUARD_CAP = 1e9


def relative_error_guarded(z_true, z_pred):
    """||z - zhat|| / ||z + zhat|| with a capped value when the denominator
    vanishes; returns (error, guarded_flag)."""
    z_true = np.asarray(z_true, dtype=np.float64)
    z_pred = np.asarray(z_pred, dtype=np.float64)
    if z_true.shape != z_pred.shape:
        raise ValueError("vectors must have equal length")
    num = np.linalg.norm(z_true - z_pred, axis=-1)
    den = np.linalg.norm(z_true + z_pred, axis=-1)
    guarded = den < GUARD_DENOM
    safe = np.where(guarded, 1.0, den)
    err = np.where(guarded, GUARD_CAP, num / safe)
    if err.ndim == 0:
        return float(err), bool(guarded)
    return err, guarded


def relative_error(z_true, z_pred):
    return relative_error_guarded(z_true, z_pred)[0]


def effort_metrics(trajectory):
    """Trapezoidal effort integrals summed over input channels."""
    t, u = trajectory.times, trajectory.inputs
    return {
        "l1": float(np.trapezoid(np.abs(u).sum(axis=1), t)),
        "l2": float(np.trapezoid((u ** 2).sum(axis=1), t)),
    }


def wrap_angle(x):
    return np.arctan2(np.sin(x), np.cos(x))


def wrapped_norm(z, z_star, n):
    """Euclidean norm with angle coordinates wrapped to (-pi, pi]."""
    z = np.asarray(z, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    dq = wrap_angle(z[..., :n] - z_star[..., :n])
    dp = z[..., n:] - z_star[..., n:]
    return np.sqrt((dq ** 2).sum(axis=-1) + (dp ** 2).sum(axis=-1))


def terminal_error(trajectory, z_star):
    """Wrapped angular distance plus momentum distance at the final knot."""
    if trajectory.n_knots == 0:
        raise ValueError("empty trajectory")
    z_star = np.asarray(z_star, dtype=np.float64)
    n = trajectory.n_dof
    zT = trajectory.states[-1]
    dq = np.linalg.norm(wrap_angle(zT[:n] - z_star[:n]))
    dp = np.linalg.norm(zT[n:] - z_star[n:])
    return float(dq + dp)


def terminal_position_error(trajectory, q_star):
    n = trajectory.n_dof
    qT = trajectory.states[-1][:n]
    return float(np.linalg.norm(wrap_angle(qT - np.atleast_1d(q_star))))


def error_bands(trajectories_true, trajectories_pred):
    """Per-knot mean relative error with an empirical 95% band."""
    if len(trajectories_true) != len(trajectories_pred):
        raise ValueError("need matched trajectory sets")
    K = trajectories_true[0].n_knots
    errs = np.empty((len(trajectories_true), K))
    for i, (tt, tp) in enumerate(zip(trajectories_true, trajectories_pred)):
        if tt.n_knots != K or tp.n_knots != K:
            raise ValueError("trajectories must share aligned knots")
        errs[i], _ = relative_error_guarded(tt.states, tp.states)
    return {
        "times": trajectories_true[0].times.copy(),
        "mean": errs.mean(axis=0),
        "lo": np.percentile(errs, 2.5, axis=0),
        "hi": np.percentile(errs, 97.5, axis=0),
    }


def halton(n, dim, skip=20):
    """Low-discrepancy points in [0, 1)^dim (radical-inverse sequence)."""
    primes = [2, 3, 5, 7, 11, 13, 17, 19]
    if dim > len(primes):
        raise ValueError("halton dimension too large")
    out = np.empty((n, dim))
    for d in range(dim):
        b = primes[d]
        for i in range(n):
            x, f, k = 0.0, 1.0 / b, i + skip + 1
            while k > 0:
                x += (k % b) * f
                k //= b
                f /= b
            out[i, d] = x
    return out


@dataclass
class CertificateSpec:
    """Sampling box and trajectory checks for the certificate."""

    halfwidth: float = 2.0     # inf-norm box radius around the target
    n_samples: int = 10_000
    n_traj: int = 32
    traj_T: float = 10.0
    traj_dt: float = 1e-2
    t_eval: float = 0.0        # time fed to the damping net
    rho: float = 1e-3
    eps_diss: float = None     # training-measured A5 residual, if available
    seed: int = 0
    sublevel_tol: float = 1e-6


@dataclass
class CertificateReport:
    """Estimated gap constants, dissipation residuals, and verdicts."""

    n_samples: int
    eps: float                # max ||f_model - f_true||
    eps_G: float              # max ||G_model - G_true||
    eps_R: float              # max ||R_model - R_true||
    grad_bound: float         # max(||grad H_model||, ||grad V*||)
    c_F: float                # min singular value of the true F
    delta: float              # (eps + eps_R * grad_bound) / c_F
    eps_diss: float
    eps_diss_source: str
    xi: float                 # clamped true closed-loop dissipation residual
    rho: float
    radius: float             # sqrt((xi + eps_diss)/rho)
    sublevel_c: float         # max H_d over the radius ball
    hdot_true_max: float
    hdot_learned_max: float
    trajectories_entered: int
    trajectories_stayed: int
    n_traj: int
    verdicts: dict = field(default_factory=dict)
    table: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "table"}
        return d

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=float)

    def save_csv(self, path):
        cols = list(self.table)
        rows = len(self.table[cols[0]])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(rows):
                w.writerow([f"{self.table[c][i]:.17g}" for c in cols])


def _batched_spectral_norm(A):
    s = np.linalg.svd(A, compute_uv=False)
    return s[..., 0]


def certify(plant, model, policy, spec=None):
    """Numerical certificate for the learned controller on the true plant."""
    spec = spec or CertificateSpec()
    if plant.n != model.n or plant.m != model.m:
        raise ValueError("plant and model dimensions do not match")
    n = plant.n
    z_d = policy.target
    t0 = spec.t_eval

    u01 = halton(spec.n_samples, 2 * n)
    Z = z_d + spec.halfwidth * (2.0 * u01 - 1.0)

    controller = ControllerHandle.ebpbc(model, policy)
    U = controller(t0, Z)
    U0 = np.zeros_like(U)

    f_true = plant.vector_field(Z, U)
    f_model = model.vector_field(Z, U)
    gap = np.linalg.norm(f_model - f_true, axis=1)
    f_true0 = plant.vector_field(Z, U0)
    f_model0 = model.vector_field(Z, U0)
    gap0 = np.linalg.norm(f_model0 - f_true0, axis=1)
    eps = float(np.maximum(gap, gap0).max())

    G_t = embed_input_matrix(plant.input_matrix(Z[:, :n]))
    G_m = embed_input_matrix(model.input_matrix(Z[:, :n]))
    eps_G = float(_batched_spectral_norm(G_m - G_t).max())
    R_t = damping_block(plant.dissipation(Z[:, :n]))
    R_m = damping_block(model.dissipation(Z[:, :n]))
    eps_R = float(_batched_spectral_norm(R_m - R_t).max())

    gH_m = model.grad_hamiltonian(Z)
    gV = added_energy_gradient(policy, Z[:, :n])
    grad_bound = float(max(np.linalg.norm(gH_m, axis=1).max(),
                           np.linalg.norm(gV, axis=1).max()))

    F_t = interconnection_matrix(plant.dissipation(Z[:, :n]))
    svals = np.linalg.svd(F_t, compute_uv=False)
    c_F = float(svals[..., -1].min())
    delta = (eps + eps_R * grad_bound) / c_F

    dist2 = ((Z - z_d) ** 2).sum(axis=1)

    # A5 residual of the learned closed loop (quadratic-form identity)
    lhs = -energy_rate_quadratic_form(model, policy, t0, Z)
    a5_resid = np.maximum(spec.rho * dist2 - lhs, 0.0)
    if spec.eps_diss is not None:
        eps_diss, source = float(spec.eps_diss), "training-run"
    else:
        eps_diss, source = float(a5_resid.max()), "sampled"

    # true closed-loop energy rate of H_d = H_true + V* (shared shaping)
    gHd_true = plant.grad_hamiltonian(Z) + gV
    hdot_true = _dot(gHd_true, f_true)
    hdot_learned = -lhs
    xi = float(np.maximum(hdot_true + spec.rho * dist2 - eps_diss, 0.0).max())
    radius = float(np.sqrt((xi + eps_diss) / spec.rho))

    # smallest H_d sublevel set containing the radius ball
    ball_pts = halton(2048, 2 * n, skip=1000)
    dirs = 2.0 * ball_pts - 1.0
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.where(norms > 0, dirs / np.maximum(norms, 1e-12), dirs)
    radii = np.linspace(0.0, radius, 16)[None, :, None]
    shell = z_d + dirs[:, None, :] * radii
    shell = shell.reshape(-1, 2 * n)
    hd_shell = plant.hamiltonian(shell) + policy.added_potential(
        shell[:, :n])
    sublevel_c = float(hd_shell.max())

    rng = np.random.default_rng(spec.seed)
    ic = z_d + spec.halfwidth * rng.uniform(-1.0, 1.0,
                                            size=(spec.n_traj, 2 * n))
    trajs, failures = rollout_batch(plant, ic, controller, spec.traj_T,
                                    spec.traj_dt, max_norm=1e6)
    entered = stayed = 0
    tol = spec.sublevel_tol * max(1.0, abs(sublevel_c))
    for traj in trajs:
        hd = plant.hamiltonian(traj.states) + policy.added_potential(
            traj.states[:, :n])
        inside = hd <= sublevel_c + tol
        if not inside.any():
            continue
        entered += 1
        first = int(np.argmax(inside))
        if inside[first:].all():
            stayed += 1

    verdicts = {
        "dissipative_true_loop": bool(hdot_true.max() <= 1e-10),
        "zero_gap": bool(max(eps, eps_R, eps_G) <= 1e-10),
        "xi_zero": bool(xi <= 1e-8),
        "trajectories_certified": bool(
            not failures and entered == len(trajs) == stayed
            and len(trajs) == spec.n_traj),
    }

    table = {
        "dist": np.sqrt(dist2),
        "hdot_learned": hdot_learned,
        "hdot_true": hdot_true,
        "a5_residual": a5_resid,
    }
    return CertificateReport(
        n_samples=spec.n_samples, eps=eps, eps_G=eps_G, eps_R=eps_R,
        grad_bound=grad_bound, c_F=c_F, delta=delta, eps_diss=eps_diss,
        eps_diss_source=source, xi=xi, rho=spec.rho, radius=radius,
        sublevel_c=sublevel_c, hdot_true_max=float(hdot_true.max()),
        hdot_learned_max=float(hdot_learned.max()),
        trajectories_entered=entered, trajectories_stayed=stayed,
        n_traj=len(trajs), verdicts=verdicts, table=table)
