"""Losses, optimizer, and the warm-up / alternating optimization phases.

Training gradients are exact gradients of the discrete rollout loss: one
RK4 step (plus its per-knot cost terms) is traced once into a compiled tape
program, the rollout replays that program over the horizon, and the reverse
sweep walks the steps backward, recomputing each step's forward values from
the stored knot states (O(1) graph memory in the horizon).  Batches ride
along the program's lane axis.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, TapeProgram
from .control import (ControllerHandle, _solve_small, _T,
                      added_energy_gradient)
from .odeint import constant_input, rollout, rollout_batch
from .phmodel import (EnergyShapingPolicy, StructuredPHModel, _dot, _mv,
                      save_checkpoint)
from .plants import Dataset, policy_excited_dataset, sample_ics, \
    step_excited_dataset

DIVERGENCE_NORM = 1e3


class TrainingAbort(ArithmeticError):
    """Non-finite loss; the last finite parameter state was checkpointed."""


def default_q_diag(n):
    """Terminal weight diag(100, 10) per DOF pair."""
    return np.array([100.0] * n + [10.0] * n)


@dataclass
class CostConfig:
    """Policy cost weights and horizon."""

    eta: float = 1e-3          # control effort weight
    sigma2: float = 1e-3       # target kernel variance (stabilization)
    q_diag: np.ndarray = None  # terminal quadratic weights (swing-up)
    lambda_diss: float = 1.0
    rho: float = 1e-3
    horizon: float = 2.0
    dt: float = 2e-2

    def __post_init__(self):
        if min(self.eta, self.sigma2, self.lambda_diss, self.rho) <= 0:
            raise ValueError("eta, sigma2, lambda_diss, rho must be positive")
        if self.q_diag is not None:
            self.q_diag = np.asarray(self.q_diag, dtype=np.float64)
            if np.any(self.q_diag < 0):
                raise ValueError("Q must be positive semidefinite")

    def terminal_diag(self, n, task):
        if task == "stabilization":
            return np.full(2 * n, 1.0 / (2.0 * self.sigma2))
        qd = self.q_diag if self.q_diag is not None else default_q_diag(n)
        if qd.shape != (2 * n,):
            raise ValueError("Q diagonal must have length 2n")
        return qd


@dataclass
class TrainRun:
    """Bookkeeping for one training run (seed, history, output layout)."""

    seed: int = 0
    out_dir: str = None
    deterministic: bool = True
    workers: int = 1
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            os.makedirs(os.path.join(self.out_dir, "checkpoints"),
                        exist_ok=True)

    def log(self, **row):
        self.history.append(row)

    def save_history(self):
        if not self.out_dir:
            return
        cols = ["round", "phase", "step", "loss", "lr",
                "eps_diss_measured", "holdout_err"]
        path = os.path.join(self.out_dir, "history.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.history:
                w.writerow([_fmt(row.get(c, "")) for c in cols])
        return path

    def checkpoint(self, obj, name):
        if self.out_dir:
            save_checkpoint(obj, os.path.join(self.out_dir, "checkpoints",
                                              f"{name}.json"))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay, cosine learning-rate annealing


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                weight_decay=1e-4):
    """Bias-corrected Adam step with decoupled weight decay, in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
    return params, state


def cosine_lr(step, total_steps, lr_max, lr_min):
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr_max - lr_min) * (
        1.0 + math.cos(math.pi * step / max(total_steps, 1)))


# ---------------------------------------------------------------------------
# Traced one-step programs


def _traced_stage(model, policy, t, z):
    """Controller and closed-loop field at one stage, sharing subgraphs.

    Algebraically identical to control.ebpbc_control composed with
    model.vector_field (the mechanical reduction of -G' F^T grad V* is
    exact); tests pin the equivalence.
    """
    n, m = model.n, model.m
    q = z[:n]
    gH = model.grad_hamiltonian(z)
    gq, gp = gH[:n], gH[n:]
    D = model.dissipation(q)
    g = model.input_matrix(q)
    gradV = policy.added_potential_grad(q)
    A = np.dot(g.T, g)
    u_shape = -_solve_small(A, np.dot(g.T, gradV))
    K = policy.damping_gain(t, z)
    u = u_shape - np.dot(K, np.dot(g.T, gp))
    qdot = gp
    pdot = -gq - np.dot(D, gp) + np.dot(g, u)
    f = np.concatenate([qdot, pdot])
    return u, f, gH, gradV


def _rk4_advance(field_at, z, dt):
    k1 = field_at(z, 0.0)
    z2 = z + (dt / 2.0) * k1
    k2 = field_at(z2, 0.5)
    z3 = z + (dt / 2.0) * k2
    k3 = field_at(z3, 0.5)
    z4 = z + dt * k3
    k4 = field_at(z4, 1.0)
    return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def build_sysid_step_program(model, dt):
    """One RK4 step under zero-order-hold input, plus the knot error term."""
    tape = Tape()
    twin, theta = model.lift(tape)
    z = tape.leaves((2 * model.n,))
    u = tape.leaves((model.m,))
    zdot = tape.leaves((2 * model.n,))

    def field_at(zz, _c):
        return twin.vector_field(zz, u)

    z_next, k1 = _rk4_advance(field_at, z, dt)
    e = k1 - zdot
    err = np.dot(e, e)
    return TapeProgram(tape,
                       inputs={**theta, "z": z, "u": u, "zdot": zdot},
                       outputs={"z_next": z_next, "err": err})


def build_knot_error_program(model):
    """Derivative error at a single knot (used for the terminal knot)."""
    tape = Tape()
    twin, theta = model.lift(tape)
    z = tape.leaves((2 * model.n,))
    u = tape.leaves((model.m,))
    zdot = tape.leaves((2 * model.n,))
    e = twin.vector_field(z, u) - zdot
    err = np.dot(e, e)
    return TapeProgram(tape,
                       inputs={**theta, "z": z, "u": u, "zdot": zdot},
                       outputs={"err": err})


def build_policy_step_program(model, policy, dt):
    """One closed-loop RK4 step plus per-knot cost terms.

    Outputs: z_next, the knot control u0, absolute and squared effort
    integrands, the clamped dissipation residual
    relu(Hdot_d + rho*||z - zd||^2), and the terminal quadratic cost
    (seeded only at the final knot).
    """
    tape = Tape()
    tm, theta = model.lift(tape)
    tp, phi = policy.lift(tape)
    n = model.n
    z = tape.leaves((2 * n,))
    t = tape.leaves(())
    zd = tape.leaves((2 * n,))
    rho = tape.leaves(())
    qdiag = tape.leaves((2 * n,))
    t_scalar = t.item()
    rho_s = rho.item()

    stage_u = {}

    def field_at(zz, c):
        u_s, f_s, _, _ = _traced_stage(tm, tp, t_scalar + c * dt, zz)
        stage_u.setdefault("first", (u_s, f_s, zz))
        return f_s

    z_next, k1 = _rk4_advance(field_at, z, dt)
    u0, f0, _ = stage_u["first"]
    gHd = grad_desired = tm.grad_hamiltonian(z) + added_energy_gradient(tp,
                                                                        z[:n])
    hdot = np.dot(gHd, f0)
    dz = z - zd
    dist2 = np.dot(dz, dz)
    diss = (hdot + rho_s * dist2).relu()
    eff_l1 = sum(u0[i].relu() + (-u0[i]).relu() for i in range(model.m))
    eff_l2 = np.dot(u0, u0)
    term_cost = np.dot(qdiag * dz, dz)
    return TapeProgram(
        tape,
        inputs={**theta, **phi, "z": z, "t": t, "zd": zd, "rho": rho,
                "qdiag": qdiag},
        outputs={"z_next": z_next, "u0": u0, "eff_l1": eff_l1,
                 "eff_l2": eff_l2, "diss": diss, "term_cost": term_cost})


# ---------------------------------------------------------------------------
# Rollout objectives (forward + exact BPTT gradients)


def stack_batch(trajectories):
    """(z0, inputs, derivs) stacks for a same-shape trajectory batch."""
    K1 = trajectories[0].n_knots
    if any(t.n_knots != K1 for t in trajectories):
        raise ValueError("batch trajectories must share knot count")
    Z0 = np.stack([t.states[0] for t in trajectories])
    U = np.stack([t.inputs for t in trajectories])
    ZDOT = np.stack([t.derivs for t in trajectories])
    return Z0, U, ZDOT


class SysIdObjective:
    """Mean squared derivative error along the model-predicted rollout."""

    def __init__(self, model, dt, n_steps):
        self.model = model
        self.dt = dt
        self.K = n_steps
        self.step = build_sysid_step_program(model, dt)
        self.knot = build_knot_error_program(model)
        self.param_names = list(model.flat_params())

    def evaluate(self, batch, compute_grad=True):
        Z0, U, ZDOT = batch if isinstance(batch, tuple) else \
            stack_batch(batch)
        B = Z0.shape[0]
        K = self.K
        theta = self.model.flat_params()
        d = Z0.shape[1]
        zs = np.empty((K + 1, d, B))
        errs = np.empty((K + 1, B))
        alive = np.ones(B, dtype=bool)
        z = np.ascontiguousarray(Z0.T)

        def feeds_at(k, zk):
            f = dict(theta)
            f["z"] = zk
            f["u"] = np.ascontiguousarray(U[:, k, :].T)
            f["zdot"] = np.ascontiguousarray(ZDOT[:, k, :].T)
            return f

        with np.errstate(all="ignore"):
            for k in range(K):
                zs[k] = z
                out = self.step.forward(feeds_at(k, z), lanes=B)
                errs[k] = out["err"][..., 0, :] if out["err"].ndim > 1 \
                    else out["err"]
                znext = out["z_next"]
                bad = ~np.all(np.isfinite(znext), axis=0)
                bad |= np.linalg.norm(np.where(np.isfinite(znext), znext,
                                               0.0), axis=0) > DIVERGENCE_NORM
                alive &= ~bad
                z = np.where(alive[None, :], znext, z)
            zs[K] = z
            out = self.knot.forward(feeds_at(K, z), lanes=B)
            errs[K] = out["err"]

        n_alive = int(alive.sum())
        info = {"n_diverged": B - n_alive, "n_lanes": B}
        if n_alive == 0:
            return float("inf"), None, info
        lane_loss = errs.mean(axis=0)
        loss = float(lane_loss[alive].mean())
        if not compute_grad:
            return loss, None, info

        w = 1.0 / (K + 1)
        seed = np.where(alive, w, 0.0)
        grads = {k: 0.0 for k in self.param_names}

        def absorb(bwd):
            for k in self.param_names:
                grads[k] = grads[k] + bwd[k][..., alive].sum(axis=-1)

        bwd = self.knot.backward({"err": seed})
        absorb(bwd)
        adj_z = bwd["z"]
        adj_z[:, ~alive] = 0.0
        with np.errstate(all="ignore"):
            for k in range(K - 1, -1, -1):
                self.step.forward(feeds_at(k, zs[k]), lanes=B)
                bwd = self.step.backward({"z_next": adj_z, "err": seed})
                absorb(bwd)
                adj_z = bwd["z"]
                adj_z[:, ~alive] = 0.0
        grads = {k: np.asarray(v) / n_alive for k, v in grads.items()}
        return loss, grads, info


class PolicyObjective:
    """Task cost plus dissipation regularizer through the learned rollout."""

    def __init__(self, model, policy, cfg, task):
        if task not in ("stabilization", "swingup"):
            raise ValueError(f"unknown task {task!r}")
        self.model = model
        self.policy = policy
        self.cfg = cfg
        self.task = task
        self.K = int(round(cfg.horizon / cfg.dt))
        if abs(self.K * cfg.dt - cfg.horizon) > 1e-9:
            raise ValueError("horizon must be an integer multiple of dt")
        self.step = build_policy_step_program(model, policy, cfg.dt)
        self.phi_names = list(policy.flat_params())

    def evaluate(self, Z0, compute_grad=True):
        cfg, K = self.cfg, self.K
        Z0 = np.asarray(Z0, dtype=np.float64)
        B = Z0.shape[0]
        d = Z0.shape[1]
        n = self.model.n
        statics = {**self.model.flat_params(), **self.policy.flat_params(),
                   "zd": self.policy.target, "rho": np.asarray(cfg.rho),
                   "qdiag": cfg.terminal_diag(n, self.task)}
        eff_key = "eff_l1" if self.task == "stabilization" else "eff_l2"
        w_eff = cfg.eta * cfg.dt * np.where(
            (np.arange(K + 1) == 0) | (np.arange(K + 1) == K), 0.5, 1.0)
        w_diss = cfg.lambda_diss / (K + 1)

        zs = np.empty((K + 1, d, B))
        effs = np.zeros((K + 1, B))
        disses = np.zeros((K + 1, B))
        term = np.zeros(B)
        alive = np.ones(B, dtype=bool)
        z = np.ascontiguousarray(Z0.T)

        def feeds_at(k, zk):
            f = dict(statics)
            f["z"] = zk
            f["t"] = np.asarray(k * cfg.dt)
            return f

        with np.errstate(all="ignore"):
            for k in range(K + 1):
                zs[k] = z
                out = self.step.forward(feeds_at(k, z), lanes=B)
                effs[k] = out[eff_key]
                disses[k] = out["diss"]
                if k == K:
                    term = out["term_cost"]
                    break
                znext = out["z_next"]
                bad = ~np.all(np.isfinite(znext), axis=0)
                bad |= np.linalg.norm(np.where(np.isfinite(znext), znext,
                                               0.0), axis=0) > DIVERGENCE_NORM
                alive &= ~bad
                z = np.where(alive[None, :], znext, z)

        n_alive = int(alive.sum())
        info = {"n_diverged": B - n_alive, "n_lanes": B}
        if n_alive == 0:
            return float("inf"), None, info
        lane_cost = (term + (w_eff[:, None] * effs).sum(axis=0)
                     + w_diss * disses.sum(axis=0))
        worst = float(lane_cost[alive].max())
        loss = float(np.where(alive, lane_cost, worst).mean())
        info["eps_diss"] = float(disses[:, alive].max())
        info["mean_terminal_cost"] = float(term[alive].mean())
        if not compute_grad:
            return loss, None, info

        grads = {k: 0.0 for k in self.phi_names}
        scale = 1.0 / B

        def absorb(bwd):
            for k in self.phi_names:
                grads[k] = grads[k] + bwd[k][..., alive].sum(axis=-1)

        adj_z = np.zeros((d, B))
        with np.errstate(all="ignore"):
            for k in range(K, -1, -1):
                if k < K:
                    self.step.forward(feeds_at(k, zs[k]), lanes=B)
                seeds = {
                    eff_key: np.where(alive, w_eff[k] * scale, 0.0),
                    "diss": np.where(alive, w_diss * scale, 0.0),
                }
                if k == K:
                    seeds["term_cost"] = np.where(alive, scale, 0.0)
                else:
                    seeds["z_next"] = adj_z
                bwd = self.step.backward(seeds)
                absorb(bwd)
                adj_z = bwd["z"]
                adj_z[:, ~alive] = 0.0
        # dead lanes carry the worst finite cost but contribute no gradient;
        # the 1/B normalization keeps the two consistent for alive lanes
        grads = {k: np.asarray(v) for k, v in grads.items()}
        return loss, grads, info


# ---------------------------------------------------------------------------
# Spec-level loss functions (independent numeric route, used in tests/eval)


def replay_rollout(model, traj):
    """Model-predicted rollout from a recorded trajectory's z0 and inputs."""
    K = traj.n_knots - 1
    dt = traj.dt
    z = traj.states[0].copy()
    states = np.empty_like(traj.states)
    derivs = np.empty_like(traj.derivs)
    for k in range(K + 1):
        states[k] = z
        u = traj.inputs[k]
        derivs[k] = model.vector_field(z, u)
        if k < K:
            from .odeint import rk4_step
            z = rk4_step(model, z, constant_input(u), k * dt, dt)
    return states, derivs


def system_id_loss(model, trajectories):
    """Mean squared derivative error over knots and trajectories, with the
    derivatives taken along the model's own predicted rollout."""
    total, count, skipped = 0.0, 0, 0
    for traj in trajectories:
        try:
            with np.errstate(all="raise"):
                _, derivs = replay_rollout(model, traj)
        except (FloatingPointError, ArithmeticError):
            skipped += 1
            continue
        if not np.all(np.isfinite(derivs)):
            skipped += 1
            continue
        e = derivs - traj.derivs
        total += float((e * e).sum(axis=1).mean())
        count += 1
    if count == 0:
        return float("inf")
    loss = total / count
    if skipped:
        import logging
        logging.getLogger(__name__).warning(
            "system_id_loss skipped %d divergent rollouts", skipped)
    return loss


def _closed_loop_trajs(model, policy, ic_batch, cfg):
    controller = ControllerHandle.ebpbc(model, policy)
    trajs, failures = rollout_batch(model, ic_batch, controller,
                                    cfg.horizon, cfg.dt,
                                    max_norm=DIVERGENCE_NORM)
    good = [t for i, t in enumerate(trajs)
            if i not in {f.index for f in failures}]
    return good, failures


def policy_cost_stabilization(model, policy, ic_batch, cfg):
    """Gaussian-kernel terminal term plus absolute-effort integral."""
    trajs, _ = _closed_loop_trajs(model, policy, ic_batch, cfg)
    if not trajs:
        return float("inf")
    z_star = policy.target
    total = 0.0
    for t in trajs:
        dz = t.states[-1] - z_star
        term = float(dz @ dz) / (2.0 * cfg.sigma2)
        eff = np.trapezoid(np.abs(t.inputs).sum(axis=1), t.times)
        total += term + cfg.eta * eff
    return total / len(trajs)


def policy_cost_swingup(model, policy, ic_batch, cfg):
    """Quadratic terminal term plus squared-effort integral."""
    trajs, _ = _closed_loop_trajs(model, policy, ic_batch, cfg)
    if not trajs:
        return float("inf")
    z_star = policy.target
    qd = cfg.terminal_diag(model.n, "swingup")
    total = 0.0
    for t in trajs:
        dz = t.states[-1] - z_star
        term = float((qd * dz) @ dz)
        eff = np.trapezoid((t.inputs ** 2).sum(axis=1), t.times)
        total += term + cfg.eta * eff
    return total / len(trajs)


def dissipation_regularizer(model, policy, times, states, cfg):
    """lambda * mean relu(Hdot_d + rho ||z - zd||^2) over state samples."""
    from .control import closed_loop_energy_rate
    if len(times) == 0:
        raise ValueError("state samples must be nonempty")
    z_d = policy.target
    vals = []
    for t, z in zip(times, states):
        rate = closed_loop_energy_rate(model, policy, float(t), z)
        dist2 = float((z - z_d) @ (z - z_d))
        vals.append(max(rate + cfg.rho * dist2, 0.0))
    return cfg.lambda_diss * float(np.mean(vals))


# ---------------------------------------------------------------------------
# Phase steps


def theta_step(model, trajectories, run, epochs, batch_size=64, lr_max=1e-3,
               lr_min=1e-6, weight_decay=1e-4, adam_state=None,
               round_idx=0, phase="theta-step"):
    """Minibatch Adam on the derivative-matching loss; policy untouched."""
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("no training trajectories")
    dt = trajs[0].dt
    K = trajs[0].n_knots - 1
    obj = SysIdObjective(model, dt, K)
    params = model.flat_params()
    if adam_state is None:
        adam_state = AdamState.init(params)
    n_batches = max(1, len(trajs) // batch_size)
    total_steps = epochs * n_batches
    step_idx = 0
    last_good = {k: v.copy() for k, v in params.items()}
    for _ in range(epochs):
        order = run.rng.permutation(len(trajs))
        for b in range(n_batches):
            pick = order[b * batch_size:(b + 1) * batch_size]
            batch = [trajs[i] for i in pick]
            loss, grads, info = obj.evaluate(batch)
            if not np.isfinite(loss):
                _restore(params, last_good)
                run.checkpoint(model, f"abort_{phase}")
                raise TrainingAbort(
                    f"non-finite loss at {phase} step {step_idx}")
            lr = cosine_lr(step_idx, total_steps, lr_max, lr_min)
            adam_update(params, grads, adam_state, lr,
                        weight_decay=weight_decay)
            run.log(round=round_idx, phase=phase, step=step_idx, loss=loss,
                    lr=lr)
            last_good = {k: v.copy() for k, v in params.items()}
            step_idx += 1
    return adam_state


def phi_step(model, policy, ic_sampler, cfg, run, steps, batch_size=64,
             task="stabilization", lr=1e-3, weight_decay=1e-4,
             adam_state=None, round_idx=0):
    """Adam on the augmented policy cost through the learned model; the
    model parameters stay frozen."""
    obj = PolicyObjective(model, policy, cfg, task)
    params = policy.flat_params()
    if adam_state is None:
        adam_state = AdamState.init(params)
    eps_diss = 0.0
    last_good = {k: v.copy() for k, v in params.items()}
    for step_idx in range(steps):
        Z0 = ic_sampler(run.rng, batch_size)
        loss, grads, info = obj.evaluate(Z0)
        if not np.isfinite(loss):
            _restore(params, last_good)
            run.checkpoint(policy, "abort_phi-step")
            raise TrainingAbort(f"non-finite policy loss at step {step_idx}")
        adam_update(params, grads, adam_state, lr,
                    weight_decay=weight_decay)
        eps_diss = info["eps_diss"]
        run.log(round=round_idx, phase="phi-step", step=step_idx, loss=loss,
                lr=lr, eps_diss_measured=eps_diss)
        last_good = {k: v.copy() for k, v in params.items()}
    return adam_state, eps_diss


def _restore(params, saved):
    for k in params:
        params[k][...] = saved[k]


# ---------------------------------------------------------------------------
# Alternating optimization


@dataclass
class AlternationConfig:
    """Desk-scale defaults; strict-paper mode raises the data counts."""

    task: str = "stabilization"
    target: tuple = None           # defaults to the origin
    n_ics: int = 64
    levels: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    T_data: float = 0.15
    dt_sys: float = 1e-2
    warmup_epochs: int = 60
    round_epochs: int = 20
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    policy_steps: int = 120
    policy_batch: int = 64
    policy_lr: float = 1e-3
    model_width: int = 32
    model_depth: int = 2
    policy_width: int = 32
    kappa: float = 1e-4
    embed_angles: bool = False
    mix_ratio: float = 0.5
    holdout_ics: int = 32
    seed: int = 0
    cost: CostConfig = field(default_factory=CostConfig)

    def target_vector(self, n):
        if self.target is None:
            return np.zeros(2 * n)
        return np.asarray(self.target, dtype=np.float64)


def desk_config(**kw):
    return AlternationConfig(**kw)


def strict_paper_config(**kw):
    base = dict(n_ics=512, warmup_epochs=120, round_epochs=40,
                policy_steps=400, policy_batch=512, model_width=300,
                model_depth=3, policy_width=64)
    base.update(kw)
    return AlternationConfig(**base)


def ic_sampler_for(plant, seed):
    counter = {"n": 0}

    def sampler(rng, size):
        counter["n"] += 1
        return sample_ics(plant, size, seed + 7919 * counter["n"])

    return sampler


def mix_datasets(step_data, policy_data, rng, ratio=0.5):
    """50/50 (by default) trajectory-count mixture of the two provenances."""
    n_pol = len(policy_data.trajectories)
    n_step = min(int(round(n_pol * ratio / max(1e-9, 1.0 - ratio))),
                 len(step_data.trajectories))
    n_step = max(n_step, 1)
    pick = rng.choice(len(step_data.trajectories), size=n_step, replace=False)
    mixed = [step_data.trajectories[i] for i in pick] + \
        list(policy_data.trajectories)
    return mixed, {"step": n_step, "policy": n_pol}


def alternate_optimize(plant, cfg, n_rounds, run=None):
    """Warm-up system identification, then alternating theta/phi rounds.

    Each round collects policy-excited data on the true plant under the
    current policy, refines the model on a step/policy mixture, then
    re-optimizes the policy on the refined model.  Returns
    (model, policy, history).
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    if run is None:
        run = TrainRun(seed=cfg.seed)
    n, m = plant.n, plant.m
    target = cfg.target_vector(n)

    ics = sample_ics(plant, cfg.n_ics, cfg.seed)
    step_data = step_excited_dataset(plant, ics, cfg.levels, cfg.T_data,
                                     cfg.dt_sys, workers=run.workers)
    model = StructuredPHModel.create(n, m, seed=cfg.seed,
                                     width=cfg.model_width,
                                     depth=cfg.model_depth,
                                     embed_angles=cfg.embed_angles)
    policy = EnergyShapingPolicy.create(n, m, seed=cfg.seed + 1,
                                        width=cfg.policy_width,
                                        kappa=cfg.kappa, target=target,
                                        embed_angles=cfg.embed_angles)
    cost = replace(cfg.cost)

    theta_state = theta_step(model, step_data.trajectories, run,
                             epochs=cfg.warmup_epochs,
                             batch_size=cfg.batch_size, lr_max=cfg.lr_max,
                             lr_min=cfg.lr_min,
                             weight_decay=cfg.weight_decay,
                             round_idx=0, phase="warmup")
    run.checkpoint(model, "warmup_theta")

    sampler = ic_sampler_for(plant, cfg.seed + 1000)
    phi_state = None
    eps_diss = 0.0
    history_rounds = []
    for k in range(1, n_rounds + 1):
        controller = ControllerHandle.ebpbc(model, policy)
        pol_ics = sample_ics(plant, cfg.n_ics, cfg.seed + 100 + k)
        policy_data = policy_excited_dataset(plant, controller, pol_ics,
                                             cfg.T_data, cfg.dt_sys,
                                             workers=run.workers,
                                             policy_id=f"round{k}")
        mixed, mix_info = mix_datasets(step_data, policy_data, run.rng,
                                       cfg.mix_ratio)
        theta_state = theta_step(model, mixed, run, epochs=cfg.round_epochs,
                                 batch_size=cfg.batch_size,
                                 lr_max=cfg.lr_max, lr_min=cfg.lr_min,
                                 weight_decay=cfg.weight_decay,
                                 adam_state=theta_state, round_idx=k)
        run.checkpoint(model, f"round_{k}_theta")
        phi_state, eps_diss = phi_step(
            model, policy, sampler, cost, run, steps=cfg.policy_steps,
            batch_size=cfg.policy_batch, task=cfg.task, lr=cfg.policy_lr,
            weight_decay=cfg.weight_decay, adam_state=phi_state,
            round_idx=k)
        run.checkpoint(policy, f"round_{k}_phi")

        val_ics = sample_ics(plant, cfg.holdout_ics, cfg.seed + 5000 + k)
        val_controller = ControllerHandle.ebpbc(model, policy)
        val_data = policy_excited_dataset(plant, val_controller, val_ics,
                                          cfg.T_data, cfg.dt_sys,
                                          policy_id=f"holdout{k}")
        holdout = system_id_loss(model, val_data.trajectories)
        run.log(round=k, phase="round-eval", step=0, loss=holdout,
                eps_diss_measured=eps_diss, holdout_err=holdout)
        history_rounds.append({"round": k, "holdout_err": holdout,
                               "eps_diss": eps_diss, "mix": mix_info})
    run.save_history()
    return model, policy, history_rounds
