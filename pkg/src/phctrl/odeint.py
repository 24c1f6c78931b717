"""Fixed-step classical RK4 integration of controlled vector fields.

All rollouts are deterministic fixed-step; training gradients are obtained
by backpropagating through the recorded steps (discretize-then-optimize),
never via a continuous adjoint.  The step and rollout functions accept both
numeric states and object arrays of traced variables, so the same code path
is used for simulation and for recording training graphs.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


class DivergenceError(ArithmeticError):
    """Integration produced a non-finite (or out-of-bounds) state."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass
class Trajectory:
    """Knot-sampled controlled trajectory with recorded state derivatives."""

    times: np.ndarray    # (K+1,)
    states: np.ndarray   # (K+1, 2n)
    derivs: np.ndarray   # (K+1, 2n), field at (state, input)
    inputs: np.ndarray   # (K+1, m)

    @property
    def n_knots(self):
        return len(self.times)

    @property
    def dt(self):
        if len(self.times) < 2:
            return 0.0
        return float(self.times[1] - self.times[0])

    @property
    def n_dof(self):
        return self.states.shape[1] // 2

    def to_csv(self, path):
        n, m = self.n_dof, self.inputs.shape[1]
        header = (["t"]
                  + [f"q{i+1}" for i in range(n)]
                  + [f"p{i+1}" for i in range(n)]
                  + [f"u{i+1}" for i in range(m)]
                  + [f"dq{i+1}" for i in range(n)]
                  + [f"dp{i+1}" for i in range(n)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(self.n_knots):
                row = np.concatenate(
                    [[self.times[k]], self.states[k], self.inputs[k],
                     self.derivs[k]])
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, data = rows[0], np.array(rows[1:], dtype=np.float64)
        n = sum(1 for h in header if h.startswith("q"))
        m = sum(1 for h in header if h.startswith("u"))
        return cls(
            times=data[:, 0],
            states=data[:, 1:1 + 2 * n],
            inputs=data[:, 1 + 2 * n:1 + 2 * n + m],
            derivs=data[:, 1 + 2 * n + m:1 + 4 * n + m],
        )


def constant_input(u):
    """u_fn returning a fixed input; broadcasts over batched states."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))

    def u_fn(t, z):
        if np.ndim(z) == 2:
            return np.broadcast_to(u, (z.shape[0], u.shape[0]))
        return u

    return u_fn


def zoh_input(times, inputs):
    """Zero-order hold over a recorded input sequence (knot-sampled)."""
    times = np.asarray(times, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(times) > 1:
        dt = times[1] - times[0]
    else:
        dt = 1.0

    def u_fn(t, z):
        k = int(np.clip(np.floor((t - times[0]) / dt + 1e-9), 0,
                        len(times) - 1))
        return inputs[k]

    return u_fn


def _is_numeric(z):
    return not (isinstance(z, np.ndarray) and z.dtype == object)


def rk4_step(field, z, u_fn, t, dt):
    """One classical RK4 step; the input is re-evaluated at every stage."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = field(z, u_fn(t, z))
    z2 = z + (dt / 2.0) * k1
    k2 = field(z2, u_fn(t + dt / 2.0, z2))
    z3 = z + (dt / 2.0) * k2
    k3 = field(z3, u_fn(t + dt / 2.0, z3))
    z4 = z + dt * k3
    k4 = field(z4, u_fn(t + dt, z4))
    z_next = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if _is_numeric(z_next) and not np.all(np.isfinite(z_next)):
        raise DivergenceError("non-finite state after RK4 step")
    return z_next


def _n_steps(T, dt):
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"horizon {T} is not an integer multiple of dt={dt}")
    return K


def rollout(field, z0, u_fn, T, dt):
    """Integrate one trajectory, recording state, input and derivative knots."""
    K = _n_steps(T, dt)
    z = np.asarray(z0, dtype=np.float64)
    times = np.arange(K + 1) * dt
    states = np.empty((K + 1, z.shape[0]))
    derivs = np.empty_like(states)
    u0 = np.atleast_1d(u_fn(0.0, z))
    inputs = np.empty((K + 1, u0.shape[0]))
    for k in range(K + 1):
        states[k] = z
        u = np.atleast_1d(u_fn(times[k], z))
        inputs[k] = u
        derivs[k] = field(z, u)
        if k < K:
            try:
                z = rk4_step(field, z, u_fn, times[k], dt)
            except DivergenceError as e:
                raise DivergenceError(str(e), step=k) from None
    return Trajectory(times=times, states=states, derivs=derivs,
                      inputs=inputs)


@dataclass
class DivergenceRecord:
    index: int     # position in the batch
    knot: int      # first bad knot


def _rollout_stacked(field, Z0, u_fn, T, dt, max_norm=None):
    """Vectorized batch rollout; lanes that diverge are frozen and reported."""
    K = _n_steps(T, dt)
    Z = np.array(Z0, dtype=np.float64)
    B, d = Z.shape
    times = np.arange(K + 1) * dt
    states = np.empty((K + 1, B, d))
    derivs = np.empty_like(states)
    U0 = np.atleast_2d(u_fn(0.0, Z))
    inputs = np.empty((K + 1, B, U0.shape[1]))
    alive = np.ones(B, dtype=bool)
    first_bad = np.full(B, K + 1, dtype=np.int64)

    with np.errstate(all="ignore"):
        for k in range(K + 1):
            states[k] = Z
            U = u_fn(times[k], Z)
            inputs[k] = U
            derivs[k] = field(Z, U)
            bad = ~np.all(np.isfinite(states[k]), axis=1)
            bad |= ~np.all(np.isfinite(derivs[k]), axis=1)
            if max_norm is not None:
                bad |= np.linalg.norm(states[k], axis=1) > max_norm
            newly = bad & alive
            if np.any(newly):
                first_bad[newly] = k
                alive &= ~newly
            if k < K:
                k1 = derivs[k]
                Z2 = Z + (dt / 2.0) * k1
                k2 = field(Z2, u_fn(times[k] + dt / 2.0, Z2))
                Z3 = Z + (dt / 2.0) * k2
                k3 = field(Z3, u_fn(times[k] + dt / 2.0, Z3))
                Z4 = Z + dt * k3
                k4 = field(Z4, u_fn(times[k] + dt, Z4))
                Znext = Z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                Z = np.where(alive[:, None], Znext, Z)
    return times, states, derivs, inputs, first_bad


def _rowwise(field, u_fn):
    """Adapt a single-state field / input law to (batch, 2n) stacks."""

    def field_b(Z, U):
        return np.stack([field(Z[b], U[b]) for b in range(Z.shape[0])])

    def u_fn_b(t, Z):
        return np.stack([np.atleast_1d(u_fn(t, Z[b]))
                         for b in range(Z.shape[0])])

    return field_b, u_fn_b


def rollout_batch(field, z0s, u_fn, T, dt, workers=1, max_norm=None):
    """Independent rollouts for a batch of initial conditions.

    Returns (trajectories, failures); a diverged trajectory is truncated at
    its last finite knot and reported in failures rather than aborting the
    batch.  Results are in input order regardless of worker count.
    """
    z0s = np.asarray(z0s, dtype=np.float64)
    if z0s.ndim != 2 or z0s.shape[0] == 0:
        raise ValueError("z0s must be a nonempty (batch, 2n) array")

    if getattr(field, "batch_ok", False):
        field_b, u_fn_b = field, u_fn
    else:
        field_b, u_fn_b = _rowwise(field, u_fn)

    def run_slice(idx):
        return _rollout_stacked(field_b, z0s[idx], u_fn_b, T, dt,
                                max_norm=max_norm)

    if workers > 1:
        chunks = np.array_split(np.arange(z0s.shape[0]), workers)
        chunks = [c for c in chunks if len(c)]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run_slice, chunks))
    else:
        chunks = [np.arange(z0s.shape[0])]
        parts = [run_slice(chunks[0])]

    trajs = [None] * z0s.shape[0]
    failures = []
    for idx, (times, states, derivs, inputs, first_bad) in zip(chunks, parts):
        for j, b in enumerate(idx):
            kbad = first_bad[j]
            stop = len(times) if kbad > len(times) - 1 else max(int(kbad), 1)
            trajs[b] = Trajectory(times=times[:stop].copy(),
                                  states=states[:stop, j].copy(),
                                  derivs=derivs[:stop, j].copy(),
                                  inputs=inputs[:stop, j].copy())
            if kbad <= len(times) - 1:
                failures.append(DivergenceRecord(index=int(b), knot=int(kbad)))
    failures.sort(key=lambda f: f.index)
    return trajs, failures
