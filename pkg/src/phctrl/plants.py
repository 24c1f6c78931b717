"""Analytic ground-truth plants and trajectory dataset generation.

Each plant is a closed-form port-Hamiltonian system exposing the same
evaluation interface as the learned model (mass_inverse, potential,
grad_hamiltonian, vector_field, ...), so it can stand in for a model in
losses and certificates.  All formulas are written with dispatching scalar
ops, so plants can also be traced for gradient-based baseline tuning.
"""

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .odeint import Trajectory, constant_input, rollout_batch

GRAVITY = 9.81


@dataclass
class PlantSpec:
    kind: str
    params: dict
    n: int
    m: int

    def __post_init__(self):
        for key in ("m", "m1", "m2", "l", "l1", "l2", "lc1", "lc2", "J",
                    "I1", "I2", "r"):
            if key in self.params and self.params[key] <= 0:
                raise ValueError(f"{key} must be positive")
        for key in ("k", "d", "Ks1", "Ks2"):
            if key in self.params and self.params[key] < 0:
                raise ValueError(f"{key} must be nonnegative")

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params),
                "n": self.n, "m": self.m}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], params=dict(d["params"]), n=d["n"],
                   m=d["m"])


class Plant:
    """Base analytic pH system; subclasses provide the energy functions."""

    batch_ok = True

    def __init__(self, spec):
        self.spec = spec
        self.n = spec.n
        self.m = spec.m

    def hamiltonian(self, z):
        n = self.n
        q, p = z[..., :n], z[..., n:]
        from .phmodel import _dot, _mv
        return 0.5 * _dot(p, _mv(self.mass_inverse(q), p)) + self.potential(q)

    def grad_hamiltonian(self, z):
        n = self.n
        q, p = z[..., :n], z[..., n:]
        from .phmodel import _mv
        gp = _mv(self.mass_inverse(q), p)
        gq = self.potential_grad(q) + self.kinetic_grad_q(q, p)
        if isinstance(gq, np.ndarray) and gq.dtype == object:
            return np.concatenate([gq, gp])
        return np.concatenate([gq, gp], axis=-1)

    def kinetic_grad_q(self, q, p):
        """d/dq of p^T M^{-1}(q) p / 2; zero unless M depends on q."""
        if isinstance(q, np.ndarray) and q.dtype == object:
            return np.zeros(self.n, dtype=object)
        return np.zeros(np.shape(q))

    def vector_field(self, z, u):
        n = self.n
        q = z[..., :n]
        u = u if isinstance(u, np.ndarray) else np.asarray(u)
        from .phmodel import _mv
        gH = self.grad_hamiltonian(z)
        gq, gp = gH[..., :n], gH[..., n:]
        qdot = gp
        pdot = -gq - _mv(self.dissipation(q), gp) + _mv(self.input_matrix(q),
                                                        u)
        return np.concatenate([qdot, pdot], axis=-1)

    def __call__(self, z, u):
        return self.vector_field(z, u)


def _const_mat(q, entries):
    """Broadcast a constant matrix over the batch shape of q."""
    M = np.asarray(entries, dtype=np.float64)
    if isinstance(q, np.ndarray) and q.dtype == object:
        return M
    return np.broadcast_to(M, np.shape(q)[:-1] + M.shape)


class PlanarPendulum(Plant):
    """Point-mass pendulum; angle measured from the downward vertical.

    H = p^2/(2 m l^2) + m g l (1 - cos q); input enters the momentum with
    gain b; no natural dissipation.
    """

    def mass_matrix(self, q):
        par = self.spec.params
        return _const_mat(q, [[par["m"] * par["l"] ** 2]])

    def mass_inverse(self, q):
        par = self.spec.params
        return _const_mat(q, [[1.0 / (par["m"] * par["l"] ** 2)]])

    def potential(self, q):
        par = self.spec.params
        mgl = par["m"] * par["gravity"] * par["l"]
        return mgl * (1.0 - ad.cos(q[..., 0]))

    def potential_grad(self, q):
        par = self.spec.params
        mgl = par["m"] * par["gravity"] * par["l"]
        out = mgl * ad.sin(q[..., 0])
        return _stack_last([out])

    def input_matrix(self, q):
        return _const_mat(q, [[self.spec.params["b"]]])

    def dissipation(self, q):
        return _const_mat(q, [[0.0]])


class TorsionalPendulum(Plant):
    """Pendulum with a parallel torsional spring and viscous damping.

    H = J qdot^2 / 2 + m g r (1 - cos q) + k q^2 / 2, with p = J qdot and
    unit input gain.
    """

    def mass_matrix(self, q):
        return _const_mat(q, [[self.spec.params["J"]]])

    def mass_inverse(self, q):
        return _const_mat(q, [[1.0 / self.spec.params["J"]]])

    def potential(self, q):
        par = self.spec.params
        mgr = par["m"] * par["gravity"] * par["r"]
        qq = q[..., 0]
        return mgr * (1.0 - ad.cos(qq)) + 0.5 * par["k"] * qq * qq

    def potential_grad(self, q):
        par = self.spec.params
        mgr = par["m"] * par["gravity"] * par["r"]
        qq = q[..., 0]
        return _stack_last([mgr * ad.sin(qq) + par["k"] * qq])

    def input_matrix(self, q):
        return _const_mat(q, [[1.0]])

    def dissipation(self, q):
        return _const_mat(q, [[self.spec.params["d"]]])


class TwoLinkTorsional(Plant):
    """Two-link pendulum with parallel torsional springs; fully actuated."""

    def _mass_entries(self, q):
        par = self.spec.params
        c2 = ad.cos(q[..., 1])
        a = par["m2"] * par["l1"] * par["lc2"]
        m11 = (par["m1"] * par["lc1"] ** 2
               + par["m2"] * (par["l1"] ** 2 + par["lc2"] ** 2)
               + par["I1"] + par["I2"] + 2.0 * a * c2)
        m12 = par["m2"] * par["lc2"] ** 2 + par["I2"] + a * c2
        m22 = par["m2"] * par["lc2"] ** 2 + par["I2"]
        if isinstance(m11, ad.Var):
            m22 = m11.tape.const(m22)
        else:
            m22 = np.broadcast_to(m22, np.shape(m11))
        return m11, m12, m22

    def mass_matrix(self, q):
        m11, m12, m22 = self._mass_entries(q)
        return _mat2(m11, m12, m12, m22)

    def mass_inverse(self, q):
        m11, m12, m22 = self._mass_entries(q)
        det = m11 * m22 - m12 * m12
        return _mat2(m22 / det, -m12 / det, -m12 / det, m11 / det)

    def potential(self, q):
        par = self.spec.params
        g = par["gravity"]
        q1, q2 = q[..., 0], q[..., 1]
        vg = (-(par["m1"] * par["lc1"] + par["m2"] * par["l1"]) * g
              * ad.cos(q1) - par["m2"] * par["lc2"] * g * ad.cos(q1 + q2))
        ve = (0.5 * par["Ks1"] * (q1 - par["qeq1"]) ** 2
              + 0.5 * par["Ks2"] * (q2 - par["qeq2"]) ** 2)
        return vg + ve

    def gravity_potential_grad(self, q):
        par = self.spec.params
        g = par["gravity"]
        q1, q2 = q[..., 0], q[..., 1]
        s12 = ad.sin(q1 + q2)
        d1 = ((par["m1"] * par["lc1"] + par["m2"] * par["l1"]) * g
              * ad.sin(q1) + par["m2"] * par["lc2"] * g * s12)
        d2 = par["m2"] * par["lc2"] * g * s12
        return _stack_last([d1, d2])

    def elastic_potential_grad(self, q):
        par = self.spec.params
        return _stack_last([par["Ks1"] * (q[..., 0] - par["qeq1"]),
                            par["Ks2"] * (q[..., 1] - par["qeq2"])])

    def potential_grad(self, q):
        return self.gravity_potential_grad(q) + self.elastic_potential_grad(q)

    def kinetic_grad_q(self, q, p):
        # d/dq (p^T M^{-1} p)/2 = -(qdot^T dM/dq_i qdot)/2 with qdot = M^{-1}p
        par = self.spec.params
        a = par["m2"] * par["l1"] * par["lc2"]
        from .phmodel import _mv
        qdot = _mv(self.mass_inverse(q), p)
        s2 = ad.sin(q[..., 1])
        v1, v2 = qdot[..., 0], qdot[..., 1]
        # dM/dq2 = [[-2 a s2, -a s2], [-a s2, 0]]
        quad = -a * s2 * (2.0 * v1 * v1 + 2.0 * v1 * v2)
        d2 = -0.5 * quad
        if isinstance(d2, ad.Var):
            zero = d2.tape.const(0.0)
            return _stack_last([zero, d2])
        return _stack_last([np.zeros(np.shape(d2)), d2])

    def input_matrix(self, q):
        return _const_mat(q, np.eye(2))

    def dissipation(self, q):
        par = self.spec.params
        return _const_mat(q, np.diag([par.get("d1", 0.0),
                                      par.get("d2", 0.0)]))


def _stack_last(scalars):
    if any(isinstance(s, ad.Var) for s in scalars):
        return np.array(scalars, dtype=object)
    return np.stack([np.asarray(s, dtype=np.float64) for s in scalars],
                    axis=-1)


def _mat2(a, b, c, d):
    if any(isinstance(x, ad.Var) for x in (a, b, c, d)):
        return np.array([[a, b], [c, d]], dtype=object)
    row0 = np.stack([np.asarray(a, dtype=np.float64),
                     np.asarray(b, dtype=np.float64)], axis=-1)
    row1 = np.stack([np.asarray(c, dtype=np.float64),
                     np.asarray(d, dtype=np.float64)], axis=-1)
    return np.stack([row0, row1], axis=-2)


def planar_pendulum(m=1.0, l=1.0, b=1.0, gravity=GRAVITY):
    spec = PlantSpec("planar-pendulum",
                     {"m": m, "l": l, "b": b, "gravity": gravity}, n=1, m=1)
    return PlanarPendulum(spec)


def torsional_pendulum(J=1.0, m=1.0, r=1.0, k=0.5, d=0.01, gravity=GRAVITY):
    spec = PlantSpec("torsional-pendulum",
                     {"J": J, "m": m, "r": r, "k": k, "d": d,
                      "gravity": gravity}, n=1, m=1)
    return TorsionalPendulum(spec)


def two_link_torsional(m1=1.0, m2=1.0, l1=1.0, l2=1.0, lc1=0.5, lc2=0.5,
                       I1=1.0 / 12.0, I2=1.0 / 12.0, Ks1=0.5, Ks2=0.5,
                       qeq1=0.0, qeq2=0.0, gravity=GRAVITY):
    spec = PlantSpec("two-link-torsional",
                     {"m1": m1, "m2": m2, "l1": l1, "l2": l2, "lc1": lc1,
                      "lc2": lc2, "I1": I1, "I2": I2, "Ks1": Ks1,
                      "Ks2": Ks2, "qeq1": qeq1, "qeq2": qeq2,
                      "gravity": gravity}, n=2, m=2)
    return TwoLinkTorsional(spec)


_FACTORIES = {
    "planar-pendulum": PlanarPendulum,
    "torsional-pendulum": TorsionalPendulum,
    "two-link-torsional": TwoLinkTorsional,
}


def make_plant(spec):
    try:
        return _FACTORIES[spec.kind](spec)
    except KeyError:
        raise ValueError(f"unknown plant kind {spec.kind!r}") from None


def planar_pendulum_field(spec):
    """Controlled planar-pendulum field (callable plant object)."""
    return PlanarPendulum(spec)


def torsional_pendulum_field(spec):
    return TorsionalPendulum(spec)


def two_link_field(spec):
    return TwoLinkTorsional(spec)


def random_planar_pendulum(seed, low=0.5, high=2.0, gravity=GRAVITY):
    """Planar pendulum with parameters drawn once from U(low, high).

    The default lower bound 0.5 avoids near-singular draws; pass low=0.0
    for the strict published U(0, 2) draw.
    """
    rng = np.random.default_rng(seed)
    m, l, b = rng.uniform(low, high, size=3)
    if min(m, l, b) < 1e-2:
        import logging
        logging.getLogger(__name__).warning(
            "near-degenerate pendulum draw (m=%.3g l=%.3g b=%.3g)", m, l, b)
        m, l, b = (max(v, 1e-2) for v in (m, l, b))
    return planar_pendulum(m=m, l=l, b=b, gravity=gravity)


def sample_ics(plant, n_samples, seed):
    """Uniform q ~ U(-2pi, 2pi), qdot ~ U(-pi, pi); momenta via the true
    mass matrix.  Returns (n_samples, 2n)."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    n = plant.n
    q = rng.uniform(-2.0 * np.pi, 2.0 * np.pi, size=(n_samples, n))
    qdot = rng.uniform(-np.pi, np.pi, size=(n_samples, n))
    M = plant.mass_matrix(q)
    p = np.einsum("...ij,...j->...i", M, qdot)
    return np.concatenate([q, p], axis=1)


@dataclass
class Dataset:
    """Trajectory collection of a single provenance (shared dt, horizon)."""

    trajectories: list
    provenance: str                 # "step-excited" or "policy-excited"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        meta = dict(self.meta)
        meta["provenance"] = self.provenance
        meta["n_trajectories"] = len(self.trajectories)
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2)
        for i, traj in enumerate(self.trajectories):
            traj.to_csv(os.path.join(out_dir, f"traj_{i:05d}.csv"))

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "meta.json")) as fh:
            meta = json.load(fh)
        n = meta["n_trajectories"]
        trajs = [Trajectory.from_csv(os.path.join(out_dir,
                                                  f"traj_{i:05d}.csv"))
                 for i in range(n)]
        return cls(trajectories=trajs, provenance=meta.pop("provenance"),
                   meta=meta)


def excitation_combos(levels, m, max_combos=25):
    """Per-channel Cartesian product of constant levels, capped at 25."""
    combos = list(itertools.product(levels, repeat=m))
    if len(combos) > max_combos:
        stride = len(combos) / max_combos
        combos = [combos[int(i * stride)] for i in range(max_combos)]
    return combos


def step_excited_dataset(plant, ics, levels, T, dt, workers=1):
    """One trajectory per (initial condition, constant excitation) pair."""
    if not len(levels):
        raise ValueError("levels must be nonempty")
    ics = np.asarray(ics, dtype=np.float64)
    combos = excitation_combos(levels, plant.m)
    trajs, failures = [], []
    for combo in combos:
        ts, fs = rollout_batch(plant, ics, constant_input(np.array(combo)),
                               T, dt, workers=workers)
        base = len(trajs)
        trajs.extend(ts)
        failures.extend({"index": base + f.index, "knot": f.knot}
                        for f in fs)
    meta = {"plant": plant.spec.to_dict(), "dt": dt, "T": T,
            "levels": [list(map(float, c)) for c in combos],
            "failures": failures}
    return Dataset(trajectories=trajs, provenance="step-excited", meta=meta)


def policy_excited_dataset(plant, controller, ics, T, dt, workers=1,
                           policy_id=None):
    """Closed-loop rollouts on the true plant under a learned controller."""
    ics = np.asarray(ics, dtype=np.float64)
    trajs, fs = rollout_batch(plant, ics, controller, T, dt,
                              workers=workers, max_norm=1e3)
    meta = {"plant": plant.spec.to_dict(), "dt": dt, "T": T,
            "policy_id": policy_id,
            "failures": [{"index": f.index, "knot": f.knot} for f in fs]}
    return Dataset(trajectories=trajs, provenance="policy-excited",
                   meta=meta)
