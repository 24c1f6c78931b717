"""Structured neural port-Hamiltonian model and energy-shaping policy nets.

The model is four fully connected nets: a Cholesky factor of the inverse
mass matrix, a scalar potential, an input map, and a Cholesky-composed
dissipation matrix.  The Hamiltonian is the kinetic quadratic form plus the
potential; the vector field follows the mechanical interconnection
  [ qdot ]   [ 0   I ] [ dH/dq ]   [ 0 ]
  [ pdot ] = [-I  -D ] [ dH/dp ] + [ g ] u.

All evaluation methods accept a single state, a (batch, .) stack of states,
or object arrays of traced variables; the traced path is what training
programs are recorded from.
"""

import copy
import json

import numpy as np

from .autodiff import (Architecture, ParamSet, ShapeError, Tape, build_grad,
                       init_mlp_params, mlp_forward, mlp_input_grad,
                       input_gradient_differentiable, softplus, _is_traced)
from dataclasses import dataclass

EPS_PD = 1e-6


@dataclass
class PhaseState:
    """Generalized coordinates and momenta (q, p)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
        if self.q.shape != self.p.shape:
            raise ShapeError("q and p must have equal length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise ValueError("phase state must be finite")

    @property
    def n(self):
        return self.q.shape[0]

    def vector(self):
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, z):
        z = np.asarray(z, dtype=np.float64)
        n = z.shape[0] // 2
        return cls(q=z[:n], p=z[n:])


def _tril_from_vec(vec, n):
    """Lower-triangular (..., n, n) from packed entries (..., n(n+1)/2)."""
    rows, cols = np.tril_indices(n)
    if isinstance(vec, np.ndarray) and vec.dtype == object:
        L = np.zeros((n, n), dtype=object)
        for k, (i, j) in enumerate(zip(rows, cols)):
            L[i, j] = vec[k]
        return L
    vec = np.asarray(vec, dtype=np.float64)
    L = np.zeros(vec.shape[:-1] + (n, n))
    L[..., rows, cols] = vec
    return L


def _mv(A, x):
    """Matrix-vector product for plain, batched, and object operands."""
    if (isinstance(A, np.ndarray) and A.dtype == object) or \
       (isinstance(x, np.ndarray) and x.dtype == object):
        return np.dot(A, x)
    return np.einsum("...ij,...j->...i", A, x)


def _mtm(L):
    """L^T L for (n, n), (batch, n, n), or object (n, n)."""
    if isinstance(L, np.ndarray) and L.dtype == object:
        return np.dot(L.T, L)
    if L.ndim == 2:
        return L.T @ L
    return np.einsum("...ji,...jk->...ik", L, L)


def _dot(a, b):
    """Inner product along the last axis, object-safe."""
    if (isinstance(a, np.ndarray) and a.dtype == object) or \
       (isinstance(b, np.ndarray) and b.dtype == object):
        return np.dot(a, b)
    return np.einsum("...i,...i->...", a, b)


def n_tri(n):
    return n * (n + 1) // 2


def _angle_features(q, embed):
    if not embed:
        return q
    if isinstance(q, np.ndarray) and q.dtype == object:
        return np.concatenate([np.cos(q), np.sin(q)])
    return np.concatenate([np.cos(q), np.sin(q)], axis=-1)


def _chain_angle_grad(q, g_feat, embed):
    """Pull a gradient w.r.t. (cos q, sin q) features back to q."""
    if not embed:
        return g_feat
    n = q.shape[-1]
    return -np.sin(q) * g_feat[..., :n] + np.cos(q) * g_feat[..., n:]


def default_model_archs(n, width=32, depth=2, act="tanh", embed_angles=False,
                        paper=False):
    """Architecture set for the four model nets.

    ``paper=True`` reproduces the published layer sizes (300/400/50 wide);
    the default is a desk-scale set with uniform width.
    """
    d_in = 2 * n if embed_angles else n
    if paper:
        return {
            "mass": Architecture(d_in, (300, 300, 300), ("tanh",) * 3, n_tri(n)),
            "potential": Architecture(d_in, (50, 50), ("tanh",) * 2, 1),
            "input": Architecture(d_in, (400, 400), ("tanh",) * 2, n * n),
            "dissipation": Architecture(d_in, (300, 300, 300), ("tanh",) * 3,
                                        n_tri(n)),
        }
    hidden = (width,) * depth
    acts = (act,) * depth
    return {
        "mass": Architecture(d_in, hidden, acts, n_tri(n)),
        "potential": Architecture(d_in, hidden, acts, 1),
        "input": Architecture(d_in, hidden, acts, n * n),
        "dissipation": Architecture(d_in, hidden, acts, n_tri(n)),
    }


def default_policy_archs(n, width=64, embed_angles=False, paper=False):
    d_q = 2 * n if embed_angles else n
    d_k = 1 + (3 * n if embed_angles else 2 * n)
    w = 64 if paper else width
    return {
        "added_potential": Architecture(
            d_q, (w, w, w), ("softplus", "softplus", "tanh"), 1),
        "damping": Architecture(
            d_k, (w, w), ("softplus", "softplus"), n, out_act="softplus"),
    }


class StructuredPHModel:
    """Learnable pH dynamics with guaranteed SPD mass and PSD dissipation."""

    batch_ok = True

    def __init__(self, n, m, archs, params, anchor=0.0, eps_pd=EPS_PD,
                 diss_floor=0.0, embed_angles=False, seed=None):
        if m > n:
            raise ShapeError("input dimension cannot exceed DOF count")
        self.n = n
        self.m = m
        self.archs = archs
        self.params = params
        self.anchor = float(anchor)
        self.eps_pd = float(eps_pd)
        self.diss_floor = float(diss_floor)
        self.embed_angles = bool(embed_angles)
        self.seed = seed
        if archs["input"].out_dim != n * m:
            raise ShapeError("input net must emit n*m entries")

    @classmethod
    def create(cls, n, m, seed=0, width=32, depth=2, embed_angles=False,
               paper=False, eps_pd=EPS_PD, diss_floor=0.0):
        archs = default_model_archs(n, width=width, depth=depth,
                                    embed_angles=embed_angles, paper=paper)
        archs["input"] = Architecture(
            archs["input"].in_dim, archs["input"].hidden,
            archs["input"].acts, n * m)
        rng = np.random.default_rng(seed)
        params = {g: init_mlp_params(a, rng) for g, a in archs.items()}
        return cls(n, m, archs, params, eps_pd=eps_pd, diss_floor=diss_floor,
                   embed_angles=embed_angles, seed=seed)

    # -- component nets ----------------------------------------------------

    def _features(self, q):
        return _angle_features(q, self.embed_angles)

    def mass_inverse(self, q):
        """L^T L + eps_pd*I; symmetric positive definite by construction."""
        vec = mlp_forward(self.params["mass"], self.archs["mass"],
                          self._features(q))
        L = _tril_from_vec(vec, self.n)
        M = _mtm(L)
        eye = np.eye(self.n)
        return M + self.eps_pd * eye

    def potential(self, q):
        out = mlp_forward(self.params["potential"], self.archs["potential"],
                          self._features(q))
        return out[..., 0] - self.anchor

    def input_matrix(self, q):
        out = mlp_forward(self.params["input"], self.archs["input"],
                          self._features(q))
        return out.reshape(out.shape[:-1] + (self.n, self.m))

    def dissipation(self, q):
        vec = mlp_forward(self.params["dissipation"],
                          self.archs["dissipation"], self._features(q))
        L = _tril_from_vec(vec, self.n)
        D = _mtm(L)
        if self.diss_floor > 0.0:
            D = D + self.diss_floor * np.eye(self.n)
        return D

    # -- energy ------------------------------------------------------------

    def hamiltonian(self, z):
        n = self.n
        q, p = z[..., :n], z[..., n:]
        Minv = self.mass_inverse(q)
        kinetic = 0.5 * _dot(p, _mv(Minv, p))
        return kinetic + self.potential(q)

    def grad_hamiltonian(self, z):
        """(dH/dq, dH/dp); traced results stay differentiable w.r.t. params."""
        n = self.n
        if _is_traced(z):
            H = self.hamiltonian(z)
            return np.array(build_grad(H, z), dtype=object)
        z = np.asarray(z, dtype=np.float64)
        q, p = z[..., :n], z[..., n:]
        Minv = self.mass_inverse(q)
        gp = _mv(Minv, p)
        feats = self._features(q)
        gV_f = mlp_input_grad(self.params["potential"],
                              self.archs["potential"], feats)
        gq = _chain_angle_grad(q, gV_f, self.embed_angles)
        # kinetic q-gradient through the Cholesky net: d/dq_i (p^T L^T L p)/2
        # = (L p) . (dL/dq_i p)
        vec = mlp_forward(self.params["mass"], self.archs["mass"], feats)
        L = _tril_from_vec(vec, n)
        Lp = _mv(L, p)
        J = _mlp_jacobian(self.params["mass"], self.archs["mass"], feats)
        rows, cols = np.tril_indices(n)
        for i in range(n):
            if self.embed_angles:
                dvec = (-np.sin(q[..., i:i + 1]) * J[..., i]
                        + np.cos(q[..., i:i + 1]) * J[..., n + i])
            else:
                dvec = J[..., i]
            dL = np.zeros(L.shape)
            dL[..., rows, cols] = dvec
            gq[..., i] = gq[..., i] + _dot(Lp, _mv(dL, p))
        return np.concatenate([gq, gp], axis=-1)

    def vector_field(self, z, u):
        """F_theta grad(H) + G_theta u with the mechanical block structure."""
        n = self.n
        q = z[..., :n]
        u = np.asarray(u) if not isinstance(u, np.ndarray) else u
        if u.shape[-1] != self.m:
            raise ShapeError(f"input length {u.shape[-1]} != m={self.m}")
        gH = self.grad_hamiltonian(z)
        gq, gp = gH[..., :n], gH[..., n:]
        D = self.dissipation(q)
        g = self.input_matrix(q)
        qdot = gp
        pdot = -gq - _mv(D, gp) + _mv(g, u)
        return np.concatenate([qdot, pdot], axis=-1)

    def __call__(self, z, u):
        return self.vector_field(z, u)

    # -- bookkeeping ---------------------------------------------------------

    def set_anchor(self, reference=0.0):
        """Shift the potential so potential(0) equals ``reference``."""
        self.anchor = 0.0
        q0 = np.zeros(self.n)
        self.anchor = float(self.potential(q0)) - float(reference)

    def lift(self, tape):
        """Twin of this model whose parameters are fresh tape leaves.

        Returns (twin, leaf_specs) with leaf names ``theta.<group>.<name>``.
        """
        twin = copy.copy(self)
        twin.params = {}
        specs = {}
        for group, ps in self.params.items():
            lifted = ps.lift(tape)
            twin.params[group] = lifted
            for name, leaves in lifted.items():
                specs[f"theta.{group}.{name}"] = leaves
        return twin, specs

    def flat_params(self):
        return {f"theta.{g}.{k}": v for g, ps in self.params.items()
                for k, v in ps.items()}

    def to_dict(self):
        return {
            "version": 1,
            "kind": "ph-model",
            "n": self.n,
            "m": self.m,
            "arch": {g: a.to_string() for g, a in self.archs.items()},
            "anchor": self.anchor,
            "eps_pd": self.eps_pd,
            "diss_floor": self.diss_floor,
            "embed_angles": self.embed_angles,
            "seeds": self.seed,
            "parameters": {g: {k: v.tolist() for k, v in ps.items()}
                           for g, ps in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d):
        archs = {g: Architecture.parse(s) for g, s in d["arch"].items()}
        params = {g: ParamSet({k: np.array(v) for k, v in ps.items()})
                  for g, ps in d["parameters"].items()}
        return cls(d["n"], d["m"], archs, params, anchor=d["anchor"],
                   eps_pd=d.get("eps_pd", EPS_PD),
                   diss_floor=d.get("diss_floor", 0.0),
                   embed_angles=d.get("embed_angles", False),
                   seed=d.get("seeds"))


def _mlp_jacobian(params, arch, x):
    """d(outputs)/d(inputs), shape (..., out_dim, in_dim), numeric."""
    x = np.asarray(x, dtype=np.float64)
    out = []
    for j in range(arch.out_dim):
        sub = Architecture(arch.in_dim, arch.hidden, arch.acts, 1,
                           arch.out_act)
        picked = {}
        n_layers = len(arch.layer_dims)
        for k in range(n_layers):
            W, b = params[f"W{k}"], params[f"b{k}"]
            if k == n_layers - 1:
                W, b = W[j:j + 1], b[j:j + 1]
            picked[f"W{k}"] = W
            picked[f"b{k}"] = b
        out.append(mlp_input_grad(picked, sub, x))
    return np.stack(out, axis=-2)


class EnergyShapingPolicy:
    """Added potential V*(q) and state/time-dependent damping gain K*(t,z).

    The damping net output passes through softplus and is floored by kappa,
    so K* >= kappa*I holds by construction.
    """

    def __init__(self, n, m, archs, params, kappa=1e-4, target=None,
                 embed_angles=False, seed=None):
        self.n = n
        self.m = m
        self.archs = archs
        self.params = params
        self.kappa = float(kappa)
        self.target = (np.zeros(2 * n) if target is None
                       else np.asarray(target, dtype=np.float64))
        self.embed_angles = bool(embed_angles)
        self.seed = seed
        if archs["damping"].out_dim != m:
            raise ShapeError("damping net must emit m entries")

    @classmethod
    def create(cls, n, m, seed=0, width=64, kappa=1e-4, target=None,
               embed_angles=False, paper=False):
        archs = default_policy_archs(n, width=width,
                                     embed_angles=embed_angles, paper=paper)
        archs["damping"] = Architecture(
            archs["damping"].in_dim, archs["damping"].hidden,
            archs["damping"].acts, m, out_act="softplus")
        rng = np.random.default_rng(seed)
        params = {g: init_mlp_params(a, rng) for g, a in archs.items()}
        return cls(n, m, archs, params, kappa=kappa, target=target,
                   embed_angles=embed_angles, seed=seed)

    def _q_features(self, q):
        return _angle_features(q, self.embed_angles)

    def added_potential(self, q):
        out = mlp_forward(self.params["added_potential"],
                          self.archs["added_potential"], self._q_features(q))
        return out[..., 0]

    def added_potential_grad(self, q):
        if _is_traced(q):
            g_feat = input_gradient_differentiable(
                self.params["added_potential"], self.archs["added_potential"],
                self._q_features(q))
        else:
            g_feat = mlp_input_grad(self.params["added_potential"],
                                    self.archs["added_potential"],
                                    self._q_features(q))
        return _chain_angle_grad(q, g_feat, self.embed_angles)

    def damping_gain(self, t, z):
        """diag(softplus net outputs) + kappa*I, shape (..., m, m)."""
        n = self.n
        traced = _is_traced(z) or _is_traced(t)
        if traced:
            feats = np.concatenate(
                [np.array([t], dtype=object),
                 self._q_features(z[:n]), z[n:]])
        else:
            z = np.asarray(z, dtype=np.float64)
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64),
                                 z.shape[:-1])[..., None]
            feats = np.concatenate(
                [tt, self._q_features(z[..., :n]), z[..., n:]], axis=-1)
        raw = mlp_forward(self.params["damping"], self.archs["damping"],
                          feats)
        if traced:
            Kmat = np.zeros((self.m, self.m), dtype=object)
            for i in range(self.m):
                Kmat[i, i] = raw[i] + self.kappa
            return Kmat
        Kmat = np.zeros(raw.shape[:-1] + (self.m, self.m))
        idx = np.arange(self.m)
        Kmat[..., idx, idx] = raw + self.kappa
        return Kmat

    def lift(self, tape):
        twin = copy.copy(self)
        twin.params = {}
        specs = {}
        for group, ps in self.params.items():
            lifted = ps.lift(tape)
            twin.params[group] = lifted
            for name, leaves in lifted.items():
                specs[f"phi.{group}.{name}"] = leaves
        return twin, specs

    def flat_params(self):
        return {f"phi.{g}.{k}": v for g, ps in self.params.items()
                for k, v in ps.items()}

    def to_dict(self):
        return {
            "version": 1,
            "kind": "policy",
            "n": self.n,
            "m": self.m,
            "arch": {g: a.to_string() for g, a in self.archs.items()},
            "kappa": self.kappa,
            "target": self.target.tolist(),
            "embed_angles": self.embed_angles,
            "seeds": self.seed,
            "parameters": {g: {k: v.tolist() for k, v in ps.items()}
                           for g, ps in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d):
        archs = {g: Architecture.parse(s) for g, s in d["arch"].items()}
        params = {g: ParamSet({k: np.array(v) for k, v in ps.items()})
                  for g, ps in d["parameters"].items()}
        return cls(d["n"], d["m"], archs, params, kappa=d["kappa"],
                   target=np.array(d["target"]),
                   embed_angles=d.get("embed_angles", False),
                   seed=d.get("seeds"))


def save_checkpoint(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    if d["kind"] == "ph-model":
        return StructuredPHModel.from_dict(d)
    if d["kind"] == "policy":
        return EnergyShapingPolicy.from_dict(d)
    raise ValueError(f"unknown checkpoint kind {d['kind']!r}")
