"""Flat-tape execution kernels.

A recorded computation graph is stored as parallel arrays (op code, parent
indices, auxiliary constant) in creation order.  The two hot loops --
forward value sweep and reverse adjoint sweep -- run over that layout for
all batch lanes at once.  The numba-jitted versions are used by default;
set ``PHCTRL_DISABLE_NUMBA=1`` to select the pure-numpy fallback (same
semantics, slower).  ``phctrl.benchmark`` compares the two.
"""

import os

import numpy as np

OP_LEAF = 0
OP_CONST = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_POW = 7  # x ** aux, constant exponent
OP_RECIP = 8
OP_TANH = 9
OP_SOFTPLUS = 10
OP_SIGMOID = 11
OP_RELU = 12
OP_STEP = 13  # heaviside with step(0)=0; derivative taken as 0 everywhere
OP_LOG = 14
OP_EXP = 15
OP_SIN = 16
OP_COS = 17

OP_NAMES = {
    OP_LEAF: "leaf", OP_CONST: "constant", OP_ADD: "add", OP_SUB: "sub",
    OP_MUL: "mul", OP_DIV: "div", OP_NEG: "neg", OP_POW: "power",
    OP_RECIP: "reciprocal", OP_TANH: "tanh", OP_SOFTPLUS: "softplus",
    OP_SIGMOID: "sigmoid", OP_RELU: "relu", OP_STEP: "step", OP_LOG: "log",
    OP_EXP: "exp", OP_SIN: "sin", OP_COS: "cos",
}

NUMBA_DISABLED = os.environ.get("PHCTRL_DISABLE_NUMBA", "0") == "1"


def softplus_np(x):
    """log(1 + exp(x)) in the branch form that is stable for |x| > 20."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward_numpy(op, pa, pb, aux, vals):
    """Value sweep in creation order; vals is (n_nodes, lanes).

    Leaf and const rows must be preloaded by the caller.
    """
    for i in range(op.shape[0]):
        o = op[i]
        if o <= OP_CONST:
            continue
        a = vals[pa[i]]
        if o == OP_ADD:
            vals[i] = a + vals[pb[i]]
        elif o == OP_SUB:
            vals[i] = a - vals[pb[i]]
        elif o == OP_MUL:
            vals[i] = a * vals[pb[i]]
        elif o == OP_DIV:
            vals[i] = a / vals[pb[i]]
        elif o == OP_NEG:
            vals[i] = -a
        elif o == OP_POW:
            vals[i] = a ** aux[i]
        elif o == OP_RECIP:
            vals[i] = 1.0 / a
        elif o == OP_TANH:
            vals[i] = np.tanh(a)
        elif o == OP_SOFTPLUS:
            vals[i] = softplus_np(a)
        elif o == OP_SIGMOID:
            vals[i] = sigmoid_np(a)
        elif o == OP_RELU:
            vals[i] = np.maximum(a, 0.0)
        elif o == OP_STEP:
            vals[i] = (a > 0.0).astype(np.float64)
        elif o == OP_LOG:
            vals[i] = np.log(a)
        elif o == OP_EXP:
            vals[i] = np.exp(a)
        elif o == OP_SIN:
            vals[i] = np.sin(a)
        elif o == OP_COS:
            vals[i] = np.cos(a)
        else:
            raise ValueError(f"unknown op code {o}")


def backward_numpy(op, pa, pb, aux, vals, adj):
    """Adjoint sweep in reverse creation order; seeds must be in adj."""
    for i in range(op.shape[0] - 1, -1, -1):
        o = op[i]
        if o <= OP_CONST:
            continue
        g = adj[i]
        ia = pa[i]
        if o == OP_ADD:
            adj[ia] += g
            adj[pb[i]] += g
        elif o == OP_SUB:
            adj[ia] += g
            adj[pb[i]] -= g
        elif o == OP_MUL:
            adj[ia] += g * vals[pb[i]]
            adj[pb[i]] += g * vals[ia]
        elif o == OP_DIV:
            b = vals[pb[i]]
            adj[ia] += g / b
            adj[pb[i]] -= g * vals[i] / b
        elif o == OP_NEG:
            adj[ia] -= g
        elif o == OP_POW:
            c = aux[i]
            adj[ia] += g * c * vals[ia] ** (c - 1.0)
        elif o == OP_RECIP:
            adj[ia] -= g * vals[i] * vals[i]
        elif o == OP_TANH:
            y = vals[i]
            adj[ia] += g * (1.0 - y * y)
        elif o == OP_SOFTPLUS:
            adj[ia] += g * sigmoid_np(vals[ia])
        elif o == OP_SIGMOID:
            y = vals[i]
            adj[ia] += g * y * (1.0 - y)
        elif o == OP_RELU:
            adj[ia] += g * (vals[ia] > 0.0)
        elif o == OP_STEP:
            pass
        elif o == OP_LOG:
            adj[ia] += g / vals[ia]
        elif o == OP_EXP:
            adj[ia] += g * vals[i]
        elif o == OP_SIN:
            adj[ia] += g * np.cos(vals[ia])
        elif o == OP_COS:
            adj[ia] -= g * np.sin(vals[ia])
        else:
            raise ValueError(f"unknown op code {o}")


forward_numba = None
backward_numba = None
HAS_NUMBA = False

if not NUMBA_DISABLED:
    try:
        import math

        from numba import njit

        @njit(cache=True)
        def _forward_numba(op, pa, pb, aux, vals):
            n, lanes = vals.shape
            for i in range(n):
                o = op[i]
                if o <= 1:
                    continue
                ia = pa[i]
                ib = pb[i]
                c = aux[i]
                if o == 2:
                    for k in range(lanes):
                        vals[i, k] = vals[ia, k] + vals[ib, k]
                elif o == 3:
                    for k in range(lanes):
                        vals[i, k] = vals[ia, k] - vals[ib, k]
                elif o == 4:
                    for k in range(lanes):
                        vals[i, k] = vals[ia, k] * vals[ib, k]
                elif o == 5:
                    for k in range(lanes):
                        vals[i, k] = vals[ia, k] / vals[ib, k]
                elif o == 6:
                    for k in range(lanes):
                        vals[i, k] = -vals[ia, k]
                elif o == 7:
                    for k in range(lanes):
                        vals[i, k] = vals[ia, k] ** c
                elif o == 8:
                    for k in range(lanes):
                        vals[i, k] = 1.0 / vals[ia, k]
                elif o == 9:
                    for k in range(lanes):
                        vals[i, k] = math.tanh(vals[ia, k])
                elif o == 10:
                    for k in range(lanes):
                        x = vals[ia, k]
                        if x > 0.0:
                            vals[i, k] = x + math.log1p(math.exp(-x))
                        else:
                            vals[i, k] = math.log1p(math.exp(x))
                elif o == 11:
                    for k in range(lanes):
                        x = vals[ia, k]
                        if x >= 0.0:
                            vals[i, k] = 1.0 / (1.0 + math.exp(-x))
                        else:
                            e = math.exp(x)
                            vals[i, k] = e / (1.0 + e)
                elif o == 12:
                    for k in range(lanes):
                        x = vals[ia, k]
                        vals[i, k] = x if x > 0.0 else 0.0
                elif o == 13:
                    for k in range(lanes):
                        vals[i, k] = 1.0 if vals[ia, k] > 0.0 else 0.0
                elif o == 14:
                    for k in range(lanes):
                        vals[i, k] = math.log(vals[ia, k])
                elif o == 15:
                    for k in range(lanes):
                        vals[i, k] = math.exp(vals[ia, k])
                elif o == 16:
                    for k in range(lanes):
                        vals[i, k] = math.sin(vals[ia, k])
                elif o == 17:
                    for k in range(lanes):
                        vals[i, k] = math.cos(vals[ia, k])

        @njit(cache=True)
        def _backward_numba(op, pa, pb, aux, vals, adj):
            n, lanes = vals.shape
            for i in range(n - 1, -1, -1):
                o = op[i]
                if o <= 1:
                    continue
                ia = pa[i]
                ib = pb[i]
                c = aux[i]
                if o == 2:
                    for k in range(lanes):
                        g = adj[i, k]
                        adj[ia, k] += g
                        adj[ib, k] += g
                elif o == 3:
                    for k in range(lanes):
                        g = adj[i, k]
                        adj[ia, k] += g
                        adj[ib, k] -= g
                elif o == 4:
                    for k in range(lanes):
                        g = adj[i, k]
                        adj[ia, k] += g * vals[ib, k]
                        adj[ib, k] += g * vals[ia, k]
                elif o == 5:
                    for k in range(lanes):
                        g = adj[i, k]
                        b = vals[ib, k]
                        adj[ia, k] += g / b
                        adj[ib, k] -= g * vals[i, k] / b
                elif o == 6:
                    for k in range(lanes):
                        adj[ia, k] -= adj[i, k]
                elif o == 7:
                    for k in range(lanes):
                        adj[ia, k] += adj[i, k] * c * vals[ia, k] ** (c - 1.0)
                elif o == 8:
                    for k in range(lanes):
                        adj[ia, k] -= adj[i, k] * vals[i, k] * vals[i, k]
                elif o == 9:
                    for k in range(lanes):
                        y = vals[i, k]
                        adj[ia, k] += adj[i, k] * (1.0 - y * y)
                elif o == 10:
                    for k in range(lanes):
                        x = vals[ia, k]
                        if x >= 0.0:
                            s = 1.0 / (1.0 + math.exp(-x))
                        else:
                            e = math.exp(x)
                            s = e / (1.0 + e)
                        adj[ia, k] += adj[i, k] * s
                elif o == 11:
                    for k in range(lanes):
                        y = vals[i, k]
                        adj[ia, k] += adj[i, k] * y * (1.0 - y)
                elif o == 12:
                    for k in range(lanes):
                        if vals[ia, k] > 0.0:
                            adj[ia, k] += adj[i, k]
                elif o == 13:
                    pass
                elif o == 14:
                    for k in range(lanes):
                        adj[ia, k] += adj[i, k] / vals[ia, k]
                elif o == 15:
                    for k in range(lanes):
                        adj[ia, k] += adj[i, k] * vals[i, k]
                elif o == 16:
                    for k in range(lanes):
                        adj[ia, k] += adj[i, k] * math.cos(vals[ia, k])
                elif o == 17:
                    for k in range(lanes):
                        adj[ia, k] -= adj[i, k] * math.sin(vals[ia, k])

        forward_numba = _forward_numba
        backward_numba = _backward_numba
        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

_BACKENDS = {"numpy": (forward_numpy, backward_numpy)}
if HAS_NUMBA:
    _BACKENDS["numba"] = (forward_numba, backward_numba)

_current = "numba" if HAS_NUMBA else "numpy"
forward_sweep, backward_sweep = _BACKENDS[_current]


def use_backend(name):
    """Select the sweep implementation ("numba" or "numpy") globally."""
    global _current, forward_sweep, backward_sweep
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable "
                         f"(have {sorted(_BACKENDS)})")
    _current = name
    forward_sweep, backward_sweep = _BACKENDS[name]
    return name


def current_backend():
    return _current
