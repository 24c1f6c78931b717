"""Reverse-mode automatic differentiation over flat scalar tapes.

A :class:`Tape` records every scalar operation as a node (op code + parent
indices).  Tracing is done once per computation structure; the recorded
graph is then compiled into a :class:`TapeProgram` and re-executed with new
leaf values over many batch lanes by the kernels in ``_kernels``.

Second-order paths (gradients of gradients, as needed when the gradient of
a learned scalar appears inside a dynamics rollout) are obtained by
:func:`build_grad`, which unrolls the backward pass of a traced scalar into
first-class graph operations, so the result is itself differentiable by an
ordinary reverse sweep.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Array or architecture dimensions do not match."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class ContractError(TypeError):
    """Operation applied outside its contract (e.g. non-scalar root)."""


class Var:
    """Handle to one scalar node on a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape, i):
        self.tape = tape
        self.i = i

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.const(float(other))

    def __add__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_ADD, self.i, o.i)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_SUB, self.i, o.i)

    def __rsub__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_SUB, o.i, self.i)

    def __mul__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_MUL, self.i, o.i)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_DIV, self.i, o.i)

    def __rtruediv__(self, other):
        o = self._lift(other)
        return self.tape._push(K.OP_DIV, o.i, self.i)

    def __neg__(self):
        return self.tape._push(K.OP_NEG, self.i)

    def __pow__(self, c):
        if isinstance(c, Var):
            raise ContractError("only constant exponents are supported")
        return self.tape._push(K.OP_POW, self.i, aux=float(c))

    # methods below are what numpy ufuncs dispatch to on object arrays
    def tanh(self):
        return self.tape._push(K.OP_TANH, self.i)

    def exp(self):
        return self.tape._push(K.OP_EXP, self.i)

    def log(self):
        return self.tape._push(K.OP_LOG, self.i)

    def sin(self):
        return self.tape._push(K.OP_SIN, self.i)

    def cos(self):
        return self.tape._push(K.OP_COS, self.i)

    def sqrt(self):
        return self.tape._push(K.OP_POW, self.i, aux=0.5)

    def softplus(self):
        return self.tape._push(K.OP_SOFTPLUS, self.i)

    def sigmoid(self):
        return self.tape._push(K.OP_SIGMOID, self.i)

    def relu(self):
        return self.tape._push(K.OP_RELU, self.i)

    def step(self):
        return self.tape._push(K.OP_STEP, self.i)

    def __repr__(self):
        return f"Var({K.OP_NAMES[self.tape.ops[self.i]]}@{self.i})"


class Tape:
    """Append-only scalar computation graph.

    Parents always precede children in creation order, so a single forward
    sweep evaluates the graph and a single reverse sweep accumulates exact
    adjoints.  Each worker owns its tape; tapes are never shared.
    """

    def __init__(self):
        self.ops = []
        self.pa = []
        self.pb = []
        self.aux = []
        self._const_cache = {}

    def __len__(self):
        return len(self.ops)

    def _push(self, op, a=-1, b=-1, aux=0.0):
        self.ops.append(op)
        self.pa.append(a)
        self.pb.append(b)
        self.aux.append(aux)
        return Var(self, len(self.ops) - 1)

    def leaf(self):
        return self._push(K.OP_LEAF)

    def leaves(self, shape):
        """Object array of fresh leaves with the given shape."""
        n = int(np.prod(shape))
        flat = np.empty(n, dtype=object)
        for j in range(n):
            flat[j] = self.leaf()
        return flat.reshape(shape)

    def const(self, c):
        c = float(c)
        v = self._const_cache.get(c)
        if v is None:
            v = self._push(K.OP_CONST, aux=c)
            self._const_cache[c] = v
        return v


def _is_traced(x):
    if isinstance(x, Var):
        return True
    return isinstance(x, np.ndarray) and x.dtype == object


def _omap(f, x):
    out = np.empty(x.size, dtype=object)
    flat = x.ravel()
    for j in range(x.size):
        out[j] = f(flat[j])
    return out.reshape(x.shape)


def tanh(x):
    return x.tanh() if isinstance(x, Var) else np.tanh(x)


def exp(x):
    return x.exp() if isinstance(x, Var) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Var) else np.log(x)


def sin(x):
    return x.sin() if isinstance(x, Var) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Var) else np.cos(x)


def softplus(x):
    """log(1+exp(x)), stable branch form for |x| > 20."""
    if isinstance(x, Var):
        return x.softplus()
    if isinstance(x, np.ndarray) and x.dtype == object:
        return _omap(lambda v: v.softplus(), x)
    return K.softplus_np(x)


def sigmoid(x):
    if isinstance(x, Var):
        return x.sigmoid()
    if isinstance(x, np.ndarray) and x.dtype == object:
        return _omap(lambda v: v.sigmoid(), x)
    return K.sigmoid_np(x)


def relu(x):
    if isinstance(x, Var):
        return x.relu()
    if isinstance(x, np.ndarray) and x.dtype == object:
        return _omap(lambda v: v.relu(), x)
    return np.maximum(x, 0.0)


def build_grad(root, wrt):
    """Unroll the backward pass of a traced scalar into graph operations.

    Returns one Var per entry of ``wrt`` representing d(root)/d(entry).
    Because the result is made of ordinary nodes, anything computed from it
    remains differentiable by the outer reverse sweep (second-order path).
    """
    if not isinstance(root, Var):
        raise ContractError("root of build_grad must be a traced scalar")
    wrt = [w for w in np.asarray(wrt, dtype=object).ravel()]
    tape = root.tape
    n = root.i + 1
    ops, pa, pb = tape.ops, tape.pa, tape.pb

    depends = np.zeros(n, dtype=bool)
    for w in wrt:
        if w.tape is not tape:
            raise ContractError("wrt vars must live on the root's tape")
        depends[w.i] = True
    for i in range(n):
        a, b = pa[i], pb[i]
        if (a >= 0 and depends[a]) or (b >= 0 and depends[b]):
            depends[i] = True

    reaches = np.zeros(n, dtype=bool)
    reaches[root.i] = True
    for i in range(n - 1, -1, -1):
        if reaches[i]:
            if pa[i] >= 0:
                reaches[pa[i]] = True
            if pb[i] >= 0:
                reaches[pb[i]] = True

    adj = {root.i: tape.const(1.0)}

    def _acc(j, contrib):
        prev = adj.get(j)
        adj[j] = contrib if prev is None else prev + contrib

    for i in range(root.i, -1, -1):
        if i not in adj or not (reaches[i] and depends[i]):
            continue
        g = adj[i]
        o = ops[i]
        if o in (K.OP_LEAF, K.OP_CONST):
            continue
        ia, ib = pa[i], pb[i]
        va = Var(tape, ia)
        y = Var(tape, i)
        da = depends[ia]
        db = ib >= 0 and depends[ib]
        if o == K.OP_ADD:
            if da:
                _acc(ia, g)
            if db:
                _acc(ib, g)
        elif o == K.OP_SUB:
            if da:
                _acc(ia, g)
            if db:
                _acc(ib, -g)
        elif o == K.OP_MUL:
            if da:
                _acc(ia, g * Var(tape, ib))
            if db:
                _acc(ib, g * va)
        elif o == K.OP_DIV:
            vb = Var(tape, ib)
            if da:
                _acc(ia, g / vb)
            if db:
                _acc(ib, -(g * y) / vb)
        elif o == K.OP_NEG:
            if da:
                _acc(ia, -g)
        elif o == K.OP_POW:
            c = tape.aux[i]
            if da:
                _acc(ia, g * c * va ** (c - 1.0))
        elif o == K.OP_RECIP:
            if da:
                _acc(ia, -(g * y * y))
        elif o == K.OP_TANH:
            if da:
                _acc(ia, g * (1.0 - y * y))
        elif o == K.OP_SOFTPLUS:
            if da:
                _acc(ia, g * va.sigmoid())
        elif o == K.OP_SIGMOID:
            if da:
                _acc(ia, g * y * (1.0 - y))
        elif o == K.OP_RELU:
            if da:
                _acc(ia, g * va.step())
        elif o == K.OP_STEP:
            pass  # piecewise constant: zero derivative everywhere defined
        elif o == K.OP_LOG:
            if da:
                _acc(ia, g / va)
        elif o == K.OP_EXP:
            if da:
                _acc(ia, g * y)
        elif o == K.OP_SIN:
            if da:
                _acc(ia, g * va.cos())
        elif o == K.OP_COS:
            if da:
                _acc(ia, -(g * va.sin()))
        else:
            raise ContractError(f"no derivative rule for op {o}")

    zero = tape.const(0.0)
    return [adj.get(w.i, zero) for w in wrt]


def _slot_indices(spec):
    """Flatten a Var / object-array-of-Vars spec to an index array + shape."""
    if isinstance(spec, Var):
        return np.array([spec.i], dtype=np.int64), ()
    arr = np.asarray(spec, dtype=object)
    idx = np.array([v.i for v in arr.ravel()], dtype=np.int64)
    return idx, arr.shape


class TapeProgram:
    """Frozen tape with named input slots and outputs, executed over lanes.

    ``forward`` accepts, per input name, either an array of the input's
    traced shape (broadcast to every lane) or that shape plus a trailing
    lane axis.  ``backward`` seeds output adjoints and returns the adjoint
    array (shape + lane axis) for every input; it must follow a ``forward``
    on the same program, whose values it reuses.
    """

    def __init__(self, tape, inputs, outputs):
        self.ops = np.asarray(tape.ops, dtype=np.int8)
        self.pa = np.asarray(tape.pa, dtype=np.int64)
        self.pb = np.asarray(tape.pb, dtype=np.int64)
        self.aux = np.asarray(tape.aux, dtype=np.float64)
        self.inputs = {k: _slot_indices(v) for k, v in inputs.items()}
        self.outputs = {k: _slot_indices(v) for k, v in outputs.items()}
        self._const_rows = np.flatnonzero(self.ops == K.OP_CONST)
        self._const_vals = self.aux[self._const_rows]
        self._vals = None
        self._adj = None
        self.n_nodes = len(self.ops)

    def _buffers(self, lanes):
        if self._vals is None or self._vals.shape[1] != lanes:
            self._vals = np.empty((self.n_nodes, lanes), dtype=np.float64)
            self._adj = np.empty((self.n_nodes, lanes), dtype=np.float64)
            self._vals[self._const_rows] = self._const_vals[:, None]
        return self._vals, self._adj

    def forward(self, feeds, lanes=1):
        vals, _ = self._buffers(lanes)
        for name, (idx, shape) in self.inputs.items():
            x = np.asarray(feeds[name], dtype=np.float64)
            if x.shape == shape:
                vals[idx] = x.reshape(-1, 1)
            else:
                vals[idx] = x.reshape(len(idx), lanes)
        K.forward_sweep(self.ops, self.pa, self.pb, self.aux, vals)
        out = {}
        for name, (idx, shape) in self.outputs.items():
            lanes_ax = (lanes,)
            out[name] = vals[idx].reshape(shape + lanes_ax).copy()
        return out

    def backward(self, seeds):
        if self._vals is None:
            raise ContractError("backward requires a preceding forward")
        vals, adj = self._vals, self._adj
        lanes = vals.shape[1]
        adj[:] = 0.0
        for name, seed in seeds.items():
            idx, shape = self.outputs[name]
            s = np.asarray(seed, dtype=np.float64)
            if s.shape == shape:
                adj[idx] += s.reshape(-1, 1)
            else:
                adj[idx] += s.reshape(len(idx), lanes)
        K.backward_sweep(self.ops, self.pa, self.pb, self.aux, vals, adj)
        out = {}
        for name, (idx, shape) in self.inputs.items():
            out[name] = adj[idx].reshape(shape + (lanes,)).copy()
        return out

    def output_values(self, name):
        """Values of an output from the last forward, shape + lane axis."""
        idx, shape = self.outputs[name]
        lanes = self._vals.shape[1]
        return self._vals[idx].reshape(shape + (lanes,)).copy()


# ---------------------------------------------------------------------------
# Fully connected networks


ACTIVATIONS = {"tanh": tanh, "softplus": softplus, "relu": relu,
               "linear": None}


@dataclass(frozen=True)
class Architecture:
    """Fully connected net: in_dim - h1 act1 - ... - out_dim [out_act]."""

    in_dim: int
    hidden: tuple = ()
    acts: tuple = ()
    out_dim: int = 1
    out_act: str = "linear"

    def __post_init__(self):
        if len(self.hidden) != len(self.acts):
            raise ShapeError("one activation per hidden layer required")
        for a in self.acts + (self.out_act,):
            if a not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {a!r}")

    @property
    def layer_dims(self):
        dims = (self.in_dim,) + tuple(self.hidden) + (self.out_dim,)
        return list(zip(dims[:-1], dims[1:]))

    def to_string(self):
        parts = [str(self.in_dim)]
        parts += [f"{w} {a}" for w, a in zip(self.hidden, self.acts)]
        tail = str(self.out_dim)
        if self.out_act != "linear":
            tail += f" {self.out_act}"
        parts.append(tail)
        return "-".join(parts)

    @classmethod
    def parse(cls, s):
        """Parse e.g. ``"2-50 tanh-50 tanh-1"`` or ``"3-64 softplus-1 softplus"``."""
        tokens = [t.strip() for t in s.split("-")]
        if len(tokens) < 2:
            raise ShapeError(f"cannot parse architecture {s!r}")
        in_dim = int(tokens[0])
        hidden, acts = [], []
        for tok in tokens[1:-1]:
            w, a = tok.split()
            hidden.append(int(w))
            acts.append(a)
        last = tokens[-1].split()
        out_dim = int(last[0])
        out_act = last[1] if len(last) > 1 else "linear"
        return cls(in_dim, tuple(hidden), tuple(acts), out_dim, out_act)


class ParamSet:
    """Named groups of real arrays (per-layer weights and biases)."""

    def __init__(self, arrays):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def size(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return ParamSet({k: v.copy() for k, v in self.arrays.items()})

    def pack(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unpack(self, vec):
        out, off = {}, 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(vec[off:off + a.size]).reshape(a.shape)
            off += a.size
        return ParamSet(out)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def lift(self, tape):
        """Object-array twin of this set, with fresh leaves on ``tape``."""
        return {k: tape.leaves(a.shape) for k, a in self.arrays.items()}


def init_mlp_params(arch, rng):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    arrays = {}
    for k, (din, dout) in enumerate(arch.layer_dims):
        bound = 1.0 / np.sqrt(din)
        arrays[f"W{k}"] = rng.uniform(-bound, bound, size=(dout, din))
        arrays[f"b{k}"] = np.zeros(dout)
    return ParamSet(arrays)


def mlp_forward(params, arch, x):
    """Affine-then-activation evaluation; works on floats and traced vars.

    ``x`` may be (in_dim,), (batch, in_dim), or an object array of Vars.
    """
    traced = _is_traced(x)
    h = np.asarray(x) if not isinstance(x, np.ndarray) else x
    if h.shape[-1] != arch.in_dim:
        raise ShapeError(
            f"input length {h.shape[-1]} != architecture in_dim {arch.in_dim}")
    if not traced:
        h = np.asarray(h, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite network input")
    n_layers = len(arch.layer_dims)
    for k in range(n_layers):
        W = params[f"W{k}"]
        b = params[f"b{k}"]
        h = np.dot(h, W.T) + b
        act = arch.acts[k] if k < n_layers - 1 else arch.out_act
        fn = ACTIVATIONS[act]
        if fn is not None:
            h = fn(h)
    return h


def _act_deriv(name, pre, post):
    if name == "linear":
        return np.ones_like(post)
    if name == "tanh":
        return 1.0 - post * post
    if name == "softplus":
        return K.sigmoid_np(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    raise ShapeError(f"unknown activation {name!r}")


def mlp_input_grad(params, arch, x):
    """Numeric d(output)/dx by explicit backprop; scalar-output nets only.

    Accepts (in_dim,) or (batch, in_dim); returns the matching shape.
    """
    if arch.out_dim != 1:
        raise ContractError("input gradient requires a scalar-output net")
    x = np.asarray(x, dtype=np.float64)
    h = x
    pres, posts, acts = [], [], []
    n_layers = len(arch.layer_dims)
    for k in range(n_layers):
        pre = np.dot(h, params[f"W{k}"].T) + params[f"b{k}"]
        act = arch.acts[k] if k < n_layers - 1 else arch.out_act
        fn = ACTIVATIONS[act]
        h = fn(pre) if fn is not None else pre
        pres.append(pre)
        posts.append(h)
        acts.append(act)
    g = np.ones_like(posts[-1])
    for k in range(n_layers - 1, -1, -1):
        g = g * _act_deriv(acts[k], pres[k], posts[k])
        g = np.dot(g, params[f"W{k}"])
    return g


def input_gradient_differentiable(params, arch, x):
    """d(scalar net output)/dx with the result usable in further tracing.

    On traced inputs this unrolls the backward pass as first-class graph
    operations (so downstream losses stay differentiable w.r.t. params);
    on numeric inputs it is the explicit numpy backprop.
    """
    if arch.out_dim != 1:
        raise ContractError("input gradient requires a scalar-output net")
    if _is_traced(x) or any(_is_traced(w) for w in
                            (params.values() if isinstance(params, dict) else [])):
        xs = np.asarray(x, dtype=object)
        y = mlp_forward(params, arch, xs)
        root = y[0] if isinstance(y, np.ndarray) else y
        g = build_grad(root, xs)
        return np.array(g, dtype=object)
    return mlp_input_grad(params, arch, x)


# ---------------------------------------------------------------------------
# Gradient evaluation and checking helpers


def _lift_args(tape, args):
    lifted, feeds = [], {}
    for j, a in enumerate(args):
        if isinstance(a, ParamSet):
            lv = a.lift(tape)
            lifted.append(lv)
            for k, leafs in lv.items():
                feeds[f"a{j}.{k}"] = (leafs, a[k])
        else:
            arr = np.asarray(a, dtype=np.float64)
            lv = tape.leaves(arr.shape)
            lifted.append(lv if arr.shape else lv.item())
            feeds[f"a{j}"] = (lv, arr)
    return lifted, feeds


def _trace_scalar(f, args):
    tape = Tape()
    lifted, feeds = _lift_args(tape, args)
    root = f(*lifted)
    if isinstance(root, np.ndarray):
        if root.size != 1:
            raise ContractError("gradient target must be a single scalar node")
        root = root.ravel()[0]
    if not isinstance(root, Var):
        root = tape.const(float(root))
    prog = TapeProgram(
        tape,
        inputs={k: v[0] for k, v in feeds.items()},
        outputs={"y": root},
    )
    values = {k: v[1] for k, v in feeds.items()}
    return prog, values


def _pack_grads(args, raw):
    grads = []
    for j, a in enumerate(args):
        if isinstance(a, ParamSet):
            grads.append(ParamSet(
                {k: raw[f"a{j}.{k}"][..., 0] for k in a}))
        else:
            g = raw[f"a{j}"][..., 0]
            grads.append(g if np.asarray(a).shape else float(g))
    return grads


def grad(f, *args):
    """Gradients of a traced scalar function at numeric arguments.

    ``f`` is called with traced twins of ``args`` (arrays become object
    arrays of leaves, ParamSets become dicts of leaf arrays) and must
    return a single scalar node.  Returns one gradient per argument, with
    matching structure.
    """
    prog, values = _trace_scalar(f, args)
    prog.forward(values)
    raw = prog.backward({"y": np.ones(())})
    grads = _pack_grads(args, raw)
    return grads[0] if len(args) == 1 else tuple(grads)


@dataclass
class GradCheck:
    """Result of a finite-difference comparison."""

    max_rel_error: float
    unreliable: bool = False  # a relu/step kink lies within the FD stencil
    n_checked: int = 0


def check_gradient(f, args, h=1e-5, sample=None, rng=None):
    """Central-difference check of reverse-mode gradients of ``f``.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).  If a
    relu or step node input sits within ``h`` of its kink the check is
    flagged unreliable rather than failed.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    if not isinstance(args, (tuple, list)):
        args = (args,)
    prog, values = _trace_scalar(f, args)
    prog.forward(values)
    analytic = prog.backward({"y": np.ones(())})

    kink_rows = np.flatnonzero(
        (prog.ops == K.OP_RELU) | (prog.ops == K.OP_STEP))
    unreliable = False
    if kink_rows.size:
        kink_inputs = prog._vals[prog.pa[kink_rows], 0]
        unreliable = bool(np.any(np.abs(kink_inputs) <= h))

    def eval_at(feeds):
        return float(prog.forward(feeds)["y"][0])

    coords = []
    for name, v in values.items():
        for j in range(np.asarray(v).size):
            coords.append((name, j))
    if sample is not None and sample < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    feeds = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    for name, j in coords:
        base = feeds[name].ravel()[j]
        feeds[name].ravel()[j] = base + h
        fp = eval_at(feeds)
        feeds[name].ravel()[j] = base - h
        fm = eval_at(feeds)
        feeds[name].ravel()[j] = base
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[name].ravel()[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return GradCheck(max_rel_error=worst, unreliable=unreliable,
                     n_checked=len(coords))
