"""Benchmark the numba-jitted tape kernels against the numpy fallback.

Builds the two training step programs actually used by the optimizer (one
RK4 system-identification step and one closed-loop policy step), then times
forward and forward+backward sweeps under both backends and checks that
they agree.

Run:  python -m phctrl.benchmark [--width W] [--lanes L] [--repeats R]
"""

import argparse
import time

import numpy as np

from . import _kernels as K
from .phmodel import EnergyShapingPolicy, StructuredPHModel
from .training import build_policy_step_program, build_sysid_step_program


def _time_program(prog, feeds, lanes, repeats, with_backward):
    seeds = {name: np.ones(shape + (lanes,))
             for name, (idx, shape) in prog.outputs.items()}
    prog.forward(feeds, lanes=lanes)  # warmup / jit compile
    if with_backward:
        prog.backward(seeds)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        prog.forward(feeds, lanes=lanes)
        if with_backward:
            prog.backward(seeds)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(width=24, lanes=64, repeats=5, verbose=True):
    model = StructuredPHModel.create(1, 1, seed=0, width=width)
    policy = EnergyShapingPolicy.create(1, 1, seed=1, width=width,
                                        target=np.array([np.pi, 0.0]))
    rng = np.random.default_rng(0)

    cases = {
        "sysid-step": (
            build_sysid_step_program(model, 1e-2),
            {**model.flat_params(),
             "z": rng.normal(size=(2, lanes)),
             "u": rng.normal(size=(1, lanes)),
             "zdot": rng.normal(size=(2, lanes))}),
        "policy-step": (
            build_policy_step_program(model, policy, 2e-2),
            {**model.flat_params(), **policy.flat_params(),
             "z": rng.normal(size=(2, lanes)),
             "t": np.asarray(0.0), "zd": np.array([np.pi, 0.0]),
             "rho": np.asarray(1e-3), "qdiag": np.array([100.0, 10.0])}),
    }

    results = {}
    for name, (prog, feeds) in cases.items():
        row = {"nodes": prog.n_nodes, "lanes": lanes}
        outs = {}
        for backend in sorted(K._BACKENDS):
            K.use_backend(backend)
            row[f"{backend}_fwd"] = _time_program(prog, feeds, lanes,
                                                  repeats, False)
            row[f"{backend}_fwdbwd"] = _time_program(prog, feeds, lanes,
                                                     repeats, True)
            outs[backend] = {k: v.copy()
                             for k, v in prog.forward(feeds,
                                                      lanes=lanes).items()}
        if len(outs) == 2:
            diff = max(np.max(np.abs(outs["numba"][k] - outs["numpy"][k]))
                       for k in outs["numpy"])
            row["max_abs_diff"] = float(diff)
            row["speedup_fwdbwd"] = row["numpy_fwdbwd"] / row["numba_fwdbwd"]
        results[name] = row
        if verbose:
            print(f"\n{name}: {row['nodes']} nodes, {lanes} lanes")
            for backend in sorted(K._BACKENDS):
                print(f"  {backend:>6}: fwd {row[f'{backend}_fwd']*1e3:8.2f} ms"
                      f"   fwd+bwd {row[f'{backend}_fwdbwd']*1e3:8.2f} ms")
            if "speedup_fwdbwd" in row:
                print(f"  speedup (fwd+bwd): {row['speedup_fwdbwd']:.1f}x"
                      f"   max |numba - numpy|: {row['max_abs_diff']:.3g}")
    K.use_backend("numba" if K.HAS_NUMBA and not K.NUMBA_DISABLED
                  else "numpy")
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=int, default=24)
    ap.add_argument("--lanes", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    run_benchmark(width=args.width, lanes=args.lanes, repeats=args.repeats)


if __name__ == "__main__":
    main()
