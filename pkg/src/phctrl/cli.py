"""Batch command-line entry points for reproducible runs.

Subcommands: gen-data, train-system, train-policy, alternate, evaluate,
certify, export-plots.  Every run writes its resolved configuration next to
its artifacts; deterministic mode (the default) forces single-worker
execution so identical seeds give byte-identical history files.

Exit codes: 0 success, 1 validation/usage error, 2 numerical abort.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .control import ControllerHandle
from .evaluation import (CertificateSpec, certify, effort_metrics,
                         error_bands, terminal_position_error, wrapped_norm)
from .odeint import DivergenceError, constant_input, rollout_batch
from .phmodel import (EnergyShapingPolicy, StructuredPHModel,
                      load_checkpoint, save_checkpoint)
from .plants import (PlantSpec, make_plant, planar_pendulum,
                     random_planar_pendulum, sample_ics,
                     step_excited_dataset, torsional_pendulum,
                     two_link_torsional, Dataset)
from .training import (AlternationConfig, CostConfig, TrainRun, TrainingAbort,
                       alternate_optimize, desk_config, ic_sampler_for,
                       phi_step, strict_paper_config, system_id_loss,
                       theta_step)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

PLANTS = ("planar", "torsional", "two-link")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunConfig:
    """Resolved, serializable description of one CLI run."""

    command: str
    plant: str = "planar"
    plant_params: dict = field(default_factory=dict)
    plant_seed: int = None
    mode: str = "desk"
    task: str = "stabilization"
    target: list = None
    seed: int = 0
    ics: int = 64
    levels: list = field(default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0])
    T: float = 0.15
    dt: float = 1e-2
    rounds: int = 3
    epochs: int = None
    steps: int = None
    rho: float = 1e-3
    workers: int = 1
    deterministic: bool = True
    out: str = "run"

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=float)


def build_plant(cfg):
    if cfg.plant == "planar":
        if cfg.plant_seed is not None:
            low = 0.0 if cfg.mode == "strict-paper" else 0.5
            return random_planar_pendulum(cfg.plant_seed, low=low)
        return planar_pendulum(**cfg.plant_params)
    if cfg.plant == "torsional":
        return torsional_pendulum(**cfg.plant_params)
    if cfg.plant == "two-link":
        return two_link_torsional(**cfg.plant_params)
    raise ValueError(f"unknown plant {cfg.plant!r}")


def _seed_default():
    return int(os.environ.get("PH_SEED", "0"))


def _add_common(ap):
    ap.add_argument("--config", help="JSON file with defaults for any flag")
    ap.add_argument("--plant", choices=PLANTS, default="planar")
    ap.add_argument("--plant-seed", type=int, default=None,
                    help="draw planar pendulum parameters from this seed")
    ap.add_argument("--plant-params", default="{}",
                    help="JSON dict of plant parameters")
    ap.add_argument("--mode", choices=("desk", "strict-paper"),
                    default="desk")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--deterministic", action="store_true", default=True)
    ap.add_argument("--out", default="run")


def _resolve(args, command):
    defaults = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            defaults = json.load(fh)
    cfg = RunConfig(command=command)
    for key, value in defaults.items():
        if hasattr(cfg, key):
            setattr(cfg, key, value)
    for key, value in vars(args).items():
        key = key.replace("-", "_")
        if key in ("config", "func"):
            continue
        if hasattr(cfg, key) and value is not None:
            setattr(cfg, key, value)
    if isinstance(cfg.plant_params, str):
        cfg.plant_params = json.loads(cfg.plant_params)
    if cfg.seed is None:
        cfg.seed = _seed_default()
    if cfg.deterministic:
        cfg.workers = 1
    return cfg


def _alternation_config(cfg):
    make = strict_paper_config if cfg.mode == "strict-paper" else desk_config
    acfg = make(task=cfg.task, seed=cfg.seed,
                cost=CostConfig(rho=cfg.rho))
    if cfg.mode == "desk":
        acfg.n_ics = cfg.ics
    if cfg.target is not None:
        acfg.target = tuple(np.asarray(cfg.target, dtype=float))
    if cfg.epochs:
        acfg.warmup_epochs = cfg.epochs
    if cfg.steps:
        acfg.policy_steps = cfg.steps
    return acfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = _resolve(args, "gen-data")
    plant = build_plant(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.json"))
    ics = sample_ics(plant, cfg.ics, cfg.seed)
    data = step_excited_dataset(plant, ics, cfg.levels, cfg.T, cfg.dt,
                                workers=cfg.workers)
    data.meta["seed"] = cfg.seed
    data.save(os.path.join(cfg.out, "dataset"))
    print(f"wrote {len(data)} trajectories to {cfg.out}/dataset")
    return EXIT_OK


def cmd_train_system(args):
    cfg = _resolve(args, "train-system")
    acfg = _alternation_config(cfg)
    data = Dataset.load(os.path.join(args.data, "dataset")
                        if os.path.isdir(os.path.join(args.data, "dataset"))
                        else args.data)
    spec = PlantSpec.from_dict(data.meta["plant"])
    run = TrainRun(seed=cfg.seed, out_dir=cfg.out,
                   deterministic=cfg.deterministic, workers=cfg.workers)
    cfg.save(os.path.join(cfg.out, "config.json"))
    model = StructuredPHModel.create(
        spec.n, spec.m, seed=cfg.seed, width=acfg.model_width,
        depth=acfg.model_depth, embed_angles=acfg.embed_angles)
    theta_step(model, data.trajectories, run,
               epochs=cfg.epochs or acfg.warmup_epochs,
               batch_size=acfg.batch_size, lr_max=acfg.lr_max,
               lr_min=acfg.lr_min, weight_decay=acfg.weight_decay,
               phase="warmup")
    run.checkpoint(model, "warmup_theta")
    run.save_history()
    print(f"trained system model -> {cfg.out}/checkpoints/warmup_theta.json")
    return EXIT_OK


def cmd_train_policy(args):
    cfg = _resolve(args, "train-policy")
    acfg = _alternation_config(cfg)
    plant = build_plant(cfg)
    model = load_checkpoint(args.model)
    run = TrainRun(seed=cfg.seed, out_dir=cfg.out,
                   deterministic=cfg.deterministic, workers=cfg.workers)
    cfg.save(os.path.join(cfg.out, "config.json"))
    target = acfg.target_vector(model.n)
    policy = EnergyShapingPolicy.create(
        model.n, model.m, seed=cfg.seed + 1, width=acfg.policy_width,
        kappa=acfg.kappa, target=target, embed_angles=acfg.embed_angles)
    sampler = ic_sampler_for(plant, cfg.seed + 1000)
    phi_step(model, policy, sampler, acfg.cost, run,
             steps=cfg.steps or acfg.policy_steps,
             batch_size=acfg.policy_batch, task=cfg.task,
             lr=acfg.policy_lr, weight_decay=acfg.weight_decay)
    run.checkpoint(policy, "policy_phi")
    run.save_history()
    print(f"trained policy -> {cfg.out}/checkpoints/policy_phi.json")
    return EXIT_OK


def cmd_alternate(args):
    cfg = _resolve(args, "alternate")
    plant = build_plant(cfg)
    acfg = _alternation_config(cfg)
    run = TrainRun(seed=cfg.seed, out_dir=cfg.out,
                   deterministic=cfg.deterministic, workers=cfg.workers)
    cfg.save(os.path.join(cfg.out, "config.json"))
    model, policy, rounds = alternate_optimize(plant, acfg, cfg.rounds,
                                               run=run)
    print(f"alternation finished; holdout errors: "
          f"{[r['holdout_err'] for r in rounds]}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _resolve(args, "evaluate")
    plant = build_plant(cfg)
    model = load_checkpoint(args.model)
    policy = load_checkpoint(args.policy) if args.policy else None
    os.makedirs(cfg.out, exist_ok=True)
    cfg.save(os.path.join(cfg.out, "config.json"))
    ics = sample_ics(plant, cfg.ics, cfg.seed + 77)
    T, dt = (args.T_eval or 3.0), cfg.dt
    true_trajs, _ = rollout_batch(plant, ics, constant_input([0.0] * plant.m),
                                  T, dt, workers=cfg.workers)
    pred_trajs, _ = rollout_batch(model, ics, constant_input([0.0] * plant.m),
                                  T, dt, workers=cfg.workers)
    bands = error_bands(true_trajs, pred_trajs)
    _write_csv(os.path.join(cfg.out, "error_bands.csv"),
               ["t", "mean", "lo", "hi"],
               zip(bands["times"], bands["mean"], bands["lo"], bands["hi"]))
    metrics = {
        "mean_err_final": float(bands["mean"][-1]),
        "holdout_sysid_loss": system_id_loss(model, true_trajs),
    }
    if policy is not None:
        controller = ControllerHandle.ebpbc(model, policy)
        cl_trajs, failures = rollout_batch(plant, ics, controller, T, dt,
                                           max_norm=1e6)
        rows = []
        for i, t in enumerate(cl_trajs):
            eff = effort_metrics(t)
            rows.append((i, eff["l1"], eff["l2"],
                         terminal_position_error(t, policy.target[:plant.n]),
                         float(wrapped_norm(t.states[-1], policy.target,
                                            plant.n))))
        _write_csv(os.path.join(cfg.out, "effort_per_ic.csv"),
                   ["ic", "l1", "l2", "terminal_q_err", "terminal_wrapped"],
                   rows)
        wn = np.array([r[4] for r in rows])
        metrics.update({
            "closed_loop_success_rate": float((wn < 0.1).mean()),
            "mean_effort_l1": float(np.mean([r[1] for r in rows])),
            "mean_effort_l2": float(np.mean([r[2] for r in rows])),
            "n_diverged": len(failures),
        })
    with open(os.path.join(cfg.out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_certify(args):
    cfg = _resolve(args, "certify")
    plant = build_plant(cfg)
    model = load_checkpoint(args.model)
    policy = load_checkpoint(args.policy)
    os.makedirs(cfg.out, exist_ok=True)
    spec = CertificateSpec(n_samples=args.samples, rho=cfg.rho,
                           eps_diss=args.eps_diss, seed=cfg.seed)
    report = certify(plant, model, policy, spec)
    report.save_json(os.path.join(cfg.out, "certificate.json"))
    report.save_csv(os.path.join(cfg.out, "certificate_samples.csv"))
    ok = report.verdicts["trajectories_certified"]
    print(f"certificate: radius={report.radius:.6g} xi={report.xi:.3g} "
          f"eps={report.eps:.3g} verdicts={report.verdicts}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_export_plots(args):
    cfg = _resolve(args, "export-plots")
    run_dir = args.run
    out = cfg.out if cfg.out != "run" else os.path.join(run_dir, "plots")
    os.makedirs(out, exist_ok=True)
    wrote = []
    hist = os.path.join(run_dir, "history.csv")
    if os.path.exists(hist):
        import csv as _csv
        with open(hist) as fh:
            rows = list(_csv.DictReader(fh))
        for phase in sorted({r["phase"] for r in rows}):
            sel = [r for r in rows if r["phase"] == phase]
            path = os.path.join(out, f"loss_{phase}.csv")
            _write_csv(path, ["step", "loss", "lr"],
                       [(r["step"], r["loss"], r["lr"]) for r in sel])
            wrote.append(path)
    for name in ("error_bands.csv", "effort_per_ic.csv",
                 "certificate_samples.csv"):
        src = os.path.join(run_dir, name)
        if os.path.exists(src):
            dst = os.path.join(out, name)
            with open(src) as fi, open(dst, "w") as fo:
                fo.write(fi.read())
            wrote.append(dst)
    eff = os.path.join(run_dir, "effort_per_ic.csv")
    if os.path.exists(eff):
        import csv as _csv
        with open(eff) as fh:
            rows = list(_csv.DictReader(fh))
        l2 = np.array([float(r["l2"]) for r in rows])
        counts, edges = np.histogram(l2, bins=10)
        path = os.path.join(out, "effort_histogram.csv")
        _write_csv(path, ["bin_left", "bin_right", "count"],
                   zip(edges[:-1], edges[1:], counts))
        wrote.append(path)
    print(f"wrote {len(wrote)} plot files to {out}")
    return EXIT_OK


def _write_csv(path, header, rows):
    import csv as _csv
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating))
                        else v for v in row])


def make_parser():
    ap = _Parser(prog="phctrl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate step-excited trajectories")
    _add_common(p)
    p.add_argument("--ics", type=int, default=64)
    p.add_argument("--levels", type=lambda s: [float(x) for x in
                                               s.split(",")], default=None)
    p.add_argument("--T", dest="T", type=float, default=0.15)
    p.add_argument("--dt", type=float, default=1e-2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-system", help="warm-up system identification")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_system)

    p = sub.add_parser("train-policy", help="policy optimization on a "
                                            "trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=("stabilization", "swingup"),
                   default="stabilization")
    p.add_argument("--target", type=lambda s: [float(x) for x in
                                               s.split(",")], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rho", type=float, default=1e-3)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("alternate", help="full alternating optimization")
    _add_common(p)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--ics", type=int, default=64)
    p.add_argument("--task", choices=("stabilization", "swingup"),
                   default="stabilization")
    p.add_argument("--target", type=lambda s: [float(x) for x in
                                               s.split(",")], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rho", type=float, default=1e-3)
    p.set_defaults(func=cmd_alternate)

    p = sub.add_parser("evaluate", help="model/controller rollout metrics")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--policy", default=None)
    p.add_argument("--ics", type=int, default=64)
    p.add_argument("--T-eval", dest="T_eval", type=float, default=3.0)
    p.add_argument("--dt", type=float, default=1e-2)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("certify", help="closed-loop dissipation certificate")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--rho", type=float, default=1e-3)
    p.add_argument("--eps-diss", dest="eps_diss", type=float, default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("export-plots", help="emit plot-ready CSV files")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export_plots)
    return ap


def dispatch(argv):
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (TrainingAbort, DivergenceError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
