"""Command-line entry point: ``stabcert <subcommand> [options]``.

Every run writes its result files plus ``manifest.json`` (inputs, seed,
versions, timings) into the output directory, taken from ``--out`` or the
STABCERT_OUT environment variable. Exit codes: 0 success, 1 domain error
(infeasible, non-convergence, failed power flow), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .attack import AttackConfig, pgd_attack
from .ball import PerturbationBall
from .control import BallSpec, run_preventive_control
from .dataset import Dataset, DatasetError, ScenarioSampler, label_dataset, sample_scenarios
from .fixtures import CASE, FAULT, NET_C, NET_E, data_path
from .grid import (CaseError, FaultScenario, PowerFlowError, TopologyError, compute_tsi,
                   load_case, load_fault, run_tds, solve_power_flow)
from .nn import (CLASSIFIER, NetworkFormatError, TrainingConfig, TrainingError, load_network,
                 margin, save_network, train)
from .opf import OpfError, OpfProblem, pdipm_solve
from .verify import BabBudget, VerifyConfig, verify_pipeline

log = logging.getLogger("stabcert")

OUT_ENV = "STABCERT_OUT"
DEFAULT_OUT = "stabcert-out"


class UsageError(ValueError):
    pass


class DomainError(RuntimeError):
    pass


# -- helpers ------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _vector(text: str, name: str) -> np.ndarray:
    """Comma-separated numbers, or a JSON file holding a list."""
    if text is None:
        raise UsageError(f"--{name} is required")
    p = Path(text)
    try:
        if p.exists():
            data = json.loads(p.read_text())
            if isinstance(data, dict):
                data = list(data.values())
            return np.asarray(data, dtype=float).reshape(-1)
        return np.array([float(v) for v in text.split(",")])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--{name}: cannot parse {text!r} ({exc})") from None


def _case_arg(args):
    return load_case(args.case or data_path(CASE))


def _fault_arg(args):
    return load_fault(args.fault or data_path(FAULT))


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


# -- subcommands --------------------------------------------------------------
# each returns (exit code, result dict to print, {input name: path})

def cmd_gen(args, out: Path):
    case = _case_arg(args)
    fault = _fault_arg(args)
    sampler = ScenarioSampler(case, args.ibr_range, args.sg_range, args.load_range,
                              count=args.count, seed=args.seed)
    ds = label_dataset(sample_scenarios(sampler), case, fault, workers=args.threads)
    ds.to_csv(out / "dataset.csv")
    summary = {"samples": len(ds), "dropped": ds.dropped,
               "stable_fraction": float(ds.stable.mean())}
    _write_json(out / "dataset_summary.json", summary)
    return 0, summary


def cmd_train(args, out: Path):
    ds = Dataset.from_csv(args.data)
    head = args.head
    y = ds.stable if head == "classifier" else ds.tsi
    loss = "cross-entropy" if head == "classifier" else "mean-squared-error"
    cfg = TrainingConfig(tuple(args.hidden), epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.lr, loss=loss, seed=args.seed,
                         class_weight=tuple(args.class_weight))
    history = []
    net = train(ds.X, y, cfg, history=history)
    save_network(net, out / "network.json")
    summary = {"head": net.head, "layers": [len(b) for b in (L.b for L in net.layers)],
               "final_loss": float(history[-1]) if history else None}
    if head == "classifier":
        summary["train_accuracy"] = float(np.mean((margin(net, ds.X) > 0) == (ds.stable == 1)))
    else:
        from .nn import forward
        summary["train_rmse"] = float(np.sqrt(np.mean((forward(net, ds.X)[:, 0] - ds.tsi) ** 2)))
    _write_json(out / "train_summary.json", summary)
    return 0, summary


def _ball_from_args(args, net, case_needed=False):
    center = _vector(args.center, "center")
    if center.size != net.input_dim:
        raise UsageError(f"--center has {center.size} entries, network expects {net.input_dim}")
    if getattr(args, "percent", None) is not None:
        case = _case_arg(args)
        if len(case.feature_names()) != center.size:
            raise UsageError("case feature layout does not match --center")
        return BallSpec(*args.percent).ball(case, center)
    radii = _vector(args.radii, "radii")
    if radii.size == 1:
        radii = np.full(center.size, radii[0])
    return PerturbationBall(center, radii)


def cmd_attack(args, out: Path):
    net = load_network(args.network)
    ball = _ball_from_args(args, net)
    m0 = float(margin(net, ball.center))
    cfg = AttackConfig(steps=args.steps, eta=args.eta, restarts=args.restarts, seed=args.seed)
    x = pgd_attack(net, ball, cfg, target_sign=np.sign(m0) if m0 != 0 else None)
    res = {"found": x is not None,
           "x_adv": None if x is None else [float(v) for v in x],
           "margin": float(margin(net, x)) if x is not None else m0,
           "center_margin": m0}
    _write_json(out / "attack.json", res)
    return 0, res


def cmd_verify(args, out: Path):
    net = load_network(args.network)
    ball = _ball_from_args(args, net)
    cfg = VerifyConfig(attack=AttackConfig(seed=args.seed), use_attack=args.pgd,
                       bab=BabBudget(max_domains=args.budget_domains,
                                     max_seconds=args.budget_seconds, seed=args.seed))
    try:
        outcome = verify_pipeline(net, ball, cfg)
    except ValueError as exc:
        raise DomainError(str(exc)) from None
    res = outcome.to_dict(timing=False)
    # logit difference at the center, kept apart from the certified bound
    res["center_margin"] = float(margin(net, ball.center))
    _write_json(out / "verify.json", res)
    return 0, dict(res, stage_times=outcome.stage_times)


def cmd_opf(args, out: Path):
    case = _case_arg(args)
    net = None if args.disable_nn else load_network(args.network or data_path(NET_E))
    lam = -np.inf if args.disable_nn else args.lam
    prob = OpfProblem(case, lam=lam, net=net)
    sol = pdipm_solve(prob)
    res = sol.to_dict(case)
    res["lambda"] = None if args.disable_nn else float(lam)
    _write_json(out / "opf.json", res)
    return (0 if sol.converged else 1), res


def cmd_control(args, out: Path):
    case = _case_arg(args)
    fault = _fault_arg(args)
    net_c = load_network(args.net_c or data_path(NET_C))
    net_e = load_network(args.net_e or data_path(NET_E))
    spec = BallSpec(args.percent_ibr, args.percent_sg, args.percent_load)
    cfg = VerifyConfig(attack=AttackConfig(seed=args.seed),
                       bab=BabBudget(max_domains=args.budget_domains,
                                     max_seconds=args.budget_seconds, seed=args.seed))
    result = run_preventive_control(case, fault, net_c, net_e, spec, verify_cfg=cfg,
                                    lam_right=args.lambda_max, zeta=args.zeta)
    result.write_table(out / "iterations.csv")
    res = {"certified": result.certified, "message": result.message,
           "strategy": result.strategy.to_dict(case) if result.strategy else None,
           "tds_tsi": result.tds_tsi,
           "ball": None if result.ball is None else {
               "center": [float(v) for v in result.ball.center],
               "radii": [float(v) for v in result.ball.radii]}}
    _write_json(out / "strategy.json", res)
    return (0 if result.certified else 1), dict(res, timings=result.timings)


def cmd_simulate(args, out: Path):
    case = _case_arg(args)
    fault = _fault_arg(args)
    kw = {}
    if args.point is not None:
        x = _vector(args.point, "point")
        if x.size != len(case.feature_names()):
            raise UsageError(f"--point needs {len(case.feature_names())} entries")
        p_ibr, p_sg, pd, qd = case.split_features(x)
        kw = dict(p_sg=p_sg, p_ibr=p_ibr, pd=pd, qd=qd)
    op = solve_power_flow(case, **kw)
    traj = run_tds(case, op, fault)
    traj.to_csv(out / "trajectory.csv")
    tsi = compute_tsi(traj)
    res = {"tsi": float(tsi), "stable": bool(tsi > 0), "diverged": bool(traj.diverged)}
    _write_json(out / "simulate.json", res)
    print(f"TSI = {tsi:.6f}")
    return 0, res


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stabcert", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stabcert {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="cap on worker processes")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    s = add("gen", "sample scenarios and label them by time-domain simulation")
    s.add_argument("--case")
    s.add_argument("--fault")
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--ibr-range", type=float, default=0.3)
    s.add_argument("--sg-range", type=float, default=0.4)
    s.add_argument("--load-range", type=float, default=0.1)
    s.set_defaults(func=cmd_gen)

    s = add("train", "train a classifier or regressor on a dataset CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--head", choices=("classifier", "regressor"), required=True)
    s.add_argument("--hidden", type=int, nargs="+", default=[16, 16])
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--class-weight", type=float, nargs=2, default=[1.0, 1.0],
                   metavar=("UNSTABLE", "STABLE"))
    s.set_defaults(func=cmd_train)

    for name, help_ in (("attack", "PGD search for a class flip in a box"),
                        ("verify", "certify a classifier over a box")):
        s = add(name, help_)
        s.add_argument("--network", required=True)
        s.add_argument("--center", required=True, help="comma list or JSON file")
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--radii", help="comma list, single value or JSON file")
        g.add_argument("--percent", type=float, nargs=3, metavar=("IBR", "SG", "LOAD"),
                       help="relative radii per device class, classes taken from --case")
        s.add_argument("--case")
        if name == "attack":
            s.add_argument("--steps", type=int, default=50)
            s.add_argument("--eta", type=float, default=0.1)
            s.add_argument("--restarts", type=int, default=10)
            s.set_defaults(func=cmd_attack)
        else:
            s.add_argument("--pgd", action=argparse.BooleanOptionalAction, default=True)
            s.add_argument("--budget-domains", type=int, default=4096)
            s.add_argument("--budget-seconds", type=float, default=600.0,
                   help="wall-clock safety net; results depend on timing once it binds")
            s.set_defaults(func=cmd_verify)

    s = add("opf", "stability-constrained OPF")
    s.add_argument("--case")
    s.add_argument("--network", help="regressor (default: bundled)")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--disable-nn", action="store_true")
    s.set_defaults(func=cmd_opf)

    s = add("control", "bisection preventive control with certification")
    s.add_argument("--case")
    s.add_argument("--fault")
    s.add_argument("--net-c")
    s.add_argument("--net-e")
    s.add_argument("--percent-ibr", type=float, default=10.0)
    s.add_argument("--percent-sg", type=float, default=10.0)
    s.add_argument("--percent-load", type=float, default=5.0)
    s.add_argument("--zeta", type=float, default=1.0)
    s.add_argument("--lambda-max", type=float, default=90.0)
    s.add_argument("--budget-domains", type=int, default=4096)
    s.add_argument("--budget-seconds", type=float, default=600.0,
                   help="wall-clock safety net; results depend on timing once it binds")
    s.set_defaults(func=cmd_control)

    s = add("simulate", "time-domain simulation of one operating point")
    s.add_argument("--case")
    s.add_argument("--fault")
    s.add_argument("--point", help="feature vector [ibr, sg, pd, qd]; default: case base point")
    s.set_defaults(func=cmd_simulate)
    return p


def _input_files(args) -> dict:
    files = {}
    for key in ("case", "fault", "network", "net_c", "net_e", "data", "center", "radii", "point"):
        val = getattr(args, key, None)
        if val and Path(str(val)).is_file():
            files[key] = {"path": str(val), "sha256": _sha256(val)}
    return files


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)    # exits with 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    t0 = time.perf_counter()
    code, result, error, out = 2, None, None, None
    try:
        out = _out_dir(args)
        code, result = args.func(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        error = str(exc)
    except (FileNotFoundError, NetworkFormatError, CaseError, DatasetError,
            json.JSONDecodeError) as exc:
        error = f"bad input: {exc}"
    except (DomainError, PowerFlowError, TopologyError, OpfError, TrainingError) as exc:
        code, error = 1, str(exc)
    except ValueError as exc:
        error = str(exc)
    if error is not None:
        print(f"stabcert {args.command}: error: {error}", file=sys.stderr)
        if out is None:
            return code

    # the output location is left out so runs into different directories compare equal
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    manifest = {
        "command": args.command,
        "arguments": _jsonable(settings),
        "seed": args.seed,
        "inputs": _input_files(args),
        "versions": {"stabcert": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "exit_code": code,
        "error": error,
        "timings": {"total_seconds": time.perf_counter() - t0},
    }
    _write_json(out / "manifest.json", manifest)
    if result is not None:
        print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
