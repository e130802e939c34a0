"""Command-line entry point: ``gaugerl {synth,verify,train,eval,rollout}``.

Exit codes: 0 success, 1 unexpected error, 2 invalid input, 3 synthesis
failure, 4 invalid certificate, 5 training aborted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gaugerl import __version__
from gaugerl.ddpg import Environment, TrainConfig, evaluate, make_agent, save_summary, train
from gaugerl.errors import CertificateInvalid, GaugeRLError, NoValidGain, TrainingAborted
from gaugerl.invariance import RciCertificate, SafetySystem, candidate_gains, gain_search, verify_certificate
from gaugerl.nn import load_checkpoint, save_checkpoint
from gaugerl.plant import DisturbanceModel, GridCase, default_case_path, rollout, sample_uniform_polytope
from gaugerl.policy import LinearPolicy, PenaltyPolicy, SafePolicy

logger = logging.getLogger("gaugerl")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_SYNTH, EXIT_CERT, EXIT_ABORT = 0, 1, 2, 3, 4, 5


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


@dataclass
class LoadedCase:
    system: SafetySystem
    Q: np.ndarray
    R: np.ndarray
    alpha: float
    angle_idx: np.ndarray
    name: str
    raw: dict


def load_case_file(path) -> LoadedCase:
    """Accept either a grid case (``generators``/``lines``) or a raw system (``A``/``B``/``E``/``U``/``D``/``X``)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read case file {path}: {exc}") from exc
    try:
        if "generators" in raw:
            case = GridCase.from_dict(raw)
            return LoadedCase(case.safety_system(), case.Q, case.R, case.alpha, np.arange(case.N),
                              case.name, raw)
        if "A" in raw:
            system = SafetySystem.from_dict(raw)
            Q = np.asarray(raw.get("Q", np.eye(system.n)), dtype=float)
            R = np.asarray(raw.get("R", np.eye(system.m)), dtype=float)
            angle_idx = np.asarray(raw.get("angle_idx", [0]), dtype=int)
            return LoadedCase(system, Q, R, float(raw.get("alpha", 0.8)), angle_idx, raw.get("name", "system"), raw)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed case file {path}: missing or bad field {exc}") from exc
    raise InputError(f"case file {path} has neither 'generators' nor 'A'")


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def checkpoint_digest(path) -> str | None:
    """Content digest of a checkpoint's arrays (the zip container itself carries timestamps)."""
    if path is None:
        return None
    try:
        with np.load(path) as data:
            h = hashlib.sha256()
            for key in sorted(data.files):
                arr = data[key]
                h.update(key.encode())
                h.update(str(arr.dtype).encode())
                h.update(arr.tobytes())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return h.hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    return cfg


def _load_cert(args, case: LoadedCase, required: bool = True) -> RciCertificate | None:
    if args.cert is None:
        if required:
            raise InputError("--cert is required for this command")
        return None
    try:
        with open(args.cert) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read certificate {args.cert}: {exc}") from exc
    try:
        return RciCertificate.from_dict(d, case.system)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed certificate {args.cert}: {exc}") from exc


class Run:
    """Shared state of one command: parsed inputs, output directory and provenance hash."""

    def __init__(self, args, command: str, extra: dict | None = None):
        self.args = args
        self.case = load_case_file(args.case)
        self.config = _read_config(args.config)
        self.out = Path(args.out)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InputError(f"cannot create output directory {self.out}: {exc}") from exc
        cert_raw = None
        if args.cert is not None and Path(args.cert).exists():
            cert_raw = Path(args.cert).read_text()
        self.hash = config_hash({"command": command, "case": self.case.raw, "cert": cert_raw, "seed": args.seed,
                                 "config": self.config, "options": extra or {}, "version": __version__})
        self.header = f"config_hash={self.hash} command={command} seed={args.seed} version={__version__}"

    def env(self, cert) -> Environment:
        c = self.case
        return Environment(c.system, cert, c.Q, c.R, c.alpha, c.angle_idx)

    def path(self, name: str) -> Path:
        return self.out / name


def cmd_synth(args) -> int:
    run = Run(args, "synth", {"max_iter": args.max_iter, "discount": args.discount})
    sys_ = run.case.system
    cands = candidate_gains(sys_, discount=args.discount)
    try:
        res = gain_search(sys_, cands, max_iter=args.max_iter)
    except NoValidGain as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SYNTH
    cert = res.certificate
    meta = dict(cert.meta)
    meta["config_hash"] = run.hash
    cert = RciCertificate(cert.Vs, cert.s_bar, cert.K, cert.tighten_lo, cert.tighten_hi, meta)
    cert_path = run.path(args.name)
    cert.save(cert_path)
    save_summary(run.path("synth_report.json"),
                 {"verification": res.report.to_dict(), "candidates": res.scores, "rows": cert.num_rows,
                  "certificate": str(cert_path)},
                 {"config_hash": run.hash})
    print(f"# {run.header}")
    print(f"certificate: {cert_path} ({cert.num_rows} symmetric rows)")
    print(res.report.format())
    return EXIT_OK


def cmd_verify(args) -> int:
    run = Run(args, "verify")
    cert = _load_cert(args, run.case)
    report = verify_certificate(cert, run.case.system)
    save_summary(run.path("verify_report.json"), report.to_dict(), {"config_hash": run.hash})
    print(f"# {run.header}")
    print(report.format())
    if not report.valid:
        for check, rows in report.violations().items():
            if rows:
                print(f"violated {check} rows: {rows}", file=sys.stderr)
        return EXIT_CERT
    return EXIT_OK


def _train_config(run: Run, args) -> TrainConfig:
    d = dict(run.config.get("train", run.config))
    d["seed"] = args.seed
    for key, val in (("episodes", args.episodes), ("steps_per_episode", args.steps), ("penalty_lambda", args.lam)):
        if val is not None:
            d[key] = val
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from exc


def _require_valid(cert, system) -> None:
    report = verify_certificate(cert, system)
    if not report.valid:
        raise CertificateInvalid(f"certificate fails verification: {report.violations()}")


def cmd_train(args) -> int:
    run = Run(args, "train", {"kind": args.kind, "episodes": args.episodes, "steps": args.steps, "lam": args.lam})
    cert = _load_cert(args, run.case, required=args.kind == "safe")
    if cert is not None:
        _require_valid(cert, run.case.system)
    cfg = _train_config(run, args)
    env = run.env(cert)

    def progress(row):
        logger.info("episode %d cost %.4g max|delta| %.4g violations %d", row["episode"], row["accum_cost"],
                    row["max_angle_dev"], row["violations"])

    try:
        rep = train(env, args.kind, cfg, progress=progress)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    stem = f"train_{args.kind}"
    rep.to_csv(run.path(f"{stem}.csv"), run.header)
    summary = rep.summary()
    save_summary(run.path(f"{stem}.json"), summary, {"config_hash": run.hash})
    a = rep.agent
    save_checkpoint(run.path(f"{args.kind}_checkpoint.npz"), {"actor": a.actor, "critic": a.critic},
                    {"actor": a.actor_opt, "critic": a.critic_opt}, cfg.seed,
                    {"kind": args.kind, "config_hash": run.hash, "config": cfg.to_dict(),
                     "certificate": None if cert is None else cert.to_dict()})
    print(f"# {run.header}")
    print(f"{args.kind}: {summary['episodes']} episodes, mean cost first {summary['mean_cost_first']:.4g} "
          f"last {summary['mean_cost_last']:.4g}, violations {summary['total_violations']}")
    return EXIT_OK


def _policy_from_checkpoint(path, case: LoadedCase, cert: RciCertificate | None):
    try:
        nets, _, header = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    extra = header.get("extra", {})
    kind = extra.get("kind")
    if cert is None and extra.get("certificate") is not None:
        cert = RciCertificate.from_dict(extra["certificate"], case.system)
    actor = nets["actor"]
    if kind == "safe":
        if cert is None:
            raise InputError(f"checkpoint {path} needs a certificate")
        return SafePolicy(actor, cert, case.system)
    if kind == "penalty":
        cfg = extra.get("config", {})
        K = cert.K if (cfg.get("penalty_prior_gain", True) and cert is not None) else None
        return PenaltyPolicy(actor, case.system.U, cfg.get("penalty_lambda", 10.0), K)
    raise InputError(f"checkpoint {path} has unknown kind {kind!r}")


def _fresh_safe_policy(run: Run, cert) -> SafePolicy:
    agent = make_agent(run.env(cert), "safe", TrainConfig(seed=run.args.seed), np.random.default_rng(run.args.seed))
    return agent.policy


def cmd_eval(args) -> int:
    run = Run(args, "eval", {"episodes": args.episodes, "steps": args.steps, "paired": args.paired,
                             "safe": checkpoint_digest(args.safe), "penalty": checkpoint_digest(args.penalty),
                             "policies": args.policies})
    cert = _load_cert(args, run.case)
    _require_valid(cert, run.case.system)
    policies = {}
    for name in args.policies.split(","):
        name = name.strip()
        if not name:
            continue
        if name == "linear":
            pol = LinearPolicy(cert.K)
        elif name == "safe":
            pol = _policy_from_checkpoint(args.safe, run.case, cert) if args.safe else _fresh_safe_policy(run, cert)
        elif name == "penalty":
            if not args.penalty:
                raise InputError("evaluating the penalty policy needs --penalty CHECKPOINT")
            pol = _policy_from_checkpoint(args.penalty, run.case, cert)
        else:
            raise InputError(f"unknown policy {name!r}")
        key, k = name, 1
        while key in policies:
            k += 1
            key = f"{name}_{k}"
        policies[key] = pol
    if not policies:
        raise InputError("no policies selected")
    env = run.env(cert)
    if args.paired:
        report = evaluate(policies, env, args.episodes, args.seed, args.steps)
        summary = report.summary()
    else:
        # independent streams per policy
        parts = [evaluate({k: p}, env, args.episodes, args.seed + i, args.steps) for i, (k, p) in enumerate(policies.items())]
        report = parts[0]
        for part in parts[1:]:
            for attr in ("costs", "violations", "action_violations", "max_angle_dev", "fallbacks"):
                getattr(report, attr).update(getattr(part, attr))
            report.names += part.names
        summary = report.summary()
        summary.pop("paired")
    summary["paired_streams"] = bool(args.paired)
    report.to_csv(run.path("eval.csv"), run.header)
    save_summary(run.path("eval.json"), summary, {"config_hash": run.hash})
    print(f"# {run.header}")
    for k, s in summary["policies"].items():
        print(f"{k:>8}: mean cost {s['mean_cost']:.6g}  violations {s['violations']}  "
              f"action violations {s['action_violations']}  max|delta| {s['max_angle_dev']:.4g}")
    for pr in summary.get("paired", []):
        print(f"paired {pr['a']} - {pr['b']}: {pr['mean_diff']:.6g} +/- {pr['se']:.3g} (SE, n={pr['n']})")
    return EXIT_OK


def cmd_rollout(args) -> int:
    run = Run(args, "rollout", {"policy": args.policy, "steps": args.steps,
                                "checkpoint": checkpoint_digest(args.checkpoint), "x0": args.x0})
    cert = _load_cert(args, run.case)
    _require_valid(cert, run.case.system)
    if args.policy == "linear":
        pol = LinearPolicy(cert.K)
    elif args.checkpoint:
        pol = _policy_from_checkpoint(args.checkpoint, run.case, cert)
    elif args.policy == "safe":
        pol = _fresh_safe_policy(run, cert)
    else:
        raise InputError("the penalty policy needs --checkpoint")
    sys_ = run.case.system
    rng = np.random.default_rng(args.seed)
    if args.x0 is not None:
        x0 = np.array([float(v) for v in args.x0.split(",")])
        if x0.size != sys_.n:
            raise InputError(f"--x0 needs {sys_.n} comma-separated values")
    else:
        x0 = sample_uniform_polytope(cert.S.scaled(0.5), rng, 1)[0]
    model = DisturbanceModel(run.case.alpha, sys_.D, args.seed)
    traj = rollout(pol, sys_, model, x0, args.steps, rng, run.case.Q, run.case.R)
    traj.to_csv(run.path(f"rollout_{args.policy}.csv"), run.header, run.case.angle_idx)
    print(f"# {run.header}")
    print(f"{args.policy}: cost {traj.total_cost:.6g} violations {traj.num_violations} "
          f"max|delta| {traj.max_abs(run.case.angle_idx):.4g} fallbacks {int(traj.fallbacks.sum())}")
    return EXIT_OK


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--case", default=d(str(default_case_path())), help="grid case or system JSON")
    p.add_argument("--cert", default=d(None), help="certificate JSON")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--out", default=d("out"), help="output directory")
    p.add_argument("--config", default=d(None), help="JSON config (training options)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaugerl", description="Safe RL for frequency regulation via gauge maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize and verify an RCI certificate")
    _global_flags(p, suppress=True)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--discount", type=float, default=0.99)
    p.add_argument("--name", default="certificate.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="check a certificate against a case")
    _global_flags(p, suppress=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train a safe or penalty policy with DDPG")
    _global_flags(p, suppress=True)
    p.add_argument("--kind", choices=("safe", "penalty"), default="safe")
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate policies on shared episodes")
    _global_flags(p, suppress=True)
    p.add_argument("--paired", action="store_true", help="identical initial states and disturbances across policies")
    p.add_argument("--policies", default="safe,linear", help="comma list of linear, safe, penalty")
    p.add_argument("--safe", help="safe policy checkpoint (default: freshly initialized network)")
    p.add_argument("--penalty", help="penalty policy checkpoint")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="simulate one trajectory and export it")
    _global_flags(p, suppress=True)
    p.add_argument("--policy", choices=("linear", "safe", "penalty"), default="linear")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--x0", help="comma-separated initial state (default: uniform over half of S)")
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CertificateInvalid as exc:
        print(f"invalid certificate: {exc}", file=sys.stderr)
        return EXIT_CERT
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (InputError, GaugeRLError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
