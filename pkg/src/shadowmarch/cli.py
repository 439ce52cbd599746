"""Command-line experiment runner.

    shadowmarch run CONFIG        sensitivity, spectrum and diagnostics
    shadowmarch lyapunov CONFIG   spectrum only
    shadowmarch converge CONFIG   convergence study over T or dt
    shadowmarch oracle CONFIG     dense and finite-difference cross-checks

CONFIG is a JSON file or the name of a bundled config (``shadowmarch configs``
lists them).  Exit codes: 0 success, 2 invalid config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import default_objective, make_system
from .exceptions import ConfigError, ShadowingError
from .integrators import TABLEAUX
from .shadowing import MarchConfig, reconstruct_adjoint, run_march
from .validation import check_choice, check_count, check_keys, check_positive
from .verify import (
    DENSE_LIMIT,
    dense_march_oracle,
    error_vs_T_study,
    fd_sensitivity_oracle,
    neutral_defect_study,
    synthetic_study,
)

log = logging.getLogger("shadowmarch")

OUTPUT_ENV = "SHADOWMARCH_OUTPUT"
EXIT_CONFIG, EXIT_NUMERIC = 2, 3

TOP_KEYS = {
    "system", "march", "integrator", "algorithm", "ensemble", "seed",
    "output", "checkpoint", "adjoint_stride", "study", "oracle",
}
SYSTEM_KEYS = {"name", "params"}
MARCH_KEYS = {"T", "segment_length", "dt", "n_modes", "spinup_initial", "spinup_final", "tol_neutral"}
STUDY_KEYS = {"mode", "values", "reference"}
ORACLE_KEYS = {"delta_s", "window", "ensemble", "spinup"}


@dataclass
class RunConfig:
    raw: dict
    system: object
    march: MarchConfig
    integrator: str
    algorithm: str
    ensemble: int
    seed: int
    output: str
    checkpoint: bool
    adjoint_stride: int
    study: dict | None
    oracle: dict

    @property
    def tableau(self):
        return TABLEAUX[self.integrator]

    @property
    def hash(self):
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def initial_states(self):
        rng = np.random.default_rng(self.seed)
        return self.system.sample_initial(rng, self.ensemble)


def bundled_configs():
    root = resources.files("shadowmarch") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_config(spec):
    path = Path(spec)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("shadowmarch") / "configs" / f"{spec}.json"
        if not res.is_file():
            raise ConfigError(f"no config file {spec!r} and no bundled config of that name")
        text = res.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def parse_config(raw):
    check_keys(raw, TOP_KEYS, "config")
    for key in ("system", "march"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")
    sys_cfg = check_keys(raw["system"], SYSTEM_KEYS, "system")
    system = make_system(sys_cfg.get("name", ""), **sys_cfg.get("params", {}))
    m = check_keys(raw["march"], MARCH_KEYS, "march")
    for key in ("T", "segment_length", "dt"):
        if key not in m:
            raise ConfigError(f"march is missing {key!r}")
        check_positive(m[key], f"march.{key}")
    for key in ("spinup_initial", "spinup_final"):
        check_positive(m.get(key, 0.0), f"march.{key}", allow_zero=True)
    if m.get("tol_neutral") is not None:
        check_positive(m["tol_neutral"], "march.tol_neutral", allow_zero=True)
    check_count(m.get("n_modes", 1), "march.n_modes")
    seed = check_count(raw.get("seed", 0), "seed", minimum=0)
    march = MarchConfig(seed=seed, **m).validate(system.n)
    integrator = check_choice(raw.get("integrator", "rk4"), "integrator", TABLEAUX)
    algorithm = check_choice(raw.get("algorithm", "auto"), "algorithm", {"auto", "exact", "split"})
    study = raw.get("study")
    if study is not None:
        check_keys(study, STUDY_KEYS, "study")
        check_choice(study.get("mode"), "study.mode", {"over-T", "over-dt"})
        values = study.get("values")
        if not isinstance(values, list) or len(values) < 3:
            raise ConfigError("study.values must list at least 3 points")
        for v in values:
            check_positive(v, "study.values")
        if study["mode"] == "over-T":
            for T in values:
                replace(march, T=float(T)).validate(system.n)
        else:
            for dt in values:
                replace(march, dt=float(dt), spinup_initial=0.0).validate(system.n)
    oracle = check_keys(raw.get("oracle", {}), ORACLE_KEYS, "oracle")
    return RunConfig(
        raw=raw,
        system=system,
        march=march,
        integrator=integrator,
        algorithm=algorithm,
        ensemble=check_count(raw.get("ensemble", 1), "ensemble"),
        seed=seed,
        output=str(raw.get("output", "shadowmarch_out")),
        checkpoint=bool(raw.get("checkpoint", False)),
        adjoint_stride=check_count(raw.get("adjoint_stride", march.steps_per_segment), "adjoint_stride"),
        study=study,
        oracle=oracle,
    )


def output_dir(cfg, override=None):
    out = Path(override) if override else Path(cfg.output)
    root = os.environ.get(OUTPUT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


class Writer:
    """Writes outputs tagged with the config hash and package version."""

    def __init__(self, directory, cfg):
        self.dir = Path(directory)
        self.tag = f"config_hash={cfg.hash},version={__version__}"
        self.cfg = cfg

    def csv(self, name, header, rows):
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        return path

    def json(self, name, payload):
        doc = {"config_hash": self.cfg.hash, "version": __version__, **payload}
        path = self.dir / name
        path.write_text(json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n")
        return path


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return x


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    return x


def _stats(values):
    v = np.asarray(values, dtype=float)
    stderr = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else None
    return {"mean": float(v.mean()), "stderr": stderr}


def _derived(cfg):
    return {**cfg.march.derived(), "ensemble": cfg.ensemble, "n": cfg.system.n}


def _run(cfg, spectrum_only=False):
    objective = default_objective(cfg.system)
    run = run_march(
        cfg.system, objective, cfg.initial_states(), cfg.march, cfg.tableau, cfg.algorithm, spectrum_only
    )
    return objective, run


def _save_checkpoints(writer, run):
    from .checkpoint import save_trajectory

    for j in range(run.initial_states.shape[0]):
        save_trajectory(writer.dir / f"trajectory_{j}.shmt", run.trajectory.member(j))


def _lyapunov_rows(run):
    return [(j, k + 1, lam) for j, s in enumerate(run.solutions) for k, lam in enumerate(s.spectrum.exponents)]


def cmd_run(cfg, out):
    w = Writer(out, cfg)
    objective, run = _run(cfg)
    if cfg.checkpoint:
        _save_checkpoints(w, run)
    K, sps, dt = cfg.march.n_segments, cfg.march.steps_per_segment, cfg.march.dt
    members, seg_rows, adj_rows = [], [], []
    for j, sol in enumerate(run.solutions):
        sweep = run.sweep.member(j)
        members.append(
            {
                "member": j,
                "sensitivity": sol.sensitivity,
                "mean_objective": sol.mean_objective,
                "n_unstable": sol.n_unstable,
                "algorithm": sol.algorithm,
                "neutral_defect": sol.neutral_defect,
                "level_defect": sol.level_defect,
                "max_adjoint_norm": sol.max_adjoint_norm,
                "max_coef_norm": float(np.linalg.norm(sol.coef, axis=-1).max()),
                "triangular_solves": sol.solves,
                "triangular_flops": sol.flops,
                "spectrum_nonincreasing": sol.spectrum.nonincreasing,
                "lyapunov_exponents": sol.spectrum.exponents,
            }
        )
        for i in range(K + 1):
            row = [j, i, i * sps * dt, np.linalg.norm(sol.coef[i]), sol.boundary_norms[i]]
            if i == 0:
                row += ["", "", "", ""]
            else:
                rec = sweep.segment(i)
                diag = np.diagonal(rec.R_prev)
                row += [rec.h, np.linalg.norm(rec.d), np.linalg.norm(rec.b_prev), float(np.log(diag).sum())]
            seg_rows.append(row)
        traj = run.trajectory.member(j)
        steps = np.arange(0, cfg.march.n_steps + 1, cfg.adjoint_stride)
        samples = reconstruct_adjoint(cfg.system, traj, sweep, sol.coef, cfg.tableau, steps, objective)
        f = cfg.system.rhs(traj.states[steps])
        for k, step in enumerate(steps):
            psi = samples.psi[k]
            adj_rows.append([j, int(step), step * dt, np.linalg.norm(psi), float(psi @ f[k]), *psi])
    w.csv(
        "segments.csv",
        ["member", "i", "t", "coef_norm", "adjoint_norm", "h", "d_norm", "b_norm", "log_det_R"],
        seg_rows,
    )
    w.csv(
        "adjoint.csv",
        ["member", "step", "t", "psi_norm", "psi_dot_f"] + [f"psi_{k}" for k in range(cfg.system.n)],
        adj_rows,
    )
    w.csv("lyapunov.csv", ["member", "j", "exponent"], _lyapunov_rows(run))
    sens = run.sensitivities
    summary = {
        "command": "run",
        "system": cfg.system.name,
        "derived": _derived(cfg),
        "sensitivity": _stats(sens),
        "n_unstable": run.n_unstable,
        "members": members,
    }
    w.json("summary.json", summary)
    s = summary["sensitivity"]
    print(f"dJ/ds = {s['mean']:.6g}" + (f" +/- {s['stderr']:.3g}" if s["stderr"] else ""))
    print(f"n_u per member: {run.n_unstable.tolist()}")
    return summary


def cmd_lyapunov(cfg, out):
    w = Writer(out, cfg)
    _, run = _run(cfg, spectrum_only=True)
    w.csv("lyapunov.csv", ["member", "j", "exponent"], _lyapunov_rows(run))
    lam = run.exponents
    summary = {
        "command": "lyapunov",
        "system": cfg.system.name,
        "derived": _derived(cfg),
        "mean_exponents": lam.mean(axis=0),
        "nonincreasing": [s.spectrum.nonincreasing for s in run.solutions],
    }
    w.json("summary.json", summary)
    print("mean exponents:", np.array2string(lam.mean(axis=0), precision=4))
    return summary


def cmd_converge(cfg, out, self_test=False):
    w = Writer(out, cfg)
    if self_test:
        study = synthetic_study(-0.5)
    else:
        if cfg.study is None:
            raise ConfigError("converge needs a 'study' section in the config")
        objective = default_objective(cfg.system)
        U0 = cfg.initial_states()
        values = [float(v) for v in cfg.study["values"]]
        if cfg.study["mode"] == "over-T":
            ref = cfg.study.get("reference")
            if ref is None:
                raise ConfigError("over-T studies need study.reference")
            study = error_vs_T_study(
                cfg.system, objective, cfg.march, values, U0, float(ref), cfg.tableau, cfg.algorithm
            )
        else:
            study = neutral_defect_study(cfg.system, objective, cfg.march, values, U0, cfg.tableau, cfg.algorithm)
    header = [study.label, "error", *study.columns]
    w.csv("study.csv", header, [[r[h] for h in header] for r in study.rows()])
    summary = {
        "command": "converge",
        "mode": "self-test" if self_test else cfg.study["mode"],
        "slope": study.slope,
        "halfwidth": study.halfwidth,
        "abscissae": study.abscissae,
        "errors": study.ordinates,
    }
    w.json("summary.json", summary)
    print(f"slope = {study.slope:.4f} +/- {study.halfwidth:.3g}")
    return summary


def cmd_oracle(cfg, out):
    w = Writer(out, cfg)
    _, run = _run(cfg)
    K, m = cfg.march.n_segments, cfg.march.n_modes
    rows, notes = [], []
    if K * m > DENSE_LIMIT:
        notes.append(f"dense oracle skipped: K*m = {K * m} exceeds {DENSE_LIMIT}")
        print(notes[-1])
    else:
        for j, sol in enumerate(run.solutions):
            p = None if sol.algorithm == "exact" else sol.n_unstable
            ref = dense_march_oracle(run.sweep.member(j), p)
            scale = max(np.abs(ref.coef).max(), 1e-300)
            rows.append(
                [j, sol.algorithm, sol.sensitivity, ref.sensitivity, float(np.abs(sol.coef - ref.coef).max() / scale)]
            )
    w.csv("oracle.csv", ["member", "algorithm", "march_sensitivity", "dense_sensitivity", "coef_rel_diff"], rows)
    o = cfg.oracle
    default_ds = 0.5 if cfg.system.name == "lorenz63" else 0.1
    fd = fd_sensitivity_oracle(
        cfg.system,
        default_objective(cfg.system),
        float(o.get("delta_s", default_ds)),
        float(o.get("window", cfg.march.T)),
        int(o.get("ensemble", cfg.ensemble)),
        cfg.march.dt,
        seed=cfg.seed + 1,
        spinup=float(o.get("spinup", cfg.march.spinup_initial)),
        tableau=cfg.tableau,
    )
    march = _stats(run.sensitivities)
    summary = {
        "command": "oracle",
        "march": march,
        "finite_difference": {"mean": fd.value, "stderr": fd.stderr, "delta_s": fd.delta_s},
        "max_coef_rel_diff": max((r[-1] for r in rows), default=None),
        "notes": notes,
    }
    w.json("summary.json", summary)
    print(f"march {march['mean']:.6g}, finite difference {fd.value:.6g} +/- {fd.stderr:.3g}")
    return summary


COMMANDS = {"run": cmd_run, "lyapunov": cmd_lyapunov, "converge": cmd_converge, "oracle": cmd_oracle}


def build_parser():
    p = argparse.ArgumentParser(prog="shadowmarch", description="Adjoint shadowing sensitivities by the stabilized march.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="JSON config path or bundled config name")
        s.add_argument("--output", help="output directory (overrides the config)")
        s.add_argument("--dry-run", action="store_true", help="validate and print derived sizes only")
        if name == "converge":
            s.add_argument("--self-test", action="store_true", help="fit a synthetic power law instead")
    sub.add_parser("configs", help="list bundled configs")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "configs":
        print("\n".join(bundled_configs()))
        return 0
    try:
        cfg = parse_config(read_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(json.dumps({"config_hash": cfg.hash, **_derived(cfg)}, indent=2))
        return 0
    out = output_dir(cfg, args.output)
    try:
        kwargs = {"self_test": args.self_test} if args.command == "converge" else {}
        COMMANDS[args.command](cfg, out, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShadowingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        payload = {
            "error": type(exc).__name__,
            "message": str(exc),
            **{k: v for k, v in vars(exc).items() if isinstance(v, (int, float, str))},
            "traceback": traceback.format_exc(),
        }
        Writer(out, cfg).json("failure.json", payload)
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
