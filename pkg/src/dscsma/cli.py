"""Command-line experiment runner.

Settings are layered: built-in defaults, then the ``--timings`` file, then
flags. Each run writes its CSV/text artifacts into ``--out`` together with
``<command>.config.txt`` echoing the resolved settings. Outputs contain no
timestamps, so identical settings and seeds give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import analytic, optimizer, simulator
from .core import (
    FrameTimings,
    ProtocolParams,
    format_matrix,
    load_config,
    timing_fields,
    validate_partner_map,
)
from .errors import ConfigError, DSCSMAError, SolverFailure, ValidationError

SIM_COLUMNS = ["mode", "N", "W0", "M", "seed", "p_hat", "C_hat", "ci_p", "ci_C", "slots"]
ANALYTIC_COLUMNS = ["mode", "N", "W0", "M", "p", "eta", "deta_dp", "C", "C_baseline"]
COMPARE_COLUMNS = ["N", "W0", "M", "p_analytic", "p_sim", "ci_p", "C_ds_analytic",
                   "C_ds_sim", "ci_C", "C_baseline", "C_baseline_sim", "ci_C_baseline"]
W0_COLUMNS = ["N", "relaxed", "W0_left", "W0_right", "chosen", "C_left", "C_right",
              "evaluator", "C_full_left", "C_full_right"]
N_COLUMNS = ["W0", "eta_uniform", "relaxed", "N_left", "N_right", "candidate_choice",
             "chosen", "C_chosen", "closed_form", "printed_form"]

TABLE5_W0 = {20: 128, 50: 256, 100: 512, 200: 1024, 500: 4096}
TABLE5_N = {32: 4, 64: 9, 128: 17, 256: 35, 1024: 138}

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {"w0": "32,64,128,256,512", "n": "30", "m": "4", "seed": "1", "reps": "10",
            "horizon": "1000000", "mode": "pairs", "refuse_prob": "0", "evaluator": "uniform"}


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _int_list(text: str, name: str) -> list[int]:
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    if not items:
        raise ConfigError(f"--{name} grid is empty")
    try:
        return [int(t) for t in items]
    except ValueError as exc:
        raise ConfigError(f"--{name}: {exc}") from exc


class Settings:
    """Resolved experiment configuration."""

    def __init__(self, args: argparse.Namespace):
        values = dict(DEFAULTS)
        self.matrix = None
        file_timings = {}
        if args.timings:
            if not Path(args.timings).is_file():
                raise ConfigError(f"timings file {args.timings} does not exist")
            raw, self.matrix = load_config(args.timings)
            tf = set(timing_fields())
            for k, v in raw.items():
                key = k.replace("-", "_")
                if key in tf:
                    file_timings[key] = v
                elif key in values or key == "target":
                    values[key] = v
                else:
                    raise ConfigError(f"unknown config key {k!r}")
        for key in ("w0", "n", "m", "seed", "reps", "horizon", "mode", "refuse_prob", "evaluator"):
            v = getattr(args, key, None)
            if v is not None:
                values[key] = str(v)
        try:
            self.timings = FrameTimings.from_mapping(file_timings)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        self.values = values
        self.w0 = _int_list(values["w0"], "w0")
        self.n = _int_list(values["n"], "n")
        self.m = _int_list(values["m"], "m")
        try:
            self.seed = int(values["seed"])
            self.reps = int(values["reps"])
            self.horizon = int(values["horizon"])
            self.refuse_prob = float(values["refuse_prob"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.mode = values["mode"]
        self.evaluator = values["evaluator"]
        if self.mode not in ("pairs", "stations"):
            raise ConfigError(f"--mode must be pairs or stations, got {self.mode!r}")
        for w in self.w0:
            if w < 2 or w & (w - 1):
                raise ConfigError(f"W0 values must be powers of two >= 2, got {w}")
        if any(m < 2 for m in self.m):
            raise ConfigError("M values must be >= 2")
        if any(n < 1 for n in self.n):
            raise ConfigError("N values must be >= 1")

    def echo(self) -> str:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        lines += [f"{k} = {v}" for k, v in asdict(self.timings).items()]
        lines.append(f"threads = {simulator.thread_cap()}")
        text = "\n".join(lines) + "\n"
        if self.matrix is not None:
            text += format_matrix(self.matrix)
        return text


class Outputs:
    """Collects artifacts in memory and writes them only after success."""

    def __init__(self, out_dir: str, command: str):
        self.dir = Path(out_dir)
        self.command = command
        self.files: dict[str, str] = {}

    def csv(self, name: str, columns, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
        self.files[name] = buf.getvalue()

    def text(self, name: str, content: str) -> None:
        self.files[name] = content

    def commit(self) -> list[Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, content in self.files.items():
            path = self.dir / name
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(content)
            os.replace(tmp, path)
            written.append(path)
        return written


# --- subcommands ------------------------------------------------------------

def cmd_analytic(s: Settings, out: Outputs) -> None:
    rows = []
    for m in s.m:
        for n in s.n:
            for w0 in s.w0:
                params = ProtocolParams(w0, m, n)
                p, summ = analytic.solve_fixed_point(params)
                der = analytic.solve_derivatives(params, p, summ)
                rows.append({
                    "mode": "analytic", "N": n, "W0": w0, "M": m, "p": p, "eta": summ.eta,
                    "deta_dp": der.deta,
                    "C": analytic.throughput(summ.eta, n, s.timings),
                    "C_baseline": analytic.baseline_csma_throughput(n, w0, m, s.timings),
                })
    out.csv("analytic.csv", ANALYTIC_COLUMNS, rows)


def _sim_rows(agg: simulator.SimStats, n: int, w0: int, m: int, base_seed: int) -> list[dict]:
    rows = []
    for r in agg.reps:
        rows.append({"mode": r.mode, "N": n, "W0": w0, "M": m, "seed": r.seed,
                     "p_hat": r.collision_prob_hat, "C_hat": r.throughput_hat,
                     "ci_p": "", "ci_C": "", "slots": r.virtual_slots})
    rows.append({"mode": f"{agg.mode}-mean", "N": n, "W0": w0, "M": m, "seed": base_seed,
                 "p_hat": agg.collision_prob_hat, "C_hat": agg.throughput_hat,
                 "ci_p": agg.ci95[0], "ci_C": agg.ci95[1], "slots": agg.virtual_slots})
    return rows


def cmd_simulate(s: Settings, out: Outputs) -> None:
    rows = []
    pmap = None
    if s.mode == "stations":
        if s.matrix is None:
            raise ConfigError("stations mode needs a [matrix] block in the --timings file")
        pmap = validate_partner_map(s.matrix)
    for m in s.m:
        for w0 in s.w0:
            if pmap is not None:
                params = ProtocolParams(w0, m, max(1, pmap.n_pairs))
                fn = simulator.stations_fn(pmap, params, s.timings, s.horizon, s.refuse_prob)
                agg = simulator.replicate(fn, s.reps, s.seed)
                rows += _sim_rows(agg, pmap.n_pairs, w0, m, s.seed)
                continue
            for n in s.n:
                params = ProtocolParams(w0, m, n)
                agg = simulator.replicate(simulator.pairs_fn(params, s.timings, s.horizon),
                                          s.reps, s.seed)
                rows += _sim_rows(agg, n, w0, m, s.seed)
    out.csv("simulate.csv", SIM_COLUMNS, rows)


def compare_rows(s: Settings) -> list[dict]:
    rows = []
    for m in s.m:
        for n in s.n:
            for w0 in s.w0:
                params = ProtocolParams(w0, m, n)
                p, _, c = analytic.ds_throughput(params, s.timings)
                ds = simulator.replicate(simulator.pairs_fn(params, s.timings, s.horizon),
                                         s.reps, s.seed)
                base = simulator.replicate(simulator.baseline_fn(n, w0, m, s.timings, s.horizon),
                                           s.reps, s.seed)
                rows.append({
                    "N": n, "W0": w0, "M": m, "p_analytic": p, "p_sim": ds.collision_prob_hat,
                    "ci_p": ds.ci95[0], "C_ds_analytic": c, "C_ds_sim": ds.throughput_hat,
                    "ci_C": ds.ci95[1],
                    "C_baseline": analytic.baseline_csma_throughput(n, w0, m, s.timings),
                    "C_baseline_sim": base.throughput_hat, "ci_C_baseline": base.ci95[1],
                })
    return rows


def cmd_compare(s: Settings, out: Outputs) -> None:
    out.csv("compare.csv", COMPARE_COLUMNS, compare_rows(s))


def cmd_optimize_w0(s: Settings, out: Outputs) -> None:
    rows = []
    m = s.m[0]
    for n in s.n:
        ch = optimizer.optimal_w0(n, s.timings, m, evaluator=s.evaluator, with_full=True)
        left, right = ch.candidates[0], ch.candidates[-1]
        rows.append({"N": n, "relaxed": ch.relaxed, "W0_left": left, "W0_right": right,
                     "chosen": ch.chosen, "C_left": ch.c_values[left],
                     "C_right": ch.c_values[right], "evaluator": ch.evaluator,
                     "C_full_left": ch.c_values_full[left],
                     "C_full_right": ch.c_values_full[right]})
    out.csv("optimize_w0.csv", W0_COLUMNS, rows)


def cmd_optimize_n(s: Settings, out: Outputs) -> None:
    rows = []
    m = s.m[0]
    for w0 in s.w0:
        ch = optimizer.optimal_n(w0, s.timings, m)
        rows.append({"W0": w0, "eta_uniform": ch.eta, "relaxed": ch.relaxed,
                     "N_left": ch.candidates[0], "N_right": ch.candidates[1],
                     "candidate_choice": ch.candidate_choice, "chosen": ch.chosen,
                     "C_chosen": ch.c_values[ch.chosen], "closed_form": ch.closed_form,
                     "printed_form": ch.printed_form})
    out.csv("optimize_n.csv", N_COLUMNS, rows)


def cmd_optimize_map(s: Settings, out: Outputs, first_only: bool = False) -> None:
    if s.matrix is None:
        raise ConfigError("optimize-map needs the connectivity matrix as a [matrix] block")
    target = int(s.values.get("target", s.n[0]))
    state = optimizer.greedy_partner_map(s.matrix, target, first_only=first_only)
    body = "".join(format_matrix(B) + "\n" for B in state.current_set)
    out.text("optimize_map.txt", body)
    summary = state.summary()
    summary["target_N"] = target
    summary["history"] = state.history
    out.text("optimize_map.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


def reproduce_table5(timings: FrameTimings, m_stages: int = 4, evaluator: str = "uniform") -> dict:
    """Run both optimizers on the published inputs and mark each cell."""
    w_rows, n_rows, lines = [], [], []
    for n, expect in TABLE5_W0.items():
        ch = optimizer.optimal_w0(n, timings, m_stages, evaluator=evaluator, with_full=True)
        full_pick = max(ch.c_values_full, key=ch.c_values_full.get)
        status = "MATCH" if ch.chosen == expect else f"MISMATCH(relaxed={ch.relaxed:.2f}, chosen={ch.chosen})"
        w_rows.append({"kind": "W0*", "input": n, "table": expect, "relaxed": ch.relaxed,
                       "chosen": ch.chosen, "full_model_pick": full_pick, "status": status.split("(")[0]})
        lines.append(f"W0* N={n:<4d} table={expect:<5d} relaxed={ch.relaxed:9.3f} "
                     f"chosen={ch.chosen:<5d} full-model pick={full_pick:<5d} {status}")
    for w0, expect in TABLE5_N.items():
        ch = optimizer.optimal_n(w0, timings, m_stages)
        status = "MATCH" if ch.chosen == expect else f"MISMATCH(relaxed={ch.relaxed:.3f}, chosen={ch.chosen})"
        n_rows.append({"kind": "N*", "input": w0, "table": expect, "relaxed": ch.relaxed,
                       "chosen": ch.chosen, "full_model_pick": ch.candidate_choice,
                       "status": status.split("(")[0]})
        lines.append(f"N*  W0={w0:<4d} table={expect:<5d} relaxed={ch.relaxed:9.3f} "
                     f"candidate pick={ch.candidate_choice:<4d} local max={ch.chosen:<4d} {status}")
    return {"rows": w_rows + n_rows, "lines": lines}


def cmd_table5(s: Settings, out: Outputs) -> None:
    rep = reproduce_table5(s.timings, s.m[0], s.evaluator)
    cols = ["kind", "input", "table", "relaxed", "chosen", "full_model_pick", "status"]
    out.csv("table5.csv", cols, rep["rows"])
    out.text("table5.txt", "\n".join(rep["lines"]) + "\n")
    print("\n".join(rep["lines"]))


COMMANDS = {
    "analytic": cmd_analytic,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "optimize-w0": cmd_optimize_w0,
    "optimize-n": cmd_optimize_n,
    "optimize-map": cmd_optimize_map,
    "reproduce-table5": cmd_table5,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dscsma", description="DS-CSMA/CA analysis and simulation")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--w0", help="comma-separated initial windows")
        sp.add_argument("--n", help="comma-separated TCPair counts (target entries for optimize-map)")
        sp.add_argument("--m", help="comma-separated stage counts")
        sp.add_argument("--timings", help="config file: key = value lines and an optional [matrix] block")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--reps", type=int)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--out", default=".")
        sp.add_argument("--mode", choices=["pairs", "stations"])
        sp.add_argument("--refuse-prob", dest="refuse_prob", type=float)
        sp.add_argument("--evaluator", choices=sorted(optimizer.EVALUATORS))
        if name == "optimize-map":
            sp.add_argument("--first-only", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Outputs(args.out, args.command)
    try:
        settings = Settings(args)
        if args.command == "optimize-map":
            cmd_optimize_map(settings, out, first_only=args.first_only)
        else:
            COMMANDS[args.command](settings, out)
        out.text(f"{args.command}.config.txt", settings.echo())
        out.commit()
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DSCSMAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
