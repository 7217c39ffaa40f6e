"""Command-line front end.

Reports go to stdout in one of three formats; diagnostics and errors go to
stderr.  Exit codes: 0 success, 1 diagnostics or validation failure, 2 usage
error, 3 a ``demo`` value outside its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from groupblame import registry
from groupblame.attribution import attribute, check_axioms, coalition_values, shapley_exact
from groupblame.blame import (
    BASELINE_ID,
    MONOTONICITY_TOLERANCE,
    Scenario,
    gb,
    gb_table,
    natural_key,
    validate_monotonicity,
    validate_scenario,
)
from groupblame.causal import EXOGENOUS, check_intervention
from groupblame.dsl import fingerprint, parse_expression, parse_with_diagnostics, serialize
from groupblame.epistemics import FactoredState, prob, sample_prob
from groupblame.errors import BlameError, UnknownScenario
from groupblame.expressions import event, names_in

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvalidInput(Exception):
    pass


@dataclass
class Report:
    command: list[str]
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)
    scenario: Scenario | None = None
    summary: dict[str, Any] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def as_dict(self, timing: float | None) -> dict[str, Any]:
        out: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "command": self.command}
        if self.scenario is not None:
            out["scenario"] = {"name": self.scenario.name, "fingerprint": fingerprint(self.scenario)}
        out["columns"] = self.columns
        out["rows"] = self.rows
        out["summary"] = self.summary
        meta = dict(self.metadata)
        if timing is not None:
            meta["runtime_seconds"] = timing
        out["metadata"] = meta
        return out


# -- output -----------------------------------------------------------------


def format_float(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json(value: Any, indent: int = 0) -> str:
    pad = "  " * indent
    if value is None or isinstance(value, bool):
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        text = format_float(float(value))
        return text if math.isfinite(float(value)) else json.dumps(text)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}  {json.dumps(str(k))}: {_json(v, indent + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (list, tuple, dict)) for v in value):
            return "[" + ", ".join(_json(v) for v in value) + "]"
        items = [f"{pad}  {_json(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    return str(value)


def _table_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return format(v, ".6g") if math.isfinite(v) else format_float(v)
    return _cell(value)


def write_report(report: Report, fmt: str, out, timing: float | None) -> None:
    if fmt == "json":
        out.write(_json(report.as_dict(timing)) + "\n")
    elif fmt == "csv":
        writer = csv.writer(out)
        writer.writerow(report.columns)
        for row in report.rows:
            writer.writerow([_cell(v) for v in row])
    else:
        cells = [report.columns] + [[_table_cell(v) for v in row] for row in report.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(report.columns))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if report.scenario is not None:
            out.write(f"scenario {report.scenario.name}\n")
        out.write("\n".join(lines) + "\n")
        for key, value in report.summary.items():
            if not isinstance(value, (dict, list)):
                out.write(f"{key}: {_table_cell(value)}\n")


# -- loading ----------------------------------------------------------------


def load(target: str) -> Scenario:
    """A scenario from a file path, falling back to a built-in name."""
    path = Path(target)
    if path.is_file():
        data = path.read_bytes()
    else:
        name = path.name[:-len(".blame")] if path.name.endswith(".blame") else target
        try:
            data = registry.source(name).encode("utf-8")
        except UnknownScenario as exc:
            raise UsageError(f"{target}: no such file, and {exc}") from None
    scenario, diags = parse_with_diagnostics(data)
    for d in diags:
        print(f"{target}:{d}", file=sys.stderr)
    if scenario is None:
        raise InvalidInput(f"{target}: {sum(d.severity == 'error' for d in diags)} error(s)")
    return scenario


def _assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise UsageError(f"expected VAR=value, got {text!r}")
    var, value = (s.strip() for s in text.split("=", 1))
    if not var or not value:
        raise UsageError(f"expected VAR=value, got {text!r}")
    return var, value


def _coalition(scenario: Scenario, text: str) -> list[str]:
    names = [a.strip() for a in text.split(",") if a.strip()]
    unknown = [a for a in names if a not in scenario.agent_index]
    if unknown:
        raise UsageError(f"unknown agent(s) {', '.join(unknown)}; agents are {', '.join(scenario.agents)}")
    return sorted(set(names), key=natural_key)


def _members(scenario: Scenario, mask: int) -> str:
    return ",".join(scenario.members(mask))


# -- sweep paths ------------------------------------------------------------


def parse_range(text: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--range must be lo:hi:step, got {text!r}") from None
    if not (step > 0 and hi >= lo and all(map(math.isfinite, (lo, hi, step)))):
        raise UsageError("--range needs finite lo <= hi and step > 0")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    if count > 100000:
        raise UsageError("--range produces too many points")
    return [float(format(lo + i * step, ".12g")) for i in range(count)]


def _set_marginal(dist: dict[str, float], value: str, p: float) -> dict[str, float]:
    others = [v for v in dist if v != value]
    out = dict(dist)
    out[value] = p
    rest = math.fsum(dist[v] for v in others)
    for v in others:
        out[v] = (1.0 - p) * (dist[v] / rest if rest > 0 else 1.0 / len(others))
    return out


def apply_path(scenario: Scenario, path: str, value: float) -> Scenario:
    """Set one numeric leaf: ``param.NAME``, ``balance`` or ``exogenous.VAR.value``.

    ``exogenous.*.value`` sets the named value of every exogenous variable
    whose range contains it.
    """
    parts = path.split(".")
    if parts == ["balance"] or parts == ["param", "N"]:
        return replace(scenario, balance=value)
    if len(parts) == 2 and parts[0] == "param":
        if parts[1] not in scenario.params:
            raise UsageError(f"unknown parameter {parts[1]!r}; parameters are "
                             f"{', '.join(['N', *sorted(scenario.params)])}")
        return replace(scenario, params={**scenario.params, parts[1]: value})
    if len(parts) == 3 and parts[0] == EXOGENOUS:
        state = scenario.base_state
        if not isinstance(state, FactoredState):
            raise UsageError("exogenous paths need a scenario with independent marginals")
        if not 0.0 <= value <= 1.0:
            raise InvalidInput(f"probability {value!r} outside [0, 1]")
        _, var, val = parts
        targets = list(state.marginals) if var == "*" else [var]
        marginals = {k: dict(v) for k, v in state.marginals.items()}
        hit = False
        for name in targets:
            if name not in marginals:
                raise UsageError(f"unknown exogenous variable {name!r}")
            if val in marginals[name]:
                marginals[name] = _set_marginal(marginals[name], val, value)
                hit = True
            elif var != "*":
                raise UsageError(f"{val!r} is not in the range of {name}")
        if not hit:
            raise UsageError(f"no exogenous variable has value {val!r}")
        return replace(scenario, base_state=FactoredState(state.model, marginals))
    raise UsageError(f"unsupported parameter path {path!r}; use param.NAME, balance or "
                     "exogenous.VAR.value")


def _checked(scenario: Scenario) -> Scenario:
    findings = validate_scenario(scenario)
    if findings:
        raise InvalidInput("; ".join(map(str, findings)))
    return scenario


# -- commands ---------------------------------------------------------------


def cmd_validate(args, argv) -> tuple[Report, int]:
    scenario = load(args.file)
    tol = args.tolerance if args.tolerance is not None else MONOTONICITY_TOLERANCE
    report = Report(argv, ["check", "status", "detail"], scenario=scenario)
    findings = validate_scenario(scenario)
    for f in findings:
        report.rows.append(["scenario", "error", str(f)])
        print(f"{args.file}: {f}", file=sys.stderr)
    if findings:
        return report, EXIT_INVALID
    mono = validate_monotonicity(scenario, tolerance=tol, threads=args.threads)
    report.rows.append(["model", "ok", "no findings"])
    report.rows.append(["monotonicity", "ok" if mono.ok else "violated",
                        f"{mono.method}: {mono.total_violations} violation(s)"])
    for s, t, vs, vt in mono.violations[:20]:
        report.rows.append(["monotonicity", "violated",
                            f"gb({{{_members(scenario, s)}}}) = {vs!r} > gb({{{_members(scenario, t)}}}) = {vt!r}"])
    report.summary = {"ok": mono.ok, "monotonicity_violations": mono.total_violations}
    report.metadata = {"tolerance": tol, "method": mono.method}
    return report, EXIT_OK if mono.ok else EXIT_INVALID


def cmd_query(args, argv) -> tuple[Report, int]:
    scenario = load(args.file)
    model = scenario.base_state.reference_model
    iv = dict(_assignment(a) for a in args.intervene)
    try:
        check_intervention(model, iv)
    except BlameError as exc:
        raise UsageError(str(exc)) from None
    formulas = []
    if args.event:
        for text in args.event:
            try:
                formulas.append((text, parse_expression(text)))
            except BlameError as exc:
                raise UsageError(f"--event: {exc}") from None
    else:
        from groupblame.expressions import format_expr

        formulas.append((format_expr(scenario.outcome), scenario.outcome))
        variables = model.signature.variables
        for name in sorted(names_in(scenario.outcome) & set(variables), key=natural_key):
            for value in variables[name].range:
                text = f"{name} = {value}"
                if text != formulas[0][0]:
                    formulas.append((text, event(name, value)))
    report = Report(argv, ["formula", "probability", "stderr"], scenario=scenario)
    for text, phi in formulas:
        try:
            if args.sample:
                est = sample_prob(scenario.base_state, iv, phi, args.sample, args.seed)
            else:
                est = prob(scenario.base_state, iv, phi)
        except BlameError as exc:
            raise UsageError(str(exc)) from None
        report.rows.append([text, est.value, est.stderr])
    report.metadata = {"intervention": {k: iv[k] for k in sorted(iv)},
                       "method": "sampled" if args.sample else "exact"}
    if args.sample:
        report.metadata.update({"samples": args.sample, "seed": args.seed})
    return report, EXIT_OK


def cmd_blame_group(args, argv) -> tuple[Report, int]:
    scenario = _checked(load(args.file))
    report = Report(argv, ["coalition", "size", "gb", "argmax"], scenario=scenario)
    if args.all:
        values, argmax = gb_table(scenario, args.threads)
        order = sorted(range(len(values)), key=lambda m: (bin(m).count("1"), m))
        for mask in order:
            report.rows.append([_members(scenario, mask), bin(mask).count("1"),
                                float(values[mask]), argmax[mask]])
    else:
        coalitions = args.coalition if args.coalition is not None else [",".join(scenario.agents)]
        for text in coalitions:
            members = _coalition(scenario, text)
            res = gb(scenario, members)
            report.rows.append([",".join(members), len(members), res.value, res.argmax])
    if report.rows:
        report.summary = {"group_gb": report.rows[-1][2], "argmax": report.rows[-1][3]}
    report.metadata = {"balance": scenario.balance}
    return report, EXIT_OK


def _attribution(args, scenario: Scenario):
    method = "sampled" if args.sample else "exact"
    return attribute(scenario, method, args.sample or 0, args.seed, args.threads,
                     args.repair_monotonicity)


def cmd_blame_agent(args, argv) -> tuple[Report, int]:
    scenario = _checked(load(args.file))
    result = _attribution(args, scenario)
    report = Report(argv, ["agent", "db", "stderr"], scenario=scenario)
    for a, v, e in zip(result.agents, result.values, result.stderr):
        report.rows.append([a, float(v), float(e)])
    report.summary = {"group_gb": result.grand_value,
                      "efficiency_residual": result.efficiency_residual,
                      "shapley": result.as_dict()}
    report.metadata = {"method": result.method, "repair_monotonicity": args.repair_monotonicity}
    if args.sample:
        report.metadata.update({"permutations": args.sample, "seed": args.seed})
    return report, EXIT_OK


def cmd_axioms(args, argv) -> tuple[Report, int]:
    scenario = _checked(load(args.file))
    tol = args.tolerance if args.tolerance is not None else 1e-9
    rep = check_axioms(scenario, seed=args.seed, threads=args.threads)
    rows = [
        ["efficiency", rep.efficiency_residual <= tol, rep.efficiency_residual],
        ["symmetry", rep.symmetry_deviation <= tol, rep.symmetry_deviation],
        ["dummy", rep.dummy_max_abs <= tol, rep.dummy_max_abs],
        ["monotone_game", rep.monotone, 0.0 if rep.monotone else 1.0],
        ["non_negativity", (not rep.monotone) or rep.min_value >= -1e-12, rep.min_value],
    ]
    report = Report(argv, ["axiom", "ok", "value"], rows, scenario=scenario)
    report.summary = {"ok": all(r[1] for r in rows), "dummy_agents": rep.dummy_agents,
                      "notes": rep.notes}
    report.metadata = {"tolerance": tol, "seed": args.seed}
    return report, EXIT_OK if report.summary["ok"] else EXIT_INVALID


def cmd_sweep(args, argv) -> tuple[Report, int]:
    scenario = _checked(load(args.file))
    points = parse_range(args.range)
    report = Report(argv, ["value", "group_gb", "argmax", *[f"db_{a}" for a in scenario.agents]],
                    scenario=scenario)
    for x in points:
        varied = _checked(apply_path(scenario, args.param, x))
        game = coalition_values(varied, args.threads, args.repair_monotonicity)
        result = shapley_exact(game)
        report.rows.append([x, game.grand_value, game.argmax[-1], *map(float, result.values)])
    report.metadata = {"param": args.param, "range": args.range}
    return report, EXIT_OK


def _check(kind, expected, actual, tol) -> bool:
    if isinstance(expected, str):
        return actual == expected
    if kind == "group_gb_at_least":
        return actual >= expected
    return abs(actual - expected) <= tol


def run_demo(scenario: Scenario, name: str, tolerance: float | None = None,
             threads: int | None = None):
    """Rows ``[check, agent, expected, actual, tolerance, ok]`` and a summary dict."""
    game = coalition_values(scenario, threads)
    result = shapley_exact(game)
    rows = []
    for exp in registry.expectations(name):
        tol = exp.tolerance if tolerance is None else tolerance
        if exp.kind in ("group_gb", "group_gb_at_least"):
            actual = game.grand_value
        elif exp.kind == "argmax":
            actual = game.argmax[-1]
        elif exp.kind == "shapley":
            actual = result[exp.agent]
        elif exp.kind == "all_shapley":
            actual = float(np.max(np.abs(result.values)))
        elif exp.kind == "probability":
            actual = scenario.base_probability
        else:
            raise ValueError(f"unknown expectation kind {exp.kind!r}")
        rows.append([exp.kind, exp.agent or "", exp.expected, actual, tol,
                     _check(exp.kind, exp.expected, actual, tol)])
    summary = {"group_gb": game.grand_value, "argmax": game.argmax[-1],
               "shapley": result.as_dict(), "efficiency_residual": result.efficiency_residual}
    return rows, summary


def menu_interpretation_rows(name: str, threads: int | None = None) -> list[list[Any]]:
    """Shapley checks under the four sub-coalition menu readings."""
    scenario = registry.builtin(name)
    rows = []
    for label, switch_only, focal_counts in registry.MENU_VARIANTS:
        variant = registry.menu_variant(scenario, switch_only, focal_counts)
        result = shapley_exact(coalition_values(variant, threads))
        for exp in registry.expectations(name):
            if exp.kind == "shapley":
                actual = result[exp.agent]
                rows.append([label, exp.agent, exp.expected, actual, exp.tolerance,
                             abs(actual - exp.expected) <= exp.tolerance])
    return rows


def cmd_demo(args, argv) -> tuple[Report, int]:
    if args.name not in registry.available():
        raise UsageError(str(UnknownScenario(args.name, registry.available())))
    scenario = registry.builtin(args.name)
    rows, summary = run_demo(scenario, args.name, args.tolerance, args.threads)
    report = Report(argv, ["check", "agent", "expected", "actual", "tolerance", "ok"], rows,
                    scenario=scenario, summary=summary)
    failed_shapley = [r for r in rows if r[0] == "shapley" and not r[-1]]
    if failed_shapley:
        variants = menu_interpretation_rows(args.name, args.threads)
        report.summary["menu_interpretations"] = [
            {"variant": v, "agent": a, "expected": e, "actual": x, "ok": ok}
            for v, a, e, x, _, ok in variants]
        for v, a, e, x, _, ok in variants:
            print(f"menu variant [{v}] {a}: {x:.6f} (expected {e}) {'ok' if ok else 'miss'}",
                  file=sys.stderr)
    report.summary["ok"] = all(r[-1] for r in rows)
    report.metadata = {"tolerance_override": args.tolerance}
    for r in rows:
        if not r[-1]:
            print(f"demo {args.name}: {r[0]} {r[1]} expected {r[2]} got {r[3]}", file=sys.stderr)
    return report, EXIT_OK if report.summary["ok"] else EXIT_TOLERANCE


def cmd_list(args, argv) -> tuple[Report, int]:
    report = Report(argv, ["name", "agents", "focal"])
    for name in registry.available():
        s = registry.builtin(name)
        report.rows.append([name, len(s.agents), s.focal])
    return report, EXIT_OK


def cmd_show(args, argv) -> tuple[Report | None, int]:
    sys.stdout.write(serialize(load(args.file)))
    return None, EXIT_OK


# -- argument parsing -------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _common(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS lets the same flags appear before or after the subcommand
    g = parser.add_argument_group("global options")
    g.add_argument("--format", choices=("json", "csv", "table"), default=argparse.SUPPRESS)
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS)
    g.add_argument("--tolerance", type=float, default=argparse.SUPPRESS)
    g.add_argument("--repair-monotonicity", action="store_true", default=argparse.SUPPRESS,
                   help="replace v by its monotone closure before attribution")
    g.add_argument("--timing", action="store_true", default=argparse.SUPPRESS,
                   help="include wall-clock runtime in JSON metadata")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groupblame", description="Group blame and Shapley attribution.")
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="diagnostics and monotonicity report")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("query", help="exact outcome probability")
    p.add_argument("file")
    p.add_argument("--intervene", action="append", default=[], metavar="VAR=value")
    p.add_argument("--event", action="append", default=[], metavar="FORMULA")
    p.add_argument("--sample", type=_positive_int, metavar="N")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("blame", help="group or per-agent blame")
    bsub = p.add_subparsers(dest="blame_command", required=True, parser_class=_Parser)
    g = bsub.add_parser("group", help="gb and argmax per coalition")
    g.add_argument("file")
    which = g.add_mutually_exclusive_group()
    which.add_argument("--coalition", action="append", metavar="a1,a2")
    which.add_argument("--all", action="store_true")
    g.set_defaults(func=cmd_blame_group)
    _common(g)
    a = bsub.add_parser("agent", help="Shapley attribution")
    a.add_argument("file")
    how = a.add_mutually_exclusive_group()
    how.add_argument("--exact", action="store_true")
    how.add_argument("--sample", type=_positive_int, metavar="N")
    a.set_defaults(func=cmd_blame_agent)
    _common(a)

    p = sub.add_parser("axioms", help="efficiency, symmetry and dummy checks")
    p.add_argument("file")
    p.set_defaults(func=cmd_axioms)

    p = sub.add_parser("sweep", help="gb and attribution across one numeric field")
    p.add_argument("file")
    p.add_argument("--param", required=True, metavar="PATH")
    p.add_argument("--range", required=True, metavar="LO:HI:STEP")
    p.set_defaults(func=cmd_sweep, default_format="csv")

    p = sub.add_parser("demo", help="run a built-in against its expected values")
    p.add_argument("name")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("list", help="list built-in scenarios")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("show", help="print the canonical text of a scenario")
    p.add_argument("file")
    p.set_defaults(func=cmd_show)

    for choice in sub.choices.values():
        if choice.prog.split()[-1] != "blame":
            _common(choice)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    defaults = {"format": getattr(args, "default_format", "table"), "seed": 0, "threads": None,
                "tolerance": None, "repair_monotonicity": False, "timing": False}
    for key, value in defaults.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    args.sample = getattr(args, "sample", None)
    start = time.perf_counter()
    try:
        report, code = args.func(args, argv)
    except UsageError as exc:
        print(f"groupblame: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInput as exc:
        print(f"groupblame: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BlameError as exc:
        print(f"groupblame: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if report is not None:
        elapsed = time.perf_counter() - start if args.timing else None
        write_report(report, args.format, sys.stdout, elapsed)
    return code


if __name__ == "__main__":
    sys.exit(main())
