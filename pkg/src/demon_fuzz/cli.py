"""Command-line front end: ``demon-fuzz fuzz|triage|minimize|filter-check|targets|report``.

Exit status is 0 on success, 2 when a fuzz campaign stored at least one
finding, and 1 on any configuration or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .campaign import (
    CampaignConfig,
    load_config,
    load_findings,
    run_campaign,
    write_finding,
    write_output,
)
from .fuzzer import ConfigError
from .steering import HarnessError, StepBudget, execute_input, is_finding
from .steering import dedup_key as verdict_key
from .targets import REGISTRY, get_harness
from .triage import (
    CampaignHeader,
    FlakyPredicate,
    emit_report,
    filter_check,
    minimize,
    render_report,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FINDINGS = 2

log = logging.getLogger("demon_fuzz")


class CliError(Exception):
    pass


def _csv(value: str) -> list[str]:
    return [v for v in (s.strip() for s in value.split(",")) if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demon-fuzz", description="Steered coverage-guided fuzzing of ML pipelines.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuzz", help="run a campaign")
    f.add_argument("--config", help="JSON campaign config; flags given on the command line win")
    f.add_argument("--target")
    f.add_argument("--variant", choices=["clean", "vulnerable"])
    f.add_argument("--seeds", help="seed directory (default: the target's bundled seeds)")
    f.add_argument("--out")
    f.add_argument("--max-execs", type=int)
    f.add_argument("--rng-seed", type=int)
    f.add_argument("--step-budget", type=int)
    f.add_argument("--oracle", type=_csv, help="comma-separated oracle ids to enable")
    f.add_argument("--epsilon", type=float)
    f.add_argument("--tol", type=float)
    f.add_argument("--max-iter", type=int)
    f.add_argument("--workers", type=int)

    t = sub.add_parser("triage", help="summarize a findings directory")
    t.add_argument("dir")

    m = sub.add_parser("minimize", help="shrink a stored finding's witness")
    m.add_argument("--out", required=True, help="campaign output directory")
    m.add_argument("--finding", required=True, help="finding id, e.g. f0000")

    fc = sub.add_parser("filter-check", help="count findings a strict reference parser accepts")
    fc.add_argument("dir")
    fc.add_argument("--target", required=True)
    fc.add_argument("--json", action="store_true")

    tl = sub.add_parser("targets", help="show registered harnesses")
    tl.add_argument("--list", action="store_true", help="print the harness manifest (the default)")

    r = sub.add_parser("report", help="re-emit a campaign's report from its output directory")
    r.add_argument("out")
    return p


_FLAG_TO_KEY = {
    "target": "target", "variant": "variant", "seeds": "seeds", "out": "out",
    "max_execs": "max_execs", "rng_seed": "rng_seed", "step_budget": "step_budget",
    "oracle": "oracles", "epsilon": "epsilon", "tol": "tol", "max_iter": "max_iter",
    "workers": "workers",
}


def resolve_config(args: argparse.Namespace) -> CampaignConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    if not base.get("target"):
        raise ConfigError("--target is required")
    if not base.get("out"):
        raise ConfigError("--out is required")
    cfg = CampaignConfig.from_dict(base)
    cfg.validate()
    return cfg


def cmd_fuzz(args) -> int:
    cfg = resolve_config(args)
    result = run_campaign(cfg)
    write_output(cfg.out, result)
    s = result.stats
    print(f"{cfg.target}/{cfg.variant}: {s.executions} execs, {s.parse_rejects} parse rejects, "
          f"{result.coverage.edges_covered()} edges, {len(result.queue)} queued, "
          f"{len(result.findings)} findings -> {cfg.out}")
    for f in result.findings:
        print(f"  {f.finding_id} {f.dedup_key[0]}:{f.dedup_key[1]} {f.component.value}/{f.impact.value}")
    return EXIT_FINDINGS if result.findings else EXIT_OK


def _header_for(dir_: Path) -> CampaignHeader:
    root = dir_.parent if dir_.name == "findings" else dir_
    rep = root / "report.json"
    if rep.is_file():
        try:
            c = json.loads(rep.read_text())["campaign"]
            extra = {k: v for k, v in c.items()
                     if k not in ("target", "variant", "rng_seed", "executions", "parse_rejects",
                                  "edges_covered")}
            return CampaignHeader(c["target"], c["variant"], c["rng_seed"], c["executions"],
                                  c["parse_rejects"], c["edges_covered"], extra)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("ignoring unreadable report.json: %s", exc)
    return CampaignHeader("unknown", "unknown", 0)


def cmd_triage(args) -> int:
    d = Path(args.dir)
    try:
        findings = load_findings(d, warn=lambda msg: print(f"warning: {msg}", file=sys.stderr))
    except (OSError, FileNotFoundError, PermissionError) as exc:
        raise CliError(str(exc)) from None
    sys.stdout.write(render_report(emit_report(_header_for(d), findings)))
    return EXIT_OK


def reproduces(harness, budget: StepBudget, oracles, key):
    def predicate(data: bytes) -> bool:
        verdict, _, _ = execute_input(harness, data, budget, oracles)
        return is_finding(verdict) and verdict_key(verdict) == key
    return predicate


def cmd_minimize(args) -> int:
    out = Path(args.out)
    cfg = load_config(out)
    findings = {f.finding_id: f for f in load_findings(out)}
    finding = findings.get(args.finding)
    if finding is None:
        raise CliError(f"no finding {args.finding!r} under {out}")
    harness = get_harness(cfg.target, cfg.variant, **cfg.harness_params())
    budget = StepBudget(cfg.step_budget or harness.default_step_budget)
    oracles = cfg.oracles if cfg.oracles is not None else harness.default_oracles()
    try:
        small = minimize(finding.data, reproduces(harness, budget, oracles, finding.dedup_key))
    except (FlakyPredicate, ValueError) as exc:
        raise CliError(f"cannot minimize {finding.finding_id}: {exc}") from None
    before = len(finding.data)
    finding.data = small
    finding.minimized = True
    write_finding(out, finding)
    _mark_minimized(out, finding.finding_id)
    print(f"{finding.finding_id}: {before} -> {len(small)} bytes ({finding.input_path})")
    return EXIT_OK


def _mark_minimized(out: Path, finding_id: str) -> None:
    rep = out / "report.json"
    if not rep.is_file():
        return
    report = json.loads(rep.read_text())
    for rec in report.get("findings", []):
        if rec.get("finding_id") == finding_id:
            rec["minimized"] = True
    rep.write_text(render_report(report))


def cmd_filter_check(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise CliError(f"{d} is not a directory")
    harness = get_harness(args.target, "clean")
    files = sorted(p for p in d.rglob("*.bin") if p.is_file())
    stats = filter_check((p.read_bytes() for p in files), harness.reference_accepts)
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2))
    else:
        print(stats.render())
        for flag in stats.flags():
            print(f"note: {flag}")
    return EXIT_OK


def cmd_targets(args) -> int:
    manifest = [REGISTRY[name]().manifest() for name in sorted(REGISTRY)]
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise CliError(f"{out} is not a directory")
    findings = load_findings(out, warn=lambda msg: print(f"warning: {msg}", file=sys.stderr)) \
        if (out / "findings").is_dir() else []
    sys.stdout.write(render_report(emit_report(_header_for(out), findings)))
    return EXIT_OK


COMMANDS = {
    "fuzz": cmd_fuzz,
    "triage": cmd_triage,
    "minimize": cmd_minimize,
    "filter-check": cmd_filter_check,
    "targets": cmd_targets,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; that code is reserved for findings.
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CliError, HarnessError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"demon-fuzz: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
