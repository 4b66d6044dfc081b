"""Command-line entry points.

    zincsmith solve BUNDLE_DIR   one problem end to end; writes a run record
    zincsmith bench MANIFEST     solve + score a problem set; writes a report
    zincsmith ablate MANIFEST    bench under a named agent-subset configuration

Exit codes for solve are a stable contract: 0 when a model was selected (or
picked by fallback), 2 when the run exhausted its budgets with nothing to
return, 1 for infrastructure faults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import ZincsmithError
from .evaluation import (
    checker_frr_trials,
    compute_frr,
    compute_sa,
    compute_sa_at_1,
    evaluate_solution,
)
from .gateway import build_gateway
from .gates import CheckingPipeline
from .mzn.toolchain import resolve_toolchain
from .problems import load_bundle
from .sandbox import LocalExecutor, ProcessSandbox
from .templates import TemplateLibrary
from .workflow import WorkflowConfig, WorkflowRunner

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

ABLATION_CONFIGS = {
    # single trajectory, no self-refinement
    "1a": {"agents_per_role": 1, "refine_budget": 0, "use_validation": False,
           "selection_rule": "first_survivor"},
    # single trajectory with self-refinement
    "1b": {"agents_per_role": 1, "refine_budget": 4, "use_validation": False,
           "selection_rule": "first_survivor"},
    # multi-trajectory modeling, majority over formatted solutions
    "1": {"use_validation": False, "selection_rule": "solution_majority"},
    # + validation agents; pick the candidate passing the most checkers
    "2": {"use_validation": True, "selection_rule": "checker_count"},
    # modeling + selection agents, no semantic checkers
    "3": {"use_validation": False, "selection_rule": "votes"},
    # full pipeline
    "4": {"use_validation": True, "selection_rule": "votes"},
}


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args)
        if args.command == "bench":
            return cmd_bench(args)
        return cmd_ablate(args)
    except ZincsmithError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zincsmith")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="translate one problem bundle into a model and solution")
    solve.add_argument("bundle", help="path to a problem bundle directory")
    _common_flags(solve)

    bench = sub.add_parser("bench", help="solve and score a benchmark manifest")
    bench.add_argument("manifest", help="path to a manifest JSON file")
    _common_flags(bench)

    ablate = sub.add_parser("ablate", help="bench under an agent-subset configuration")
    ablate.add_argument("manifest", help="path to a manifest JSON file")
    ablate.add_argument("--config-id", required=True, choices=sorted(ABLATION_CONFIGS),
                        help="agent-subset configuration to apply")
    _common_flags(ablate)
    return parser


def _common_flags(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--config", help="JSON file with workflow configuration overrides")
    cmd.add_argument("--provider", choices=["live", "record", "replay"], default=None)
    cmd.add_argument("--fixtures", help="fixture directory for record/replay providers")
    cmd.add_argument("--seed", type=int, default=None)
    cmd.add_argument("--solver", help="solver id (gecode, chuffed, builtin, ...)")
    cmd.add_argument("--timeout", type=float, default=None, help="solver timeout in seconds")
    cmd.add_argument("--workers", type=int, default=None)
    cmd.add_argument("--out", default="out", help="output directory for records and reports")
    cmd.add_argument("--sandbox", choices=["process", "local"], default="process",
                     help="program runner: isolated subprocess or in-process (trusted runs only)")
    cmd.add_argument("--sandbox-cmd", help="override the sandbox runner command line")
    cmd.add_argument("--templates", help="directory overriding the built-in prompt templates")


def _load_config(args, manifest: dict | None = None) -> WorkflowConfig:
    data: dict = {}
    if manifest and isinstance(manifest.get("config"), dict):
        data.update(manifest["config"])
    if args.config:
        data.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    config = WorkflowConfig.from_dict(data)
    if args.seed is not None:
        config.seed = args.seed
    if args.solver:
        config.solver_id = args.solver
    if args.timeout is not None:
        config.solver_timeout_s = args.timeout
    if args.workers is not None:
        config.worker_limit = args.workers
    return config


def _build_components(args, config: WorkflowConfig, fixtures_dir, provider_mode,
                      live_config=None):
    toolchain = resolve_toolchain(config.solver_id)
    if args.sandbox == "local":
        sandbox = LocalExecutor()
    elif args.sandbox_cmd:
        sandbox = ProcessSandbox(cmd=args.sandbox_cmd.split())
    else:
        sandbox = ProcessSandbox(cmd=[sys.executable, "-m", "sandbox_runner"])
    pipeline = CheckingPipeline(
        toolchain=toolchain,
        sandbox=sandbox,
        solver_timeout_s=config.solver_timeout_s,
        sandbox_timeout_s=config.sandbox_timeout_s,
    )
    templates = TemplateLibrary(args.templates)

    def gateway_for(problem_id: str):
        problem_fixtures = fixtures_dir
        if fixtures_dir is not None:
            nested = Path(fixtures_dir) / problem_id
            if nested.is_dir():
                problem_fixtures = nested
        return build_gateway(provider_mode, problem_fixtures, live_config)

    return pipeline, templates, sandbox, gateway_for


def _run_one(bundle_path, config, pipeline, templates, gateway_for, out_dir: Path):
    bundle = load_bundle(bundle_path)
    gateway = gateway_for(bundle.id)
    runner = WorkflowRunner(gateway, templates, pipeline, config)
    outcome = runner.run(bundle)
    out_dir.mkdir(parents=True, exist_ok=True)
    record_path = out_dir / f"{bundle.id}.run.json"
    record_path.write_text(
        json.dumps(outcome.run_record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return bundle, outcome, record_path


def cmd_solve(args) -> int:
    config = _load_config(args)
    provider_mode = args.provider or "replay"
    live_config = None
    if args.config:
        live_config = json.loads(Path(args.config).read_text(encoding="utf-8")).get("live")
    pipeline, templates, _, gateway_for = _build_components(
        args, config, args.fixtures, provider_mode, live_config
    )
    bundle, outcome, record_path = _run_one(
        args.bundle, config, pipeline, templates, gateway_for, Path(args.out)
    )
    print(f"{bundle.id}: {outcome.status} (iterations={outcome.iterations_used})")
    print(f"run record: {record_path}")
    if outcome.status == "exhausted":
        return 2
    solution_path = record_path.parent / f"{bundle.id}.solution.json"
    solution_path.write_text(
        json.dumps(outcome.solution, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"solution: {solution_path}")
    return 0


def _load_manifest(path: str) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(manifest.get("problems"), list) or not manifest["problems"]:
        raise ZincsmithError("manifest must list at least one problem bundle path")
    return manifest


def _check_unique_ids(problems: list, base: Path) -> None:
    """Bundle ids must be unique: records and fixture lookups key on them."""
    seen: dict[str, str] = {}
    for entry in problems:
        path = Path(entry)
        if not path.is_absolute():
            path = base / path
        manifest_path = path / "manifest.json"
        if not manifest_path.is_file():
            continue  # the per-problem run reports the fault
        problem_id = json.loads(manifest_path.read_text(encoding="utf-8")).get("id", "")
        if problem_id in seen:
            raise ZincsmithError(
                f"duplicate problem id {problem_id!r} ({seen[problem_id]} and {entry})"
            )
        seen[problem_id] = str(entry)


def cmd_bench(args, config_overrides: dict | None = None, config_id: str | None = None) -> int:
    manifest = _load_manifest(args.manifest)
    config = _load_config(args, manifest)
    if config_overrides:
        config = WorkflowConfig.from_dict({**config.to_dict(), **config_overrides})
    provider_mode = args.provider or manifest.get("provider", "replay")
    manifest_base = Path(args.manifest).resolve().parent
    if args.fixtures:
        fixtures = Path(args.fixtures)
    elif manifest.get("fixtures"):
        fixtures = Path(manifest["fixtures"])
        if not fixtures.is_absolute():
            fixtures = manifest_base / fixtures
    else:
        fixtures = None
    out_dir = Path(args.out or manifest.get("out", "out"))
    _check_unique_ids(manifest["problems"], manifest_base)
    pipeline, templates, sandbox, gateway_for = _build_components(
        args, config, fixtures, provider_mode, manifest.get("live")
    )

    def solve_and_score(problem_path: str) -> dict:
        path = Path(problem_path)
        if not path.is_absolute():
            path = manifest_base / path
        try:
            bundle, outcome, record_path = _run_one(
                path, config, pipeline, templates, gateway_for, out_dir
            )
        except ZincsmithError as exc:
            return {"problem_id": str(problem_path), "status": "fault", "error": str(exc),
                    "gamma": 0, "scored": False}
        entry: dict = {
            "problem_id": bundle.id,
            "status": outcome.status,
            "iterations_used": outcome.iterations_used,
            "gate_failures": outcome.telemetry["gate_failures"],
            "run_record": record_path.name,
        }
        if bundle.eval_assets is None:
            entry.update({"scored": False, "gamma": None, "unscored_reason": "no reference model"})
            return entry
        entry["scored"] = True
        if outcome.solution is None:
            entry.update({"gamma": 0, "feasible": False, "evaluation": None})
        else:
            record = evaluate_solution(bundle, outcome.solution, pipeline.toolchain, sandbox,
                                       timeout_s=config.solver_timeout_s)
            entry.update({"gamma": record.gamma, "feasible": record.feasible,
                          "evaluation": record.to_dict()})
        entry["candidate_gammas"] = _candidate_gammas(bundle, outcome, pipeline, sandbox, config)
        entry["frr_trials"] = _frr_trials(bundle, outcome, sandbox)
        return entry

    problems = manifest["problems"]
    if config.worker_limit > 1 and len(problems) > 1:
        with ThreadPoolExecutor(max_workers=config.worker_limit) as pool:
            entries = list(pool.map(solve_and_score, problems))
    else:
        entries = [solve_and_score(p) for p in problems]
    entries.sort(key=lambda e: str(e["problem_id"]))

    report = _assemble_report(entries, config, config_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = "report.json" if config_id is None else f"report_{config_id}.json"
    report_path = out_dir / name
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    sa = report["sa"]
    print(f"benchmark: {len(entries)} problems, SA={sa if sa is None else round(sa, 4)}")
    print(f"report: {report_path}")
    return 0


def _candidate_gammas(bundle, outcome, pipeline, sandbox, config) -> list:
    """Gamma for every execution-check survivor: the selection-oracle data."""
    if bundle.eval_assets is None:
        return []
    gammas = []
    for iteration in outcome.run_record["iterations"]:
        for cand in iteration["candidates"]:
            snapshot = cand.get("survivor_snapshot")
            if not cand["survived"] or not snapshot or snapshot.get("solution") is None:
                continue
            record = evaluate_solution(bundle, snapshot["solution"], pipeline.toolchain,
                                       sandbox, timeout_s=config.solver_timeout_s)
            gammas.append(record.gamma)
    return gammas


def _frr_trials(bundle, outcome, sandbox) -> list:
    sources = []
    for iteration in outcome.run_record["iterations"]:
        for checker in iteration.get("checkers", []):
            if checker["source"].strip():
                sources.append(checker["source"])
    return checker_frr_trials(sources, bundle, sandbox)


def _assemble_report(entries: list, config: WorkflowConfig, config_id: str | None) -> dict:
    scored = [e for e in entries if e.get("scored")]
    gammas = [e["gamma"] for e in scored]
    per_problem = [e.get("candidate_gammas", []) or [e["gamma"]] for e in scored]
    trials = [t for e in entries for t in e.get("frr_trials", [])]
    gate_failures = {"G1": 0, "G2": 0, "G3": 0, "G4": 0}
    for entry in entries:
        for gate, count in entry.get("gate_failures", {}).items():
            gate_failures[gate] += count
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "problems": entries,
        "sa": compute_sa(gammas) if gammas else None,
        "sa_at_1": compute_sa_at_1(per_problem) if per_problem else None,
        "frr": compute_frr(trials) if trials else None,
        "frr_error_counted": any(t.get("error_counted") for t in trials) or None,
        "gate_failures": gate_failures,
        "unscored": sorted(str(e["problem_id"]) for e in entries if not e.get("scored")),
    }
    if config_id is not None:
        report["ablation_config"] = config_id
    return report


def cmd_ablate(args) -> int:
    overrides = ABLATION_CONFIGS[args.config_id]
    return cmd_bench(args, config_overrides=overrides, config_id=args.config_id)


if __name__ == "__main__":
    sys.exit(main())
