#!/usr/bin/env python3
"""Regenerate the committed replay fixture packs under tests/fixtures/.

Each pack is produced by running the real workflow in record mode against a
scripted provider, so the recorded requests are exactly what replay runs
will issue. Re-run this script whenever prompt templates, bundle content, or
request canonicalization change:

    python3 tools/make_fixtures.py
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO))

from tests.helpers import (  # noqa: E402
    BOARD_CHECKER,
    BOARD_TRANSFORMER,
    QUEENS_MODEL,
    QUEENS_MODEL_NO_DIAG,
    TagScript,
    code_block,
    make_pipeline,
    make_templates,
    nqueens_bundle,
    pickmin_bundle,
)
from zincsmith.gateway import FixtureStore, Gateway, RecordingProvider, ScriptedProvider  # noqa: E402
from zincsmith.workflow import WorkflowConfig, WorkflowRunner  # noqa: E402

FIXTURES = REPO / "tests" / "fixtures"

REFINED_JSON = json.dumps({
    "analysis": "The statement is already precise; restated for brevity.",
    "refined_description": (
        "Place n queens on an n by n chessboard so that no two queens share "
        "a row, a column, or a diagonal."
    ),
})

PLAN_REPLY = (
    "<task1>Task 1: load the given parameters and declare queens[1..n], the "
    "column of the queen in each row.</task1>\n"
    "<task2>Task 2: enforce distinct columns with all_different.</task2>\n"
    "<task3>Task 3: enforce distinct diagonals for every pair of rows.</task3>\n"
    "<task4>Task 4: add solve satisfy.</task4>\n"
)

REJECT_DECISION = json.dumps({
    "reason": "The checkers assert a diagonal restriction I believe is already handled.",
    "decision": "reject",
})

PICKMIN_MODEL_SUBOPT = """int: lo;
int: hi;
var lo..hi: x;
constraint x != lo;
solve minimize x;
"""

PICKMIN_TRANSFORMER = """def transformer(data_dict, decision_var_dict):
    # x: the chosen integer value
    return {"x": decision_var_dict["x"]}
"""

PICKMIN_CHECKER = """def semantic_checker(data_dict, ovar_dict):
    lo = data_dict["lo"]
    hi = data_dict["hi"]
    x = ovar_dict["x"]
    if not isinstance(x, int):
        raise ValueError(f"Type error: x must be an integer, got {type(x).__name__}")
    if x < lo or x > hi:
        raise ValueError(f"Range error: x={x} is outside {lo}..{hi}")
"""


def vote(i: int) -> str:
    return json.dumps({"reason": "best aligned with the requirements", "selection": i})


def nqueens_ok_script() -> TagScript:
    script = (TagScript()
              .on("variant/refine", REFINED_JSON)
              .on("variant/plan", PLAN_REPLY))
    votes = {1: 1, 2: 1, 3: 2}
    for k in (1, 2, 3):
        script.on(f"modeling/k{k}", code_block(QUEENS_MODEL))
        script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
        script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        script.on(f"selection/k{k}", vote(votes[k]))
    return script


def nqueens_missing_diag_script() -> TagScript:
    script = (TagScript()
              .on("variant/refine", REFINED_JSON)
              .on("variant/plan", PLAN_REPLY))
    for k in (1, 2, 3):
        # every agent omits the diagonal constraints; G4 flags the conflict and
        # each modeling agent rejects the feedback
        script.on(f"modeling/k{k}", code_block(QUEENS_MODEL_NO_DIAG), REJECT_DECISION)
        script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
        script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        script.on(f"selection/k{k}", vote(1))
    return script


def nqueens_fallback_script() -> TagScript:
    script = (TagScript()
              .on("variant/refine", REFINED_JSON)
              .on("variant/plan", PLAN_REPLY))
    for k in (1, 2, 3):
        script.on(f"modeling/k{k}", code_block(QUEENS_MODEL))
        script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
        script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        script.on(f"selection/k{k}", vote(-1))
    return script


def pickmin_subopt_script() -> TagScript:
    script = (TagScript()
              .on("variant/refine", json.dumps({
                  "analysis": "Trivial minimization.",
                  "refined_description": "Pick the smallest integer x with lo <= x <= hi.",
              }))
              .on("variant/plan", "<task1>load the given parameters</task1>"
                                  "<task2>declare x in lo..hi and minimize it</task2>"))
    for k in (1, 2, 3):
        script.on(f"modeling/k{k}", code_block(PICKMIN_MODEL_SUBOPT), REJECT_DECISION)
        script.on(f"modeling/k{k}/formatter", code_block(PICKMIN_TRANSFORMER, "python"))
        script.on(f"validation/k{k}", code_block(PICKMIN_CHECKER, "Python"))
        script.on(f"selection/k{k}", vote(1))
    return script


def base_config(**overrides) -> WorkflowConfig:
    settings = dict(
        agents_per_role=3,
        refine_budget=4,
        restart_budget=1,
        strategy="prompt_diverse",
        temperature=0.7,
        solver_id="builtin",
        solver_timeout_s=30.0,
        seed=7,
        worker_limit=1,
    )
    settings.update(overrides)
    return WorkflowConfig(**settings)


def record_pack(name: str, script_factory, bundle, config: WorkflowConfig,
                into: Path | None = None, extra_configs: tuple = ()) -> None:
    """Record one pack; extra_configs re-run the workflow into the same store
    so replays under those variants (ablation subsets) also find fixtures."""
    target = into if into is not None else FIXTURES / name
    if target.exists():
        shutil.rmtree(target)
    target.mkdir(parents=True)
    outcome = None
    for variant in (config, *extra_configs):
        store = FixtureStore(target)
        gateway = Gateway(provider=RecordingProvider(ScriptedProvider(script_factory()), store),
                          sleep=lambda s: None)
        runner = WorkflowRunner(gateway, make_templates(), make_pipeline(), variant)
        result = runner.run(bundle)
        outcome = outcome or result
    (target / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"{name}: {outcome.status}, {len(list(target.glob('*.json')))} files")


def main() -> None:
    record_pack("nqueens_ok", nqueens_ok_script, nqueens_bundle(), base_config())
    record_pack("nqueens_missing_diag", nqueens_missing_diag_script, nqueens_bundle(),
                base_config())
    record_pack("nqueens_fallback", nqueens_fallback_script, nqueens_bundle(),
                base_config())
    record_pack("pickmin_subopt", pickmin_subopt_script, pickmin_bundle(), base_config())

    # bench pack: per-problem fixture subdirectories under one root; the
    # votes-without-checkers variant covers the ablation that skips validation
    bench_root = FIXTURES / "bench"
    if bench_root.exists():
        shutil.rmtree(bench_root)
    no_checker_votes = base_config(use_validation=False, selection_rule="votes")
    record_pack("bench/nqueens4", nqueens_ok_script, nqueens_bundle(), base_config(),
                into=bench_root / "nqueens4", extra_configs=(no_checker_votes,))
    record_pack("bench/pickmin", pickmin_subopt_script, pickmin_bundle(), base_config(),
                into=bench_root / "pickmin", extra_configs=(no_checker_votes,))
    manifest = {
        "problems": ["../../../problems/nqueens4", "../../../problems/pickmin"],
        "config": base_config().to_dict(),
        "provider": "replay",
        "fixtures": ".",
    }
    (bench_root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print("bench manifest written")


if __name__ == "__main__":
    main()
