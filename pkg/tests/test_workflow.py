"""Workflow orchestration: vote aggregation, restarts, budgets, determinism."""

from __future__ import annotations

import itertools
import json
from collections import Counter

import pytest

from zincsmith.agents import SelectionVote
from zincsmith.gateway import FixtureStore, Gateway, RecordingProvider, ReplayProvider, ScriptedProvider
from zincsmith.mzn.engine import BuiltinEngine
from zincsmith.workflow import (
    WorkflowConfig,
    WorkflowRunner,
    aggregate_votes,
    check_budget_identity,
)

from .helpers import (
    BOARD_CHECKER,
    BOARD_TRANSFORMER,
    QUEENS_MODEL,
    QUEENS_MODEL_NO_DIAG,
    TagScript,
    code_block,
    make_pipeline,
    make_templates,
    nqueens_bundle,
    scripted_gateway,
)

REFINED_JSON = json.dumps({"analysis": "ok", "refined_description": "Place queens with no attacks."})
PLAN_REPLY = "<task1>load the given parameters</task1><task2>add the attack constraints</task2>"
BROKEN_MODEL = "var 1..3: x\nsolve satisfy;"  # missing semicolon after declaration


def vote(i: int) -> str:
    return json.dumps({"reason": "looks aligned", "selection": i})


def happy_script(votes=(1, 1, 2)) -> TagScript:
    script = (TagScript()
              .on("variant/refine", REFINED_JSON)
              .on("variant/plan", PLAN_REPLY))
    for k in (1, 2, 3):
        script.on(f"modeling/k{k}", code_block(QUEENS_MODEL))
        script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
        script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        script.on(f"selection/k{k}", vote(votes[k - 1]))
    return script


def make_runner(script, **config_overrides):
    config = WorkflowConfig(**config_overrides)
    gateway = scripted_gateway(script)
    pipeline = make_pipeline(solver_timeout_s=config.solver_timeout_s)
    return WorkflowRunner(gateway, make_templates(), pipeline, config), gateway


class TestAggregateVotes:
    def make(self, selections):
        return [SelectionVote(k + 1, "", s) for k, s in enumerate(selections)]

    def test_two_of_three_wins(self):
        assert aggregate_votes(self.make([2, 2, -1]), {1, 2, 3}) == 2

    def test_split_aborts(self):
        assert aggregate_votes(self.make([1, 2, -1]), {1, 2, 3}) is None

    def test_reject_majority_aborts(self):
        assert aggregate_votes(self.make([-1, -1, 1]), {1, 2, 3}) is None

    def test_unanimous(self):
        assert aggregate_votes(self.make([3, 3, 3]), {1, 2, 3}) == 3

    def test_exhaustive_k3_matches_strict_majority(self):
        values = [-1, 1, 2, 3]
        for combo in itertools.product(values, repeat=3):
            result = aggregate_votes(self.make(list(combo)), {1, 2, 3})
            counts = Counter(combo)
            expected = None
            for value, count in counts.items():
                if value != -1 and 2 * count > 3:
                    expected = value
            assert result == expected, combo


class TestBudgetIdentity:
    def test_published_instance(self):
        assert check_budget_identity(4, 12, 64)
        assert not check_budget_identity(4, 13, 64)

    def test_edges(self):
        assert check_budget_identity(0, 64, 64)
        assert check_budget_identity(64, 0, 64)

    def test_brute_force_grid(self):
        for r in range(0, 9):
            for big_r in range(0, 65):
                total_needed = r + (1 + r) * big_r
                assert check_budget_identity(r, big_r, 64) == (total_needed <= 64)

    def test_max_restarts_at_r4_is_12(self):
        feasible = [big_r for big_r in range(0, 65) if check_budget_identity(4, big_r, 64)]
        assert max(feasible) == 12


class TestHappyPath:
    def test_selected_with_majority(self):
        runner, gateway = make_runner(happy_script(votes=(1, 1, 2)))
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        assert outcome.iterations_used == 1
        assert outcome.model.strip() == QUEENS_MODEL.strip()
        board = outcome.solution["board"]
        assert sorted(sum(board, [])) == [0] * 12 + [1] * 4
        record = outcome.run_record
        assert record["outcome"]["selected"] == {"iteration": 0, "agent_index": 1}

    def test_llm_call_accounting_within_bounds(self):
        runner, gateway = make_runner(happy_script())
        outcome = runner.run(nqueens_bundle())
        calls = outcome.telemetry["llm_calls"]
        k, r = 3, 4
        assert calls["modeling"] <= k * (1 + r + 1)
        assert calls["validation"] <= k * 2
        assert calls["selection"] <= k * 2
        assert calls["variant"] == 2  # one refine + one plan, reported separately

    def test_gate_failure_telemetry_zero_on_clean_run(self):
        runner, _ = make_runner(happy_script())
        outcome = runner.run(nqueens_bundle())
        assert outcome.telemetry["gate_failures"] == {"G1": 0, "G2": 0, "G3": 0, "G4": 0}


class TestRestart:
    def test_no_survivors_then_success(self):
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            # iteration 0 generates a broken model (r=0: death on first G1 failure),
            # iteration 1 generates a good one
            script.on(f"modeling/k{k}", code_block(BROKEN_MODEL), code_block(QUEENS_MODEL))
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(1))
        runner, _ = make_runner(script, refine_budget=0, restart_budget=1)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        assert outcome.iterations_used == 2
        record = outcome.run_record
        assert record["iterations"][0]["abort"] == "no candidate passed the execution checks"
        assert len(record["iterations"]) == 2
        # restarting re-runs checker synthesis: both iterations carry checkers
        assert all(len(it["checkers"]) == 3 for it in record["iterations"])

    def test_restart_uses_fresh_description(self):
        refreshed = json.dumps({"analysis": "x", "refined_description": "Fresh restatement of the task."})
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON, refreshed, REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}", code_block(BROKEN_MODEL), code_block(QUEENS_MODEL))
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(1))
        runner, _ = make_runner(script, refine_budget=0, restart_budget=1)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        iterations = outcome.run_record["iterations"]
        assert iterations[1]["description"] == "Fresh restatement of the task."
        assert iterations[0]["description"] != iterations[1]["description"]

    def test_all_reject_votes_fall_back_to_random_survivor(self):
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}", code_block(QUEENS_MODEL))
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(-1))
        runner, _ = make_runner(script, restart_budget=1, seed=7)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "fallback"
        assert outcome.model is not None and outcome.solution is not None
        assert outcome.run_record["outcome"]["fallback_pick"] is not None

    def test_exhausted_when_nothing_survives(self):
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}", code_block(BROKEN_MODEL))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        runner, _ = make_runner(script, refine_budget=0, restart_budget=1)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "exhausted"
        assert outcome.model is None


class TestReentryAndBudget:
    @pytest.mark.parametrize("budget", [0, 1, 2, 4])
    def test_candidate_dies_after_exactly_r_plus_1_g1_failures(self, budget):
        script = (TagScript()
                  .on("modeling/k1", code_block(BROKEN_MODEL))  # repairs repeat the broken model
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        runner, gateway = make_runner(
            script, agents_per_role=1, refine_budget=budget, restart_budget=0,
            use_validation=False, selection_rule="first_survivor",
        )
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "exhausted"
        candidate = outcome.run_record["iterations"][0]["candidates"][0]
        gate_names = [g["gate"] for g in candidate["gate_history"]]
        statuses = [g["status"] for g in candidate["gate_history"]]
        assert gate_names == ["G1"] * (budget + 1)
        assert statuses == ["fail"] * (budget + 1)
        assert candidate["revision"] == budget
        # generation + exactly r repair calls
        assert gateway.calls_by_tag["modeling"] == 1 + budget

    @pytest.mark.parametrize("budget", [0, 1, 2, 4])
    def test_solver_invocations_bounded_by_r_plus_1(self, budget):
        unsat = QUEENS_MODEL + "constraint q[1] = 1 /\\ q[1] = 2;\n"
        script = (TagScript()
                  .on("modeling/k1", code_block(unsat))
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        counting = _CountingToolchain()
        config = WorkflowConfig(agents_per_role=1, refine_budget=budget, restart_budget=0,
                                use_validation=False, selection_rule="first_survivor")
        runner = WorkflowRunner(scripted_gateway(script), make_templates(),
                                make_pipeline(toolchain=counting), config)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "exhausted"
        assert counting.solve_calls <= budget + 1

    def test_g3_repair_replaces_formatter_and_reenters_at_g1(self):
        from .helpers import WRONG_KEY_TRANSFORMER

        script = (TagScript()
                  .on("modeling/k1", code_block(QUEENS_MODEL))
                  .on("modeling/k1/formatter",
                      code_block(WRONG_KEY_TRANSFORMER, "python"),
                      code_block(BOARD_TRANSFORMER, "python"))
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        runner, _ = make_runner(script, agents_per_role=1, refine_budget=4, restart_budget=0,
                                use_validation=False, selection_rule="first_survivor")
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        candidate = outcome.run_record["iterations"][0]["candidates"][0]
        sequence = [(g["gate"], g["status"]) for g in candidate["gate_history"]]
        assert sequence == [
            ("G1", "pass"), ("G2", "pass"), ("G3", "fail"),
            ("G1", "pass"), ("G2", "pass"), ("G3", "pass"),
        ]
        assert candidate["revision"] == 1
        assert "def transformer" in candidate["formatter"]
        assert "grid" not in candidate["formatter"]

    def test_post_repair_execution_resumes_at_g1(self):
        unsat = QUEENS_MODEL + "constraint q[1] = 1 /\\ q[1] = 2;\n"
        script = (TagScript()
                  .on("modeling/k1", code_block(unsat), code_block(QUEENS_MODEL))
                  .on("modeling/k1/formatter", code_block(BOARD_TRANSFORMER, "python"))
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        runner, _ = make_runner(script, agents_per_role=1, refine_budget=4, restart_budget=0,
                                use_validation=False, selection_rule="first_survivor")
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        candidate = outcome.run_record["iterations"][0]["candidates"][0]
        sequence = [(g["gate"], g["status"]) for g in candidate["gate_history"]]
        assert sequence == [
            ("G1", "pass"), ("G2", "fail"),          # first revision hits UNSAT
            ("G1", "pass"), ("G2", "pass"), ("G3", "pass"),  # repair re-enters at G1
        ]
        assert candidate["revision"] == 1
        # the run record keeps every revision's source for auditing
        assert [r["trigger"] for r in candidate["revisions"]] == ["generation", "G2 repair"]
        assert candidate["revisions"][0]["source"] != candidate["revisions"][1]["source"]


class _CountingToolchain:
    solver_id = "builtin"

    def __init__(self):
        self.inner = BuiltinEngine()
        self.solve_calls = 0

    def compile_check(self, source):
        return self.inner.compile_check(source)

    def solve(self, source, dzn, timeout_s, extra_constraints=()):
        self.solve_calls += 1
        return self.inner.solve(source, dzn, timeout_s, extra_constraints)


class TestSemanticGateRouting:
    def _script(self, decision_reply: str) -> TagScript:
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            # the diagonal-free model solves to a diagonal-conflicting board
            script.on(f"modeling/k{k}", code_block(QUEENS_MODEL_NO_DIAG), decision_reply)
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(1))
        return script

    def test_rejected_feedback_keeps_model_and_survives(self):
        decision = json.dumps({"reason": "checkers look wrong to me", "decision": "reject"})
        script = self._script(decision)
        runner = WorkflowRunner(scripted_gateway(script), make_templates(), make_pipeline(),
                                WorkflowConfig())
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        candidate = outcome.run_record["iterations"][0]["candidates"][0]
        assert candidate["g4_status"] == "fail (feedback rejected)"
        assert candidate["revision"] == 0
        g4 = [g for g in candidate["gate_history"] if g["gate"] == "G4"]
        assert g4 and "Diagonal conflict" in g4[-1]["feedback"]
        # the selection prompts carried the evidence summary lines
        selection_prompts = [r.system_prompt for r in script.requests if r.tag.startswith("selection/")]
        assert selection_prompts
        assert all("passed 0/3 checkers" in p for p in selection_prompts)
        assert all("failing: [" in p for p in selection_prompts)
        assert all("rejected this feedback" in p for p in selection_prompts)

    def test_accepted_feedback_re_enters_at_g1(self):
        decision = json.dumps({
            "reason": "the diagonal constraint is genuinely missing",
            "decision": "accept",
            "revised_code": QUEENS_MODEL,
        })
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}", code_block(QUEENS_MODEL_NO_DIAG), decision)
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(1))
        runner, _ = make_runner(script)
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        candidate = outcome.run_record["iterations"][0]["candidates"][0]
        assert candidate["revision"] == 1
        gates = [g["gate"] for g in candidate["gate_history"]]
        # after the accepted revision the cascade restarts from G1 and G4 passes
        assert gates == ["G1", "G2", "G3", "G4", "G1", "G2", "G3", "G4"]
        assert candidate["gate_history"][-1]["status"] == "pass"
        assert candidate["g4_status"] == "pass"


class TestSelectionRules:
    def _survivor_script(self):
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        # k1 and k2 produce the full model, k3 the diagonal-free variant
        script.on("modeling/k1", code_block(QUEENS_MODEL))
        script.on("modeling/k2", code_block(QUEENS_MODEL))
        script.on("modeling/k3", code_block(QUEENS_MODEL_NO_DIAG),
                  json.dumps({"reason": "fine as is", "decision": "reject"}))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
        return script

    def test_solution_majority_prefers_equal_solutions(self):
        runner, _ = make_runner(self._survivor_script(), use_validation=False,
                                selection_rule="solution_majority")
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        selected = outcome.run_record["iterations"][0]["selection"]
        assert selected == {"rule": "solution_majority", "selected_display_index": 1}

    def test_checker_count_prefers_most_passing(self):
        runner, _ = make_runner(self._survivor_script(), selection_rule="checker_count")
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        # candidates 1 and 2 pass all checkers; ties break to the first
        assert outcome.run_record["iterations"][0]["selection"]["selected_display_index"] == 1

    def test_first_survivor_rule(self):
        runner, _ = make_runner(self._survivor_script(), use_validation=False,
                                selection_rule="first_survivor")
        outcome = runner.run(nqueens_bundle())
        assert outcome.status == "selected"
        assert outcome.run_record["iterations"][0]["selection"]["selected_display_index"] == 1


class TestDeterminism:
    def _record_pack(self, tmp_path, script, **config_overrides):
        store = FixtureStore(tmp_path / "fixtures")
        gateway = Gateway(provider=RecordingProvider(ScriptedProvider(script), store),
                          sleep=lambda s: None)
        config = WorkflowConfig(**config_overrides)
        runner = WorkflowRunner(gateway, make_templates(), make_pipeline(), config)
        runner.run(nqueens_bundle())
        return tmp_path / "fixtures"

    def _replay(self, fixtures, **config_overrides):
        gateway = Gateway(provider=ReplayProvider(FixtureStore(fixtures)), sleep=lambda s: None)
        config = WorkflowConfig(**config_overrides)
        runner = WorkflowRunner(gateway, make_templates(), make_pipeline(), config)
        return runner.run(nqueens_bundle())

    def test_replay_runs_are_byte_identical(self, tmp_path):
        fixtures = self._record_pack(tmp_path, happy_script())
        first = self._replay(fixtures)
        second = self._replay(fixtures)
        blob_a = json.dumps(first.run_record, sort_keys=True)
        blob_b = json.dumps(second.run_record, sort_keys=True)
        assert blob_a == blob_b
        assert first.status == second.status == "selected"

    def test_fallback_pick_reproducible_across_replays(self, tmp_path):
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}", code_block(QUEENS_MODEL))
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(-1))
        fixtures = self._record_pack(tmp_path, script, restart_budget=1, seed=13)
        first = self._replay(fixtures, restart_budget=1, seed=13)
        second = self._replay(fixtures, restart_budget=1, seed=13)
        assert first.status == second.status == "fallback"
        assert first.run_record["outcome"]["fallback_pick"] == second.run_record["outcome"]["fallback_pick"]
        assert json.dumps(first.run_record, sort_keys=True) == json.dumps(second.run_record, sort_keys=True)


class TestCascadeGrammar:
    """Every recorded gate history obeys hard-gate monotonicity and G1 re-entry."""

    def _check_all(self, outcome):
        from .helpers import assert_cascade_grammar

        histories = 0
        for iteration in outcome.run_record["iterations"]:
            for candidate in iteration["candidates"]:
                assert_cascade_grammar(candidate["gate_history"])
                histories += 1
        assert histories > 0

    def test_happy_path_grammar(self):
        runner, _ = make_runner(happy_script())
        self._check_all(runner.run(nqueens_bundle()))

    def test_repair_heavy_grammar(self):
        unsat = QUEENS_MODEL + "constraint q[1] = 1 /\\ q[1] = 2;\n"
        script = (TagScript()
                  .on("variant/refine", REFINED_JSON)
                  .on("variant/plan", PLAN_REPLY))
        script.on("modeling/k1", code_block(BROKEN_MODEL), code_block(unsat), code_block(QUEENS_MODEL))
        script.on("modeling/k2", code_block(unsat))
        script.on("modeling/k3", code_block(QUEENS_MODEL_NO_DIAG),
                  json.dumps({"reason": "keep", "decision": "reject"}))
        for k in (1, 2, 3):
            script.on(f"modeling/k{k}/formatter", code_block(BOARD_TRANSFORMER, "python"))
            script.on(f"validation/k{k}", code_block(BOARD_CHECKER, "Python"))
            script.on(f"selection/k{k}", vote(1))
        runner, _ = make_runner(script, refine_budget=2, restart_budget=0)
        self._check_all(runner.run(nqueens_bundle()))

    def test_replay_worker_count_does_not_change_results(self, tmp_path):
        # record at one worker, replay at one and at four: identical outcomes
        store = FixtureStore(tmp_path / "fx")
        recorder = Gateway(provider=RecordingProvider(ScriptedProvider(happy_script()), store),
                           sleep=lambda s: None)
        base = dict(solver_id="builtin", seed=3)
        WorkflowRunner(recorder, make_templates(), make_pipeline(),
                       WorkflowConfig(worker_limit=1, **base)).run(nqueens_bundle())

        records = {}
        for workers in (1, 4):
            gateway = Gateway(provider=ReplayProvider(FixtureStore(tmp_path / "fx")),
                              sleep=lambda s: None)
            runner = WorkflowRunner(gateway, make_templates(), make_pipeline(),
                                    WorkflowConfig(worker_limit=workers, **base))
            record = runner.run(nqueens_bundle()).run_record
            record["config"].pop("worker_limit")
            records[workers] = json.dumps(record, sort_keys=True)
        assert records[1] == records[4]


class TestConfigValidation:
    def test_temperature_strategy_needs_positive_tau(self):
        with pytest.raises(ValueError):
            WorkflowConfig(strategy="temperature", temperature=0.0)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            WorkflowConfig(agents_per_role=0)

    def test_round_trip_dict(self):
        config = WorkflowConfig(agents_per_role=2, seed=5)
        assert WorkflowConfig.from_dict(config.to_dict()) == config
