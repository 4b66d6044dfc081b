"""Evaluator behavior against brute-force oracles and arithmetic recomputation."""

from __future__ import annotations

import itertools
import random

import pytest

from zincsmith.errors import EmptyBenchmark, MappingFault, NoTrials, ReferenceModelBroken
from zincsmith.evaluation import (
    check_feasible,
    check_optimal,
    checker_frr_trials,
    compute_frr,
    compute_sa,
    compute_sa_at_1,
    equality_pins,
    evaluate_solution,
    map_solution,
    mzn_literal,
    reference_objective,
    score_gamma,
)
from zincsmith.mzn.engine import BuiltinEngine
from zincsmith.problems import ProblemKind
from zincsmith.sandbox import LocalExecutor

from .helpers import BOARD_CHECKER, NAYSAYER_CHECKER, PROBLEMS_DIR, nqueens_bundle, pickmin_bundle
from .test_engine import queens_ok


@pytest.fixture(scope="module")
def engine():
    return BuiltinEngine()


@pytest.fixture(scope="module")
def sandbox():
    return LocalExecutor()


def board_for(placement):
    n = len(placement)
    board = [[0] * n for _ in range(n)]
    for i, col in enumerate(placement):
        board[i][col - 1] = 1
    return {"board": board}


class TestLiterals:
    def test_scalars(self):
        assert mzn_literal(4) == "4"
        assert mzn_literal(True) == "true"
        assert mzn_literal(2.5) == "2.5"

    def test_arrays(self):
        assert mzn_literal([2, 4, 1, 3]) == "[2, 4, 1, 3]"
        assert mzn_literal([[1, 0], [0, 1]]) == "[| 1, 0 | 0, 1 |]"

    def test_pins_sorted_by_name(self):
        assert equality_pins({"b": 2, "a": 1}) == ["a = 1", "b = 2"]


class TestMapSolution:
    def test_binary_matrix_to_columns(self, sandbox):
        bundle = nqueens_bundle()
        mapped = map_solution(bundle.eval_assets, bundle.input_data, board_for([2, 4, 1, 3]), sandbox)
        assert mapped == {"q": [2, 4, 1, 3]}

    def test_identity_mapping(self, sandbox):
        bundle = pickmin_bundle()
        mapped = map_solution(bundle.eval_assets, bundle.input_data, {"x": 3}, sandbox)
        assert mapped == {"x": 3}

    def test_raising_program_is_a_mapping_fault(self, sandbox):
        bundle = nqueens_bundle()
        broken = type(bundle.eval_assets)(
            reference_model=bundle.eval_assets.reference_model,
            mapped_vars=("q",),
            mapping_program="def transformer(d, s):\n    raise RuntimeError('bad')\n",
            problem_kind=ProblemKind.CSP,
        )
        with pytest.raises(MappingFault):
            map_solution(broken, bundle.input_data, board_for([2, 4, 1, 3]), sandbox)

    def test_wrong_keys_are_a_mapping_fault(self, sandbox):
        bundle = nqueens_bundle()
        wrong = type(bundle.eval_assets)(
            reference_model=bundle.eval_assets.reference_model,
            mapped_vars=("q",),
            mapping_program="def transformer(d, s):\n    return {'queens': [1]}\n",
            problem_kind=ProblemKind.CSP,
        )
        with pytest.raises(MappingFault):
            map_solution(wrong, bundle.input_data, board_for([2, 4, 1, 3]), sandbox)


class TestFeasibility:
    def test_known_solution_feasible(self, engine):
        bundle = nqueens_bundle()
        assert check_feasible(bundle.eval_assets, bundle.input_data, {"q": [2, 4, 1, 3]}, engine)

    def test_diagonal_conflict_infeasible(self, engine):
        bundle = nqueens_bundle()
        assert not check_feasible(bundle.eval_assets, bundle.input_data, {"q": [1, 2, 3, 4]}, engine)

    def test_out_of_domain_value_infeasible(self, engine):
        bundle = nqueens_bundle()
        assert not check_feasible(bundle.eval_assets, bundle.input_data, {"q": [9, 4, 1, 3]}, engine)

    def test_broken_reference_model_raises(self, engine):
        bundle = nqueens_bundle()
        broken = type(bundle.eval_assets)(
            reference_model="var 1..3 q; solve satisfy;",
            mapped_vars=("q",),
            mapping_program=bundle.eval_assets.mapping_program,
            problem_kind=ProblemKind.CSP,
        )
        with pytest.raises(ReferenceModelBroken):
            check_feasible(broken, bundle.input_data, {"q": [1]}, engine)

    @pytest.mark.parametrize("n", [4, 5, 6])
    def test_solver_solutions_self_consistent(self, engine, n):
        bundle = nqueens_bundle()
        data = type(bundle.input_data)(dzn_text=f"n = {n};", builtin_params={"n": n})
        solved = engine.solve(bundle.eval_assets.reference_model, data.dzn_text, 30)
        assert solved.has_solution
        assert check_feasible(bundle.eval_assets, data, {"q": solved.assignment["q"]}, engine)

    @pytest.mark.parametrize("n", [4, 5])
    def test_feasibility_agrees_with_brute_force(self, engine, n):
        bundle = nqueens_bundle()
        data = type(bundle.input_data)(dzn_text=f"n = {n};", builtin_params={"n": n})
        for placement in itertools.product(range(1, n + 1), repeat=n):
            verdict = check_feasible(bundle.eval_assets, data, {"q": list(placement)}, engine)
            assert verdict == queens_ok(placement), placement


class TestOptimality:
    def test_minimum_is_optimal(self, engine):
        bundle = pickmin_bundle()
        assert check_optimal(bundle.eval_assets, bundle.input_data, 1, engine) is True

    def test_non_minimum_is_not(self, engine):
        bundle = pickmin_bundle()
        assert check_optimal(bundle.eval_assets, bundle.input_data, 2, engine) is False

    def test_maximization_symmetric(self, engine):
        bundle = pickmin_bundle()
        assets = type(bundle.eval_assets)(
            reference_model="int: lo;\nint: hi;\nvar lo..hi: x;\nsolve maximize x;\n",
            mapped_vars=("x",),
            mapping_program=bundle.eval_assets.mapping_program,
            problem_kind=ProblemKind.COP,
            objective_sense=type(bundle.eval_assets.objective_sense)("max"),
        )
        assert check_optimal(assets, bundle.input_data, 5, engine) is True
        assert check_optimal(assets, bundle.input_data, 4, engine) is False

    def test_monotonicity_for_minimization(self, engine):
        bundle = pickmin_bundle()
        verdicts = {z: check_optimal(bundle.eval_assets, bundle.input_data, z, engine)
                    for z in range(0, 7)}
        for z, verdict in verdicts.items():
            if verdict:
                assert all(verdicts[lower] for lower in verdicts if lower <= z)

    def test_objective_recomputed_not_trusted(self, engine):
        bundle = pickmin_bundle()
        value = reference_objective(bundle.eval_assets, bundle.input_data, {"x": 3}, engine)
        assert value == 3


class TestGamma:
    def test_csp_gamma_is_feasibility(self):
        assert score_gamma(ProblemKind.CSP, True, None) == 1
        assert score_gamma(ProblemKind.CSP, False, None) == 0

    def test_cop_needs_both(self):
        assert score_gamma(ProblemKind.COP, True, True) == 1
        assert score_gamma(ProblemKind.COP, True, False) == 0
        assert score_gamma(ProblemKind.COP, False, None) == 0

    def test_evaluate_solution_nqueens_good(self, engine, sandbox):
        bundle = nqueens_bundle()
        record = evaluate_solution(bundle, board_for([2, 4, 1, 3]), engine, sandbox)
        assert record.feasible and record.gamma == 1

    def test_evaluate_solution_nqueens_bad(self, engine, sandbox):
        bundle = nqueens_bundle()
        record = evaluate_solution(bundle, board_for([1, 2, 3, 4]), engine, sandbox)
        assert not record.feasible and record.gamma == 0

    def test_evaluate_solution_cop(self, engine, sandbox):
        bundle = pickmin_bundle()
        best = evaluate_solution(bundle, {"x": 1}, engine, sandbox)
        assert (best.feasible, best.optimal, best.gamma) == (True, True, 1)
        assert best.objective_value == 1
        worse = evaluate_solution(bundle, {"x": 2}, engine, sandbox)
        assert (worse.feasible, worse.optimal, worse.gamma) == (True, False, 0)

    def test_infeasible_short_circuits_optimality(self, engine, sandbox):
        bundle = pickmin_bundle()
        record = evaluate_solution(bundle, {"x": 9}, engine, sandbox)
        assert not record.feasible
        assert record.optimal is None
        assert record.gamma == 0


class TestKnapsackScoring:
    """Array-output COP scored end to end, cross-checked by subset enumeration."""

    @pytest.fixture()
    def bundle(self):
        from zincsmith.problems import load_bundle

        return load_bundle(PROBLEMS_DIR / "knapsack")

    def _oracle(self, bundle):
        weights = bundle.input_data.builtin_params["w"]
        values = bundle.input_data.builtin_params["v"]
        cap = bundle.input_data.builtin_params["cap"]
        best = 0
        table = {}
        for picks in itertools.product([0, 1], repeat=len(weights)):
            weight = sum(w for w, p in zip(weights, picks) if p)
            value = sum(v for v, p in zip(values, picks) if p)
            feasible = weight <= cap
            table[picks] = (feasible, value)
            if feasible:
                best = max(best, value)
        return table, best

    def test_every_subset_matches_oracle(self, bundle, engine, sandbox):
        table, best = self._oracle(bundle)
        for picks, (feasible, value) in table.items():
            record = evaluate_solution(bundle, {"take": list(picks)}, engine, sandbox)
            assert record.feasible == feasible, picks
            if feasible:
                assert record.objective_value == value
                assert record.optimal == (value == best), picks
                assert record.gamma == int(value == best)
            else:
                assert record.gamma == 0

    def test_two_distinct_optima_both_score_one(self, bundle, engine, sandbox):
        # [1,0,0,1] and [1,1,1,0] both reach the optimum of 13
        for picks in ([1, 0, 0, 1], [1, 1, 1, 0]):
            record = evaluate_solution(bundle, {"take": picks}, engine, sandbox)
            assert (record.gamma, record.objective_value) == (1, 13), picks

    def test_reference_solution_passes_frr_trial(self, bundle, sandbox):
        checker = (
            "def semantic_checker(data_dict, ovar_dict):\n"
            "    take = ovar_dict['take']\n"
            "    w = data_dict['w']\n"
            "    if any(t not in (0, 1) for t in take):\n"
            "        raise ValueError('Selection error: take must be 0/1')\n"
            "    if sum(t * wi for t, wi in zip(take, w)) > data_dict['cap']:\n"
            "        raise ValueError('Capacity error: total weight exceeds cap')\n"
        )
        trials = checker_frr_trials([checker], bundle, sandbox)
        assert trials == [{"kind": "checker", "rejected_ground_truth": False, "error_counted": False}]


class TestMetrics:
    def test_sa_arithmetic(self):
        assert compute_sa([1, 1, 0, 1]) == 0.75
        assert compute_sa([0, 0]) == 0.0
        assert compute_sa([1]) == 1.0

    def test_sa_empty_raises(self):
        with pytest.raises(EmptyBenchmark):
            compute_sa([])

    def test_sa_at_1(self):
        assert compute_sa_at_1([[0, 1, 0], [0, 0, 0]]) == 0.5
        assert compute_sa_at_1([[0], [0, 0]]) == 0.0

    def test_sa_at_1_empty_raises(self):
        with pytest.raises(EmptyBenchmark):
            compute_sa_at_1([])

    def test_frr_definitional(self):
        trials = [{"kind": "checker", "rejected_ground_truth": r} for r in (True, False, False, False, True, False)]
        assert compute_frr(trials) == {"checker": pytest.approx(2 / 6)}

    def test_frr_no_trials(self):
        with pytest.raises(NoTrials):
            compute_frr([])

    def test_frr_per_kind(self):
        trials = [
            {"kind": "checker", "rejected_ground_truth": True},
            {"kind": "critique", "rejected_ground_truth": False},
            {"kind": "critique", "rejected_ground_truth": True},
        ]
        assert compute_frr(trials) == {"checker": 1.0, "critique": 0.5}

    def test_randomized_tables_match_recomputation(self):
        rng = random.Random(20240809)
        for _ in range(100):
            problems = rng.randint(1, 12)
            gammas = [rng.randint(0, 1) for _ in range(problems)]
            assert compute_sa(gammas) == sum(gammas) / problems
            table = [[rng.randint(0, 1) for _ in range(rng.randint(1, 5))] for _ in range(problems)]
            expected = sum(1 for row in table if max(row) == 1) / problems
            assert compute_sa_at_1(table) == expected
            trials = [{"kind": "checker", "rejected_ground_truth": rng.random() < 0.3}
                      for _ in range(rng.randint(1, 20))]
            expected_frr = sum(t["rejected_ground_truth"] for t in trials) / len(trials)
            assert compute_frr(trials)["checker"] == expected_frr

    def test_sa_at_1_dominates_sa(self):
        rng = random.Random(7)
        for _ in range(50):
            table = [[rng.randint(0, 1) for _ in range(3)] for _ in range(rng.randint(1, 10))]
            selected = [row[rng.randrange(len(row))] for row in table]
            assert compute_sa_at_1(table) >= compute_sa(selected)


class TestFrrTrials:
    def test_good_checker_accepts_reference_solution(self, sandbox):
        bundle = nqueens_bundle()
        trials = checker_frr_trials([BOARD_CHECKER], bundle, sandbox)
        assert trials == [{"kind": "checker", "rejected_ground_truth": False, "error_counted": False}]

    def test_rejecting_and_erroring_checkers_count(self, sandbox):
        bundle = nqueens_bundle()
        erroring = "def semantic_checker(d, o):\n    return nope\n"
        trials = checker_frr_trials([NAYSAYER_CHECKER, erroring], bundle, sandbox)
        assert [t["rejected_ground_truth"] for t in trials] == [True, True]
        assert [t["error_counted"] for t in trials] == [False, True]
        assert compute_frr(trials) == {"checker": 1.0}

    def test_bundle_without_reference_solution_yields_no_trials(self, sandbox):
        bundle = nqueens_bundle()
        assets = type(bundle.eval_assets)(
            reference_model=bundle.eval_assets.reference_model,
            mapped_vars=("q",),
            mapping_program=bundle.eval_assets.mapping_program,
            problem_kind=ProblemKind.CSP,
        )
        stripped = type(bundle)(
            id=bundle.id, description_nl=bundle.description_nl, input_spec=bundle.input_spec,
            output_spec=bundle.output_spec, input_data=bundle.input_data, eval_assets=assets,
        )
        assert checker_frr_trials([BOARD_CHECKER], stripped, sandbox) == []
