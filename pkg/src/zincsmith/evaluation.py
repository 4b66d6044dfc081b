"""Solution-level scoring against reference models.

A formatted output solution is mapped onto reference-model variables by the
bundle's mapping program, then validated by textual augmentation of the
reference source: equality pins for feasibility, and a dominance bound
(objective strictly better than the reported value) whose unsatisfiability
certifies optimality. Correctness never inspects the generated model, only
its solution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import EmptyBenchmark, MappingFault, NoTrials, ReferenceModelBroken
from .mzn.scanner import find_solve_item, replace_solve_with_satisfy
from .mzn.toolchain import SolveStatus, Toolchain
from .problems import EvalAssets, InputData, ProblemBundle, ProblemKind
from .sandbox import ExecRequest, SandboxClient

logger = logging.getLogger(__name__)


@dataclass
class EvaluationRecord:
    problem_id: str
    feasible: bool
    optimal: bool | None = None      # COP only; None when undetermined or N/A
    gamma: int = 0
    objective_value: object = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "feasible": self.feasible,
            "optimal": self.optimal,
            "gamma": self.gamma,
            "objective_value": self.objective_value,
            "flags": list(self.flags),
        }


def mzn_literal(value) -> str:
    """Render a JSON value as MiniZinc literal text for equality injection."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        if value and isinstance(value[0], list):
            rows = " | ".join(", ".join(mzn_literal(v) for v in row) for row in value)
            return f"[| {rows} |]"
        return "[" + ", ".join(mzn_literal(v) for v in value) + "]"
    raise ValueError(f"cannot render {type(value).__name__} as MiniZinc literal")


def equality_pins(mapped: dict) -> list:
    return [f"{name} = {mzn_literal(value)}" for name, value in sorted(mapped.items())]


def map_solution(assets: EvalAssets, input_data: InputData, solution: dict,
                 sandbox: SandboxClient, timeout_s: float = 10.0) -> dict:
    """Run the bundle's mapping program: output solution -> reference assignment."""
    response = sandbox.run(ExecRequest(
        function_source=assets.mapping_program,
        function_name="transformer",
        data_dict=input_data.builtin_params,
        arg_dict=solution,
        timeout_s=timeout_s,
    ))
    if response.status != "ok":
        raise MappingFault(f"mapping program {response.status}: {response.message}")
    mapped = response.result
    if not isinstance(mapped, dict):
        raise MappingFault(f"mapping program returned {type(mapped).__name__}, expected an object")
    if set(mapped) != set(assets.mapped_vars):
        raise MappingFault(
            f"mapped assignment keys {sorted(mapped)} != declared mapped vars {sorted(assets.mapped_vars)}"
        )
    return mapped


def _compile_reference(assets: EvalAssets, toolchain: Toolchain) -> None:
    result = toolchain.compile_check(assets.reference_model)
    if not result.ok:
        raise ReferenceModelBroken(result.message)


def check_feasible(assets: EvalAssets, input_data: InputData, mapped: dict,
                   toolchain: Toolchain, timeout_s: float = 30.0) -> bool:
    """Satisfiability of the reference model with the assignment pinned in."""
    _compile_reference(assets, toolchain)
    model = replace_solve_with_satisfy(assets.reference_model)
    result = toolchain.solve(model, input_data.dzn_text, timeout_s,
                             extra_constraints=tuple(equality_pins(mapped)))
    if result.status is SolveStatus.ERROR:
        # out-of-domain literals can surface as flattening errors; either way
        # the pinned model has no solution
        logger.debug("feasibility solve error treated as infeasible: %s", result.message)
        return False
    return result.has_solution


def reference_objective(assets: EvalAssets, input_data: InputData, mapped: dict,
                        toolchain: Toolchain, timeout_s: float = 30.0):
    """The objective value the reference model computes for the pinned assignment.

    Never trusts a value reported by the candidate; returns None when the
    solve does not finish.
    """
    _compile_reference(assets, toolchain)
    result = toolchain.solve(assets.reference_model, input_data.dzn_text, timeout_s,
                             extra_constraints=tuple(equality_pins(mapped)))
    if not result.has_solution:
        return None
    return result.objective


def check_optimal(assets: EvalAssets, input_data: InputData, objective_value,
                  toolchain: Toolchain, timeout_s: float = 30.0) -> bool | None:
    """True when no strictly better objective exists; None when undetermined."""
    if assets.problem_kind is not ProblemKind.COP:
        raise ValueError("optimality applies to optimization problems only")
    _compile_reference(assets, toolchain)
    kind, objective_text = find_solve_item(assets.reference_model)
    if kind == "satisfy" or objective_text is None:
        raise ReferenceModelBroken("COP reference model has no objective in its solve item")
    comparator = "<" if assets.objective_sense.value == "min" else ">"
    bound = f"({objective_text}) {comparator} {mzn_literal(objective_value)}"
    model = replace_solve_with_satisfy(assets.reference_model)
    result = toolchain.solve(model, input_data.dzn_text, timeout_s, extra_constraints=(bound,))
    if result.status is SolveStatus.UNSATISFIABLE:
        return True
    if result.has_solution:
        return False
    return None  # timeout or unknown: optimality undetermined


def score_gamma(kind: ProblemKind, feasible: bool, optimal: bool | None) -> int:
    if kind is ProblemKind.CSP:
        return int(feasible)
    return int(feasible and optimal is True)


def evaluate_solution(bundle: ProblemBundle, solution: dict, toolchain: Toolchain,
                      sandbox: SandboxClient, timeout_s: float = 30.0) -> EvaluationRecord:
    """Full per-problem scoring: map, feasibility, then optimality for COPs."""
    assets = bundle.eval_assets
    if assets is None:
        raise ValueError(f"bundle {bundle.id} has no scoring assets")
    record = EvaluationRecord(problem_id=bundle.id, feasible=False)
    try:
        mapped = map_solution(assets, bundle.input_data, solution, sandbox)
    except MappingFault as exc:
        record.flags.append(f"mapping fault: {exc}")
        return record
    record.feasible = check_feasible(assets, bundle.input_data, mapped, toolchain, timeout_s)
    if not record.feasible:
        return record  # optimality short-circuits on infeasible solutions
    if assets.problem_kind is ProblemKind.CSP:
        record.gamma = score_gamma(assets.problem_kind, record.feasible, None)
        return record
    objective_value = reference_objective(assets, bundle.input_data, mapped, toolchain, timeout_s)
    if objective_value is None:
        record.flags.append("objective undetermined (reference solve did not finish)")
        return record
    record.objective_value = objective_value
    record.optimal = check_optimal(assets, bundle.input_data, objective_value, toolchain, timeout_s)
    if record.optimal is None:
        record.flags.append("optimality undetermined (dominance check did not finish)")
    record.gamma = score_gamma(assets.problem_kind, record.feasible, record.optimal)
    return record


# --- benchmark metrics -------------------------------------------------------

def compute_sa(gammas: list) -> float:
    """Mean instance-level correctness over the benchmark."""
    if not gammas:
        raise EmptyBenchmark("no problems to score")
    return sum(gammas) / len(gammas)


def compute_sa_at_1(per_problem_gammas: list) -> float:
    """Fraction of problems where at least one candidate scored correct."""
    if not per_problem_gammas:
        raise EmptyBenchmark("no problems to score")
    return sum(1 for gammas in per_problem_gammas if any(g == 1 for g in gammas)) / len(per_problem_gammas)


def compute_frr(trials: list) -> dict:
    """Per-kind false rejection rate: rejections of ground truth over trials.

    Each trial is {"kind": "checker"|"critique", "rejected_ground_truth": bool}.
    A checker that errors on the reference solution counts as a rejection
    (callers flag such trials as error-counted in their reports).
    """
    if not trials:
        raise NoTrials("no self-checking trials recorded")
    totals: dict[str, list] = {}
    for trial in trials:
        totals.setdefault(trial["kind"], []).append(bool(trial["rejected_ground_truth"]))
    return {kind: sum(flags) / len(flags) for kind, flags in sorted(totals.items())}


def checker_frr_trials(checker_sources: list, bundle: ProblemBundle,
                       sandbox: SandboxClient, timeout_s: float = 10.0) -> list:
    """Apply synthesized checkers to the bundle's known-good reference solution.

    Returns one trial per checker; empty when the bundle carries no reference
    solution. Execution errors count as rejections and are marked so reports
    can flag them as error-counted.
    """
    assets = bundle.eval_assets
    if assets is None or assets.reference_solution is None:
        return []
    trials = []
    for source in checker_sources:
        response = sandbox.run(ExecRequest(
            function_source=source,
            function_name="semantic_checker",
            data_dict=bundle.input_data.builtin_params,
            arg_dict=assets.reference_solution,
            timeout_s=timeout_s,
        ))
        trials.append({
            "kind": "checker",
            "rejected_ground_truth": response.status != "ok",
            "error_counted": response.status == "error",
        })
    return trials
