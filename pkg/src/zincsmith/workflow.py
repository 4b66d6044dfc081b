"""End-to-end workflow: sampling, cascades, selection, restarts, fallback.

One run drives up to 1 + restart_budget iterations. Each iteration prepares
per-agent description variants, samples candidate models and semantic
checkers, pushes every candidate through the checking cascade, and asks the
selection layer for a winner. An abort (no survivor, or no vote majority)
refreshes the problem description and restarts; when all restarts are spent
the run falls back to a seeded-random pick among every survivor seen, or
reports exhaustion when there is none.

With a replay fixture store the whole run is bit-deterministic: identical
seeds and fixtures give identical run records, including the fallback pick.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .agents import (
    EvidencePack,
    ModelingAgent,
    SelectionAgent,
    ValidationAgent,
    make_variants,
    refine_description,
)
from .errors import ParseError
from .gates import CheckingPipeline, canonical_solution, first_line
from .gateway import Gateway
from .problems import ProblemBundle
from .templates import TemplateLibrary

logger = logging.getLogger(__name__)

SELECTION_RULES = ("votes", "solution_majority", "checker_count", "first_survivor")


@dataclass
class WorkflowConfig:
    agents_per_role: int = 3        # K
    refine_budget: int = 4          # r, repairs per candidate
    restart_budget: int = 1         # R
    strategy: str = "prompt_diverse"
    temperature: float = 0.7        # used by temperature sampling
    solver_id: str = "gecode"
    solver_timeout_s: float = 30.0
    seed: int = 0
    worker_limit: int = 4
    sandbox_timeout_s: float = 10.0
    use_validation: bool = True
    selection_rule: str = "votes"

    def __post_init__(self):
        if self.agents_per_role < 1:
            raise ValueError("agents_per_role must be at least 1")
        if self.refine_budget < 0 or self.restart_budget < 0:
            raise ValueError("budgets must be nonnegative")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.strategy == "temperature" and not self.temperature > 0:
            raise ValueError("temperature sampling needs a positive temperature")
        if self.strategy not in ("prompt_diverse", "temperature"):
            raise ValueError(f"unknown strategy: {self.strategy}")
        if self.selection_rule not in SELECTION_RULES:
            raise ValueError(f"unknown selection rule: {self.selection_rule}")
        if self.selection_rule == "checker_count" and not self.use_validation:
            raise ValueError("checker_count selection needs validation agents")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkflowConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class WorkflowOutcome:
    status: str  # selected | fallback | exhausted
    model: str | None
    solution: dict | None
    iterations_used: int
    telemetry: dict
    run_record: dict = field(repr=False, default_factory=dict)


def check_budget_identity(refine_budget: int, restart_budget: int, total_calls: int) -> bool:
    """Whether r repairs plus R restarts of (1 + r) calls fit the call budget."""
    return refine_budget + (1 + refine_budget) * restart_budget <= total_calls


def aggregate_votes(votes: list, valid_indices: set) -> int | None:
    """Strict-majority winner among candidate indices, or None to abort.

    A reject-all majority and a split with no strict majority both abort.
    """
    counts = Counter(v.selection for v in votes)
    total = len(votes)
    for index, count in counts.items():
        if index != -1 and index in valid_indices and 2 * count > total:
            return index
    return None


@dataclass
class _Survivor:
    iteration: int
    agent_index: int
    display_index: int
    snapshot: dict
    g4_status: str | None
    checker_pass_count: int | None
    verdicts: list


class WorkflowRunner:
    def __init__(self, gateway: Gateway, templates: TemplateLibrary,
                 pipeline: CheckingPipeline, config: WorkflowConfig):
        self.gateway = gateway
        self.templates = templates
        self.pipeline = pipeline
        self.config = config

    def run(self, bundle: ProblemBundle) -> WorkflowOutcome:
        config = self.config
        rng = random.Random(config.seed)
        record: dict = {
            "schema_version": 1,
            "problem_id": bundle.id,
            "config": config.to_dict(),
            "iterations": [],
        }
        all_survivors: list[_Survivor] = []
        description = bundle.description_nl
        selected: _Survivor | None = None
        iterations_used = 0

        for iteration in range(config.restart_budget + 1):
            iterations_used = iteration + 1
            if iteration > 0:
                description = self._refresh_description(bundle, description, iteration, record)
            iter_record = self._run_iteration(bundle, description, iteration)
            record["iterations"].append(iter_record["record"])
            survivors = iter_record["survivors"]
            all_survivors.extend(survivors)
            if not survivors:
                iter_record["record"]["abort"] = "no candidate passed the execution checks"
                continue
            winner = self._select(survivors, iter_record)
            if winner is not None:
                selected = winner
                break
            iter_record["record"]["abort"] = "selection reached no majority"

        telemetry = self._telemetry(record)
        record["telemetry"] = telemetry
        if selected is not None:
            outcome = WorkflowOutcome(
                status="selected",
                model=selected.snapshot["source"],
                solution=selected.snapshot["solution"],
                iterations_used=iterations_used,
                telemetry=telemetry,
                run_record=record,
            )
            record["outcome"] = self._outcome_record(outcome, selected, fallback_pick=None)
            return outcome
        if all_survivors:
            pick = rng.choice(all_survivors)
            outcome = WorkflowOutcome(
                status="fallback",
                model=pick.snapshot["source"],
                solution=pick.snapshot["solution"],
                iterations_used=iterations_used,
                telemetry=telemetry,
                run_record=record,
            )
            record["outcome"] = self._outcome_record(outcome, None, fallback_pick=pick)
            return outcome
        outcome = WorkflowOutcome(
            status="exhausted",
            model=None,
            solution=None,
            iterations_used=iterations_used,
            telemetry=telemetry,
            run_record=record,
        )
        record["outcome"] = self._outcome_record(outcome, None, None)
        return outcome

    # --- iteration pieces -------------------------------------------------

    def _refresh_description(self, bundle: ProblemBundle, current: str,
                             iteration: int, record: dict) -> str:
        try:
            variant = refine_description(
                self.gateway, self.templates, bundle,
                description=current, seed=self.config.seed + iteration,
            )
            return variant.text
        except ParseError as exc:
            logger.warning("restart description refresh failed: %s", exc)
            record.setdefault("notes", []).append(
                f"iteration {iteration}: description refresh unparseable, reusing previous text"
            )
            return current

    def _run_iteration(self, bundle: ProblemBundle, description: str, iteration: int) -> dict:
        config = self.config
        plans = make_variants(
            self.gateway, self.templates, bundle, config.strategy,
            config.agents_per_role, tau=config.temperature,
            seed=config.seed, description=description,
        )
        modeling = [
            ModelingAgent(self.gateway, self.templates, bundle, variant, k, temperature,
                          seed=config.seed)
            for k, (variant, temperature) in enumerate(plans, start=1)
        ]
        candidates = [agent.generate() for agent in modeling]

        checkers = []
        if config.use_validation:
            for k, (variant, temperature) in enumerate(plans, start=1):
                agent = ValidationAgent(self.gateway, self.templates, bundle, variant, k,
                                        temperature, seed=config.seed)
                checkers.append(agent.synthesize_checker())

        outcomes = self._run_cascades(bundle, candidates, checkers, modeling)

        survivors: list[_Survivor] = []
        for outcome in outcomes:
            if not outcome.survived:
                continue
            survivors.append(_Survivor(
                iteration=iteration,
                agent_index=outcome.candidate.agent_index,
                display_index=len(survivors) + 1,
                snapshot=outcome.candidate.survivor_snapshot,
                g4_status=outcome.g4_status,
                checker_pass_count=outcome.checker_pass_count,
                verdicts=outcome.verdicts,
            ))

        iter_record = {
            "index": iteration,
            "description": description,
            "variants": [
                {"kind": variant.kind.value, "fallback_from": variant.fallback_from}
                for variant, _ in plans
            ],
            "candidates": [self._candidate_record(o) for o in outcomes],
            "checkers": [
                {"agent_index": c.agent_index, "health": c.health, "source": c.source}
                for c in checkers
            ],
            "survivor_agent_indices": [s.agent_index for s in survivors],
        }
        return {"record": iter_record, "survivors": survivors, "plans": plans, "checkers": checkers}

    def _run_cascades(self, bundle, candidates, checkers, modeling) -> list:
        jobs = list(zip(candidates, modeling))
        runner = self.pipeline

        def one(pair):
            candidate, agent = pair
            return runner.run_cascade(candidate, bundle, checkers, agent, self.config.refine_budget)

        if self.config.worker_limit <= 1 or len(jobs) <= 1:
            return [one(pair) for pair in jobs]
        with ThreadPoolExecutor(max_workers=self.config.worker_limit) as pool:
            return list(pool.map(one, jobs))

    def _select(self, survivors, iter_record) -> "_Survivor | None":
        rule = self.config.selection_rule
        if rule == "first_survivor":
            choice = survivors[0]
            iter_record["record"]["selection"] = {"rule": rule, "selected_display_index": choice.display_index}
            return choice
        if rule == "solution_majority":
            choice = self._solution_majority(survivors)
            iter_record["record"]["selection"] = {"rule": rule, "selected_display_index": choice.display_index}
            return choice
        if rule == "checker_count":
            choice = max(survivors, key=lambda s: (s.checker_pass_count or 0, -s.display_index))
            iter_record["record"]["selection"] = {"rule": rule, "selected_display_index": choice.display_index}
            return choice

        votes = self._collect_votes(survivors, iter_record["plans"], iter_record["checkers"])
        iter_record["record"]["votes"] = [
            {"agent_index": v.agent_index, "selection": v.selection, "reason": v.reason}
            for v in votes
        ]
        winner_index = aggregate_votes(votes, {s.display_index for s in survivors})
        iter_record["record"]["selection"] = {"rule": rule, "selected_display_index": winner_index}
        if winner_index is None:
            return None
        return next(s for s in survivors if s.display_index == winner_index)

    @staticmethod
    def _solution_majority(survivors: list) -> "_Survivor":
        """Largest group of byte-equal canonical solutions; first occurrence breaks ties."""
        groups: dict[str, list] = {}
        for survivor in survivors:
            groups.setdefault(canonical_solution(survivor.snapshot["solution"]), []).append(survivor)
        best = max(groups.values(), key=lambda grp: (len(grp), -grp[0].display_index))
        return best[0]

    def _collect_votes(self, survivors, plans, checkers) -> list:
        config = self.config
        outcome_lines = tuple(self._outcome_line(s, len(checkers)) for s in survivors)
        candidate_sources = tuple((s.display_index, s.snapshot["source"]) for s in survivors)
        agents = []
        for k, (variant, temperature) in enumerate(plans, start=1):
            agents.append(SelectionAgent(self.gateway, self.templates, variant, k, temperature,
                                         seed=config.seed))
        evidence_by_agent = [
            EvidencePack(
                description=variant.text,
                checkers=tuple(checkers),
                candidate_sources=candidate_sources,
                outcome_lines=outcome_lines,
            )
            for variant, _ in plans
        ]

        def one(pair):
            agent, evidence = pair
            return agent.cast_vote(evidence)

        jobs = list(zip(agents, evidence_by_agent))
        if config.worker_limit <= 1 or len(jobs) <= 1:
            votes = [one(pair) for pair in jobs]
        else:
            with ThreadPoolExecutor(max_workers=config.worker_limit) as pool:
                votes = list(pool.map(one, jobs))
        return sorted(votes, key=lambda v: v.agent_index)

    @staticmethod
    def _outcome_line(survivor: "_Survivor", checker_total: int) -> str:
        if checker_total == 0 or survivor.checker_pass_count is None:
            return f"candidate {survivor.display_index}: no semantic checkers were run"
        line = (f"candidate {survivor.display_index}: passed "
                f"{survivor.checker_pass_count}/{checker_total} checkers")
        failing = [v for v in survivor.verdicts if v["verdict"] != "pass"]
        if failing:
            details = ", ".join(
                f"checker {v['checker_index']} ({v['verdict']}): {first_line(v['feedback'])}"
                for v in failing
            )
            line += f"; failing: [{details}]"
        if survivor.g4_status == "fail (feedback rejected)":
            line += "; the modeling agent rejected this feedback"
        return line

    @staticmethod
    def _candidate_record(outcome) -> dict:
        candidate = outcome.candidate
        return {
            "agent_index": candidate.agent_index,
            "variant_kind": candidate.variant_kind,
            "revision": candidate.revision,
            "alive": candidate.alive,
            "source": candidate.source,
            "revisions": list(candidate.revisions),
            "formatter": candidate.formatter.source if candidate.formatter else None,
            "survived": outcome.survived,
            "g4_status": outcome.g4_status,
            "checker_pass_count": outcome.checker_pass_count,
            "dead_reason": outcome.dead_reason,
            "survivor_snapshot": candidate.survivor_snapshot,
            "gate_history": [g.to_dict() for g in candidate.gate_history],
            "notes": list(candidate.notes),
        }

    def _telemetry(self, record: dict) -> dict:
        gate_failures = {"G1": 0, "G2": 0, "G3": 0, "G4": 0}
        candidates_total = 0
        survivors_total = 0
        for iteration in record["iterations"]:
            for cand in iteration["candidates"]:
                candidates_total += 1
                survivors_total += bool(cand["survived"])
                for entry in cand["gate_history"]:
                    if entry["status"] == "fail":
                        gate_failures[entry["gate"]] += 1
        return {
            "llm_calls": dict(sorted(self.gateway.calls_by_tag.items())),
            "gate_failures": gate_failures,
            "candidates_total": candidates_total,
            "survivors_total": survivors_total,
        }

    @staticmethod
    def _outcome_record(outcome: WorkflowOutcome, selected, fallback_pick) -> dict:
        entry = {
            "status": outcome.status,
            "iterations_used": outcome.iterations_used,
            "model": outcome.model,
            "solution": outcome.solution,
            "selected": None,
            "fallback_pick": None,
        }
        if selected is not None:
            entry["selected"] = {"iteration": selected.iteration, "agent_index": selected.agent_index}
        if fallback_pick is not None:
            entry["fallback_pick"] = {
                "iteration": fallback_pick.iteration,
                "agent_index": fallback_pick.agent_index,
            }
        return entry
