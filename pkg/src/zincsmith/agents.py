"""Agent roles over the gateway: modeling, validation, and selection.

Agents are thin, stateful-only-in-conversation wrappers: they render prompt
templates, send chat requests, and parse replies into typed artifacts. Every
malformed reply gets exactly one re-ask appended to the same conversation
before the failure is recorded; parsing itself is pure, so identical reply
text always yields the identical artifact.

Validation agents are constructed from the problem context alone and their
prompts never include candidate model source; that independence is what
makes synthesized checkers usable as (approximate) tests.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import ParseError
from .gateway import ChatMessage, ChatRequest, Gateway
from .problems import ProblemBundle
from .templates import TemplateLibrary

logger = logging.getLogger(__name__)


class VariantKind(Enum):
    ORIGINAL = "original"
    REFINED = "refined"
    PLANNING_AUGMENTED = "planning_augmented"


@dataclass(frozen=True)
class DescriptionVariant:
    kind: VariantKind
    text: str
    fallback_from: str | None = None  # set when generation failed and the original text is used


@dataclass
class CandidateModel:
    agent_index: int
    revision: int = 0
    source: str = ""
    gate_history: list = field(default_factory=list)
    alive: bool = True
    variant_kind: str = VariantKind.ORIGINAL.value
    formatter: "FormatterProgram | None" = None
    assignment: dict | None = None
    solution: dict | None = None
    survivor_snapshot: dict | None = None
    notes: list = field(default_factory=list)
    revisions: list = field(default_factory=list)  # audit: source text per revision

    def record_revision(self, trigger: str) -> None:
        self.revisions.append({
            "revision": self.revision,
            "trigger": trigger,
            "source": self.source,
            "formatter": self.formatter.source if self.formatter else None,
        })

    def snapshot_survivor(self) -> None:
        """Remember the newest revision that cleared the execution gates."""
        self.survivor_snapshot = {
            "revision": self.revision,
            "source": self.source,
            "assignment": self.assignment,
            "solution": self.solution,
        }


@dataclass
class CheckerProgram:
    agent_index: int
    source: str
    health: str = "untested"  # untested | ok | defective


@dataclass
class FormatterProgram:
    source: str


@dataclass(frozen=True)
class SelectionVote:
    agent_index: int
    reason: str
    selection: int  # display index of a surviving candidate, or -1 for reject-all


@dataclass(frozen=True)
class EvidencePack:
    description: str
    checkers: tuple
    candidate_sources: tuple   # (display_index, source) in presentation order
    outcome_lines: tuple       # one status line per candidate


_CODE_BLOCK_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_TASK_TAG_RE = re.compile(r"<task(\d+)>(.*?)</task\1>", re.DOTALL)


def first_code_block(text: str) -> str | None:
    """First fenced block wins; the language tag on the fence is ignored."""
    match = _CODE_BLOCK_RE.search(text)
    if match is None:
        return None
    return match.group(1).strip()


def extract_json_object(text: str) -> dict | None:
    """The first balanced {...} region that parses as a JSON object."""
    try:
        value = json.loads(text)
        if isinstance(value, dict):
            return value
    except json.JSONDecodeError:
        pass
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_string = False
        escape = False
        for end in range(start, len(text)):
            c = text[end]
            if in_string:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_string = False
                continue
            if c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        value = json.loads(text[start:end + 1])
                        if isinstance(value, dict):
                            return value
                    except json.JSONDecodeError:
                        break
                    break
        # keep scanning from the next '{' when this region failed
    return None


def extract_tasks(text: str) -> list:
    """Ordered task texts from <taskN>...</taskN> tags, sorted by id."""
    found = [(int(num), body.strip()) for num, body in _TASK_TAG_RE.findall(text)]
    found.sort(key=lambda pair: pair[0])
    return [body for _, body in found]


def input_spec_text(bundle: ProblemBundle) -> str:
    return bundle.input_spec.strip()


def output_spec_text(bundle: ProblemBundle) -> str:
    lines = []
    for idx, (key, spec) in enumerate(bundle.output_spec.items(), start=1):
        shape = list(spec.shape)
        lines.append(f'({idx}) `{key}`: "{spec.description}","size": "{shape}","kind": "{spec.element_kind}"')
    return "\n".join(lines)


class _Conversation:
    """One growing chat: send, then extend with reply + follow-up turns."""

    def __init__(self, gateway: Gateway, system_prompt: str, kickoff: str,
                 temperature: float, tag: str, seed: int | None = None):
        self.gateway = gateway
        self.request = ChatRequest(
            system_prompt=system_prompt,
            messages=(ChatMessage("user", kickoff),),
            temperature=temperature,
            tag=tag,
            seed=seed,
        )
        self.last_reply: str | None = None

    def send(self) -> str:
        response = self.gateway.complete(self.request)
        self.last_reply = response.content
        return response.content

    def follow_up(self, message: str) -> str:
        self.request = self.request.with_reply_and_followup(self.last_reply or "", message)
        return self.send()


# --- description variants ---------------------------------------------------

def refine_description(gateway: Gateway, templates: TemplateLibrary, bundle: ProblemBundle,
                       description: str | None = None, temperature: float = 0.0,
                       seed: int | None = None, tag: str = "variant/refine") -> DescriptionVariant:
    """Rewrite the problem description to be concise, complete, and explicit."""
    prompt = templates.render("refine_description", {
        "Problem description": description or bundle.description_nl,
        "Specification of the input parameters": input_spec_text(bundle),
    })
    chat = _Conversation(gateway, prompt, "Provide your JSON answer now.", temperature, tag, seed)
    reply = chat.send()

    def parse(text: str) -> str | None:
        payload = extract_json_object(text)
        if payload and isinstance(payload.get("refined_description"), str) and payload["refined_description"].strip():
            return payload["refined_description"].strip()
        return None

    refined = parse(reply)
    if refined is None:
        reply = chat.follow_up(
            'Your previous reply was not valid JSON with a "refined_description" key. '
            "Return only the JSON object."
        )
        refined = parse(reply)
    if refined is None:
        raise ParseError("refined description reply stayed unparseable after one re-ask")
    return DescriptionVariant(VariantKind.REFINED, refined)


def synthesize_plan(gateway: Gateway, templates: TemplateLibrary, bundle: ProblemBundle,
                    description: str | None = None, temperature: float = 0.0,
                    seed: int | None = None, tag: str = "variant/plan") -> DescriptionVariant:
    """Generate a stepwise modeling strategy and append it to the description."""
    base = description or bundle.description_nl
    prompt = templates.render("synthesize_plan", {
        "Problem description": base,
        "Specification of the input parameters": input_spec_text(bundle),
        "Specification of the required output formats": output_spec_text(bundle),
    })
    chat = _Conversation(gateway, prompt, "Provide the task breakdown now.", temperature, tag, seed)
    reply = chat.send()
    tasks = extract_tasks(reply)
    if not tasks:
        reply = chat.follow_up(
            "Your previous reply contained no <taskN>...</taskN> tags. "
            "Return the sub-tasks wrapped in numbered task tags."
        )
        tasks = extract_tasks(reply)
    if not tasks:
        raise ParseError("modeling plan reply stayed unparseable after one re-ask")
    plan = "\n\n".join(tasks)
    text = base.rstrip() + "\n\nModeling strategy:\n" + plan
    return DescriptionVariant(VariantKind.PLANNING_AUGMENTED, text)


_VARIANT_CYCLE = (VariantKind.ORIGINAL, VariantKind.REFINED, VariantKind.PLANNING_AUGMENTED)


def make_variants(gateway: Gateway, templates: TemplateLibrary, bundle: ProblemBundle,
                  strategy: str, count: int, tau: float = 0.7,
                  seed: int | None = None, description: str | None = None) -> list:
    """Per-agent (variant, temperature) plan for one iteration.

    prompt_diverse cycles original/refined/planning-augmented descriptions at
    temperature 0; temperature sampling repeats the original description at
    the configured non-zero temperature. A failed refinement or planning call
    falls back to the original description, flagged via fallback_from.
    `description` overrides the bundle text after a restart refresh.
    """
    if count < 1:
        raise ValueError("need at least one agent per role")
    base = description or bundle.description_nl
    plans: list = []
    if strategy == "temperature":
        if not tau > 0:
            raise ValueError("temperature sampling needs a positive temperature")
        original = DescriptionVariant(VariantKind.ORIGINAL, base)
        return [(original, tau)] * count
    if strategy != "prompt_diverse":
        raise ValueError(f"unknown sampling strategy: {strategy}")
    for i in range(count):
        kind = _VARIANT_CYCLE[i % len(_VARIANT_CYCLE)]
        if kind is VariantKind.ORIGINAL:
            plans.append((DescriptionVariant(VariantKind.ORIGINAL, base), 0.0))
            continue
        try:
            if kind is VariantKind.REFINED:
                variant = refine_description(gateway, templates, bundle, description=base, seed=seed)
            else:
                variant = synthesize_plan(gateway, templates, bundle, description=base, seed=seed)
        except ParseError as exc:
            logger.warning("variant generation failed (%s); using the original description", exc)
            variant = DescriptionVariant(VariantKind.ORIGINAL, base, fallback_from=kind.value)
        plans.append((variant, 0.0))
    return plans


# --- modeling agent ---------------------------------------------------------

class ModelingAgent:
    """Generates a candidate model and owns its repair conversation."""

    def __init__(self, gateway: Gateway, templates: TemplateLibrary, bundle: ProblemBundle,
                 variant: DescriptionVariant, agent_index: int, temperature: float,
                 seed: int | None = None):
        self.gateway = gateway
        self.templates = templates
        self.bundle = bundle
        self.variant = variant
        self.k = agent_index
        self.temperature = temperature
        self.seed = seed
        self._chat: _Conversation | None = None
        self._formatter_chat: _Conversation | None = None

    def _system_prompt(self) -> str:
        return self.templates.render("modeling_system", {
            "Problem description": self.variant.text,
            "Specification of the input parameters": input_spec_text(self.bundle),
            "Specification of the required output formats": output_spec_text(self.bundle),
        })

    def generate(self) -> CandidateModel:
        candidate = CandidateModel(agent_index=self.k, variant_kind=self.variant.kind.value)
        self._chat = _Conversation(
            self.gateway, self._system_prompt(), "Write the MiniZinc model now.",
            self.temperature, f"modeling/k{self.k}", self.seed,
        )
        self._chat.send()
        source = self._code_or_reask(self._chat, "provide the model in a code block")
        if source is None:
            candidate.alive = False
            candidate.notes.append("no code block in generation reply")
            return candidate
        candidate.source = source
        candidate.record_revision("generation")
        return candidate

    def repair_model(self, candidate: CandidateModel, gate: str, feedback: str) -> str | None:
        """Targeted repair from a G1 or G2 diagnostic; returns the new source."""
        if gate == "G1":
            message = self.templates.render("repair_syntax", {"error message": feedback})
        elif gate == "G2":
            message = self.templates.render("repair_solver", {"Code of the current model": candidate.source})
        else:
            raise ValueError(f"repair_model does not handle {gate}")
        assert self._chat is not None
        self._chat.follow_up(message)
        return self._code_or_reask(self._chat, "provide the corrected model in a code block")

    def generate_formatter(self, dvar_info: dict) -> FormatterProgram | None:
        prompt = self.templates.render("formatter_system", {
            "dvar_info": json.dumps(dvar_info, sort_keys=True),
            "Specification of the required output formats": output_spec_text(self.bundle),
        })
        self._formatter_chat = _Conversation(
            self.gateway, prompt, "Write the transformer function now.",
            self.temperature, f"modeling/k{self.k}/formatter", self.seed,
        )
        self._formatter_chat.send()
        source = self._code_or_reask(self._formatter_chat, "provide the transformer function in a code block")
        if source is None or "def transformer" not in source:
            return None
        return FormatterProgram(source=source)

    def repair_formatter(self, feedback: str) -> FormatterProgram | None:
        message = self.templates.render("repair_format", {"error message": feedback})
        assert self._formatter_chat is not None
        self._formatter_chat.follow_up(message)
        source = self._code_or_reask(self._formatter_chat, "provide the transformer function in a code block")
        if source is None or "def transformer" not in source:
            return None
        return FormatterProgram(source=source)

    def decide_semantic_feedback(self, candidate: CandidateModel, feedback: str) -> tuple:
        """("accept", revised_source) or ("reject", reason) for a semantic-gate failure."""
        message = self.templates.render("repair_semantic", {
            "Feedback from all semantic checkers for the current model": feedback,
        })
        assert self._chat is not None
        reply = self._chat.follow_up(message)
        for attempt in range(2):
            payload = extract_json_object(reply)
            decision = (payload or {}).get("decision")
            if decision == "reject":
                return ("reject", str(payload.get("reason", "")))
            if decision == "accept" and isinstance(payload.get("revised_code"), str):
                code = payload["revised_code"]
                block = first_code_block(code)
                return ("accept", (block if block is not None else code).strip())
            if attempt == 0:
                reply = self._chat.follow_up(
                    'Your previous reply was not a valid JSON decision. Return {"reason": ..., '
                    '"decision": "accept", "revised_code": ...} or {"reason": ..., "decision": "reject"}.'
                )
        return ("reject", "unparseable decision")

    def _code_or_reask(self, chat: _Conversation, ask: str) -> str | None:
        block = first_code_block(chat.last_reply or "")
        if block is not None:
            return block
        reply = chat.follow_up(f"Your previous reply contained no fenced code block; {ask}.")
        return first_code_block(reply)


# --- validation agent -------------------------------------------------------

class ValidationAgent:
    """Synthesizes one semantic checker from the problem context alone."""

    def __init__(self, gateway: Gateway, templates: TemplateLibrary, bundle: ProblemBundle,
                 variant: DescriptionVariant, agent_index: int, temperature: float,
                 seed: int | None = None):
        self.gateway = gateway
        self.templates = templates
        self.bundle = bundle
        self.variant = variant
        self.k = agent_index
        self.temperature = temperature
        self.seed = seed

    def synthesize_checker(self) -> CheckerProgram:
        prompt = self.templates.render("validation_system", {
            "Problem description": self.variant.text,
            "Specification of the input parameters": input_spec_text(self.bundle),
            "A list of decision variables used in the generated model": output_spec_text(self.bundle),
        })
        chat = _Conversation(
            self.gateway, prompt, "Write the semantic_checker function now.",
            self.temperature, f"validation/k{self.k}", self.seed,
        )
        chat.send()
        source = first_code_block(chat.last_reply or "")
        if source is None or not _defines_semantic_checker(source):
            reply = chat.follow_up(
                "Your previous reply did not define `semantic_checker(data_dict, ovar_dict)` "
                "in a fenced code block; provide exactly that function."
            )
            source = first_code_block(reply)
            if source is None or not _defines_semantic_checker(source):
                return CheckerProgram(agent_index=self.k, source=source or "", health="defective")
        return CheckerProgram(agent_index=self.k, source=source)


def _defines_semantic_checker(source: str) -> bool:
    """Name and arity check; broken syntax is deferred to first execution."""
    import ast

    try:
        tree = ast.parse(source)
    except SyntaxError:
        return "def semantic_checker(" in source
    for node in ast.walk(tree):
        if isinstance(node, ast.FunctionDef) and node.name == "semantic_checker":
            return len(node.args.args) == 2
    return False


# --- selection agent --------------------------------------------------------

class SelectionAgent:
    """Critiques survivors plus checker evidence and casts one vote."""

    def __init__(self, gateway: Gateway, templates: TemplateLibrary,
                 variant: DescriptionVariant, agent_index: int, temperature: float,
                 seed: int | None = None):
        self.gateway = gateway
        self.templates = templates
        self.variant = variant
        self.k = agent_index
        self.temperature = temperature
        self.seed = seed

    def cast_vote(self, evidence: EvidencePack) -> SelectionVote:
        valid = {index for index, _ in evidence.candidate_sources}
        prompt = self.templates.render("selection_system", {
            "Problem description": evidence.description,
            "Code of all semantic checkers": _render_checkers(evidence.checkers),
            "Code of all candidate models": _render_candidates(evidence.candidate_sources),
            "Checker outcomes for each candidate": "\n".join(evidence.outcome_lines) or "(no checker outcomes)",
        })
        chat = _Conversation(
            self.gateway, prompt, "Provide your JSON answer now.",
            self.temperature, f"selection/k{self.k}", self.seed,
        )
        reply = chat.send()
        for attempt in range(2):
            payload = extract_json_object(reply)
            if payload is not None and "selection" in payload:
                try:
                    selection = int(payload["selection"])
                except (TypeError, ValueError):
                    selection = None
                if selection is not None:
                    reason = str(payload.get("reason", ""))
                    if selection == -1 or selection in valid:
                        return SelectionVote(self.k, reason, selection)
                    return SelectionVote(self.k, "invalid vote", -1)
            if attempt == 0:
                reply = chat.follow_up(
                    'Your previous reply was not valid JSON. Return only {"reason": ..., "selection": i}.'
                )
        return SelectionVote(self.k, "invalid vote", -1)


def _render_checkers(checkers: tuple) -> str:
    if not checkers:
        return "(no semantic checkers in this run)"
    parts = []
    for checker in checkers:
        parts.append(f"Checker {checker.agent_index}:\n```Python\n{checker.source}\n```")
    return "\n\n".join(parts)


def _render_candidates(candidate_sources: tuple) -> str:
    parts = []
    for index, source in candidate_sources:
        parts.append(f"<candidate {index}>\n```MiniZinc\n{source}\n```\n</candidate {index}>")
    return "\n\n".join(parts)
