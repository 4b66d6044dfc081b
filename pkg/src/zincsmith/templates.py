"""Prompt template loading and slot substitution.

Templates are plain text files with named slots written as {Slot Name}.
Rendering replaces exact slot tokens only; every other brace in a template
(JSON examples, tag notation) passes through untouched. A template directory
override lets deployments swap prompt wording without code changes.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = {
    "modeling_system",
    "formatter_system",
    "validation_system",
    "selection_system",
    "repair_syntax",
    "repair_solver",
    "repair_format",
    "repair_semantic",
    "refine_description",
    "synthesize_plan",
}

SLOTS = {
    "Problem description",
    "Specification of the input parameters",
    "Specification of the required output formats",
    "A list of decision variables used in the generated model",
    "Code of all semantic checkers",
    "Code of all candidate models",
    "Checker outcomes for each candidate",
    "Code of the current model",
    "Feedback from all semantic checkers for the current model",
    "error message",
    "dvar_info",
}


class TemplateLibrary:
    def __init__(self, override_dir: str | Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, str] = {}

    def load(self, name: str) -> str:
        if name not in TEMPLATE_NAMES:
            raise KeyError(f"unknown template: {name}")
        if name in self._cache:
            return self._cache[name]
        if self.override_dir is not None:
            candidate = self.override_dir / f"{name}.txt"
            if candidate.is_file():
                text = candidate.read_text(encoding="utf-8")
                self._cache[name] = text
                return text
        text = resources.files("zincsmith.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
        self._cache[name] = text
        return text

    def render(self, name: str, values: dict) -> str:
        text = self.load(name)
        for slot, value in values.items():
            if slot not in SLOTS:
                raise KeyError(f"unknown slot: {slot}")
            text = text.replace("{" + slot + "}", str(value))
        leftover = [slot for slot in SLOTS if "{" + slot + "}" in text]
        if leftover:
            raise ValueError(f"template {name} has unfilled slots: {leftover}")
        return text
