"""Problem bundle loading: context, input data, and optional scoring assets.

A bundle is one directory per problem:

    manifest.json     id, kind (CSP|COP), sense (min|max, COP only), file pointers
    description.md    natural-language problem statement
    input_spec.md     semantics of each input parameter (names in backticks)
    output_spec.json  required output keys: description, shape, element kind
    data.dzn          instance data in MiniZinc data syntax
    params.json       the same parameters as JSON, for sandboxed programs
    ref_model.mzn     (optional) vetted reference formulation
    mapping.src       (optional) program mapping an output solution onto
                      reference variables; defines transformer(data, solution)

Bundles are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import DataMismatch, MissingField
from .mzn import engine as _engine
from .mzn import parser as _parser


class ProblemKind(Enum):
    CSP = "CSP"
    COP = "COP"


class ObjectiveSense(Enum):
    MIN = "min"
    MAX = "max"


@dataclass(frozen=True)
class OutputKeySpec:
    description: str
    shape: tuple  # dimension expressions over parameter names; () means scalar
    element_kind: str  # int | float | string | bool

    def to_dict(self) -> dict:
        return {"description": self.description, "shape": list(self.shape), "element_kind": self.element_kind}


@dataclass(frozen=True)
class InputData:
    dzn_text: str
    builtin_params: dict

    def param_names(self) -> set:
        return set(self.builtin_params) | set(dzn_values(self.dzn_text))


@dataclass(frozen=True)
class EvalAssets:
    reference_model: str
    mapped_vars: tuple
    mapping_program: str
    problem_kind: ProblemKind
    objective_sense: ObjectiveSense | None = None
    # optional known-good output solution, used for checker false-rejection trials
    reference_solution: dict | None = None

    def __post_init__(self):
        if self.problem_kind is ProblemKind.COP and self.objective_sense is None:
            raise ValueError("COP assets need an objective sense")
        if not self.mapped_vars:
            raise ValueError("mapped_vars must not be empty")


@dataclass(frozen=True)
class ProblemBundle:
    id: str
    description_nl: str
    input_spec: str
    output_spec: dict  # key -> OutputKeySpec
    input_data: InputData
    eval_assets: EvalAssets | None = None
    path: Path | None = field(default=None, compare=False)


_FILE_DEFAULTS = {
    "description": "description.md",
    "input_spec": "input_spec.md",
    "output_spec": "output_spec.json",
    "data": "data.dzn",
    "params": "params.json",
    "ref_model": "ref_model.mzn",
    "mapping": "mapping.src",
    "ref_solution": "ref_solution.json",
}

_IDENT_RE = re.compile(r"`([A-Za-z_][A-Za-z0-9_]*)`")


def dzn_values(dzn_text: str) -> dict:
    """Ground parameter values from dzn text, rendered as JSON-style values."""
    if not dzn_text.strip():
        return {}
    assignments = _parser.parse_data(dzn_text)
    compiled = _engine.CompiledModel()
    evaluator = _engine.Evaluator(compiled)
    out: dict = {}
    for a in assignments:
        value = evaluator.eval(a.value, {})
        compiled.params[a.name] = value
        out[a.name] = _engine._to_json_value(value)
    return out


def load_bundle(path: str | Path) -> ProblemBundle:
    """Load and validate one problem directory. Deterministic, read-only."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise MissingField("manifest.json", str(root))
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    problem_id = manifest.get("id", "")
    if not problem_id:
        raise MissingField("id", "manifest has no problem id")
    files = dict(_FILE_DEFAULTS)
    files.update(manifest.get("files", {}))

    def read_required(slot: str) -> str:
        file_path = root / files[slot]
        if not file_path.is_file():
            raise MissingField(slot, str(file_path))
        return file_path.read_text(encoding="utf-8")

    description = read_required("description")
    input_spec = read_required("input_spec")
    output_spec_raw = json.loads(read_required("output_spec"))
    if not isinstance(output_spec_raw, dict) or not output_spec_raw:
        raise MissingField("output_spec", "no output keys declared")
    output_spec = {}
    for key, entry in output_spec_raw.items():
        if "element_kind" not in entry:
            raise MissingField("output_spec", f"key {key} lacks element_kind")
        output_spec[key] = OutputKeySpec(
            description=entry.get("description", ""),
            shape=tuple(entry.get("shape", [])),
            element_kind=entry["element_kind"],
        )

    dzn_text = read_required("data")
    params = json.loads(read_required("params"))
    if not isinstance(params, dict):
        raise MissingField("params", "params.json must hold an object")
    input_data = InputData(dzn_text=dzn_text, builtin_params=params)
    _check_data_agreement(input_data)
    _check_input_spec_coverage(input_spec, input_data)

    eval_assets = _load_eval_assets(root, files, manifest)
    return ProblemBundle(
        id=problem_id,
        description_nl=description,
        input_spec=input_spec,
        output_spec=output_spec,
        input_data=input_data,
        eval_assets=eval_assets,
        path=root,
    )


def _check_data_agreement(input_data: InputData) -> None:
    try:
        from_dzn = dzn_values(input_data.dzn_text)
    except Exception as exc:
        raise DataMismatch("<dzn>", f"data.dzn does not parse: {exc}") from exc
    for key in sorted(set(from_dzn) & set(input_data.builtin_params)):
        if from_dzn[key] != input_data.builtin_params[key]:
            raise DataMismatch(key)


def _check_input_spec_coverage(input_spec: str, input_data: InputData) -> None:
    named = set(_IDENT_RE.findall(input_spec))
    have = input_data.param_names()
    missing = sorted(named - have)
    if missing:
        raise MissingField(missing[0], "named in input_spec but absent from input data")


def _load_eval_assets(root: Path, files: dict, manifest: dict) -> EvalAssets | None:
    ref_path = root / files["ref_model"]
    if not ref_path.is_file():
        return None
    mapping_path = root / files["mapping"]
    if not mapping_path.is_file():
        raise MissingField("mapping", f"reference model present but {mapping_path.name} missing")
    kind_raw = manifest.get("kind", "")
    try:
        kind = ProblemKind(kind_raw)
    except ValueError:
        raise MissingField("kind", f"manifest kind must be CSP or COP, got {kind_raw!r}") from None
    sense = None
    if kind is ProblemKind.COP:
        sense_raw = manifest.get("sense", "")
        try:
            sense = ObjectiveSense(sense_raw)
        except ValueError:
            raise MissingField("sense", "COP bundles must state min or max") from None
    mapped_vars = tuple(manifest.get("mapped_vars", []))
    if not mapped_vars:
        raise MissingField("mapped_vars", "reference model present but manifest lists no mapped_vars")
    ref_solution = None
    ref_solution_path = root / files["ref_solution"]
    if ref_solution_path.is_file():
        ref_solution = json.loads(ref_solution_path.read_text(encoding="utf-8"))
    return EvalAssets(
        reference_model=ref_path.read_text(encoding="utf-8"),
        mapped_vars=mapped_vars,
        mapping_program=mapping_path.read_text(encoding="utf-8"),
        problem_kind=kind,
        objective_sense=sense,
        reference_solution=ref_solution,
    )


def save_bundle(bundle: ProblemBundle, path: str | Path) -> Path:
    """Write a bundle in the directory format load_bundle reads."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"id": bundle.id}
    if bundle.eval_assets is not None:
        manifest["kind"] = bundle.eval_assets.problem_kind.value
        if bundle.eval_assets.objective_sense is not None:
            manifest["sense"] = bundle.eval_assets.objective_sense.value
        manifest["mapped_vars"] = list(bundle.eval_assets.mapped_vars)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (root / "description.md").write_text(bundle.description_nl, encoding="utf-8")
    (root / "input_spec.md").write_text(bundle.input_spec, encoding="utf-8")
    spec_json = {k: v.to_dict() for k, v in bundle.output_spec.items()}
    (root / "output_spec.json").write_text(json.dumps(spec_json, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (root / "data.dzn").write_text(bundle.input_data.dzn_text, encoding="utf-8")
    (root / "params.json").write_text(
        json.dumps(bundle.input_data.builtin_params, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if bundle.eval_assets is not None:
        (root / "ref_model.mzn").write_text(bundle.eval_assets.reference_model, encoding="utf-8")
        (root / "mapping.src").write_text(bundle.eval_assets.mapping_program, encoding="utf-8")
        if bundle.eval_assets.reference_solution is not None:
            (root / "ref_solution.json").write_text(
                json.dumps(bundle.eval_assets.reference_solution, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
    return root
