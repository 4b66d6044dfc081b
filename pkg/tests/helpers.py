"""Shared fixtures for pipeline tests: model/checker sources, a tag-routing
scripted provider, and pre-wired pipeline components."""

from __future__ import annotations

from pathlib import Path

from zincsmith.gateway import ChatRequest, Gateway, ScriptedProvider
from zincsmith.mzn.engine import BuiltinEngine
from zincsmith.problems import load_bundle
from zincsmith.sandbox import LocalExecutor
from zincsmith.templates import TemplateLibrary

PROBLEMS_DIR = Path(__file__).resolve().parent.parent / "problems"

QUEENS_MODEL = """include "globals.mzn";
int: n;
array[1..n] of var 1..n: q;
constraint all_different(q);
constraint
    forall(i, j in 1..n where i < j) (
         q[i] + i != q[j] + j /\\
         q[i] - i != q[j] - j
    );
solve satisfy;
"""

QUEENS_MODEL_BROKEN = QUEENS_MODEL.replace("solve satisfy;", "solve satisfy")

# row/column constraints only: solves to a diagonal-conflicting placement
QUEENS_MODEL_NO_DIAG = """include "globals.mzn";
int: n;
array[1..n] of var 1..n: q;
constraint all_different(q);
solve satisfy;
"""

BOARD_TRANSFORMER = """def transformer(data_dict, decision_var_dict):
    # q: q[i] is the column (1-based) of the queen in row i
    n = data_dict["n"]
    q = decision_var_dict["q"]
    board = [[0] * n for _ in range(n)]
    for i, col in enumerate(q):
        board[i][col - 1] = 1
    return {"board": board}
"""

WRONG_KEY_TRANSFORMER = """def transformer(data_dict, decision_var_dict):
    n = data_dict["n"]
    q = decision_var_dict["q"]
    board = [[0] * n for _ in range(n)]
    for i, col in enumerate(q):
        board[i][col - 1] = 1
    return {"grid": board}
"""

BOARD_CHECKER = """def semantic_checker(data_dict, ovar_dict):
    n = data_dict["n"]
    board = ovar_dict["board"]
    if len(board) != n or any(len(row) != n for row in board):
        raise ValueError(f"Shape error: board must be {n} by {n}")
    cols = []
    for i, row in enumerate(board):
        ones = [j for j, v in enumerate(row) if v == 1]
        if len(ones) != 1:
            raise ValueError(f"Row error: row {i + 1} must contain exactly one queen")
        cols.append(ones[0])
    for i in range(n):
        for j in range(i + 1, n):
            if cols[i] == cols[j]:
                raise ValueError(f"Column conflict: rows {i + 1} and {j + 1} share column {cols[i] + 1}")
            if abs(cols[i] - cols[j]) == abs(i - j):
                raise ValueError(f"Diagonal conflict: rows {i + 1} and {j + 1} are on the same diagonal")
"""

BROKEN_CHECKER = """def semantic_checker(data_dict, ovar_dict):
    return undefined_name_here
"""

# rejects every solution: useful for forcing G4 failures
NAYSAYER_CHECKER = """def semantic_checker(data_dict, ovar_dict):
    raise ValueError("Constraint violated: this checker rejects everything")
"""


def code_block(source: str, lang: str = "MiniZinc") -> str:
    return f"Here is the result:\n```{lang}\n{source}\n```\n"


class TagScript:
    """Routes scripted responses by request tag prefix, in registration order.

    Each rule carries a response sequence; calls beyond the end repeat the
    final entry. Callables receive (request, call_index) for custom logic.
    """

    def __init__(self):
        self.rules: list = []
        self.requests: list[ChatRequest] = []

    def on(self, tag_prefix: str, *responses):
        self.rules.append([tag_prefix, list(responses), 0])
        return self

    def __call__(self, request: ChatRequest, ordinal: int):
        self.requests.append(request)
        matches = [rule for rule in self.rules if request.tag.startswith(rule[0])]
        if not matches:
            return None
        rule = max(matches, key=lambda r: len(r[0]))
        responses, index = rule[1], rule[2]
        rule[2] = index + 1
        entry = responses[min(index, len(responses) - 1)]
        if callable(entry):
            return entry(request, index)
        return entry


def scripted_gateway(script: TagScript) -> Gateway:
    return Gateway(provider=ScriptedProvider(script), sleep=lambda s: None)


def nqueens_bundle():
    return load_bundle(PROBLEMS_DIR / "nqueens4")


def pickmin_bundle():
    return load_bundle(PROBLEMS_DIR / "pickmin")


def make_pipeline(**overrides):
    from zincsmith.gates import CheckingPipeline

    defaults = dict(toolchain=BuiltinEngine(), sandbox=LocalExecutor(), solver_timeout_s=30.0)
    defaults.update(overrides)
    return CheckingPipeline(**defaults)


def make_templates() -> TemplateLibrary:
    return TemplateLibrary()


def assert_cascade_grammar(gate_history: list) -> None:
    """Hard-gate monotonicity over a recorded history: each later gate runs
    only directly after its predecessor passed, and any failure re-enters at
    G1 (or ends the history)."""
    allowed_next = {
        ("G1", "pass"): {"G2"},
        ("G2", "pass"): {"G3"},
        ("G3", "pass"): {"G4"},
        ("G1", "fail"): {"G1"},
        ("G2", "fail"): {"G1"},
        ("G3", "fail"): {"G1"},
        ("G4", "fail"): {"G1"},
        ("G4", "pass"): set(),
    }
    if not gate_history:
        return
    assert gate_history[0]["gate"] == "G1", "histories start at G1"
    for current, following in zip(gate_history, gate_history[1:]):
        key = (current["gate"], current["status"])
        assert following["gate"] in allowed_next[key], (
            f"{key} may not be followed by {following['gate']}"
        )
