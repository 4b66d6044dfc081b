"""Text-level utilities over MiniZinc sources.

These operate on raw model text without a full parse: splitting top-level
items, dropping output items before execution, and locating the solve item
so the evaluator can extract or replace the objective. They must respect
string literals and both comment forms, since a ';' inside either does not
terminate an item.
"""

from __future__ import annotations


def split_items(source: str) -> list[str]:
    """Split a model into top-level items (text including the trailing ';').

    Trailing text after the last ';' is returned as a final element if it is
    not just whitespace.
    """
    items: list[str] = []
    buf: list[str] = []
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "%":
            # line comment: keep it attached to the current item
            j = source.find("\n", i)
            j = n if j == -1 else j + 1
            buf.append(source[i:j])
            i = j
        elif ch == "/" and i + 1 < n and source[i + 1] == "*":
            j = source.find("*/", i + 2)
            j = n if j == -1 else j + 2
            buf.append(source[i:j])
            i = j
        elif ch == '"':
            j = i + 1
            while j < n:
                if source[j] == "\\":
                    j += 2
                    continue
                if source[j] == '"':
                    j += 1
                    break
                j += 1
            buf.append(source[i:j])
            i = j
        elif ch == ";":
            buf.append(";")
            items.append("".join(buf))
            buf = []
            i += 1
        else:
            buf.append(ch)
            i += 1
    tail = "".join(buf)
    if tail.strip():
        items.append(tail)
    return items


def _item_keyword(item: str) -> str:
    """First identifier-like word of an item, ignoring comments."""
    i = 0
    n = len(item)
    while i < n:
        ch = item[i]
        if ch.isspace():
            i += 1
        elif ch == "%":
            j = item.find("\n", i)
            i = n if j == -1 else j + 1
        elif ch == "/" and i + 1 < n and item[i + 1] == "*":
            j = item.find("*/", i + 2)
            i = n if j == -1 else j + 2
        else:
            break
    start = i
    while i < n and (item[i].isalnum() or item[i] == "_"):
        i += 1
    return item[start:i]


def strip_output_items(source: str) -> str:
    """Remove all output items; solver runs then default to emitting all variables."""
    kept = [item for item in split_items(source) if _item_keyword(item) != "output"]
    return "".join(kept)


def find_solve_item(source: str) -> tuple[str, str | None]:
    """Return (kind, objective_text) for the model's solve item.

    kind is "satisfy", "minimize" or "maximize"; objective_text is the raw
    expression (annotations skipped) or None for satisfy. Raises ValueError
    when no solve item is present or it cannot be read.
    """
    for item in split_items(source):
        if _item_keyword(item) != "solve":
            continue
        body = item.strip()
        body = body[len("solve"):].strip()
        if body.endswith(";"):
            body = body[:-1].rstrip()
        # skip search annotations: "::" up to the solve kind keyword
        for kind in ("satisfy", "minimize", "maximize"):
            idx = _find_keyword(body, kind)
            if idx >= 0:
                rest = body[idx + len(kind):].strip()
                if kind == "satisfy":
                    return "satisfy", None
                if not rest:
                    raise ValueError(f"solve {kind} has no objective expression")
                return kind, rest
        raise ValueError("unrecognized solve item: " + item.strip())
    raise ValueError("model has no solve item")


def _find_keyword(text: str, word: str) -> int:
    """Index of `word` as a standalone token outside strings, else -1."""
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == '"':
            i += 1
            while i < n and text[i] != '"':
                i += 2 if text[i] == "\\" else 1
            i += 1
            continue
        if text.startswith(word, i):
            before_ok = i == 0 or not (text[i - 1].isalnum() or text[i - 1] == "_")
            j = i + len(word)
            after_ok = j >= n or not (text[j].isalnum() or text[j] == "_")
            if before_ok and after_ok:
                return i
        i += 1
    return -1


def replace_solve_with_satisfy(source: str) -> str:
    """Rewrite the solve item to plain satisfaction, leaving all else intact."""
    out: list[str] = []
    for item in split_items(source):
        if _item_keyword(item) == "solve":
            out.append("solve satisfy;")
        else:
            out.append(item)
    return "".join(out)


def append_constraints(source: str, constraints: list[str]) -> str:
    """Append constraint items (textual augmentation; the base model is untouched)."""
    extra = "".join(f"\nconstraint {c};" for c in constraints)
    return source.rstrip() + extra + "\n"
