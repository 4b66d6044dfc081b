"""Tokenizer, AST, and parser for the MiniZinc subset the built-in engine runs.

The subset covers what benchmark reference models and generated candidate
models for small combinatorial problems use: parameter/variable declarations
(scalars and arrays over integer ranges), constraints with the boolean and
arithmetic operator set, comprehensions, generator calls (forall/exists/sum),
a handful of builtin functions, and one solve item. Anything outside the
subset raises MznUnsupported with the construct's name so callers can report
it as a toolchain limitation rather than a model defect.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class MznSyntaxError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        where = f" at line {line}:{col}" if line else ""
        super().__init__(f"syntax error{where}: {message}")


class MznUnsupported(Exception):
    def __init__(self, construct: str):
        self.construct = construct
        super().__init__(f"construct not supported by the builtin engine: {construct}")


KEYWORDS = {
    "var", "par", "int", "bool", "float", "string", "set", "array", "of",
    "constraint", "solve", "satisfy", "minimize", "maximize", "output",
    "include", "where", "in", "not", "xor", "div", "mod",
    "if", "then", "elseif", "else", "endif", "true", "false",
    "let", "predicate", "function", "enum", "type", "ann", "opt", "test",
    "union", "intersect", "diff", "symdiff", "subset", "superset",
}

_MULTI_OPS = ["[|", "|]", "..", "/\\", "\\/", "<->", "->", "<-", "<=", ">=", "==", "!=", "::", "++"]
_SINGLE_OPS = set("+-*/=<>()[]{},;:|")


@dataclass
class Token:
    kind: str  # INT FLOAT STR IDENT KW OP EOF
    value: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(source)
    line = 1
    col = 1

    def advance(k: int) -> None:
        nonlocal i, line, col
        for _ in range(k):
            if i < n and source[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        ch = source[i]
        if ch.isspace():
            advance(1)
            continue
        if ch == "%":
            j = source.find("\n", i)
            advance((n if j == -1 else j) - i)
            continue
        if ch == "/" and i + 1 < n and source[i + 1] == "*":
            j = source.find("*/", i + 2)
            if j == -1:
                raise MznSyntaxError("unterminated block comment", line, col)
            advance(j + 2 - i)
            continue
        if ch == '"':
            start_line, start_col = line, col
            j = i + 1
            buf = []
            while j < n and source[j] != '"':
                if source[j] == "\\" and j + 1 < n:
                    esc = source[j + 1]
                    buf.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
                    j += 2
                else:
                    buf.append(source[j])
                    j += 1
            if j >= n:
                raise MznSyntaxError("unterminated string literal", start_line, start_col)
            tokens.append(Token("STR", "".join(buf), start_line, start_col))
            advance(j + 1 - i)
            continue
        if ch.isdigit():
            start_line, start_col = line, col
            j = i
            while j < n and source[j].isdigit():
                j += 1
            is_float = False
            # ".." must not be swallowed as a decimal point
            if j < n and source[j] == "." and j + 1 < n and source[j + 1].isdigit():
                is_float = True
                j += 1
                while j < n and source[j].isdigit():
                    j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    is_float = True
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            tokens.append(Token("FLOAT" if is_float else "INT", text, start_line, start_col))
            advance(j - i)
            continue
        if ch.isalpha() or ch == "_":
            start_line, start_col = line, col
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            word = source[i:j]
            kind = "KW" if word in KEYWORDS else "IDENT"
            tokens.append(Token(kind, word, start_line, start_col))
            advance(j - i)
            continue
        matched = False
        for op in _MULTI_OPS:
            if source.startswith(op, i):
                tokens.append(Token("OP", op, line, col))
                advance(len(op))
                matched = True
                break
        if matched:
            continue
        if ch in _SINGLE_OPS:
            tokens.append(Token("OP", ch, line, col))
            advance(1)
            continue
        raise MznSyntaxError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("EOF", "", line, col))
    return tokens


# --- AST ------------------------------------------------------------------

@dataclass
class IntLit:
    value: int


@dataclass
class FloatLit:
    value: float


@dataclass
class BoolLit:
    value: bool


@dataclass
class StrLit:
    value: str


@dataclass
class Ident:
    name: str


@dataclass
class RangeExpr:
    lo: "Expr"
    hi: "Expr"


@dataclass
class SetLit:
    items: list


@dataclass
class ArrayLit:
    items: list


@dataclass
class Array2dLit:
    rows: list


@dataclass
class ArrayAccess:
    base: "Expr"
    indices: list


@dataclass
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass
class UnOp:
    op: str
    operand: "Expr"


@dataclass
class Call:
    name: str
    args: list


@dataclass
class Generator:
    names: list
    source: "Expr"
    where: "Expr | None" = None


@dataclass
class GenCall:
    name: str
    generators: list
    body: "Expr"


@dataclass
class Comprehension:
    body: "Expr"
    generators: list


@dataclass
class IfThenElse:
    branches: list  # list of (cond, expr)
    otherwise: "Expr"


Expr = object


# --- Items ----------------------------------------------------------------

@dataclass
class TypeInst:
    base: str                     # int | bool | float | string | set-of-int
    is_var: bool
    domain: Expr | None = None    # range/set/ident expression constraining the base
    array_dims: list | None = None  # index-set expressions, None for scalars


@dataclass
class Declaration:
    type_inst: TypeInst
    name: str
    value: Expr | None


@dataclass
class Assignment:
    name: str
    value: Expr


@dataclass
class Constraint:
    expr: Expr


@dataclass
class Solve:
    kind: str                     # satisfy | minimize | maximize
    objective: Expr | None


@dataclass
class Include:
    path: str


@dataclass
class Model:
    declarations: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    solve: Solve | None = None
    includes: list = field(default_factory=list)
    output_count: int = 0


BUILTIN_FUNCTIONS = {
    "all_different", "alldifferent", "abs", "sum", "product", "min", "max",
    "forall", "exists", "length", "bool2int", "array1d", "array2d", "show",
    "card", "count",
}


class Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    # token helpers
    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (value is None or tok.value == value)

    def expect(self, kind: str, value: str | None = None) -> Token:
        tok = self.peek()
        if not self.at(kind, value):
            want = value or kind
            raise MznSyntaxError(f"expected {want!r}, found {tok.value!r}", tok.line, tok.col)
        return self.next()

    def error(self, message: str) -> MznSyntaxError:
        tok = self.peek()
        return MznSyntaxError(message, tok.line, tok.col)

    # --- items --------------------------------------------------------

    def parse_model(self) -> Model:
        model = Model()
        while not self.at("EOF"):
            self.parse_item(model)
        if model.solve is None:
            raise MznSyntaxError("model has no solve item")
        return model

    def parse_item(self, model: Model) -> None:
        tok = self.peek()
        if tok.kind == "KW" and tok.value == "include":
            self.next()
            path = self.expect("STR").value
            self.expect("OP", ";")
            model.includes.append(Include(path))
            return
        if tok.kind == "KW" and tok.value == "constraint":
            self.next()
            expr = self.parse_expr()
            self.expect("OP", ";")
            model.constraints.append(Constraint(expr))
            return
        if tok.kind == "KW" and tok.value == "solve":
            self.next()
            self.skip_annotations()
            kw = self.expect("KW")
            if kw.value == "satisfy":
                solve = Solve("satisfy", None)
            elif kw.value in ("minimize", "maximize"):
                solve = Solve(kw.value, self.parse_expr())
            else:
                raise MznSyntaxError(f"bad solve kind {kw.value!r}", kw.line, kw.col)
            self.expect("OP", ";")
            if model.solve is not None:
                raise MznSyntaxError("multiple solve items", kw.line, kw.col)
            model.solve = solve
            return
        if tok.kind == "KW" and tok.value == "output":
            # tolerated and ignored; skip tokens to the item's semicolon
            self.next()
            depth = 0
            while True:
                t = self.peek()
                if t.kind == "EOF":
                    raise MznSyntaxError("unterminated output item", t.line, t.col)
                if t.kind == "OP" and t.value in ("(", "[", "{", "[|"):
                    depth += 1
                elif t.kind == "OP" and t.value in (")", "]", "}", "|]"):
                    depth -= 1
                elif t.kind == "OP" and t.value == ";" and depth == 0:
                    self.next()
                    break
                self.next()
            model.output_count += 1
            return
        if tok.kind == "KW" and tok.value in ("predicate", "function", "enum", "type", "ann", "let", "test"):
            raise MznUnsupported(f"{tok.value} item")
        if tok.kind in ("KW",) and tok.value in ("var", "par", "int", "bool", "float", "string", "set", "array", "opt"):
            decl = self.parse_declaration()
            self.expect("OP", ";")
            model.declarations.append(decl)
            return
        if tok.kind == "IDENT":
            name = self.next().value
            self.expect("OP", "=")
            value = self.parse_expr()
            self.expect("OP", ";")
            model.assignments.append(Assignment(name, value))
            return
        raise MznSyntaxError(f"unexpected token {tok.value!r}", tok.line, tok.col)

    def parse_declaration(self) -> Declaration:
        type_inst = self.parse_type_inst()
        self.expect("OP", ":")
        name = self.expect("IDENT").value
        self.skip_annotations()
        value = None
        if self.at("OP", "="):
            self.next()
            value = self.parse_expr()
        return Declaration(type_inst, name, value)

    def parse_type_inst(self) -> TypeInst:
        array_dims = None
        if self.at("KW", "array"):
            self.next()
            self.expect("OP", "[")
            array_dims = [self.parse_expr()]
            while self.at("OP", ","):
                self.next()
                array_dims.append(self.parse_expr())
            self.expect("OP", "]")
            self.expect("KW", "of")
        is_var = False
        if self.at("KW", "var"):
            is_var = True
            self.next()
        elif self.at("KW", "par"):
            self.next()
        if self.at("KW", "opt"):
            raise MznUnsupported("opt types")
        base: str
        domain: Expr | None = None
        tok = self.peek()
        if tok.kind == "KW" and tok.value in ("int", "bool", "float", "string"):
            self.next()
            base = tok.value
        elif tok.kind == "KW" and tok.value == "set":
            self.next()
            self.expect("KW", "of")
            inner = self.parse_type_inst()
            if is_var or inner.is_var:
                raise MznUnsupported("set decision variables")
            base = "set"
            domain = inner.domain
        else:
            # domain expression: range, set literal, or a named set parameter
            domain = self.parse_expr()
            base = "int"
        return TypeInst(base, is_var, domain, array_dims)

    def skip_annotations(self) -> None:
        while self.at("OP", "::"):
            self.next()
            self.parse_postfix()

    # --- expressions ----------------------------------------------------

    def parse_expr(self) -> Expr:
        return self.parse_iff()

    def parse_iff(self) -> Expr:
        left = self.parse_impl()
        while self.at("OP", "<->"):
            self.next()
            left = BinOp("<->", left, self.parse_impl())
        return left

    def parse_impl(self) -> Expr:
        left = self.parse_or()
        while self.at("OP", "->") or self.at("OP", "<-"):
            op = self.next().value
            left = BinOp(op, left, self.parse_or())
        return left

    def parse_or(self) -> Expr:
        left = self.parse_and()
        while self.at("OP", "\\/") or self.at("KW", "xor"):
            op = self.next().value
            left = BinOp(op, left, self.parse_and())
        return left

    def parse_and(self) -> Expr:
        left = self.parse_not()
        while self.at("OP", "/\\"):
            self.next()
            left = BinOp("/\\", left, self.parse_not())
        return left

    def parse_not(self) -> Expr:
        if self.at("KW", "not"):
            self.next()
            return UnOp("not", self.parse_not())
        return self.parse_cmp()

    def parse_cmp(self) -> Expr:
        left = self.parse_range()
        tok = self.peek()
        if tok.kind == "OP" and tok.value in ("=", "==", "!=", "<", "<=", ">", ">="):
            self.next()
            op = "=" if tok.value == "==" else tok.value
            return BinOp(op, left, self.parse_range())
        if tok.kind == "KW" and tok.value in ("in", "subset", "superset"):
            self.next()
            return BinOp(tok.value, left, self.parse_range())
        return left

    def parse_range(self) -> Expr:
        left = self.parse_setop()
        if self.at("OP", ".."):
            self.next()
            return RangeExpr(left, self.parse_setop())
        return left

    def parse_setop(self) -> Expr:
        left = self.parse_additive()
        while self.peek().kind == "KW" and self.peek().value in ("union", "intersect", "diff", "symdiff"):
            op = self.next().value
            left = BinOp(op, left, self.parse_additive())
        return left

    def parse_additive(self) -> Expr:
        left = self.parse_mult()
        while self.peek().kind == "OP" and self.peek().value in ("+", "-", "++"):
            op = self.next().value
            left = BinOp(op, left, self.parse_mult())
        return left

    def parse_mult(self) -> Expr:
        left = self.parse_unary()
        while (self.peek().kind == "OP" and self.peek().value in ("*", "/")) or (
            self.peek().kind == "KW" and self.peek().value in ("div", "mod")
        ):
            op = self.next().value
            left = BinOp(op, left, self.parse_unary())
        return left

    def parse_unary(self) -> Expr:
        if self.at("OP", "-"):
            self.next()
            return UnOp("-", self.parse_unary())
        return self.parse_postfix()

    def parse_postfix(self) -> Expr:
        expr = self.parse_atom()
        while self.at("OP", "["):
            self.next()
            indices = [self.parse_expr()]
            while self.at("OP", ","):
                self.next()
                indices.append(self.parse_expr())
            self.expect("OP", "]")
            expr = ArrayAccess(expr, indices)
        return expr

    def parse_atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "INT":
            self.next()
            return IntLit(int(tok.value))
        if tok.kind == "FLOAT":
            self.next()
            return FloatLit(float(tok.value))
        if tok.kind == "STR":
            self.next()
            return StrLit(tok.value)
        if tok.kind == "KW" and tok.value in ("true", "false"):
            self.next()
            return BoolLit(tok.value == "true")
        if tok.kind == "KW" and tok.value == "if":
            return self.parse_if()
        if tok.kind == "KW" and tok.value == "let":
            raise MznUnsupported("let expressions")
        if tok.kind == "OP" and tok.value == "(":
            self.next()
            expr = self.parse_expr()
            self.expect("OP", ")")
            return expr
        if tok.kind == "OP" and tok.value == "{":
            self.next()
            items = []
            if not self.at("OP", "}"):
                items.append(self.parse_expr())
                while self.at("OP", ","):
                    self.next()
                    items.append(self.parse_expr())
            self.expect("OP", "}")
            return SetLit(items)
        if tok.kind == "OP" and tok.value == "[":
            return self.parse_array_or_comprehension()
        if tok.kind == "OP" and tok.value == "[|":
            return self.parse_array2d()
        if tok.kind == "IDENT":
            name = self.next().value
            if self.at("OP", "("):
                return self.parse_call(name)
            return Ident(name)
        raise MznSyntaxError(f"unexpected token {tok.value!r} in expression", tok.line, tok.col)

    def parse_if(self) -> Expr:
        self.expect("KW", "if")
        branches = []
        cond = self.parse_expr()
        self.expect("KW", "then")
        branches.append((cond, self.parse_expr()))
        while self.at("KW", "elseif"):
            self.next()
            cond = self.parse_expr()
            self.expect("KW", "then")
            branches.append((cond, self.parse_expr()))
        self.expect("KW", "else")
        otherwise = self.parse_expr()
        self.expect("KW", "endif")
        return IfThenElse(branches, otherwise)

    def parse_array_or_comprehension(self) -> Expr:
        self.expect("OP", "[")
        if self.at("OP", "]"):
            self.next()
            return ArrayLit([])
        first = self.parse_expr()
        if self.at("OP", "|"):
            self.next()
            generators = self.parse_generators()
            self.expect("OP", "]")
            return Comprehension(first, generators)
        items = [first]
        while self.at("OP", ","):
            self.next()
            items.append(self.parse_expr())
        self.expect("OP", "]")
        return ArrayLit(items)

    def parse_array2d(self) -> Expr:
        self.expect("OP", "[|")
        rows: list[list] = []
        current: list = []
        while True:
            if self.at("OP", "|]"):
                self.next()
                if current:
                    rows.append(current)
                break
            if self.at("OP", "|"):
                self.next()
                rows.append(current)
                current = []
                continue
            current.append(self.parse_expr())
            if self.at("OP", ","):
                self.next()
        return Array2dLit(rows)

    def parse_generators(self) -> list:
        generators = [self.parse_generator()]
        while self.at("OP", ","):
            self.next()
            generators.append(self.parse_generator())
        return generators

    def parse_generator(self) -> Generator:
        names = [self.expect("IDENT").value]
        while self.at("OP", ","):
            self.next()
            names.append(self.expect("IDENT").value)
        self.expect("KW", "in")
        source = self.parse_range()
        where = None
        if self.at("KW", "where"):
            self.next()
            where = self.parse_expr()
        return Generator(names, source, where)

    def parse_call(self, name: str) -> Expr:
        self.expect("OP", "(")
        if self._looks_like_generators():
            generators = self.parse_generators()
            self.expect("OP", ")")
            self.expect("OP", "(")
            body = self.parse_expr()
            self.expect("OP", ")")
            return GenCall(name, generators, body)
        args = []
        if not self.at("OP", ")"):
            args.append(self.parse_expr())
            while self.at("OP", ","):
                self.next()
                args.append(self.parse_expr())
        self.expect("OP", ")")
        return Call(name, args)

    def _looks_like_generators(self) -> bool:
        """Lookahead after '(': IDENT (',' IDENT)* 'in' signals a generator call."""
        i = 0
        if not (self.peek(i).kind == "IDENT"):
            return False
        i += 1
        while self.peek(i).kind == "OP" and self.peek(i).value == ",":
            if self.peek(i + 1).kind != "IDENT":
                return False
            i += 2
        return self.peek(i).kind == "KW" and self.peek(i).value == "in"


def parse_model(source: str) -> Model:
    return Parser(tokenize(source)).parse_model()


def parse_data(source: str) -> list[Assignment]:
    """Parse dzn text: a sequence of `name = expr;` items."""
    parser = Parser(tokenize(source))
    assignments: list[Assignment] = []
    while not parser.at("EOF"):
        name = parser.expect("IDENT").value
        parser.expect("OP", "=")
        value = parser.parse_expr()
        parser.expect("OP", ";")
        assignments.append(Assignment(name, value))
    return assignments
