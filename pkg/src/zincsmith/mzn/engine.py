"""Built-in finite-domain engine for the MiniZinc subset.

Serves as a self-contained toolchain backend (solver id "builtin"): it
parses a model plus dzn data, flattens constraints (conjunction splitting,
generator expansion, all_different decomposition to pairwise disequalities),
and runs chronological backtracking with branch-and-bound for optimization.
Deterministic by construction: variables branch in declaration order, values
ascending, so identical inputs yield identical solutions.

This is not a competitive solver; it exists so the pipeline and its tests
run end to end on hosts without a MiniZinc installation, at the scale of
small benchmark instances.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

from . import parser as P
from .parser import MznSyntaxError, MznUnsupported
from .toolchain import CompileResult, SolveResult, SolveStatus


class EngineError(Exception):
    """Evaluation fault: type error, unknown identifier, bad access."""


class DataError(Exception):
    """Parameter binding problem between model and data."""


class _SearchTimeout(Exception):
    pass


_UNASSIGNED = object()


@dataclass
class MznArray:
    dims: list  # list of (lo, hi) per dimension
    data: list  # flat, row-major

    def index_ranges(self):
        return [range(lo, hi + 1) for lo, hi in self.dims]

    def offset(self, indices: list) -> int:
        if len(indices) != len(self.dims):
            raise EngineError(f"array access with {len(indices)} indices, expected {len(self.dims)}")
        off = 0
        for (lo, hi), idx in zip(self.dims, indices):
            if not isinstance(idx, int) or isinstance(idx, bool):
                raise EngineError(f"non-integer array index: {idx!r}")
            if idx < lo or idx > hi:
                raise EngineError(f"array index {idx} out of bounds {lo}..{hi}")
            off = off * (hi - lo + 1) + (idx - lo)
        return off

    def get(self, indices: list):
        return self.data[self.offset(indices)]

    def _nested(self):
        shape = [hi - lo + 1 for lo, hi in self.dims]
        def rec(dim: int, flat_base: int):
            if dim == len(shape) - 1:
                return list(self.data[flat_base:flat_base + shape[dim]])
            stride = 1
            for s in shape[dim + 1:]:
                stride *= s
            return [rec(dim + 1, flat_base + k * stride) for k in range(shape[dim])]
        if not shape:
            return []
        return rec(0, 0)


@dataclass
class VarHandle:
    vid: int
    name: str
    is_bool: bool


@dataclass
class _Var:
    vid: int
    name: str
    domain: object  # range or tuple of sorted ints, or (False, True)
    is_bool: bool


class _RangeVal:
    __slots__ = ("lo", "hi")

    def __init__(self, lo: int, hi: int):
        self.lo = lo
        self.hi = hi

    def __contains__(self, v):
        return isinstance(v, int) and self.lo <= v <= self.hi

    def members(self):
        return range(self.lo, self.hi + 1)

    def to_set(self):
        return frozenset(self.members())


BOOL_DOMAIN = (False, True)


class CompiledModel:
    """A model with parameters bound and constraints flattened, ready to search."""

    def __init__(self) -> None:
        self.params: dict[str, object] = {}
        self.vars: list[_Var] = []
        self.var_values: list = []
        self.scalar_vars: dict[str, VarHandle] = {}
        self.constraints: list[tuple[object, frozenset]] = []
        self.solve_kind: str = "satisfy"
        self.objective: object | None = None
        self.ground_unsat: str | None = None
        self.decl_order: list[str] = []  # decision variable declaration names

    def clone(self) -> "CompiledModel":
        """Independent search state over the shared immutable structure.

        Parameters, variable metadata, and base constraints are shared;
        only the assignment vector and the constraint list (which a caller
        may extend) are fresh.
        """
        other = CompiledModel()
        other.params = self.params
        other.vars = self.vars
        other.var_values = [_UNASSIGNED] * len(self.vars)
        other.scalar_vars = self.scalar_vars
        other.constraints = list(self.constraints)
        other.solve_kind = self.solve_kind
        other.objective = self.objective
        other.ground_unsat = self.ground_unsat
        other.decl_order = self.decl_order
        return other


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


class Evaluator:
    """Expression evaluation over params, generator bindings, and (partial) search state."""

    def __init__(self, compiled: CompiledModel):
        self.c = compiled

    def lookup(self, name: str, bindings: dict):
        if name in bindings:
            return bindings[name]
        if name in self.c.params:
            return self.c.params[name]
        raise EngineError(f"undefined identifier: {name}")

    def value_of(self, v):
        """Resolve a VarHandle to its current search value."""
        if isinstance(v, VarHandle):
            val = self.c.var_values[v.vid]
            if val is _UNASSIGNED:
                raise EngineError(f"unassigned variable: {v.name}")
            return val
        return v

    def eval(self, node, bindings: dict):
        ev = self.eval
        if isinstance(node, P.IntLit):
            return node.value
        if isinstance(node, P.FloatLit):
            return node.value
        if isinstance(node, P.BoolLit):
            return node.value
        if isinstance(node, P.StrLit):
            return node.value
        if isinstance(node, P.Ident):
            return self.value_of(self.lookup(node.name, bindings))
        if isinstance(node, P.RangeExpr):
            lo = ev(node.lo, bindings)
            hi = ev(node.hi, bindings)
            if not (isinstance(lo, int) and isinstance(hi, int)):
                raise EngineError("range bounds must be integers")
            return _RangeVal(lo, hi)
        if isinstance(node, P.SetLit):
            return frozenset(self.value_of(ev(e, bindings)) for e in node.items)
        if isinstance(node, P.ArrayLit):
            items = [self.value_of(ev(e, bindings)) for e in node.items]
            return MznArray([(1, len(items))], items)
        if isinstance(node, P.Array2dLit):
            rows = [[self.value_of(ev(e, bindings)) for e in row] for row in node.rows]
            if rows and any(len(r) != len(rows[0]) for r in rows):
                raise EngineError("ragged 2d array literal")
            flat = [v for row in rows for v in row]
            cols = len(rows[0]) if rows else 0
            return MznArray([(1, len(rows)), (1, cols)], flat)
        if isinstance(node, P.Comprehension):
            items = []
            for b in self.gen_bindings(node.generators, bindings):
                items.append(self.value_of(ev(node.body, b)))
            return MznArray([(1, len(items))], items)
        if isinstance(node, P.ArrayAccess):
            base = ev(node.base, bindings)
            if not isinstance(base, MznArray):
                raise EngineError("indexing a non-array value")
            indices = [self.value_of(ev(ix, bindings)) for ix in node.indices]
            return self.value_of(base.get(indices))
        if isinstance(node, P.UnOp):
            if node.op == "-":
                v = self.value_of(ev(node.operand, bindings))
                if not _is_num(v):
                    raise EngineError("unary minus on non-number")
                return -v
            if node.op == "not":
                v = self.value_of(ev(node.operand, bindings))
                return not self._as_bool(v)
            raise EngineError(f"unknown unary operator {node.op}")
        if isinstance(node, P.BinOp):
            return self.eval_binop(node, bindings)
        if isinstance(node, P.IfThenElse):
            for cond, expr in node.branches:
                if self._as_bool(self.value_of(ev(cond, bindings))):
                    return ev(expr, bindings)
            return ev(node.otherwise, bindings)
        if isinstance(node, P.GenCall):
            return self.eval_gencall(node, bindings)
        if isinstance(node, P.Call):
            return self.eval_call(node, bindings)
        if isinstance(node, VarHandle):
            return self.value_of(node)
        raise EngineError(f"cannot evaluate node {type(node).__name__}")

    @staticmethod
    def _as_bool(v) -> bool:
        if isinstance(v, bool):
            return v
        raise EngineError(f"expected a boolean, got {v!r}")

    def eval_binop(self, node: P.BinOp, bindings: dict):
        op = node.op
        if op in ("/\\", "\\/", "->", "<-", "<->", "xor"):
            l = self._as_bool(self.value_of(self.eval(node.left, bindings)))
            r = self._as_bool(self.value_of(self.eval(node.right, bindings)))
            if op == "/\\":
                return l and r
            if op == "\\/":
                return l or r
            if op == "->":
                return (not l) or r
            if op == "<-":
                return l or (not r)
            if op == "<->":
                return l == r
            return l != r  # xor
        l = self.value_of(self.eval(node.left, bindings))
        r = self.value_of(self.eval(node.right, bindings))
        if op == "in":
            if isinstance(r, (_RangeVal, frozenset)):
                return l in r
            if isinstance(r, MznArray):
                return l in [self.value_of(v) for v in r.data]
            raise EngineError("'in' needs a set or range on the right")
        if op in ("subset", "superset"):
            ls, rs = self._as_set(l), self._as_set(r)
            return ls <= rs if op == "subset" else ls >= rs
        if op in ("union", "intersect", "diff", "symdiff"):
            ls, rs = self._as_set(l), self._as_set(r)
            return {"union": ls | rs, "intersect": ls & rs, "diff": ls - rs, "symdiff": ls ^ rs}[op]
        if op == "++":
            if isinstance(l, MznArray) and isinstance(r, MznArray):
                return MznArray([(1, len(l.data) + len(r.data))], l.data + r.data)
            raise EngineError("'++' needs arrays")
        if op in ("=", "!="):
            eq = self._equal(l, r)
            return eq if op == "=" else not eq
        if op in ("<", "<=", ">", ">="):
            if isinstance(l, bool) and isinstance(r, bool):
                l, r = int(l), int(r)
            if not (_is_num(l) and _is_num(r)):
                raise EngineError(f"comparison {op} on non-numbers")
            return {"<": l < r, "<=": l <= r, ">": l > r, ">=": l >= r}[op]
        if op in ("+", "-", "*", "/", "div", "mod"):
            if not (_is_num(l) and _is_num(r)):
                raise EngineError(f"arithmetic {op} on non-numbers")
            if op == "+":
                return l + r
            if op == "-":
                return l - r
            if op == "*":
                return l * r
            if op == "/":
                if r == 0:
                    raise EngineError("division by zero")
                return l / r
            if r == 0:
                raise EngineError(f"{op} by zero")
            q = abs(l) // abs(r)
            if (l < 0) != (r < 0):
                q = -q
            if op == "div":
                return q
            return l - r * q  # mod: sign follows the dividend
        raise EngineError(f"unknown operator {op}")

    @staticmethod
    def _as_set(v):
        if isinstance(v, frozenset):
            return v
        if isinstance(v, _RangeVal):
            return v.to_set()
        raise EngineError(f"expected a set, got {v!r}")

    def _equal(self, l, r) -> bool:
        if isinstance(l, MznArray) and isinstance(r, MznArray):
            if [hi - lo + 1 for lo, hi in l.dims] != [hi - lo + 1 for lo, hi in r.dims]:
                return False
            return all(self._equal(self.value_of(a), self.value_of(b)) for a, b in zip(l.data, r.data))
        if isinstance(l, (frozenset, _RangeVal)) or isinstance(r, (frozenset, _RangeVal)):
            return self._as_set(l) == self._as_set(r)
        return l == r

    def gen_bindings(self, generators: list, outer: dict):
        """Iterate merged binding dicts across generators, honoring where clauses."""
        def rec(idx: int, scope: dict):
            if idx == len(generators):
                yield scope
                return
            gen = generators[idx]
            source = self.value_of(self.eval(gen.source, scope))
            if isinstance(source, _RangeVal):
                values = list(source.members())
            elif isinstance(source, frozenset):
                values = sorted(source)
            elif isinstance(source, MznArray):
                values = [self.value_of(v) for v in source.data]
            else:
                raise EngineError("generator source must be a range, set, or array")
            for combo in itertools.product(values, repeat=len(gen.names)):
                inner = dict(scope)
                for name, val in zip(gen.names, combo):
                    inner[name] = val
                if gen.where is not None and not self._as_bool(self.value_of(self.eval(gen.where, inner))):
                    continue
                yield inner
        yield from rec(0, dict(outer))

    def eval_gencall(self, node: P.GenCall, bindings: dict):
        name = node.name
        values = (self.value_of(self.eval(node.body, b)) for b in self.gen_bindings(node.generators, bindings))
        if name == "forall":
            return all(self._as_bool(v) for v in values)
        if name == "exists":
            return any(self._as_bool(v) for v in values)
        if name == "sum":
            return sum(values)
        if name == "product":
            out = 1
            for v in values:
                out *= v
            return out
        if name in ("min", "max"):
            vals = list(values)
            if not vals:
                raise EngineError(f"{name} over an empty sequence")
            return min(vals) if name == "min" else max(vals)
        raise MznUnsupported(f"generator call {name}")

    def eval_call(self, node: P.Call, bindings: dict):
        name = node.name
        args = node.args
        if name in ("all_different", "alldifferent"):
            arr = self._array_arg(args, bindings, name)
            vals = [self.value_of(v) for v in arr.data]
            return len(set(vals)) == len(vals)
        if name in ("forall", "exists"):
            arr = self._array_arg(args, bindings, name)
            bools = [self._as_bool(self.value_of(v)) for v in arr.data]
            return all(bools) if name == "forall" else any(bools)
        if name in ("sum", "product"):
            arr = self._array_arg(args, bindings, name)
            vals = [self.value_of(v) for v in arr.data]
            if name == "sum":
                return sum(vals)
            out = 1
            for v in vals:
                out *= v
            return out
        if name in ("min", "max"):
            if len(args) == 2:
                a = self.value_of(self.eval(args[0], bindings))
                b = self.value_of(self.eval(args[1], bindings))
                return min(a, b) if name == "min" else max(a, b)
            arr = self._array_arg(args, bindings, name)
            vals = [self.value_of(v) for v in arr.data]
            if isinstance(vals[0] if vals else 0, bool):
                vals = [int(v) for v in vals]
            if not vals:
                raise EngineError(f"{name} of an empty array")
            return min(vals) if name == "min" else max(vals)
        if name == "abs":
            v = self.value_of(self.eval(args[0], bindings))
            if not _is_num(v):
                raise EngineError("abs on a non-number")
            return abs(v)
        if name == "length":
            arr = self._array_arg(args, bindings, name)
            return len(arr.data)
        if name == "card":
            return len(self._as_set(self.value_of(self.eval(args[0], bindings))))
        if name == "bool2int":
            return int(self._as_bool(self.value_of(self.eval(args[0], bindings))))
        if name == "count":
            arr = self._array_arg([args[0]], bindings, name)
            target = self.value_of(self.eval(args[1], bindings))
            return sum(1 for v in arr.data if self.value_of(v) == target)
        if name == "array1d":
            idx = self.value_of(self.eval(args[0], bindings))
            arr = self._array_arg([args[1]], bindings, name)
            if not isinstance(idx, _RangeVal) or (idx.hi - idx.lo + 1) != len(arr.data):
                raise EngineError("array1d index set does not match array length")
            return MznArray([(idx.lo, idx.hi)], list(arr.data))
        if name == "array2d":
            rows = self.value_of(self.eval(args[0], bindings))
            cols = self.value_of(self.eval(args[1], bindings))
            arr = self._array_arg([args[2]], bindings, name)
            if not (isinstance(rows, _RangeVal) and isinstance(cols, _RangeVal)):
                raise EngineError("array2d needs range index sets")
            nr, nc = rows.hi - rows.lo + 1, cols.hi - cols.lo + 1
            if nr * nc != len(arr.data):
                raise EngineError("array2d shape does not match array length")
            return MznArray([(rows.lo, rows.hi), (cols.lo, cols.hi)], list(arr.data))
        if name == "show":
            return str(self.value_of(self.eval(args[0], bindings)))
        raise MznUnsupported(f"function {name}")

    def _array_arg(self, args: list, bindings: dict, fname: str) -> MznArray:
        if len(args) != 1:
            raise EngineError(f"{fname} expects one array argument")
        v = self.eval(args[0], bindings)
        if isinstance(v, _RangeVal):
            return MznArray([(1, v.hi - v.lo + 1)], list(v.members()))
        if isinstance(v, frozenset):
            vals = sorted(v)
            return MznArray([(1, len(vals))], vals)
        if not isinstance(v, MznArray):
            raise EngineError(f"{fname} expects an array, got {v!r}")
        return v


def substitute(node, bindings: dict):
    """Replace bound generator identifiers with literals, recursively."""
    if isinstance(node, P.Ident):
        if node.name in bindings:
            val = bindings[node.name]
            if isinstance(val, bool):
                return P.BoolLit(val)
            if isinstance(val, int):
                return P.IntLit(val)
            if isinstance(val, float):
                return P.FloatLit(val)
            raise EngineError(f"generator value {val!r} cannot be substituted")
        return node
    if isinstance(node, (P.IntLit, P.FloatLit, P.BoolLit, P.StrLit)):
        return node
    if isinstance(node, P.RangeExpr):
        return P.RangeExpr(substitute(node.lo, bindings), substitute(node.hi, bindings))
    if isinstance(node, P.SetLit):
        return P.SetLit([substitute(e, bindings) for e in node.items])
    if isinstance(node, P.ArrayLit):
        return P.ArrayLit([substitute(e, bindings) for e in node.items])
    if isinstance(node, P.Array2dLit):
        return P.Array2dLit([[substitute(e, bindings) for e in row] for row in node.rows])
    if isinstance(node, P.ArrayAccess):
        return P.ArrayAccess(substitute(node.base, bindings), [substitute(i, bindings) for i in node.indices])
    if isinstance(node, P.BinOp):
        return P.BinOp(node.op, substitute(node.left, bindings), substitute(node.right, bindings))
    if isinstance(node, P.UnOp):
        return P.UnOp(node.op, substitute(node.operand, bindings))
    if isinstance(node, P.Call):
        return P.Call(node.name, [substitute(a, bindings) for a in node.args])
    if isinstance(node, P.IfThenElse):
        return P.IfThenElse(
            [(substitute(c, bindings), substitute(e, bindings)) for c, e in node.branches],
            substitute(node.otherwise, bindings),
        )
    if isinstance(node, (P.GenCall, P.Comprehension)):
        gens = node.generators
        shadowed = {n for g in gens for n in g.names}
        inner = {k: v for k, v in bindings.items() if k not in shadowed}
        new_gens = [
            P.Generator(g.names, substitute(g.source, bindings),
                        substitute(g.where, inner) if g.where is not None else None)
            for g in gens
        ]
        if isinstance(node, P.GenCall):
            return P.GenCall(node.name, new_gens, substitute(node.body, inner))
        return P.Comprehension(substitute(node.body, inner), new_gens)
    raise EngineError(f"cannot substitute into {type(node).__name__}")


class Compiler:
    """Binds parameters, creates decision variables, and flattens constraints."""

    def __init__(self, model: P.Model, data: list):
        self.model = model
        self.data = data
        self.c = CompiledModel()
        self.ev = Evaluator(self.c)
        self._decls = {d.name: d for d in model.declarations}
        self._pending: dict[str, object] = {}
        self._resolving: set[str] = set()
        self._var_definitions: list = []

    def compile(self) -> CompiledModel:
        assigned: dict[str, object] = {}
        for a in self.model.assignments:
            if a.name in assigned:
                raise DataError(f"parameter {a.name} assigned more than once in the model")
            assigned[a.name] = a.value
        for a in self.data:
            if a.name in assigned:
                raise DataError(f"parameter {a.name} assigned in both model and data")
            if a.name not in self._decls:
                raise DataError(f"data assigns undeclared parameter: {a.name}")
            assigned[a.name] = a.value
        for d in self.model.declarations:
            if d.value is not None:
                if d.name in assigned:
                    raise DataError(f"parameter {d.name} has both a declaration value and an assignment")
                assigned[d.name] = d.value
        self._pending = assigned

        for d in self.model.declarations:
            if d.type_inst.is_var:
                continue
            self._resolve_param(d.name)
        for d in self.model.declarations:
            if d.type_inst.is_var:
                self._declare_var(d)

        solve = self.model.solve
        self.c.solve_kind = solve.kind
        if solve.objective is not None:
            self.c.objective = solve.objective

        flattener = Flattener(self.c, set(self._decls))
        for con in self.model.constraints:
            flattener.flatten(con.expr)
        for expr in self._var_definitions:
            flattener.flatten(expr)
        return self.c

    # parameter resolution (order-free, cycle-checked)
    def _resolve_param(self, name: str):
        if name in self.c.params:
            return self.c.params[name]
        if name not in self._decls:
            raise DataError(f"undeclared identifier: {name}")
        decl = self._decls[name]
        if decl.type_inst.is_var:
            raise EngineError(f"{name} is a decision variable, not a parameter")
        if name in self._resolving:
            raise DataError(f"circular parameter definition involving {name}")
        if name not in self._pending:
            raise DataError(f"parameter {name} has no value (missing from data)")
        self._resolving.add(name)
        try:
            value = self._eval_ground(self._pending[name])
        finally:
            self._resolving.discard(name)
        value = self._coerce_to_decl(decl, value)
        self.c.params[name] = value
        return value

    def _eval_ground(self, expr):
        return _GroundEvaluator(self).eval(expr, {})

    def _coerce_to_decl(self, decl: P.Declaration, value):
        ti = decl.type_inst
        if ti.array_dims is not None:
            if not isinstance(value, MznArray):
                raise DataError(f"parameter {decl.name} should be an array")
            dims = [self._dim_bounds(e) for e in ti.array_dims]
            want = 1
            for lo, hi in dims:
                want *= max(0, hi - lo + 1)
            if want != len(value.data):
                raise DataError(
                    f"parameter {decl.name} has {len(value.data)} elements, index sets require {want}"
                )
            return MznArray(dims, list(value.data))
        if ti.base == "int" and isinstance(value, bool):
            raise DataError(f"parameter {decl.name} should be an int")
        if ti.base == "bool" and not isinstance(value, bool):
            raise DataError(f"parameter {decl.name} should be a bool")
        if ti.base == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        return value

    def _dim_bounds(self, expr) -> tuple:
        v = self._eval_ground(expr)
        if isinstance(v, _RangeVal):
            return (v.lo, v.hi)
        if isinstance(v, int) and not isinstance(v, bool):
            return (1, v)
        raise EngineError("array index set must be an integer range")

    # decision variables
    def _declare_var(self, decl: P.Declaration):
        ti = decl.type_inst
        domain = self._var_domain(decl)
        if ti.array_dims is not None:
            dims = [self._dim_bounds(e) for e in ti.array_dims]
            count = 1
            for lo, hi in dims:
                count *= max(0, hi - lo + 1)
            handles = []
            for flat in range(count):
                handles.append(self._new_var(f"{decl.name}[{flat}]", domain, ti.base == "bool"))
            self.c.params[decl.name] = MznArray(dims, handles)
        else:
            handle = self._new_var(decl.name, domain, ti.base == "bool")
            self.c.params[decl.name] = handle
            self.c.scalar_vars[decl.name] = handle
        self.c.decl_order.append(decl.name)
        if decl.value is not None:
            # a var with a defining expression behaves as an equality constraint
            self._var_definitions.append(P.BinOp("=", P.Ident(decl.name), decl.value))

    def _var_domain(self, decl: P.Declaration):
        ti = decl.type_inst
        if ti.base == "bool":
            return BOOL_DOMAIN
        if ti.base == "float":
            raise MznUnsupported("float decision variables")
        if ti.base == "set":
            raise MznUnsupported("set decision variables")
        if ti.domain is None:
            raise MznUnsupported(f"unbounded var int ({decl.name}); declare a finite domain")
        dom = self._eval_ground(ti.domain)
        if isinstance(dom, _RangeVal):
            if dom.hi - dom.lo + 1 > 2_000_000:
                raise MznUnsupported(f"domain of {decl.name} is too large for the builtin engine")
            return range(dom.lo, dom.hi + 1)
        if isinstance(dom, frozenset):
            vals = sorted(dom)
            if any(isinstance(v, bool) or not isinstance(v, int) for v in vals):
                raise EngineError(f"domain of {decl.name} must contain integers")
            return tuple(vals)
        raise EngineError(f"domain of {decl.name} must be a range or set")

    def _new_var(self, name: str, domain, is_bool: bool) -> VarHandle:
        vid = len(self.c.vars)
        self.c.vars.append(_Var(vid, name, domain, is_bool))
        self.c.var_values.append(_UNASSIGNED)
        return VarHandle(vid, name, is_bool)

class Flattener:
    """Splits conjunctions, expands generator calls, and decomposes
    all_different into pairwise disequalities before emitting constraints.

    Works on any compiled model, including clones receiving appended
    constraints after the base model was compiled.
    """

    def __init__(self, compiled: CompiledModel, declared_names: set):
        self.c = compiled
        self.ev = Evaluator(compiled)
        self._decl_names = declared_names

    def flatten(self, expr) -> None:
        if isinstance(expr, P.BinOp) and expr.op == "/\\":
            self.flatten(expr.left)
            self.flatten(expr.right)
            return
        if isinstance(expr, P.GenCall) and expr.name == "forall":
            for b in self.ev.gen_bindings(expr.generators, {}):
                self.flatten(substitute(expr.body, b))
            return
        if isinstance(expr, P.Call) and expr.name == "forall" and len(expr.args) == 1:
            elements = self._element_asts(expr.args[0])
            if elements is not None:
                for e in elements:
                    self.flatten(e)
                return
        if isinstance(expr, P.Call) and expr.name in ("all_different", "alldifferent") and len(expr.args) == 1:
            elements = self._element_asts(expr.args[0])
            if elements is not None:
                for i in range(len(elements)):
                    for j in range(i + 1, len(elements)):
                        self._emit(P.BinOp("!=", elements[i], elements[j]))
                return
        if isinstance(expr, P.BinOp) and expr.op == "=":
            # element-wise array equality lets each pin prune at its own depth
            left = self._element_asts(expr.left)
            right = self._element_asts(expr.right)
            if left is not None and right is not None and len(left) == len(right):
                for l, r in zip(left, right):
                    self._emit(P.BinOp("=", l, r))
                return
        self._emit(expr)

    def _element_asts(self, expr) -> list | None:
        """Element expressions of an array-shaped argument, generators expanded."""
        if isinstance(expr, P.ArrayLit):
            return list(expr.items)
        if isinstance(expr, P.Comprehension):
            out = []
            for b in self.ev.gen_bindings(expr.generators, {}):
                out.append(substitute(expr.body, b))
            return out
        if isinstance(expr, P.Ident):
            target = self.c.params.get(expr.name)
            if isinstance(target, MznArray):
                combos = itertools.product(*target.index_ranges())
                return [P.ArrayAccess(expr, [P.IntLit(i) for i in combo]) for combo in combos]
        if isinstance(expr, P.BinOp) and expr.op == "++":
            left = self._element_asts(expr.left)
            right = self._element_asts(expr.right)
            if left is not None and right is not None:
                return left + right
        return None

    def _emit(self, expr):
        var_set = _VarCollector(self.c, self._decl_names).collect(expr)
        if not var_set:
            try:
                ok = self.ev.eval(expr, {})
            except EngineError as exc:
                raise EngineError(f"constraint evaluation failed: {exc}") from exc
            if not isinstance(ok, bool):
                raise EngineError("constraint did not evaluate to a boolean")
            if not ok:
                self.c.ground_unsat = "a parameter-only constraint is false"
            return
        self.c.constraints.append((expr, frozenset(var_set)))


class _VarCollector:
    """Computes which decision variables an expression can observe."""

    def __init__(self, compiled: CompiledModel, declared_names: set):
        self.c = compiled
        self.ev = Evaluator(compiled)
        self._decls = declared_names

    def collect(self, expr) -> set:
        out: set[int] = set()
        self._walk_vars(expr, {}, out)
        return out

    def _walk_vars(self, node, bindings: dict, out: set) -> bool:
        """Accumulate referenced vids; returns True if the node is ground.

        Generator-bound names count as non-ground so array accesses indexed by
        them resolve conservatively to the whole array; over-approximating a
        constraint's variable set only delays its check, never corrupts it.
        """
        if isinstance(node, (P.IntLit, P.FloatLit, P.BoolLit, P.StrLit)):
            return True
        if isinstance(node, P.Ident):
            if node.name in bindings:
                return False
            target = self.c.params.get(node.name)
            if isinstance(target, VarHandle):
                out.add(target.vid)
                return False
            if isinstance(target, MznArray):
                handles = [v for v in target.data if isinstance(v, VarHandle)]
                if handles:
                    out.update(h.vid for h in handles)
                    return False
            if node.name not in self.c.params and node.name not in self._decls:
                raise EngineError(f"undefined identifier: {node.name}")
            return True
        if isinstance(node, P.ArrayAccess):
            idx_ground = all([self._walk_vars(ix, bindings, out) for ix in node.indices])
            if isinstance(node.base, P.Ident) and node.base.name not in bindings:
                target = self.c.params.get(node.base.name)
                if isinstance(target, MznArray) and any(isinstance(v, VarHandle) for v in target.data):
                    if idx_ground:
                        try:
                            indices = [self.ev.eval(ix, bindings) for ix in node.indices]
                            element = target.get(indices)
                        except EngineError:
                            element = None
                        if isinstance(element, VarHandle):
                            out.add(element.vid)
                            return False
                    # index depends on a variable (or is out of bounds): be conservative
                    out.update(v.vid for v in target.data if isinstance(v, VarHandle))
                    return False
                base_ground = self._walk_vars(node.base, bindings, out)
                return idx_ground and base_ground
            base_ground = self._walk_vars(node.base, bindings, out)
            return idx_ground and base_ground
        if isinstance(node, P.RangeExpr):
            g1 = self._walk_vars(node.lo, bindings, out)
            g2 = self._walk_vars(node.hi, bindings, out)
            return g1 and g2
        if isinstance(node, (P.SetLit, P.ArrayLit)):
            return all([self._walk_vars(e, bindings, out) for e in node.items])
        if isinstance(node, P.Array2dLit):
            return all([self._walk_vars(e, bindings, out) for row in node.rows for e in row])
        if isinstance(node, P.BinOp):
            g1 = self._walk_vars(node.left, bindings, out)
            g2 = self._walk_vars(node.right, bindings, out)
            return g1 and g2
        if isinstance(node, P.UnOp):
            return self._walk_vars(node.operand, bindings, out)
        if isinstance(node, P.Call):
            return all([self._walk_vars(a, bindings, out) for a in node.args])
        if isinstance(node, P.IfThenElse):
            flags = []
            for c, e in node.branches:
                flags.append(self._walk_vars(c, bindings, out))
                flags.append(self._walk_vars(e, bindings, out))
            flags.append(self._walk_vars(node.otherwise, bindings, out))
            return all(flags)
        if isinstance(node, (P.GenCall, P.Comprehension)):
            inner = dict(bindings)
            flags = []
            for g in node.generators:
                flags.append(self._walk_vars(g.source, inner, out))
                for nm in g.names:
                    inner[nm] = 0
                if g.where is not None:
                    flags.append(self._walk_vars(g.where, inner, out))
            flags.append(self._walk_vars(node.body, inner, out))
            return all(flags)
        raise EngineError(f"cannot analyze node {type(node).__name__}")


class _GroundEvaluator(Evaluator):
    """Evaluator used during parameter resolution: idents trigger resolution."""

    def __init__(self, compiler: Compiler):
        super().__init__(compiler.c)
        self.compiler = compiler

    def lookup(self, name: str, bindings: dict):
        if name in bindings:
            return bindings[name]
        if name in self.c.params:
            return self.c.params[name]
        return self.compiler._resolve_param(name)


class Searcher:
    """Chronological backtracking with constraint checks at the deepest variable."""

    def __init__(self, compiled: CompiledModel, deadline: float | None):
        self.c = compiled
        self.ev = Evaluator(compiled)
        self.deadline = deadline
        self.nodes = 0
        self.best_assignment: list | None = None
        self.best_objective = None
        self.found = False
        self.by_trigger: list[list] = [[] for _ in compiled.vars]
        for expr, var_set in compiled.constraints:
            self.by_trigger[max(var_set)].append(expr)
        self.obj_trigger = -1
        if compiled.objective is not None:
            vs = _VarCollector(compiled, set()).collect(compiled.objective)
            self.obj_trigger = max(vs) if vs else -1

    def run(self) -> None:
        if self.c.ground_unsat is not None:
            return
        n = len(self.c.vars)
        if n == 0:
            # no decision variables: constraints were all ground checks
            self.found = True
            self.best_assignment = []
            if self.c.objective is not None:
                self.best_objective = self.ev.eval(self.c.objective, {})
            return
        try:
            self._dfs(0)
        except _SearchTimeout:
            raise

    def _check_deadline(self) -> None:
        self.nodes += 1
        if self.deadline is not None and (self.nodes & 0xFF) == 0 and time.monotonic() > self.deadline:
            raise _SearchTimeout()

    def _dfs(self, depth: int) -> bool:
        """Returns True when the search can stop (first solution in satisfy mode)."""
        c = self.c
        if depth == len(c.vars):
            if c.objective is None:
                self.found = True
                self.best_assignment = list(c.var_values)
                return True
            value = self.ev.eval(c.objective, {})
            if not _is_num(value):
                raise EngineError("objective is not numeric")
            better = (
                self.best_objective is None
                or (c.solve_kind == "minimize" and value < self.best_objective)
                or (c.solve_kind == "maximize" and value > self.best_objective)
            )
            if better:
                self.best_objective = value
                self.best_assignment = list(c.var_values)
                self.found = True
            return False
        var = c.vars[depth]
        for val in var.domain:
            self._check_deadline()
            c.var_values[depth] = val
            if self._consistent(depth) and self._bound_ok(depth):
                if self._dfs(depth + 1):
                    c.var_values[depth] = _UNASSIGNED
                    return True
        c.var_values[depth] = _UNASSIGNED
        return False

    def _consistent(self, depth: int) -> bool:
        for expr in self.by_trigger[depth]:
            try:
                ok = self.ev.eval(expr, {})
            except EngineError:
                return False  # relational semantics: a faulting constraint is falsified
            if ok is not True:
                return False
        return True

    def _bound_ok(self, depth: int) -> bool:
        if self.c.objective is None or self.best_objective is None or depth != self.obj_trigger:
            return True
        try:
            value = self.ev.eval(self.c.objective, {})
        except EngineError:
            return True
        if self.c.solve_kind == "minimize":
            return value < self.best_objective
        return value > self.best_objective


def _to_json_value(v):
    if isinstance(v, MznArray):
        return _array_json(v)
    if isinstance(v, (frozenset, _RangeVal)):
        s = v if isinstance(v, frozenset) else v.to_set()
        return sorted(s)
    return v


def _array_json(arr: MznArray):
    nested = arr._nested()
    def conv(x):
        if isinstance(x, list):
            return [conv(e) for e in x]
        return _to_json_value(x)
    return conv(nested)


class BuiltinEngine:
    """Toolchain backend: compile-check and solve without external binaries.

    Compiled base models are memoized by (source, data) so repeated solves
    of one model under different appended constraints (the evaluator's
    equality pins and dominance bound) skip re-parsing and re-flattening.
    """

    solver_id = "builtin"

    def __init__(self) -> None:
        import threading

        self._cache: dict[tuple, tuple] = {}
        self._cache_lock = threading.Lock()

    def compile_check(self, model_source: str) -> CompileResult:
        try:
            model = P.parse_model(model_source)
        except (MznSyntaxError, MznUnsupported) as exc:
            return CompileResult(ok=False, message=str(exc))
        try:
            _check_names(model)
        except EngineError as exc:
            return CompileResult(ok=False, message=str(exc))
        except MznUnsupported as exc:
            return CompileResult(ok=False, message=str(exc))
        return CompileResult(ok=True, message="")

    def _compiled_base(self, model_source: str, dzn_text: str) -> tuple:
        key = (model_source, dzn_text)
        with self._cache_lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        model = P.parse_model(model_source)
        data = P.parse_data(dzn_text) if dzn_text.strip() else []
        compiled = Compiler(model, data).compile()
        entry = (compiled, frozenset(d.name for d in model.declarations))
        with self._cache_lock:
            if len(self._cache) >= 32:
                self._cache.clear()
            self._cache[key] = entry
        return entry

    def solve(
        self, model_source: str, dzn_text: str, timeout_s: float,
        extra_constraints: tuple = (),
    ) -> SolveResult:
        try:
            base, decl_names = self._compiled_base(model_source, dzn_text)
        except (MznSyntaxError, MznUnsupported, DataError, EngineError) as exc:
            return SolveResult(status=SolveStatus.ERROR, message=str(exc))
        compiled = base.clone()
        try:
            if extra_constraints:
                flattener = Flattener(compiled, set(decl_names))
                for body in extra_constraints:
                    expr = P.Parser(P.tokenize(body)).parse_expr()
                    flattener.flatten(expr)
        except (MznSyntaxError, MznUnsupported, DataError, EngineError) as exc:
            return SolveResult(status=SolveStatus.ERROR, message=str(exc))
        deadline = time.monotonic() + timeout_s if timeout_s else None
        searcher = Searcher(compiled, deadline)
        try:
            searcher.run()
        except _SearchTimeout:
            return SolveResult(status=SolveStatus.TIMEOUT, message="time limit reached")
        except (EngineError, MznUnsupported) as exc:
            return SolveResult(status=SolveStatus.ERROR, message=str(exc))

        if not searcher.found:
            return SolveResult(status=SolveStatus.UNSATISFIABLE, message="UNSATISFIABLE")
        assignment = _extract_assignment(compiled, searcher.best_assignment)
        objective = searcher.best_objective
        if compiled.objective is not None:
            status = SolveStatus.OPTIMAL
            assignment["_objective"] = objective
        else:
            status = SolveStatus.SATISFIABLE
        return SolveResult(status=status, assignment=assignment, objective=objective, message="")


def _extract_assignment(compiled: CompiledModel, values: list) -> dict:
    out: dict[str, object] = {}
    saved = compiled.var_values
    compiled.var_values = values
    try:
        ev = Evaluator(compiled)
        for name in compiled.decl_order:
            target = compiled.params[name]
            if isinstance(target, VarHandle):
                out[name] = ev.value_of(target)
            elif isinstance(target, MznArray):
                resolved = MznArray(target.dims, [ev.value_of(v) for v in target.data])
                out[name] = _array_json(resolved)
    finally:
        compiled.var_values = saved
    return out


_CONSTANT_NAMES = {"true", "false"}


def _check_names(model: P.Model) -> None:
    """Static check: every identifier is declared, assigned, or generator-bound."""
    declared = {d.name for d in model.declarations}

    def walk(node, scope: set):
        if isinstance(node, P.Ident):
            if node.name not in scope and node.name not in declared and node.name not in _CONSTANT_NAMES:
                raise EngineError(f"undefined identifier: {node.name}")
            return
        if isinstance(node, (P.IntLit, P.FloatLit, P.BoolLit, P.StrLit)) or node is None:
            return
        if isinstance(node, P.RangeExpr):
            walk(node.lo, scope)
            walk(node.hi, scope)
            return
        if isinstance(node, (P.SetLit, P.ArrayLit)):
            for e in node.items:
                walk(e, scope)
            return
        if isinstance(node, P.Array2dLit):
            for row in node.rows:
                for e in row:
                    walk(e, scope)
            return
        if isinstance(node, P.ArrayAccess):
            walk(node.base, scope)
            for i in node.indices:
                walk(i, scope)
            return
        if isinstance(node, P.BinOp):
            walk(node.left, scope)
            walk(node.right, scope)
            return
        if isinstance(node, P.UnOp):
            walk(node.operand, scope)
            return
        if isinstance(node, P.Call):
            if node.name not in P.BUILTIN_FUNCTIONS and node.name not in declared:
                raise EngineError(f"unknown function: {node.name}")
            for a in node.args:
                walk(a, scope)
            return
        if isinstance(node, P.IfThenElse):
            for c, e in node.branches:
                walk(c, scope)
                walk(e, scope)
            walk(node.otherwise, scope)
            return
        if isinstance(node, (P.GenCall, P.Comprehension)):
            inner = set(scope)
            for g in node.generators:
                walk(g.source, inner)
                inner.update(g.names)
                if g.where is not None:
                    walk(g.where, inner)
            walk(node.body, inner)
            return
        raise EngineError(f"cannot check node {type(node).__name__}")

    for d in model.declarations:
        ti = d.type_inst
        if ti.domain is not None:
            walk(ti.domain, set())
        if ti.array_dims:
            for e in ti.array_dims:
                walk(e, set())
        if d.value is not None:
            walk(d.value, set())
    for a in model.assignments:
        if a.name not in declared:
            raise EngineError(f"assignment to undeclared identifier: {a.name}")
        walk(a.value, set())
    for con in model.constraints:
        walk(con.expr, set())
    if model.solve and model.solve.objective is not None:
        walk(model.solve.objective, set())
