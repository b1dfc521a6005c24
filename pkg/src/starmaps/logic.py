"""A small hybrid probabilistic logic language grounded against StaR Maps.

Supported statements::

    distance(x, building) ~ normal(20, 0.5).     % mean, standard deviation
    0.9::over(x, primary).
    airspace(X) :- over(X, park).
    airspace(X) :- distance(X, road) < 15, distance(X, pilot) < 250.

Variables (capitalized identifiers) stand for the query location; grounding
replaces them with the location constant ``x``. Facts are independent,
bodies are conjunctions and alternative rules for one head combine by
noisy-or.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Union

import numpy as np

from .geometry import Point, PointLike
from .relations import Comparison as Op
from .relations import RelationKind, prob_threshold_many

#: Constant that denotes the query location in ground atoms.
LOCATION = "x"

#: Default Monte-Carlo sample counts for rasters and single queries.
MC_SAMPLES_FIELD = 10_000
MC_SAMPLES_QUERY = 1_000_000


class ProgramError(ValueError):
    """Invalid program; ``line``/``column`` are 1-based when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f"{line}:{column}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line
        self.column = column


class ProgramSyntaxError(ProgramError):
    pass


class RecursiveProgram(ProgramError):
    pass


class DuplicateFact(ProgramError):
    pass


class UndefinedAtom(ProgramError):
    pass


class SharedFacts(ProgramError):
    """Exact inference requested on a proof structure that reuses a fact."""


# ---------------------------------------------------------------------------
# syntax tree


def is_variable(term: str) -> bool:
    return term[:1].isupper() or term[:1] == "_"


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[str, ...]

    def __str__(self):
        return f"{self.predicate}({', '.join(self.args)})"

    @property
    def signature(self) -> tuple[str, int]:
        return (self.predicate, len(self.args))

    def substitute(self, value: str = LOCATION) -> Atom:
        return Atom(self.predicate, tuple(value if is_variable(a) else a for a in self.args))

    @property
    def variables(self) -> set[str]:
        return {a for a in self.args if is_variable(a)}


@dataclass(frozen=True)
class Comparison:
    atom: Atom
    op: Op
    threshold: float

    def __str__(self):
        sym = "<" if self.op is Op.LESS else ">"
        return f"{self.atom} {sym} {_num(self.threshold)}"


Literal = Union[Atom, Comparison]


def _literal_atom(lit: Literal) -> Atom:
    return lit.atom if isinstance(lit, Comparison) else lit


@dataclass(frozen=True)
class DistributionalFact:
    atom: Atom
    mean: float
    stddev: float
    line: int = field(default=0, compare=False)

    def __str__(self):
        return f"{self.atom} ~ normal({_num(self.mean)}, {_num(self.stddev)})."


@dataclass(frozen=True)
class ProbabilisticFact:
    probability: float
    atom: Atom
    line: int = field(default=0, compare=False)

    def __str__(self):
        return f"{_num(self.probability)}::{self.atom}."


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple[Literal, ...]
    line: int = field(default=0, compare=False)

    def __str__(self):
        return f"{self.head} :- {', '.join(map(str, self.body))}."


Statement = Union[DistributionalFact, ProbabilisticFact, Rule]
Fact = Union[DistributionalFact, ProbabilisticFact]


def _num(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class Program:
    statements: tuple[Statement, ...]

    def __str__(self):
        return "\n".join(map(str, self.statements)) + ("\n" if self.statements else "")

    @property
    def facts(self) -> list[Fact]:
        return [s for s in self.statements if not isinstance(s, Rule)]

    @property
    def rules(self) -> list[Rule]:
        return [s for s in self.statements if isinstance(s, Rule)]


def format_program(program: Program) -> str:
    return str(program)


# ---------------------------------------------------------------------------
# tokenizer and recursive-descent parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>%[^\n]*)
  | (?P<number>[-+]?(?:\d+\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>::|:-|[()~,.<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ProgramSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        chunk = m.group()
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, expected: str) -> ProgramSyntaxError:
        t = self.tok
        got = "end of input" if t.kind == "eof" else repr(t.text)
        return ProgramSyntaxError(f"expected {expected}, got {got}", t.line, t.column)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        t = self.tok
        if not self.accept(text):
            raise self.error(repr(text))
        return t

    def number(self) -> float:
        t = self.tok
        if t.kind != "number":
            raise self.error("a number")
        self.i += 1
        return float(t.text)

    def ident(self, what: str = "an identifier") -> str:
        t = self.tok
        if t.kind != "ident":
            raise self.error(what)
        self.i += 1
        return t.text

    def program(self) -> Program:
        statements = []
        while self.tok.kind != "eof":
            statements.append(self.statement())
        return Program(tuple(statements))

    def statement(self) -> Statement:
        start = self.tok
        if start.kind == "number":
            p = self.number()
            self.expect("::")
            atom = self.atom()
            self.expect(".")
            if not 0.0 <= p <= 1.0:
                raise ProgramSyntaxError(f"probability {p} outside [0, 1]", start.line, start.column)
            return ProbabilisticFact(p, atom, start.line)
        head = self.atom()
        if self.accept("~"):
            name = self.tok
            if self.ident("'normal'") != "normal":
                raise ProgramSyntaxError(
                    f"unsupported distribution {name.text!r}; only 'normal' is available", name.line, name.column
                )
            self.expect("(")
            mean = self.number()
            self.expect(",")
            sd_tok = self.tok
            stddev = self.number()
            self.expect(")")
            self.expect(".")
            if stddev < 0:
                raise ProgramSyntaxError("standard deviation must be >= 0", sd_tok.line, sd_tok.column)
            return DistributionalFact(head, mean, stddev, start.line)
        if self.accept(":-"):
            body = [self.literal()]
            while self.accept(","):
                body.append(self.literal())
            self.expect(".")
            return Rule(head, tuple(body), start.line)
        raise self.error("'~', ':-' or '.'" if self.tok.text != "." else "'~' or ':-' (bare facts need a probability)")

    def literal(self) -> Literal:
        atom = self.atom()
        for sym, op in (("<", Op.LESS), (">", Op.GREATER)):
            if self.accept(sym):
                return Comparison(atom, op, self.number())
        return atom

    def atom(self) -> Atom:
        name = self.ident("a predicate name")
        if is_variable(name):
            t = self.tokens[self.i - 1]
            raise ProgramSyntaxError(f"predicate name {name!r} must start lowercase", t.line, t.column)
        self.expect("(")
        args = [self.ident("a term")]
        while self.accept(","):
            args.append(self.ident("a term"))
        self.expect(")")
        return Atom(name, tuple(args))


def parse_program(text: str) -> Program:
    """Parse program text; raises :class:`ProgramError` subclasses with locations."""
    program = _Parser(text).program()
    _check_duplicates(program)
    _check_recursion(program)
    return program


def _check_duplicates(program: Program) -> None:
    seen: dict[Atom, Fact] = {}
    for fact in program.facts:
        key = fact.atom.substitute()
        if key in seen:
            raise DuplicateFact(f"fact {fact.atom} defined twice (first on line {seen[key].line})", fact.line, 1)
        seen[key] = fact


def _check_recursion(program: Program) -> None:
    deps: dict[tuple[str, int], set[tuple[str, int]]] = {}
    lines: dict[tuple[str, int], int] = {}
    for rule in program.rules:
        deps.setdefault(rule.head.signature, set()).update(_literal_atom(l).signature for l in rule.body)
        lines.setdefault(rule.head.signature, rule.line)

    state: dict[tuple[str, int], int] = {}

    def visit(sig, path):
        if state.get(sig) == 1:
            cycle = path[path.index(sig):] + [sig]
            names = " -> ".join(f"{p}/{n}" for p, n in cycle)
            raise RecursiveProgram(f"recursive definition {names}", lines.get(cycle[0]), 1)
        if state.get(sig) == 2:
            return
        state[sig] = 1
        for dep in sorted(deps.get(sig, ())):
            visit(dep, path + [sig])
        state[sig] = 2

    for sig in sorted(deps):
        visit(sig, [])


# ---------------------------------------------------------------------------
# grounding


@dataclass(frozen=True, eq=False)
class GroundedProgram:
    """A variable-free program at one location, all relation atoms bound."""

    program: Program
    location: Point

    def __eq__(self, other):
        if not isinstance(other, GroundedProgram):
            return NotImplemented
        return self.program == other.program and self.location == other.location

    __hash__ = None

    def __post_init__(self):
        pfacts, dfacts, rules = {}, {}, {}
        for s in self.program.statements:
            if isinstance(s, ProbabilisticFact):
                pfacts[s.atom] = s.probability
            elif isinstance(s, DistributionalFact):
                dfacts[s.atom] = (s.mean, s.stddev)
            else:
                rules.setdefault(s.head, []).append(s.body)
        object.__setattr__(self, "pfacts", pfacts)
        object.__setattr__(self, "dfacts", dfacts)
        object.__setattr__(self, "rules", rules)


def _relation_atoms(program: Program) -> list[Atom]:
    """Ground ``over``/``distance`` atoms used in bodies but not defined anywhere."""
    defined = {f.atom.substitute() for f in program.facts} | {r.head.substitute() for r in program.rules}
    seen: dict[Atom, None] = {}
    for rule in program.rules:
        for lit in rule.body:
            atom = _literal_atom(lit).substitute()
            if atom.predicate in RelationKind.__members__.values() or atom.predicate in ("over", "distance"):
                if len(atom.args) == 2 and atom not in defined:
                    seen.setdefault(atom, None)
    return list(seen)


def _check_variables(program: Program) -> None:
    for s in program.statements:
        atoms = [s.head, *map(_literal_atom, s.body)] if isinstance(s, Rule) else [s.atom]
        names = set().union(*(a.variables for a in atoms))
        if len(names) > 1:
            raise ProgramError(
                f"only one location variable per statement is supported, found {sorted(names)}", s.line, 1
            )


def _bound_facts(program: Program, starmap, points: np.ndarray) -> dict[Atom, tuple]:
    """Field values for every unbound relation atom at ``points``.

    ``over`` atoms map to an array of probabilities, ``distance`` atoms to
    ``(mean, stddev, variance)`` arrays. The variance rides along so threshold
    probabilities use the field value directly instead of a squared root.
    """
    bound = {}
    for atom in _relation_atoms(program):
        kind = RelationKind(atom.predicate)
        tag = atom.args[1]
        if kind is RelationKind.OVER:
            bound[atom] = (starmap.field_for(kind, tag, 0)(points),)
        else:
            mean = starmap.field_for(kind, tag, 0)(points)
            var = starmap.field_for(kind, tag, 1)(points)
            bound[atom] = (mean, np.sqrt(var), var)
    return bound


def _ground_statements(program: Program, bound: dict[Atom, tuple], k: int) -> Program:
    statements: list[Statement] = []
    for s in program.statements:
        if isinstance(s, ProbabilisticFact):
            statements.append(ProbabilisticFact(s.probability, s.atom.substitute(), s.line))
        elif isinstance(s, DistributionalFact):
            statements.append(DistributionalFact(s.atom.substitute(), s.mean, s.stddev, s.line))
        else:
            body = tuple(
                Comparison(l.atom.substitute(), l.op, l.threshold) if isinstance(l, Comparison) else l.substitute()
                for l in s.body
            )
            statements.append(Rule(s.head.substitute(), body, s.line))
    for atom, values in bound.items():
        if atom.predicate == RelationKind.OVER.value:
            statements.append(ProbabilisticFact(float(values[0][k]), atom))
        else:
            statements.append(DistributionalFact(atom, float(values[0][k]), float(values[1][k])))
    return Program(tuple(statements))


def ground_program(program: Program, starmap, x: PointLike) -> GroundedProgram:
    """Bind the location variable to ``x`` and relation atoms to StaR Map values.

    Facts written in the program take precedence over StaR Map fields.
    Distance fields contribute ``normal(mean, sqrt(variance))``.
    """
    _check_variables(program)
    loc = x if isinstance(x, Point) else Point(float(x[0]), float(x[1]))
    bound = _bound_facts(program, starmap, np.array([[loc.x, loc.y]])) if starmap is not None else {}
    if starmap is None and _relation_atoms(program):
        missing = _relation_atoms(program)[0]
        raise UndefinedAtom(f"no fact or StaR Map field for {missing}")
    return GroundedProgram(_ground_statements(program, bound, 0), loc)


# ---------------------------------------------------------------------------
# inference


class Method(str, Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"
    AUTO = "auto"


@dataclass(frozen=True)
class QueryResult:
    atom: Atom
    probability: float
    method: Method
    mc_samples: int = 0
    mc_stderr: float | None = None


def parse_atom(text: str) -> Atom:
    p = _Parser(text)
    atom = p.atom()
    p.accept(".")
    if p.tok.kind != "eof":
        raise p.error("end of query")
    return atom.substitute()


class _Structure:
    """Proof-structure bookkeeping shared by exact and sampling inference."""

    def __init__(self, pfacts, dfacts, rules):
        self.pfacts = pfacts
        self.dfacts = dfacts
        self.rules = rules

    def check_defined(self, atom: Atom, comparison: bool = False, where: str = "") -> None:
        if comparison:
            if atom not in self.dfacts:
                what = "a distributional fact" if (atom in self.pfacts or atom in self.rules) else "defined"
                raise UndefinedAtom(f"comparison on {atom}, which is not {what}{where}")
            return
        if atom in self.dfacts and atom not in self.pfacts and atom not in self.rules:
            raise ProgramError(f"{atom} is continuous and must be compared against a number{where}")
        if atom not in self.pfacts and atom not in self.rules:
            raise UndefinedAtom(f"undefined atom {atom}{where}")

    def fact_uses(self, atom: Atom) -> Iterator[Atom]:
        """Every base fact occurrence in the proof structure of ``atom``."""
        self.check_defined(atom)
        if atom in self.pfacts:
            yield atom
        for body in self.rules.get(atom, ()):
            for lit in body:
                if isinstance(lit, Comparison):
                    self.check_defined(lit.atom, comparison=True, where=f" (in a rule for {atom})")
                    yield lit.atom
                else:
                    yield from self.fact_uses(lit)

    def shared_facts(self, atom: Atom) -> list[Atom]:
        counts: dict[Atom, int] = {}
        for f in self.fact_uses(atom):
            counts[f] = counts.get(f, 0) + 1
        return [f for f, c in counts.items() if c > 1]

    def exact(self, atom: Atom):
        """Success probability assuming every fact occurs once (elementwise over arrays)."""
        # Noisy-or accumulated as a + p - a*p: exact for a single proof and
        # free of the cancellation in 1 - (1 - p) for small p.
        acc = self.pfacts.get(atom)
        for body in self.rules.get(atom, ()):
            p_body = None
            for lit in body:
                p = self.literal_exact(lit)
                p_body = p if p_body is None else p_body * p
            acc = p_body if acc is None else acc + p_body - acc * p_body
        return 0.0 if acc is None else acc

    def literal_exact(self, lit: Literal):
        if isinstance(lit, Comparison):
            fact = self.dfacts[lit.atom]
            var = fact[2] if len(fact) > 2 else np.square(fact[1])
            return prob_threshold_many(fact[0], var, lit.op, lit.threshold)
        return self.exact(lit)

    def sample(self, atom: Atom, rng: np.random.Generator, m: int) -> np.ndarray:
        """Boolean truth values of ``atom`` over ``m`` joint worlds."""
        draws: dict[Atom, np.ndarray] = {}
        for a in sorted(self.pfacts, key=str):
            draws[a] = rng.random(m) < self.pfacts[a]
        for a in sorted(self.dfacts, key=str):
            mean, sd = self.dfacts[a][:2]
            draws[a] = mean + sd * rng.standard_normal(m)
        memo: dict[Atom, np.ndarray] = {}

        def truth(a: Atom) -> np.ndarray:
            if a in memo:
                return memo[a]
            out = draws[a].copy() if a in self.pfacts else np.zeros(m, dtype=bool)
            for body in self.rules.get(a, ()):
                conj = np.ones(m, dtype=bool)
                for lit in body:
                    if isinstance(lit, Comparison):
                        v = draws[lit.atom]
                        # Ties follow the closed lower comparison of the exact path.
                        conj &= (v <= lit.threshold) if lit.op is Op.LESS else (v > lit.threshold)
                    else:
                        conj &= truth(lit)
                out |= conj
            memo[a] = out
            return out

        return truth(atom)


def query(
    g: GroundedProgram,
    atom: Atom | str,
    method: Method | str = Method.AUTO,
    mc_samples: int = MC_SAMPLES_QUERY,
    seed: int = 0,
) -> QueryResult:
    """Probability that ``atom`` holds in the grounded program.

    ``auto`` uses exact inference unless a fact is reused across the proof
    structure, in which case it falls back to Monte-Carlo sampling.
    """
    atom = parse_atom(atom) if isinstance(atom, str) else atom.substitute()
    method = Method(method)
    st = _Structure(g.pfacts, g.dfacts, g.rules)
    shared = st.shared_facts(atom)
    if method is Method.EXACT and shared:
        raise SharedFacts(
            f"exact inference needs independent proofs; {', '.join(map(str, shared))} occur more than once"
        )
    if method is Method.EXACT or (method is Method.AUTO and not shared):
        p = float(np.clip(st.exact(atom), 0.0, 1.0))
        return QueryResult(atom, p, Method.EXACT)
    rng = np.random.Generator(np.random.PCG64(seed))
    p = float(np.count_nonzero(st.sample(atom, rng, mc_samples)) / mc_samples)
    return QueryResult(atom, p, Method.MONTE_CARLO, mc_samples, math.sqrt(p * (1 - p) / mc_samples))


class QueryFieldError(ProgramError):
    """Per-node failures of a field query, with node coordinates."""

    def __init__(self, failures: list[tuple[float, float, str]]):
        head = "; ".join(f"({x:.2f}, {y:.2f}): {msg}" for x, y, msg in failures[:5])
        more = f" (+{len(failures) - 5} more)" if len(failures) > 5 else ""
        super().__init__(f"query failed at {len(failures)} node(s): {head}{more}")
        self.failures = failures


def query_field(
    program: Program,
    starmap,
    atom: Atom | str,
    points,
    method: Method | str = Method.AUTO,
    mc_samples: int = MC_SAMPLES_FIELD,
    seed: int = 0,
) -> np.ndarray:
    """Evaluate a query independently at each of ``points``.

    Exact evaluation is vectorized over all points; Monte-Carlo evaluation
    uses the ``k``-th substream of ``seed`` at point ``k``.
    """
    atom = parse_atom(atom) if isinstance(atom, str) else atom.substitute()
    method = Method(method)
    _check_variables(program)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    try:
        bound = _bound_facts(program, starmap, pts)
    except ValueError:
        return _query_nodes(program, starmap, atom, pts, method, mc_samples, seed)
    template = _ground_statements(program, {a: tuple(v[:1] for v in vals) for a, vals in bound.items()}, 0)
    g0 = GroundedProgram(template, Point(*pts[0]))
    st = _Structure(g0.pfacts, g0.dfacts, g0.rules)
    shared = st.shared_facts(atom)
    if method is Method.EXACT and shared:
        raise SharedFacts(f"exact inference needs independent proofs; {', '.join(map(str, shared))} are shared")
    if method is Method.EXACT or (method is Method.AUTO and not shared):
        pfacts = dict(g0.pfacts)
        dfacts = dict(g0.dfacts)
        for a, vals in bound.items():
            if a.predicate == RelationKind.OVER.value:
                pfacts[a] = vals[0]
            else:
                dfacts[a] = vals
        vec = _Structure(pfacts, dfacts, g0.rules)
        return np.clip(np.broadcast_to(vec.exact(atom), (len(pts),)), 0.0, 1.0).astype(float)
    return _query_nodes(program, starmap, atom, pts, method, mc_samples, seed)


def _query_nodes(program, starmap, atom, pts, method, mc_samples, seed) -> np.ndarray:
    out = np.empty(len(pts))
    failures = []
    children = np.random.SeedSequence(seed).spawn(len(pts))
    for k, p in enumerate(pts):
        try:
            g = ground_program(program, starmap, p)
            node_seed = int(children[k].generate_state(2, np.uint64)[0])
            out[k] = query(g, atom, method, mc_samples, node_seed).probability
        except (ProgramError, KeyError, ValueError) as exc:
            failures.append((float(p[0]), float(p[1]), str(exc)))
    if failures:
        raise QueryFieldError(failures)
    return out
