"""Temporal generative grammar: rule parsing, seeded expansion into sections, motif latents.

Rule files are documented in docs/grammar.md.
"""
import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import (EmptyGrammarError, ExpansionError, GrammarRecursionError, GrammarSyntaxError,
                        ScopeError)
from harmony import DegreeChord, diatonic_chord
from tonality import ROMAN, Mode, transpose_degree

logger = logging.getLogger(__name__)

DEFAULT_SECTION_MEASURES = 8
DEFAULT_DEPTH_LIMIT = 32
SLOTS_PER_MEASURE = 2

TOKEN_PATTERN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<arrow>->)
  | (?P<mod>M[1-7](?=\s*\())
  | (?P<lbrack>\[)
  | (?P<rbrack>\])
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<bar>\|)
  | (?P<eq>=)
  | (?P<colon>:)
  | (?P<number>\d+(?:\.\d+)?)
  | (?P<name>[A-Za-z][A-Za-z0-9_']*)
""", re.VERBOSE)

VARIABLE_PATTERN = re.compile(r"^([a-z][a-z0-9']*?)(?:_(\d+))?$")
KEYWORDS = {'let', 'in'}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int


@dataclass(frozen=True)
class Chord:
    degree: int
    weight: float = 1.0


@dataclass(frozen=True)
class Ref:
    name: str


@dataclass(frozen=True)
class Var:
    base: str
    subscript: int


@dataclass(frozen=True)
class Seq:
    items: Tuple['Item', ...]


@dataclass(frozen=True)
class Mod:
    k: int
    body: Seq


@dataclass(frozen=True)
class Let:
    var: str
    value: Seq
    body: Seq


Item = Union[Chord, Ref, Var, Mod, Let, Seq]


@dataclass(frozen=True)
class Production:
    lhs: str
    alternatives: Tuple[Seq, ...]
    measures: Optional[int] = None


@dataclass(frozen=True)
class Grammar:
    productions: Dict[str, Production]
    start: str
    mode: Mode = Mode.MAJOR


def _walk(node) -> Iterator:
    yield node
    if isinstance(node, Seq):
        for item in node.items:
            yield from _walk(item)
    elif isinstance(node, Mod):
        yield from _walk(node.body)
    elif isinstance(node, Let):
        yield from _walk(node.value)
        yield from _walk(node.body)


def tokenize(text: str) -> List[Token]:
    tokens = []
    position, line = 0, 1
    while position < len(text):
        match = TOKEN_PATTERN.match(text, position)
        if match is None:
            raise GrammarSyntaxError(f"Unexpected character {text[position]!r} on line {line}")
        kind = match.lastgroup
        if kind not in ('ws', 'comment'):
            tokens.append(Token(kind, match.group(), line))
        line += match.group().count('\n')
        position = match.end()
    return tokens


class GrammarParser:
    """Recursive-descent parser for rule files"""

    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.pos = 0
        # innermost binding last: [name, references numbered so far]
        self.scope: List[List] = []

    def peek(self, ahead: int = 0) -> Optional[Token]:
        index = self.pos + ahead
        return self.tokens[index] if index < len(self.tokens) else None

    def take(self, kind: Optional[str] = None, text: Optional[str] = None) -> Token:
        token = self.peek()
        if token is None:
            raise GrammarSyntaxError(f"Unexpected end of grammar, expected {text or kind}")
        if (kind and token.kind != kind) or (text and token.text != text):
            raise GrammarSyntaxError(f"Expected {text or kind} on line {token.line}, found {token.text!r}")
        self.pos += 1
        return token

    def at_rule_start(self) -> bool:
        first = self.peek()
        if first is None or first.kind != 'name':
            return False
        second = self.peek(1)
        if second is not None and second.kind == 'arrow':
            return True
        return (second is not None and second.kind == 'lbrack'
                and self.peek(2) is not None and self.peek(2).kind == 'number'
                and self.peek(3) is not None and self.peek(3).kind == 'rbrack'
                and self.peek(4) is not None and self.peek(4).kind == 'arrow')

    def parse_rules(self) -> List[Production]:
        rules = []
        while self.peek() is not None:
            if not self.at_rule_start():
                token = self.peek()
                raise GrammarSyntaxError(f"Expected a rule on line {token.line}, found {token.text!r}")
            lhs = self.take('name')
            if lhs.text in ROMAN or lhs.text in KEYWORDS or lhs.text[0].islower():
                raise GrammarSyntaxError(f"Invalid nonterminal name {lhs.text!r} on line {lhs.line}")
            measures = None
            if self.peek().kind == 'lbrack':
                self.take('lbrack')
                measures = int(self.take('number').text)
                self.take('rbrack')
                if measures < 1:
                    raise GrammarSyntaxError(f"Section length of {lhs.text} must be at least 1 measure")
            self.take('arrow')
            rules.append(Production(lhs.text, tuple(self.parse_alternatives()), measures))
        return rules

    def parse_alternatives(self) -> List[Seq]:
        alternatives = [self.parse_sequence()]
        while self.peek() is not None and self.peek().kind == 'bar':
            self.take('bar')
            alternatives.append(self.parse_sequence())
        return alternatives

    def parse_sequence(self) -> Seq:
        items = []
        while True:
            token = self.peek()
            if token is None or token.kind in ('bar', 'rparen') or token.text == 'in' or self.at_rule_start():
                break
            items.append(self.parse_item())
        if not items:
            token = self.peek()
            where = f"line {token.line}" if token else "end of grammar"
            raise GrammarSyntaxError(f"Empty sequence at {where}")
        return Seq(tuple(items))

    def parse_item(self) -> Item:
        token = self.peek()
        if token.kind == 'mod':
            self.take('mod')
            self.take('lparen')
            body = self.parse_sequence()
            self.take('rparen')
            return Mod(int(token.text[1:]), body)
        if token.kind == 'lparen':
            self.take('lparen')
            body = self.parse_sequence()
            self.take('rparen')
            return body
        if token.kind != 'name':
            raise GrammarSyntaxError(f"Unexpected {token.text!r} on line {token.line}")
        if token.text == 'let':
            return self.parse_let()
        self.take('name')
        if token.text in ROMAN:
            weight = 1.0
            if self.peek() is not None and self.peek().kind == 'colon':
                self.take('colon')
                weight = float(self.take('number').text)
                if weight <= 0:
                    raise GrammarSyntaxError(f"Chord weight must be positive on line {token.line}")
            return Chord(ROMAN.index(token.text) + 1, weight)
        if token.text[0].isupper():
            return Ref(token.text)
        return self.parse_variable(token)

    def parse_let(self) -> Let:
        self.take('name', 'let')
        name = self.take('name')
        if not VARIABLE_PATTERN.match(name.text) or '_' in name.text or name.text in KEYWORDS:
            raise GrammarSyntaxError(f"Invalid variable name {name.text!r} on line {name.line}")
        self.take('eq')
        value = self.parse_sequence()
        self.take('name', 'in')
        self.scope.append([name.text, 0])
        try:
            body = self.parse_sequence()
        finally:
            self.scope.pop()
        return Let(name.text, value, body)

    def parse_variable(self, token: Token) -> Var:
        match = VARIABLE_PATTERN.match(token.text)
        if match is None:
            raise GrammarSyntaxError(f"Invalid variable reference {token.text!r} on line {token.line}")
        base, subscript = match.group(1), match.group(2)
        binding = next((entry for entry in reversed(self.scope) if entry[0] == base), None)
        if binding is None:
            raise ScopeError(f"Variable {base!r} on line {token.line} is not bound by an enclosing let")
        if subscript is None:
            binding[1] += 1
            return Var(base, binding[1])
        binding[1] = max(binding[1], int(subscript))
        return Var(base, int(subscript))


def parse_grammar(text: str) -> Grammar:
    """Parse rule text; text without any ``->`` is read as the body of ``S``"""
    mode = Mode.MAJOR
    start = None
    body_lines = []
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith('%'):
            parts = stripped[1:].split()
            try:
                if parts[0] == 'mode':
                    mode = Mode.from_name(''.join(parts[1:]))
                elif parts[0] == 'start':
                    start = parts[1]
                else:
                    raise GrammarSyntaxError(f"Unknown directive: {stripped}")
            except (IndexError, ValueError) as e:
                raise GrammarSyntaxError(f"Invalid directive {stripped!r}: {str(e)}")
            body_lines.append('')
        else:
            body_lines.append(line)

    tokens = tokenize('\n'.join(body_lines))
    if not tokens:
        raise EmptyGrammarError("Grammar text holds no rules")
    if not any(t.kind == 'arrow' for t in tokens):
        tokens = [Token('name', 'S', 1), Token('arrow', '->', 1)] + tokens

    rules = GrammarParser(tokens).parse_rules()
    productions: Dict[str, Production] = {}
    for rule in rules:
        if rule.lhs in productions:
            existing = productions[rule.lhs]
            productions[rule.lhs] = Production(
                rule.lhs, existing.alternatives + rule.alternatives, existing.measures or rule.measures)
        else:
            productions[rule.lhs] = rule

    if start is None:
        start = 'S' if 'S' in productions else rules[0].lhs
    grammar = Grammar(productions=productions, start=start, mode=mode)
    _check_references(grammar)
    _check_productive(grammar)
    return grammar


def _check_references(grammar: Grammar):
    if grammar.start not in grammar.productions:
        raise GrammarSyntaxError(f"Start symbol {grammar.start!r} has no rule")
    for production in grammar.productions.values():
        for alternative in production.alternatives:
            for node in _walk(alternative):
                if isinstance(node, Ref) and node.name not in grammar.productions:
                    raise GrammarSyntaxError(f"{production.lhs} refers to undefined nonterminal {node.name!r}")


def _check_productive(grammar: Grammar):
    """Every nonterminal must be able to finish expanding"""
    productive = set()
    changed = True
    while changed:
        changed = False
        for name, production in grammar.productions.items():
            if name in productive:
                continue
            for alternative in production.alternatives:
                refs = {node.name for node in _walk(alternative) if isinstance(node, Ref)}
                if refs <= productive:
                    productive.add(name)
                    changed = True
                    break
    stuck = sorted(set(grammar.productions) - productive)
    if stuck:
        raise GrammarRecursionError(f"Nonterminals can never finish expanding: {', '.join(stuck)}")


@dataclass(frozen=True)
class SectionChord:
    chord: DegreeChord
    start: Fraction  # measures from section start
    length: Fraction


@dataclass(frozen=True)
class Section:
    index: int
    chords: Tuple[SectionChord, ...]
    measures: int
    base: str
    subscript: int
    mode: Mode
    transposition: int = 0  # diatonic steps applied by enclosing M_k

    @property
    def tag(self) -> str:
        return f"{self.base}_{self.subscript}"

    def slot_chords(self) -> List[DegreeChord]:
        """Chord under each half-measure slot"""
        slots = []
        for k in range(self.measures * SLOTS_PER_MEASURE):
            position = Fraction(k, SLOTS_PER_MEASURE)
            slots.append(next(c.chord for c in self.chords if c.start <= position < c.start + c.length))
        return slots

    def roman(self) -> str:
        return ' '.join(c.chord.roman for c in self.chords)


@dataclass(frozen=True)
class SectionPlan:
    sections: Tuple[Section, ...]
    mode: Mode
    seed: int

    @property
    def total_measures(self) -> int:
        return sum(s.measures for s in self.sections)

    def section_starts(self) -> List[int]:
        starts, position = [], 0
        for section in self.sections:
            starts.append(position)
            position += section.measures
        return starts


@dataclass
class _Context:
    shift: int = 0
    measures: int = DEFAULT_SECTION_MEASURES
    depth: int = 0
    env: Dict[str, Tuple[str, List[Tuple[int, float]]]] = field(default_factory=dict)

    def child(self, **changes) -> '_Context':
        values = {'shift': self.shift, 'measures': self.measures, 'depth': self.depth, 'env': self.env}
        values.update(changes)
        return _Context(**values)


class GrammarExpander:
    """One seeded expansion of a grammar into a section plan"""

    def __init__(self, grammar: Grammar, seed: int = 0, depth_limit: int = DEFAULT_DEPTH_LIMIT):
        self.grammar = grammar
        self.seed = seed
        self.depth_limit = depth_limit
        self.rng = np.random.default_rng(seed)
        self.sections: List[Section] = []
        self.binding_counts: Dict[str, int] = {}
        self.base_shifts: Dict[str, int] = {}
        self.anonymous = 0

    def expand(self, start: Optional[str] = None) -> SectionPlan:
        start = start or self.grammar.start
        if start not in self.grammar.productions:
            raise ExpansionError(f"Start symbol {start!r} has no rule")
        self._sections(Seq((Ref(start),)), _Context())
        plan = SectionPlan(sections=tuple(self.sections), mode=self.grammar.mode, seed=self.seed)
        logger.debug(f"Expanded {start} into {len(plan.sections)} sections, {plan.total_measures} measures")
        return plan

    def _choose(self, name: str, ctx: _Context) -> Tuple[Seq, _Context]:
        if ctx.depth >= self.depth_limit:
            raise ExpansionError(f"Expansion exceeded depth limit {self.depth_limit} at {name}")
        production = self.grammar.productions[name]
        alternative = production.alternatives[int(self.rng.integers(len(production.alternatives)))]
        return alternative, ctx.child(depth=ctx.depth + 1, measures=production.measures or ctx.measures)

    def _bind(self, let: Let, ctx: _Context) -> _Context:
        count = self.binding_counts.get(let.var, 0) + 1
        self.binding_counts[let.var] = count
        base = let.var if count == 1 else f"{let.var}{count}"
        value = self._flatten(let.value, ctx.child(shift=0))
        env = dict(ctx.env)
        env[let.var] = (base, value)
        return ctx.child(env=env)

    def _shifted_base(self, base: str, shift: int) -> str:
        """A binding keeps its name at the first transposition it is used with; others get their own base"""
        shift %= 7
        first = self.base_shifts.setdefault(base, shift)
        return base if shift == first else f"{base}@M{shift + 1}"

    def _sections(self, seq: Seq, ctx: _Context):
        if all(isinstance(item, Chord) for item in seq.items):
            self._add_section(self._flatten(seq, ctx), ctx, None, 1)
            return
        for item in seq.items:
            if isinstance(item, Chord):
                self._add_section(self._flatten(Seq((item,)), ctx), ctx, None, 1)
            elif isinstance(item, Ref):
                body, child = self._choose(item.name, ctx)
                self._sections(body, child)
            elif isinstance(item, Let):
                self._sections(item.body, self._bind(item, ctx))
            elif isinstance(item, Var):
                base, _ = ctx.env[item.base]
                self._add_section(self._flatten(Seq((item,)), ctx), ctx,
                                  self._shifted_base(base, ctx.shift), item.subscript)
            elif isinstance(item, Mod):
                self._sections(item.body, ctx.child(shift=ctx.shift + item.k - 1))
            elif isinstance(item, Seq):
                self._sections(item, ctx)

    def _flatten(self, seq: Seq, ctx: _Context) -> List[Tuple[int, float]]:
        """Chord degrees and weights of a sequence, with every choice resolved"""
        chords = []
        for item in seq.items:
            if isinstance(item, Chord):
                chords.append((transpose_degree(item.degree, ctx.shift), item.weight))
            elif isinstance(item, Ref):
                body, child = self._choose(item.name, ctx)
                chords.extend(self._flatten(body, child))
            elif isinstance(item, Let):
                chords.extend(self._flatten(item.body, self._bind(item, ctx)))
            elif isinstance(item, Var):
                _, value = ctx.env[item.base]
                chords.extend((transpose_degree(d, ctx.shift), w) for d, w in value)
            elif isinstance(item, Mod):
                chords.extend(self._flatten(item.body, ctx.child(shift=ctx.shift + item.k - 1)))
            elif isinstance(item, Seq):
                chords.extend(self._flatten(item, ctx))
        return chords

    def _add_section(self, chords: List[Tuple[int, float]], ctx: _Context, base: Optional[str], subscript: int):
        if base is None:
            self.anonymous += 1
            base = f"s{self.anonymous}"
        index = len(self.sections)
        self.sections.append(Section(
            index=index,
            chords=tuple(_place_chords(chords, ctx.measures, self.grammar.mode, index)),
            measures=ctx.measures,
            base=base,
            subscript=subscript,
            mode=self.grammar.mode,
            transposition=ctx.shift % 7,
        ))


def _place_chords(chords: Sequence[Tuple[int, float]], measures: int, mode: Mode,
                  section_index: int) -> List[SectionChord]:
    """Spread weighted chords over the section's half-measure slots by cumulative rounding"""
    slots = measures * SLOTS_PER_MEASURE
    if len(chords) > slots:
        raise ExpansionError(
            f"Section {section_index} has {len(chords)} chords but only {slots} half-measure slots")
    total = sum(Fraction(w).limit_denominator(1000) for _, w in chords)
    placed, cumulative, previous = [], Fraction(0), 0
    for degree, weight in chords:
        cumulative += Fraction(weight).limit_denominator(1000)
        boundary = int(cumulative * slots / total + Fraction(1, 2))
        if boundary <= previous:
            raise ExpansionError(f"Chord {degree} in section {section_index} is too short for a half-measure slot")
        placed.append(SectionChord(
            chord=diatonic_chord(degree, mode),
            start=Fraction(previous, SLOTS_PER_MEASURE),
            length=Fraction(boundary - previous, SLOTS_PER_MEASURE),
        ))
        previous = boundary
    return placed


def expand(grammar: Grammar, start: Optional[str] = None, seed: int = 0,
           depth_limit: int = DEFAULT_DEPTH_LIMIT) -> SectionPlan:
    return GrammarExpander(grammar, seed, depth_limit).expand(start)


@dataclass
class MotifLatentAssignment:
    bases: Dict[str, np.ndarray]
    latents: Dict[str, np.ndarray]
    sigma: float

    def for_section(self, section: Section) -> np.ndarray:
        return self.latents[section.tag]


def assign_latents(plan: SectionPlan, latent_dim: int, sigma: float = 0.2, seed: int = 0) -> MotifLatentAssignment:
    """Unit-Gaussian base latent per symbol base; later subscripts add N(0, sigma^2) noise"""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    bases: Dict[str, np.ndarray] = {}
    latents: Dict[str, np.ndarray] = {}
    for section in plan.sections:
        if section.base not in bases:
            bases[section.base] = rng.standard_normal(latent_dim)
        if section.tag in latents:
            continue
        if section.subscript == 1:
            latents[section.tag] = bases[section.base].copy()
        else:
            latents[section.tag] = bases[section.base] + sigma * rng.standard_normal(latent_dim)
    return MotifLatentAssignment(bases=bases, latents=latents, sigma=sigma)


def read_grammar(path) -> Grammar:
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Error reading grammar file: {str(e)}")
        raise GrammarSyntaxError(f"Error reading grammar file {path}: {str(e)}")
    return parse_grammar(text)
