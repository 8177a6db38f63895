"""
Query rewriting for the term-based retrieval path.

This module provides:
1. Boolean expression trees (Term, And, Or, Not) with rendering to E-Utilities
   term syntax and a parser for the same syntax
2. Question normalization into weighted content terms
3. Query ladders, most specific first, built by rules or by a language model
4. Ladder execution with fallback until enough documents are found
"""
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from exceptions import (ExpressionSyntaxError, GenerationError, LadderExecutionError,
                        NoContentTermsError, PreconditionError, QueryError, TransportError)
from models.generation import GenerationClient, load_prompt
from utils.logger import setup_logger
from utils.text import common_medical_terms, stopwords

logger = setup_logger("query_rewrite")

DEFAULT_FIELD_TAG = '[Title/Abstract]'

# weight of a term found in the common medical word list; rarer terms get +0.2
BASE_WEIGHT = 1.0
SPECIFIC_BONUS = 0.2


@dataclass(frozen=True)
class Term:
    text: str
    field_tag: Optional[str] = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("term text must be non-empty")


@dataclass(frozen=True)
class And:
    children: Tuple['BooleanExpression', ...]

    def __post_init__(self):
        object.__setattr__(self, 'children', tuple(self.children))
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True)
class Or:
    children: Tuple['BooleanExpression', ...]

    def __post_init__(self):
        object.__setattr__(self, 'children', tuple(self.children))
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


@dataclass(frozen=True)
class Not:
    child: 'BooleanExpression'


BooleanExpression = Union[Term, And, Or, Not]


class LadderOrigin(str, Enum):
    LLM = 'llm'
    RULE_BASED = 'rule_based'


@dataclass(frozen=True)
class NormalizedQuery:
    original: str
    normalized: str
    content_terms: Tuple[Tuple[str, float], ...]

    @property
    def terms(self) -> List[str]:
        return [term for term, _ in self.content_terms]


@dataclass(frozen=True)
class QueryLadder:
    """Boolean expressions ordered from most specific (index 0) to most relaxed."""

    levels: Tuple[BooleanExpression, ...]
    origin: LadderOrigin
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'levels', tuple(self.levels))
        if not self.levels:
            raise ValueError("a query ladder needs at least one level")

    def rendered(self) -> List[str]:
        return [render(level) for level in self.levels]


@dataclass(frozen=True)
class LadderResult:
    """Outcome of executing a ladder against esearch."""

    pmids: Tuple[str, ...]
    level_used: int
    counts: Tuple[Optional[int], ...]
    errors: Dict[int, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rendering and parsing

def _render_term(term: Term) -> str:
    text = f'"{term.text}"' if re.search(r"\s", term.text) else term.text
    return f"{text}{term.field_tag or ''}"


def render(expr: BooleanExpression) -> str:
    """
    Render an expression as E-Utilities term syntax.

    Children keep their stored order; multiword terms are double-quoted.
    """
    if isinstance(expr, Term):
        return _render_term(expr)
    if isinstance(expr, Not):
        return f"(NOT {render(expr.child)})"
    operator = ' AND ' if isinstance(expr, And) else ' OR '
    return '(' + operator.join(render(child) for child in expr.children) + ')'


def canonical(expr: BooleanExpression) -> BooleanExpression:
    """Flatten directly nested operators of the same kind: And(a, And(b, c)) -> And(a, b, c)."""
    if isinstance(expr, Term):
        return expr
    if isinstance(expr, Not):
        return Not(canonical(expr.child))
    kind = type(expr)
    children = []
    for child in expr.children:
        child = canonical(child)
        if isinstance(child, kind):
            children.extend(child.children)
        else:
            children.append(child)
    return kind(tuple(children))


def term_texts(expr: BooleanExpression) -> FrozenSet[str]:
    """Distinct term texts in an expression."""
    if isinstance(expr, Term):
        return frozenset({expr.text})
    if isinstance(expr, Not):
        return term_texts(expr.child)
    texts = set()
    for child in expr.children:
        texts |= term_texts(child)
    return frozenset(texts)


def _count_nodes(expr: BooleanExpression, kind) -> int:
    if isinstance(expr, Term):
        return 0
    if isinstance(expr, Not):
        return _count_nodes(expr.child, kind)
    own = 1 if isinstance(expr, kind) else 0
    return own + sum(_count_nodes(child, kind) for child in expr.children)


def is_relaxation(specific: BooleanExpression, relaxed: BooleanExpression) -> bool:
    """True when ``relaxed`` drops terms of ``specific`` or swaps an And for an Or over the same terms."""
    before, after = term_texts(specific), term_texts(relaxed)
    if after < before:
        return True
    if after == before:
        return (_count_nodes(relaxed, And) < _count_nodes(specific, And)
                and _count_nodes(relaxed, Or) > _count_nodes(specific, Or))
    return False


_TOKEN_RE = re.compile(
    r'\s*(?:'
    r'(?P<lparen>\()|(?P<rparen>\))'
    r'|"(?P<quoted>[^"]*)"(?P<qtag>\[[^\]]*\])?'
    r'|(?P<bare>[^\s()"\[\]]+)(?P<btag>\[[^\]]*\])?'
    r')'
)

_OPERATORS = ('AND', 'OR', 'NOT')


def _tokenize(text: str) -> List[Tuple[str, object]]:
    tokens = []
    position = 0
    text = text.rstrip()
    while position < len(text):
        match = _TOKEN_RE.match(text, position)
        if match is None or match.end() == position:
            raise ExpressionSyntaxError(f"unexpected character at {position}: {text[position:position + 10]!r}")
        position = match.end()
        if match.group('lparen'):
            tokens.append(('(', None))
        elif match.group('rparen'):
            tokens.append((')', None))
        elif match.group('quoted') is not None:
            if not match.group('quoted').strip():
                raise ExpressionSyntaxError("empty quoted term")
            tokens.append(('TERM', Term(match.group('quoted').strip(), match.group('qtag'))))
        else:
            word = match.group('bare')
            if word in _OPERATORS and not match.group('btag'):
                tokens.append((word, None))
            else:
                tokens.append(('TERM', Term(word, match.group('btag'))))
    return tokens


class _Parser:
    """Recursive descent over the token list: or_expr > and_expr > unary."""

    def __init__(self, tokens):
        self.tokens = tokens
        self.index = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.index][0] if self.index < len(self.tokens) else None

    def take(self):
        token = self.tokens[self.index]
        self.index += 1
        return token

    def parse(self) -> BooleanExpression:
        if not self.tokens:
            raise ExpressionSyntaxError("empty expression")
        expr = self.or_expr()
        if self.index != len(self.tokens):
            raise ExpressionSyntaxError(f"unexpected token {self.tokens[self.index][0]!r}")
        return canonical(expr)

    def or_expr(self) -> BooleanExpression:
        children = [self.and_expr()]
        while self.peek() == 'OR':
            self.take()
            children.append(self.and_expr())
        return children[0] if len(children) == 1 else Or(tuple(children))

    def and_expr(self) -> BooleanExpression:
        children = [self.unary()]
        while self.peek() in ('AND', 'NOT', 'TERM', '('):
            if self.peek() == 'AND':
                self.take()
                children.append(self.unary())
            elif self.peek() == 'NOT':
                # infix NOT: "a NOT b" means a AND NOT b
                self.take()
                children.append(Not(self.unary()))
            else:
                children.append(self.unary())
        return children[0] if len(children) == 1 else And(tuple(children))

    def unary(self) -> BooleanExpression:
        kind = self.peek()
        if kind is None:
            raise ExpressionSyntaxError("unexpected end of expression")
        if kind == 'NOT':
            self.take()
            return Not(self.unary())
        if kind == '(':
            self.take()
            expr = self.or_expr()
            if self.peek() != ')':
                raise ExpressionSyntaxError("missing closing parenthesis")
            self.take()
            return expr
        if kind == 'TERM':
            return self.take()[1]
        raise ExpressionSyntaxError(f"unexpected token {kind!r}")


def parse_expression(text: str) -> BooleanExpression:
    """
    Parse E-Utilities style Boolean syntax into an expression tree.

    Adjacent terms are joined by an implicit AND. The result is in canonical
    (flattened) form, so ``parse_expression(render(e)) == canonical(e)``.
    """
    return _Parser(_tokenize(text)).parse()


# ---------------------------------------------------------------------------
# Normalization and ladders

def normalize(raw: str,
              stopword_list: Optional[FrozenSet[str]] = None,
              correction_hook: Optional[Callable[[str], str]] = None) -> NormalizedQuery:
    """
    Normalize a question into weighted content terms.

    Args:
        raw: Question text
        stopword_list: Words to drop (shipped English list by default)
        correction_hook: Optional rewrite applied to ``raw`` first (e.g. spelling correction)

    Returns:
        NormalizedQuery with terms in first-occurrence order
    """
    if raw is None or not raw.strip():
        raise PreconditionError("query must be non-empty")
    if stopword_list is None:
        stopword_list = stopwords()

    text = correction_hook(raw) if correction_hook else raw
    text = text.lower()
    text = re.sub(r"[^\w\s-]", ' ', text)
    # keep hyphens only between word characters
    text = re.sub(r"(?<!\w)-|-(?!\w)", ' ', text)
    tokens = text.split()

    common = common_medical_terms()
    content_terms = []
    seen = set()
    for token in tokens:
        if token in stopword_list or token in seen:
            continue
        seen.add(token)
        weight = BASE_WEIGHT if token in common else BASE_WEIGHT + SPECIFIC_BONUS
        content_terms.append((token, weight))

    if not content_terms:
        raise NoContentTermsError(f"no content terms in query: {raw!r}")

    return NormalizedQuery(original=raw, normalized=' '.join(tokens), content_terms=tuple(content_terms))


def _combine(terms: Sequence[str], kind, field_tag: Optional[str]) -> BooleanExpression:
    nodes = tuple(Term(term, field_tag) for term in terms)
    return nodes[0] if len(nodes) == 1 else kind(nodes)


def generate_ladder_rule_based(q: NormalizedQuery, max_levels: int = 5,
                               field_tag: Optional[str] = DEFAULT_FIELD_TAG) -> QueryLadder:
    """
    Deterministic ladder: And of all terms, then one relaxation per level.

    Relaxations in priority order: drop the lowest-weight term (the last one
    among equals) while more than two terms remain, then turn the And into an Or.
    """
    if max_levels < 1:
        raise PreconditionError("max_levels must be positive")
    if not q.content_terms:
        raise PreconditionError("query has no content terms")

    terms = list(q.content_terms)
    levels = [_combine([term for term, _ in terms], And, field_tag)]
    disjunctive = False
    while len(levels) < max_levels:
        if len(terms) > 2:
            lowest = min(weight for _, weight in terms)
            drop = max(i for i, (_, weight) in enumerate(terms) if weight == lowest)
            del terms[drop]
            levels.append(_combine([term for term, _ in terms], And, field_tag))
        elif len(terms) == 2 and not disjunctive:
            disjunctive = True
            levels.append(_combine([term for term, _ in terms], Or, field_tag))
        else:
            break

    return QueryLadder(levels=tuple(levels), origin=LadderOrigin.RULE_BASED)


_LINE_PREFIX_RE = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*")


def _expression_lines(text: str) -> List[BooleanExpression]:
    expressions = []
    for line in text.splitlines():
        line = _LINE_PREFIX_RE.sub('', line).strip().strip('`').strip()
        if not line:
            continue
        try:
            expressions.append(parse_expression(line))
        except (ExpressionSyntaxError, ValueError) as e:
            logger.debug(f"Dropped ladder line {line!r}: {e}")
    return expressions


def generate_ladder_llm(raw: str, llm: GenerationClient,
                        max_levels: Optional[int] = None,
                        stopword_list: Optional[FrozenSet[str]] = None) -> QueryLadder:
    """
    Ladder written by a language model with the fixed two-step prompt.

    Step one corrects and analyses the question, step two emits one Boolean
    expression per line. Lines that do not parse are dropped. When nothing
    parses, or the model is unavailable, the rule-based ladder is returned
    with origin=rule_based and a warning.

    Args:
        raw: Question text
        llm: Generation client (live or fixture)
        max_levels: Optional cap on the number of levels
        stopword_list: Stopwords for the rule-based fallback

    Returns:
        QueryLadder
    """
    if raw is None or not raw.strip():
        raise PreconditionError("query must be non-empty")

    try:
        analysis = llm.generate(load_prompt('rewrite_step1_system'),
                                load_prompt('rewrite_step1_user').format(question=raw))
        output = llm.generate(load_prompt('rewrite_step2_system'),
                              load_prompt('rewrite_step2_user').format(analysis=analysis.strip(), question=raw))
    except (GenerationError, TransportError) as e:
        logger.warning(f"Language model unavailable, using rule-based ladder: {e}")
        return _fallback(raw, max_levels, stopword_list, f"llm_unavailable: {e}")

    levels = _expression_lines(output)
    if not levels:
        logger.warning("No parseable ladder lines in model output, using rule-based ladder")
        return _fallback(raw, max_levels, stopword_list, "llm_output_unparseable")

    if max_levels is not None:
        levels = levels[:max_levels]
    for i in range(1, len(levels)):
        if not is_relaxation(levels[i - 1], levels[i]):
            logger.debug(f"Ladder level {i} does not relax level {i - 1}")
    return QueryLadder(levels=tuple(levels), origin=LadderOrigin.LLM)


def _fallback(raw, max_levels, stopword_list, warning) -> QueryLadder:
    ladder = generate_ladder_rule_based(normalize(raw, stopword_list), max_levels or 5)
    return QueryLadder(levels=ladder.levels, origin=LadderOrigin.RULE_BASED, warnings=(warning,))


def execute_ladder(ladder: QueryLadder, search: Callable, min_docs: int, retmax: int) -> LadderResult:
    """
    Search ladder levels in order until one returns at least ``min_docs`` documents.

    Args:
        ladder: Query ladder
        search: Callable taking a rendered term and returning an ESearchResult
        min_docs: Result count that accepts a level
        retmax: Maximum PMIDs to keep

    Returns:
        LadderResult; when no level qualifies, the level with the highest
        count (earliest on ties) is used
    """
    if min_docs < 1 or retmax < 1:
        raise PreconditionError("min_docs and retmax must be positive")

    counts: List[Optional[int]] = []
    results = {}
    errors = {}
    chosen = None
    for level, expr in enumerate(ladder.levels):
        term = render(expr)
        try:
            result = search(term)
        except (TransportError, QueryError) as e:
            logger.warning(f"Ladder level {level} failed: {e}")
            errors[level] = e
            counts.append(None)
            continue
        counts.append(result.total_count)
        results[level] = result
        logger.debug(f"Ladder level {level} count={result.total_count}")
        if result.total_count >= min_docs:
            chosen = level
            break

    if not results:
        raise LadderExecutionError(errors)

    if chosen is None:
        best = max(count for count in counts if count is not None)
        chosen = min(level for level in results if counts[level] == best)

    pmids = list(dict.fromkeys(results[chosen].pmids))[:retmax]
    return LadderResult(pmids=tuple(pmids), level_used=chosen, counts=tuple(counts),
                        errors={level: str(error) for level, error in errors.items()})


def ladder_to_json(ladder: QueryLadder) -> Dict[str, object]:
    return {
        'origin': ladder.origin.value,
        'levels': ladder.rendered(),
        'warnings': list(ladder.warnings)
    }
