"""
Semantic enhanced overlap segmentation (SEOS) and fixed-size splitters.

This module provides:
1. Sentence splitting with an abbreviation guard; line breaks always end a sentence
2. The embedding-similarity gap series with TextTiling-style depth scores
3. Boundary detection (mean minus c standard deviations over positive depths)
4. Chunking of documents into complete-sentence chunks with whole-sentence overlap,
   sized by the embedder's preferred chunk length
5. The sentence-preferring fixed-size splitter used as a baseline
"""
import re
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import config
from exceptions import NothingToSegmentError, PreconditionError
from models.corpus import Chunk, Document
from models.embedding import Embedder
from utils.logger import setup_logger
from utils.performance import performance_tracker, timeit
from utils.text import abbreviations, count_words

logger = setup_logger("seos")

_CANDIDATE_RE = re.compile(r"[.!?](?=\s+[A-Z0-9])")
_LINE_RE = re.compile(r"[^\n]+")


@dataclass(frozen=True)
class Sentence:
    """A sentence and its character span in the source text."""
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class SeosConfig:
    window_w: int = config.SEOS_DEFAULTS['window_w']
    smoothing_width: int = config.SEOS_DEFAULTS['smoothing_width']
    depth_coefficient: float = config.SEOS_DEFAULTS['depth_coefficient']
    target_chunk_tokens: Optional[int] = None
    overlap_tokens: Optional[int] = None
    token_counter: Optional[Callable[[str], int]] = None
    min_boundary_distance: int = config.SEOS_DEFAULTS['min_boundary_distance']

    def __post_init__(self):
        if self.window_w < 1:
            raise PreconditionError("window_w must be at least 1")
        if self.smoothing_width < 1 or self.smoothing_width % 2 == 0:
            raise PreconditionError("smoothing_width must be an odd positive integer")
        if self.target_chunk_tokens is not None and self.target_chunk_tokens < 1:
            raise PreconditionError("target_chunk_tokens must be positive")
        if self.overlap_tokens is not None and self.overlap_tokens < 0:
            raise PreconditionError("overlap_tokens must be non-negative")
        if (self.target_chunk_tokens is not None and self.overlap_tokens is not None
                and self.overlap_tokens >= self.target_chunk_tokens):
            raise PreconditionError("overlap_tokens must be smaller than target_chunk_tokens")

    @classmethod
    def from_section(cls, section) -> 'SeosConfig':
        return cls(window_w=section.window_w,
                   smoothing_width=section.smoothing_width,
                   depth_coefficient=section.depth_coefficient,
                   target_chunk_tokens=section.target_chunk_tokens,
                   overlap_tokens=section.overlap_tokens)

    def resolve(self, embedder: Optional[Embedder]) -> Tuple[int, int, Callable[[str], int]]:
        """Chunk budget, overlap budget and token counter, falling back to the embedder's preferences."""
        target = self.target_chunk_tokens
        overlap = self.overlap_tokens
        if embedder is not None:
            target = target if target is not None else embedder.preferred_chunk_tokens
            overlap = overlap if overlap is not None else embedder.preferred_overlap_tokens
        else:
            target = target if target is not None else config.EMBEDDER_FAMILIES['general']['chunk_tokens']
            overlap = overlap if overlap is not None else config.EMBEDDER_FAMILIES['general']['overlap_tokens']
        if overlap >= target:
            raise PreconditionError(f"overlap_tokens ({overlap}) must be smaller than target_chunk_tokens ({target})")
        counter = self.token_counter or (embedder.count_tokens if embedder is not None else count_words)
        return target, overlap, counter


@dataclass(frozen=True)
class GapSeries:
    """Similarity across each inter-sentence gap g = 0..S-2."""
    scores: np.ndarray
    smoothed: np.ndarray
    depths: np.ndarray


def _protected(line: str, end: int) -> bool:
    """True when the '.' ending at ``end`` closes an abbreviation."""
    lowered = line[:end + 1].lower()
    for entry in abbreviations():
        if lowered.endswith(entry):
            start = len(lowered) - len(entry)
            if start == 0 or lowered[start - 1].isspace() or lowered[start - 1] == '(':
                return True
    return False


def split_sentences(text: str) -> List[Sentence]:
    """
    Split text into sentences.

    A sentence ends at '.', '!' or '?' followed by whitespace and an uppercase
    letter or digit, unless the period closes a listed abbreviation. Every line
    break ends a sentence.

    Returns:
        Sentences in order; empty text gives []
    """
    sentences = []
    for line_match in _LINE_RE.finditer(text or ''):
        line = line_match.group(0)
        offset = line_match.start()
        start = 0
        for candidate in _CANDIDATE_RE.finditer(line):
            end = candidate.start()
            if line[end] == '.' and _protected(line, end):
                continue
            _append_span(sentences, line, offset, start, end + 1)
            start = end + 1
        _append_span(sentences, line, offset, start, len(line))
    return sentences


def _append_span(sentences: List[Sentence], line: str, offset: int, start: int, end: int):
    span = line[start:end]
    stripped = span.strip()
    if not stripped:
        return
    lead = len(span) - len(span.lstrip())
    begin = offset + start + lead
    sentences.append(Sentence(text=stripped, start=begin, end=begin + len(stripped)))


def _texts(sentences: Sequence[Union[str, Sentence]]) -> List[str]:
    return [s.text if isinstance(s, Sentence) else s for s in sentences]


def moving_average(values: np.ndarray, width: int) -> np.ndarray:
    """Centered moving average whose window shrinks at the edges."""
    half = width // 2
    n = len(values)
    return np.array([values[max(0, i - half):min(n, i + half + 1)].mean() for i in range(n)], dtype=np.float64)


def depth_scores(smoothed: np.ndarray) -> np.ndarray:
    """
    TextTiling depth at each local minimum, 0 elsewhere.

    A local minimum is no higher than each existing neighbour and strictly lower
    than at least one. Its depth is the climb to the nearest peak on the left
    plus the climb to the nearest peak on the right.
    """
    n = len(smoothed)
    depths = np.zeros(n, dtype=np.float64)
    for g in range(n):
        value = smoothed[g]
        neighbours = [smoothed[i] for i in (g - 1, g + 1) if 0 <= i < n]
        if not neighbours or not all(value <= nb for nb in neighbours) or not any(value < nb for nb in neighbours):
            continue
        left = g
        while left > 0 and smoothed[left - 1] >= smoothed[left]:
            left -= 1
        right = g
        while right < n - 1 and smoothed[right + 1] >= smoothed[right]:
            right += 1
        depths[g] = (smoothed[left] - value) + (smoothed[right] - value)
    return depths


def compute_gap_series(sentences: Sequence[Union[str, Sentence]], embedder: Embedder,
                       cfg: Optional[SeosConfig] = None) -> GapSeries:
    """
    Embedding similarity across every gap between sentences.

    The left window holds up to ``window_w`` sentences ending at the gap, the
    right window up to ``window_w`` sentences after it. All windows of a
    document are embedded in one batch.

    Args:
        sentences: Sentence list (two or more)
        embedder: Embedder
        cfg: SEOS configuration

    Returns:
        GapSeries
    """
    cfg = cfg or SeosConfig()
    texts = _texts(sentences)
    count = len(texts)
    if count < 2:
        raise NothingToSegmentError("nothing to segment: need at least two sentences")

    w = cfg.window_w
    gaps = range(count - 1)
    lefts = [' '.join(texts[max(0, g - w + 1):g + 1]) for g in gaps]
    rights = [' '.join(texts[g + 1:min(count - 1, g + w) + 1]) for g in gaps]

    vectors = np.asarray(embedder.embed(lefts + rights), dtype=np.float64)
    left, right = vectors[:count - 1], vectors[count - 1:]
    norms = np.linalg.norm(left, axis=1) * np.linalg.norm(right, axis=1)
    scores = np.clip(np.einsum('ij,ij->i', left, right) / np.where(norms == 0.0, 1.0, norms), -1.0, 1.0)

    smoothed = moving_average(scores, cfg.smoothing_width)
    return GapSeries(scores=scores, smoothed=smoothed, depths=depth_scores(smoothed))


def detect_boundaries(series: GapSeries, cfg: Optional[SeosConfig] = None) -> Tuple[int, ...]:
    """
    Gaps whose depth clears mean - c * std of the positive depths.

    Boundaries closer than ``min_boundary_distance`` gaps are pruned, keeping
    the deeper one (the earlier gap on equal depth).

    Returns:
        Sorted gap indices; empty when no depth is positive
    """
    cfg = cfg or SeosConfig()
    depths = np.asarray(series.depths, dtype=np.float64)
    positive = depths[depths > 0]
    if positive.size == 0:
        return ()

    threshold = positive.mean() - cfg.depth_coefficient * positive.std()
    candidates = [g for g in range(len(depths)) if depths[g] > 0 and depths[g] >= threshold]

    kept = []
    for g in sorted(candidates, key=lambda gap: (-depths[gap], gap)):
        if all(abs(g - other) >= cfg.min_boundary_distance for other in kept):
            kept.append(g)
    return tuple(sorted(kept))


def _segments(sentences: List[str], boundaries: Sequence[int]) -> List[List[str]]:
    segments = []
    start = 0
    for gap in sorted(boundaries):
        segments.append(sentences[start:gap + 1])
        start = gap + 1
    segments.append(sentences[start:])
    return [segment for segment in segments if segment]


def _pack(sentences: List[str], target: int, counter: Callable[[str], int]) -> List[Tuple[List[str], bool]]:
    """Greedy packing into runs of at most ``target`` tokens; an oversized sentence stands alone."""
    packed = []
    current, current_tokens = [], 0
    for sentence in sentences:
        tokens = counter(sentence)
        if tokens > target:
            if current:
                packed.append((current, False))
                current, current_tokens = [], 0
            packed.append(([sentence], True))
            continue
        if current and current_tokens + tokens > target:
            packed.append((current, False))
            current, current_tokens = [], 0
        current.append(sentence)
        current_tokens += tokens
    if current:
        packed.append((current, False))
    return packed


def sentence_overlap(previous: Sequence[str], overlap_tokens: int, counter: Callable[[str], int]) -> str:
    """Trailing whole sentences of ``previous`` totalling at most ``overlap_tokens``."""
    taken = []
    total = 0
    for sentence in reversed(previous):
        tokens = counter(sentence)
        if total + tokens > overlap_tokens:
            break
        taken.append(sentence)
        total += tokens
    return ' '.join(reversed(taken))


def document_metadata(doc: Document) -> Dict[str, Any]:
    return {
        'title': doc.title,
        'pub_year': doc.pub_year,
        'source_category': doc.source_category.value if doc.source_category else None
    }


@timeit(performance_tracker, "chunk_document")
def chunk_document(doc: Document, embedder: Embedder, cfg: Optional[SeosConfig] = None,
                   extra_metadata: Optional[Mapping[str, Any]] = None) -> List[Chunk]:
    """
    Split a document into SEOS chunks.

    Topic boundaries from the gap series cut the sentence list into segments;
    each segment is packed into chunks of complete sentences; every chunk after
    the first carries the trailing sentences of its predecessor as overlap.

    Args:
        doc: Document (full text for PMC articles, abstract otherwise)
        embedder: Embedder for the gap series; also supplies default sizes
        cfg: SEOS configuration
        extra_metadata: Values merged into every chunk's metadata

    Returns:
        Chunks in document order; [] for empty text
    """
    cfg = cfg or SeosConfig()
    target, overlap, counter = cfg.resolve(embedder)

    sentences = _texts(split_sentences(doc.retrieval_text()))
    if not sentences:
        return []

    boundaries = ()
    if len(sentences) >= 2:
        boundaries = detect_boundaries(compute_gap_series(sentences, embedder, cfg), cfg)

    base = document_metadata(doc)
    base.update(extra_metadata or {})
    base['method'] = 'seos'

    chunks = []
    previous: List[str] = []
    for segment_index, segment in enumerate(_segments(sentences, boundaries)):
        for run, oversized in _pack(segment, target, counter):
            prefix = sentence_overlap(previous, overlap, counter) if chunks and overlap > 0 else ''
            core = ' '.join(run)
            metadata = dict(base, segment_index=segment_index)
            if oversized:
                metadata['oversized'] = True
            text = f"{prefix} {core}" if prefix else core
            chunks.append(Chunk(doc_id=doc.pmid, chunk_index=len(chunks), core_text=core,
                                overlap_prefix=prefix, token_count=counter(text), metadata=metadata))
            previous = run

    logger.debug(f"Document {doc.pmid}: {len(sentences)} sentences, {len(boundaries)} boundaries, {len(chunks)} chunks")
    return chunks


def fixed_splitter(text: str, chunk_tokens: int, overlap_tokens: int,
                   doc_id: str = '0', token_counter: Callable[[str], int] = count_words,
                   metadata: Optional[Mapping[str, Any]] = None) -> List[Chunk]:
    """
    Sentence-preferring fixed-size splitter.

    Complete sentences are packed greedily up to ``chunk_tokens``; a sentence
    longer than that is cut into word pieces. Each chunk after the first is
    prefixed with the last ``overlap_tokens`` words of the previous core.

    Args:
        text: Input text
        chunk_tokens: Core budget in tokens
        overlap_tokens: Overlap in words (< chunk_tokens)
        doc_id: Document id stored on the chunks
        token_counter: Token counter for the budget
        metadata: Metadata copied onto every chunk

    Returns:
        Chunks in order
    """
    if chunk_tokens < 1:
        raise PreconditionError("chunk_tokens must be positive")
    if not 0 <= overlap_tokens < chunk_tokens:
        raise PreconditionError("overlap_tokens must be in [0, chunk_tokens)")

    pieces = []
    for sentence in _texts(split_sentences(text)):
        if token_counter(sentence) <= chunk_tokens:
            pieces.append(sentence)
            continue
        words = sentence.split()
        pieces.extend(' '.join(words[i:i + chunk_tokens]) for i in range(0, len(words), chunk_tokens))

    chunks = []
    previous_core = ''
    for run, _ in _pack(pieces, chunk_tokens, token_counter):
        core = ' '.join(run)
        prefix = ''
        if chunks and overlap_tokens > 0:
            prefix = ' '.join(previous_core.split()[-overlap_tokens:])
        chunk_text = f"{prefix} {core}" if prefix else core
        chunks.append(Chunk(doc_id=doc_id, chunk_index=len(chunks), core_text=core, overlap_prefix=prefix,
                            token_count=token_counter(chunk_text), metadata=dict(metadata or {}, method='fixed')))
        previous_core = core
    return chunks


def chunk_document_fixed(doc: Document, chunk_tokens: int, overlap_tokens: int,
                         token_counter: Callable[[str], int] = count_words,
                         extra_metadata: Optional[Mapping[str, Any]] = None) -> List[Chunk]:
    metadata = document_metadata(doc)
    metadata.update(extra_metadata or {})
    return fixed_splitter(doc.retrieval_text(), chunk_tokens, overlap_tokens, doc_id=doc.pmid,
                          token_counter=token_counter, metadata=metadata)


class DocumentChunker:
    """Chunking strategy chosen by the run configuration (SEOS or fixed-size)."""

    def __init__(self, method: str, embedder: Embedder, cfg: Optional[SeosConfig] = None):
        if method not in ('seos', 'fixed'):
            raise PreconditionError(f"unknown chunking method: {method}")
        self.method = method
        self.embedder = embedder
        self.cfg = cfg or SeosConfig()

    @classmethod
    def from_section(cls, section, embedder: Embedder) -> 'DocumentChunker':
        return cls(section.method, embedder, SeosConfig.from_section(section))

    def __call__(self, doc: Document, extra_metadata: Optional[Mapping[str, Any]] = None) -> List[Chunk]:
        if self.method == 'seos':
            return chunk_document(doc, self.embedder, self.cfg, extra_metadata)
        target, overlap, counter = self.cfg.resolve(self.embedder)
        return chunk_document_fixed(doc, target, overlap, counter, extra_metadata)
