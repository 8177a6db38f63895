"""
Document and passage retrieval.

This module provides:
1. Hybrid semantic + term-based document retrieval (HSRDR) with evidence categories
2. Rerankers: term overlap, bi-encoder re-scoring and an HTTP reranking service
3. Two-stage passage retrieval (exact dense search, then reranking)
4. Okapi BM25 over chunks as the sparse baseline
5. Context assembly under a token budget
"""
import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, replace
from datetime import date
from typing import Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import requests

import config
from exceptions import (DimensionMismatchError, LadderExecutionError, PartialFetchError, PipelineError,
                        PreconditionError, TransportError)
from models.corpus import (Chunk, Document, EvidenceCategory, EvidenceItem, SourceCategory, attach_full_text,
                           filter_documents, parse_pmc_xml, parse_pubmed_xml)
from models.embedding import Embedder, VectorIndex
from models.query_rewrite import LadderResult, QueryLadder, execute_ladder
from models.seos import split_sentences
from utils.connection_manager import ConnectionManager
from utils.logger import setup_logger
from utils.performance import performance_tracker, timeit
from utils.text import count_words, tokenize_terms

logger = setup_logger("retrieval")


@dataclass(frozen=True)
class HsrdrConfig:
    sources_enabled: FrozenSet[SourceCategory] = frozenset(SourceCategory)
    min_docs: int = config.HSRDR_DEFAULTS['min_docs']
    retmax_term: int = config.HSRDR_DEFAULTS['retmax_term']
    k_semantic: int = config.HSRDR_DEFAULTS['k_semantic']
    date_range: Optional[Tuple[Optional[date], Optional[date]]] = None
    require_abstract: bool = config.HSRDR_DEFAULTS['require_abstract']

    def __post_init__(self):
        object.__setattr__(self, 'sources_enabled', frozenset(SourceCategory(s) for s in self.sources_enabled))
        if not self.sources_enabled:
            raise PreconditionError("at least one source category must be enabled")
        if min(self.min_docs, self.retmax_term, self.k_semantic) < 1:
            raise PreconditionError("min_docs, retmax_term and k_semantic must be positive")

    @classmethod
    def from_run_config(cls, run_config) -> 'HsrdrConfig':
        sources = run_config.sources
        date_range = None
        if sources.min_date or sources.max_date:
            date_range = (sources.min_date, sources.max_date)
        return cls(sources_enabled=frozenset(sources.enabled),
                   min_docs=run_config.rewrite.min_docs,
                   retmax_term=run_config.eutils.retmax,
                   k_semantic=run_config.index.k_semantic,
                   date_range=date_range,
                   require_abstract=sources.require_abstract)


@dataclass(frozen=True)
class DocumentPool:
    """Documents retrieved for one query and how each was found."""

    documents: Tuple[Document, ...]
    evidence_category_by_pmid: Mapping[str, EvidenceCategory]
    semantic_pmids: FrozenSet[str]
    term_pmids: FrozenSet[str]
    level_used: Optional[int] = None
    term_path_failed: bool = False
    ladder: Optional[QueryLadder] = None
    ladder_counts: Tuple[Optional[int], ...] = ()

    def category_of(self, pmid: str) -> Optional[EvidenceCategory]:
        return self.evidence_category_by_pmid.get(pmid)

    def to_json(self) -> Dict[str, object]:
        return {
            'documents': [doc.pmid for doc in self.documents],
            'evidence_categories': {pmid: cat.value for pmid, cat in sorted(self.evidence_category_by_pmid.items())},
            'source_categories': {doc.pmid: doc.source_category.value for doc in self.documents},
            'semantic_pmids': sorted(self.semantic_pmids),
            'term_pmids': sorted(self.term_pmids),
            'level_used': self.level_used,
            'ladder_counts': list(self.ladder_counts),
            'term_path_failed': self.term_path_failed
        }


def partition_evidence(semantic: Sequence[str], term: Sequence[str]) -> Dict[str, EvidenceCategory]:
    """
    Evidence category of every retrieved PMID.

    E3 is found by both paths, E1 by the semantic path only, E2 by the term path
    only. Keys follow semantic order, then term order.
    """
    semantic_set, term_set = set(semantic), set(term)
    categories = {}
    for pmid in list(semantic) + list(term):
        if pmid in categories:
            continue
        if pmid in semantic_set and pmid in term_set:
            categories[pmid] = EvidenceCategory.E3
        elif pmid in semantic_set:
            categories[pmid] = EvidenceCategory.E1
        else:
            categories[pmid] = EvidenceCategory.E2
    return categories


def _fetch_documents(eutils, pmids: Sequence[str]) -> List[Document]:
    try:
        xml = eutils.efetch('pubmed', pmids)
    except PartialFetchError as e:
        logger.warning(f"efetch incomplete, continuing with fetched batches: {e}")
        xml = e.partial
    if not xml:
        return []
    return parse_pubmed_xml(xml)


def _attach_pmc_text(eutils, docs: List[Document]) -> List[Document]:
    pmcids = [doc.pmcid for doc in docs
              if doc.source_category in (SourceCategory.D2, SourceCategory.D3) and doc.pmcid]
    if not pmcids:
        return docs
    numeric = [pmcid[3:] if pmcid.upper().startswith('PMC') else pmcid for pmcid in pmcids]
    try:
        xml = eutils.efetch('pmc', numeric)
    except PartialFetchError as e:
        logger.warning(f"PMC full text incomplete: {e}")
        xml = e.partial
    except TransportError as e:
        logger.warning(f"PMC full text unavailable, using abstracts: {e}")
        return docs
    return attach_full_text(docs, parse_pmc_xml(xml)) if xml else docs


@timeit(performance_tracker, "hsrdr_retrieve")
def hsrdr_retrieve(query: str,
                   semantic_index: Optional[VectorIndex],
                   query_embedder: Optional[Embedder],
                   eutils,
                   rewriter: Callable[[str], QueryLadder],
                   cfg: Optional[HsrdrConfig] = None) -> DocumentPool:
    """
    Retrieve candidate documents through both paths.

    Args:
        query: Natural-language question
        semantic_index: Index of abstract embeddings keyed by PMID (None skips the semantic path)
        query_embedder: Embedder matching the index
        eutils: E-Utilities client
        rewriter: Builds the query ladder for the term path
        cfg: Retrieval configuration

    Returns:
        DocumentPool; empty when neither path finds anything
    """
    cfg = cfg or HsrdrConfig()

    semantic: List[str] = []
    if semantic_index is not None and len(semantic_index):
        if query_embedder is None or query_embedder.dim != semantic_index.dim:
            raise DimensionMismatchError("query embedder does not match the semantic index dimension")
        hits = semantic_index.search(query_embedder.embed_one(query), cfg.k_semantic)
        semantic = [pmid for pmid, _ in hits]

    ladder = rewriter(query)
    term: List[str] = []
    result: Optional[LadderResult] = None
    term_path_failed = False
    try:
        result = execute_ladder(
            ladder,
            lambda term_text: eutils.esearch('pubmed', term_text, retmax=cfg.retmax_term, date_range=cfg.date_range),
            min_docs=cfg.min_docs,
            retmax=cfg.retmax_term
        )
        term = list(result.pmids)
    except LadderExecutionError as e:
        if not semantic:
            raise
        logger.warning(f"Term path failed, continuing with the semantic path only: {e}")
        term_path_failed = True

    categories = partition_evidence(semantic, term)
    pool_args = dict(semantic_pmids=frozenset(semantic), term_pmids=frozenset(term),
                     level_used=result.level_used if result else None, term_path_failed=term_path_failed,
                     ladder=ladder, ladder_counts=result.counts if result else ())
    if not categories:
        logger.info("No candidates from either retrieval path")
        return DocumentPool(documents=(), evidence_category_by_pmid={}, **pool_args)

    wanted = list(categories)
    fetched = {doc.pmid: doc for doc in _fetch_documents(eutils, wanted)}
    docs = [fetched[pmid] for pmid in wanted if pmid in fetched]
    min_date, max_date = cfg.date_range or (None, None)
    docs = filter_documents(docs, min_date, max_date, require_abstract=cfg.require_abstract)
    docs = [doc for doc in docs if doc.source_category in cfg.sources_enabled]
    docs = _attach_pmc_text(eutils, docs)

    logger.info(f"Pool: {len(docs)} of {len(wanted)} candidates kept "
                f"(semantic={len(semantic)}, term={len(term)}, level={pool_args['level_used']})")
    return DocumentPool(documents=tuple(docs), evidence_category_by_pmid=categories, **pool_args)


class Reranker(ABC):
    """Scores (query, passage) pairs; higher is more relevant."""

    @abstractmethod
    def score(self, query: str, passage: str) -> float:
        ...

    def score_batch(self, query: str, passages: Sequence[str]) -> List[float]:
        return [self.score(query, passage) for passage in passages]


class OverlapReranker(Reranker):
    """Fraction of distinct query terms present in the passage."""

    def score(self, query: str, passage: str) -> float:
        query_terms = set(tokenize_terms(query))
        if not query_terms:
            return 0.0
        return len(query_terms & set(tokenize_terms(passage))) / len(query_terms)


class EmbeddingReranker(Reranker):
    """Re-scores passages with a bi-encoder; with the stage-one embedder it leaves the order unchanged."""

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    def score(self, query: str, passage: str) -> float:
        return self.score_batch(query, [passage])[0]

    def score_batch(self, query: str, passages: Sequence[str]) -> List[float]:
        if not passages:
            return []
        query_vector = np.asarray(self.embedder.embed_one(query), dtype=np.float64)
        vectors = np.asarray(self.embedder.embed(list(passages)), dtype=np.float32).astype(np.float64)
        return [float(value) for value in vectors @ query_vector]


class HttpReranker(Reranker):
    """Cross-encoder service: POST {"query", "passages"}, reply {"scores"}."""

    def __init__(self, url: str, model: Optional[str] = None,
                 timeout: float = config.EUTILS['timeout'],
                 session: Optional[requests.Session] = None):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()

    def score(self, query: str, passage: str) -> float:
        return self.score_batch(query, [passage])[0]

    def score_batch(self, query: str, passages: Sequence[str]) -> List[float]:
        if not passages:
            return []
        payload = {'query': query, 'passages': list(passages)}
        if self.model:
            payload['model'] = self.model
        manager = ConnectionManager(max_retries=config.RETRY['max_retries'],
                                    backoff_delays=config.RETRY['backoff_delays'])
        response = manager.run(lambda: self.session.post(self.url, json=payload, timeout=self.timeout),
                               description=f"POST {self.url}")
        try:
            scores = [float(value) for value in response.json()['scores']]
        except (ValueError, KeyError, TypeError) as e:
            raise PipelineError(f"unexpected reranker reply: {e}") from e
        if len(scores) != len(passages):
            raise PipelineError(f"reranker returned {len(scores)} scores for {len(passages)} passages")
        return scores


def build_reranker(name: Optional[str], embedder: Optional[Embedder] = None,
                   url: Optional[str] = None) -> Optional[Reranker]:
    """Reranker by configuration name: overlap, embedding, http or None."""
    if name is None:
        return None
    if name == 'overlap':
        return OverlapReranker()
    if name == 'embedding':
        if embedder is None:
            raise PreconditionError("the embedding reranker needs an embedder")
        return EmbeddingReranker(embedder)
    if name == 'http':
        if not url:
            raise PreconditionError("the http reranker needs a url")
        return HttpReranker(url)
    raise PreconditionError(f"unknown reranker: {name}")


def chunk_key(chunk: Chunk) -> str:
    """Index id of a chunk; lexical order equals (doc_id, chunk_index) order."""
    return f"{chunk.doc_id}\x00{chunk.chunk_index:08d}"


def passage_text(chunk: Chunk, embed_metadata: bool = False) -> str:
    """Text a retriever sees for a chunk, optionally led by title and year."""
    if not embed_metadata:
        return chunk.text
    title = chunk.metadata.get('title') or ''
    year = chunk.metadata.get('pub_year')
    lead = f"{title} ({year})" if year else title
    return f"{lead}. {chunk.text}" if lead else chunk.text


def _evidence(chunk: Chunk, score: float, rank: int) -> EvidenceItem:
    evidence = chunk.metadata.get('evidence_category')
    source = chunk.metadata.get('source_category')
    return EvidenceItem(doc_id=chunk.doc_id, chunk_index=chunk.chunk_index, score=float(score), rank=rank,
                        evidence_category=EvidenceCategory(evidence) if evidence else None,
                        source_category=SourceCategory(source) if source else None)


def rank_chunks(scored: Sequence[Tuple[Chunk, float]], k: int) -> List[EvidenceItem]:
    """Sort by score descending, ties by (doc_id, chunk_index), and keep the top k."""
    ordered = sorted(scored, key=lambda pair: (-pair[1], pair[0].doc_id, pair[0].chunk_index))
    return [_evidence(chunk, score, rank) for rank, (chunk, score) in enumerate(ordered[:k], start=1)]


@timeit(performance_tracker, "two_stage_retrieve")
def two_stage_retrieve(query: str,
                       chunks: Sequence[Chunk],
                       embedder: Embedder,
                       reranker: Optional[Reranker] = None,
                       k_dense: int = config.RETRIEVAL_DEFAULTS['k_dense'],
                       k_final: int = config.RETRIEVAL_DEFAULTS['k_final'],
                       embed_metadata_in_text: bool = False) -> List[EvidenceItem]:
    """
    Dense retrieval over chunks followed by optional reranking.

    Stage one ranks chunks by inner product with the query embedding and keeps
    ``k_dense``. Stage two, when a reranker is given, re-sorts those candidates
    by reranker score alone.

    Args:
        query: Query text
        chunks: Candidate chunks
        embedder: Dense retriever
        reranker: Optional stage-two scorer
        k_dense: Candidates kept after stage one
        k_final: Results returned
        embed_metadata_in_text: Prefix passages with title and year

    Returns:
        Up to k_final EvidenceItems ranked from 1
    """
    if k_final > k_dense:
        raise PreconditionError("k_final must not exceed k_dense")
    if not chunks:
        return []

    by_key = {chunk_key(chunk): chunk for chunk in chunks}
    texts = [passage_text(chunk, embed_metadata_in_text) for chunk in by_key.values()]
    index = VectorIndex(embedder.dim, list(by_key), embedder.embed(texts))
    candidates = [(by_key[key], score) for key, score in index.search(embedder.embed_one(query), k_dense)]

    if reranker is None:
        return [_evidence(chunk, score, rank) for rank, (chunk, score) in enumerate(candidates[:k_final], start=1)]

    scores = reranker.score_batch(query, [passage_text(chunk, embed_metadata_in_text) for chunk, _ in candidates])
    return rank_chunks([(chunk, score) for (chunk, _), score in zip(candidates, scores)], k_final)


class BM25:
    """Okapi BM25 over a fixed list of token lists."""

    def __init__(self, corpus_tokens: Sequence[Sequence[str]],
                 k1: float = config.RETRIEVAL_DEFAULTS['bm25_k1'],
                 b: float = config.RETRIEVAL_DEFAULTS['bm25_b']):
        self.k1 = k1
        self.b = b
        self.N = len(corpus_tokens)
        self.doc_len = [len(doc) for doc in corpus_tokens]
        self.avgdl = (sum(self.doc_len) / self.N) if self.N else 0.0
        self.tf = [Counter(doc) for doc in corpus_tokens]
        self.doc_freq = Counter()
        for doc in corpus_tokens:
            self.doc_freq.update(set(doc))
        self.idf = {term: math.log((self.N - df + 0.5) / (df + 0.5) + 1.0) for term, df in self.doc_freq.items()}

    def score(self, query_tokens: Sequence[str], idx: int) -> float:
        tf = self.tf[idx]
        norm = 1.0 - self.b + self.b * (self.doc_len[idx] / self.avgdl if self.avgdl else 0.0)
        total = 0.0
        for term in query_tokens:
            freq = tf.get(term, 0)
            if not freq:
                continue
            total += self.idf[term] * freq * (self.k1 + 1.0) / (freq + self.k1 * norm)
        return total

    def get_scores(self, query_tokens: Sequence[str]) -> List[float]:
        return [self.score(query_tokens, i) for i in range(self.N)]


@timeit(performance_tracker, "bm25_search")
def bm25_search(query: str, chunks: Sequence[Chunk], k: int,
                k1: float = config.RETRIEVAL_DEFAULTS['bm25_k1'],
                b: float = config.RETRIEVAL_DEFAULTS['bm25_b']) -> List[EvidenceItem]:
    """Top-k chunks by Okapi BM25; a repeated query term contributes once per occurrence."""
    if k < 1:
        raise PreconditionError("k must be positive")
    if not chunks:
        return []
    bm25 = BM25([tokenize_terms(chunk.text) for chunk in chunks], k1=k1, b=b)
    scores = bm25.get_scores(tokenize_terms(query))
    return rank_chunks(list(zip(chunks, scores)), k)


def _block_header(item: EvidenceItem, chunk: Chunk) -> str:
    year = chunk.metadata.get('pub_year') or 'n.d.'
    source = chunk.metadata.get('source_category') or (item.source_category.value if item.source_category else 'unknown')
    return f"[{item.rank}] ({item.doc_id}, {year}, {source})"


def assemble_context(evidence: Sequence[EvidenceItem],
                     chunks: Mapping[Tuple[str, Optional[int]], Chunk],
                     budget_tokens: int = config.RETRIEVAL_DEFAULTS['context_budget_tokens'],
                     token_counter: Callable[[str], int] = count_words) -> str:
    """
    Evidence blocks in rank order within a token budget.

    Each block reads ``[rank] (pmid, year, source) text``; blocks are separated
    by blank lines and the budget counts block tokens only. The rank-1 block is
    always present, cut to whole sentences (at least one) when it alone exceeds
    the budget.
    """
    if budget_tokens < 1:
        raise PreconditionError("budget_tokens must be positive")

    blocks = []
    used = 0
    for position, item in enumerate(sorted(evidence, key=lambda e: e.rank)):
        chunk = chunks.get(item.key)
        if chunk is None:
            raise PreconditionError(f"no chunk for evidence {item.key}")
        header = _block_header(item, chunk)
        block = f"{header} {chunk.text}"
        tokens = token_counter(block)
        if position == 0 and tokens > budget_tokens:
            sentences = [s.text for s in split_sentences(chunk.text)] or [chunk.text]
            kept = [sentences[0]]
            for sentence in sentences[1:]:
                if token_counter(f"{header} {' '.join(kept + [sentence])}") > budget_tokens:
                    break
                kept.append(sentence)
            blocks.append(f"{header} {' '.join(kept)}")
            break
        if used + tokens > budget_tokens:
            break
        blocks.append(block)
        used += tokens
    return '\n\n'.join(blocks)


def with_evidence_metadata(chunks: Sequence[Chunk], pool: DocumentPool) -> List[Chunk]:
    """Copy each chunk's document evidence category into its metadata."""
    tagged = []
    for chunk in chunks:
        category = pool.category_of(chunk.doc_id)
        metadata = dict(chunk.metadata, evidence_category=category.value if category else None)
        tagged.append(replace(chunk, metadata=metadata))
    return tagged
