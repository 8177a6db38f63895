"""
Evaluation metrics and experiment tables.

This module provides:
1. Hits@k and MRR@k over retrieval judgments
2. Per-category RRF, rank-position entropy and top-5 proportions for
   evidence (E1/E2/E3) and source (D1/D2/D3) categories
3. Accuracy and macro precision/recall/F1 for answer runs
4. Question filtering by MeSH neoplasm terms, hard-negative sets and
   synthetic query-evidence pairs
5. Report tables shaped like the category, splitter-grid and source-ablation tables
"""
import re
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

import config
from exceptions import GenerationError, PreconditionError
from models.corpus import Chunk, EvidenceCategory, EvidenceItem, SourceCategory, evidence_from_json, evidence_to_json
from models.generation import ABSTAIN, GenerationClient, load_prompt
from utils.logger import setup_logger
from utils.text import read_word_list

logger = setup_logger("evaluation")

EVIDENCE_CATEGORIES = tuple(EvidenceCategory)
SOURCE_CATEGORIES = tuple(SourceCategory)

RRF_ROW = 'RRF Score'
ENTROPY_ROW = 'Information Entropy'
PROPORTION_ROW = 'Proportion in Top 5'
CATEGORY_ROWS = (RRF_ROW, ENTROPY_ROW, PROPORTION_ROW)

RelevantId = Tuple[str, Optional[int]]


@dataclass(frozen=True)
class RetrievalJudgment:
    """Ranked results of one query with the ids judged relevant."""

    query_id: str
    relevant_ids: FrozenSet[RelevantId]
    results: Tuple[EvidenceItem, ...] = ()
    query: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'relevant_ids', frozenset(self.relevant_ids))
        object.__setattr__(self, 'results', tuple(sorted(self.results, key=lambda item: item.rank)))
        ranks = [item.rank for item in self.results]
        if ranks != list(range(1, len(ranks) + 1)):
            raise ValueError(f"{self.query_id}: results must be ranked 1..n, got {ranks}")

    def is_relevant(self, item: EvidenceItem) -> bool:
        """A document-level relevant id (chunk None) matches every chunk of that document."""
        return item.key in self.relevant_ids or (item.doc_id, None) in self.relevant_ids

    def first_relevant_rank(self, k: int) -> Optional[int]:
        for item in self.results[:k]:
            if self.is_relevant(item):
                return item.rank
        return None


def _check_k(k: int):
    if k < 1:
        raise PreconditionError("k must be at least 1")


def hits_at_k(judgment: RetrievalJudgment, k: int) -> int:
    """1 if any of the top-k results is relevant, else 0."""
    _check_k(k)
    return 1 if judgment.first_relevant_rank(k) is not None else 0


def mrr_at_k(judgment: RetrievalJudgment, k: int) -> float:
    """Reciprocal rank of the first relevant result within the top k, else 0."""
    _check_k(k)
    rank = judgment.first_relevant_rank(k)
    return 1.0 / rank if rank is not None else 0.0


def mean_hits_at_k(judgments: Sequence[RetrievalJudgment], k: int) -> float:
    return float(np.mean([hits_at_k(j, k) for j in judgments])) if judgments else 0.0


def mean_mrr_at_k(judgments: Sequence[RetrievalJudgment], k: int) -> float:
    return float(np.mean([mrr_at_k(j, k) for j in judgments])) if judgments else 0.0


def evaluate_retrieval(judgments: Sequence[RetrievalJudgment], k: int = config.EVAL_DEFAULTS['k']) -> Dict[str, Any]:
    return {
        'k': k,
        'queries': len(judgments),
        f'hits@{k}': mean_hits_at_k(judgments, k),
        f'mrr@{k}': mean_mrr_at_k(judgments, k)
    }


def _resolve_categories(categories: Sequence) -> Tuple[Any, ...]:
    """
    Category members of a single family; names such as 'D1' or 'E3' are coerced.

    Raises:
        PreconditionError: unknown name or a mix of source and evidence categories
    """
    resolved = []
    for category in categories:
        if isinstance(category, (SourceCategory, EvidenceCategory)):
            resolved.append(category)
        elif category in {c.value for c in SourceCategory}:
            resolved.append(SourceCategory(category))
        elif category in {c.value for c in EvidenceCategory}:
            resolved.append(EvidenceCategory(category))
        else:
            raise PreconditionError(f"unknown category {category!r}")
    if len({type(category) for category in resolved}) > 1:
        raise PreconditionError("categories mix source (D*) and evidence (E*) families")
    return tuple(resolved)


def _category(item: EvidenceItem, categories: Sequence):
    """Category of ``item`` within the family that ``categories`` lists."""
    if categories and isinstance(categories[0], SourceCategory):
        return item.source_category
    return item.evidence_category


def _top(results: Iterable[EvidenceItem], top: int) -> List[EvidenceItem]:
    return [item for item in results if item.rank <= top]


def rrf_by_category(results: Sequence[Sequence[EvidenceItem]],
                    categories: Sequence = EVIDENCE_CATEGORIES,
                    kappa: float = config.EVAL_DEFAULTS['rrf_kappa'],
                    top: int = config.EVAL_DEFAULTS['top_window']) -> Dict[Any, float]:
    """
    Reciprocal rank fusion score per category.

    Sums 1 / (kappa + rank) over every top-``top`` item of every query.
    """
    categories = _resolve_categories(categories)
    scores = {category: 0.0 for category in categories}
    for ranked in results:
        for item in _top(ranked, top):
            category = _category(item, categories)
            if category in scores:
                scores[category] += 1.0 / (kappa + item.rank)
    return scores


def entropy_by_category(results: Sequence[Sequence[EvidenceItem]],
                        categories: Sequence = EVIDENCE_CATEGORIES,
                        top: int = config.EVAL_DEFAULTS['top_window']) -> Dict[Any, float]:
    """
    Shannon entropy (natural log) of the rank positions each category occupies.

    Positions are pooled over all queries; a category never seen scores 0.
    """
    categories = _resolve_categories(categories)
    histograms = {category: np.zeros(top, dtype=np.float64) for category in categories}
    for ranked in results:
        for item in _top(ranked, top):
            category = _category(item, categories)
            if category in histograms:
                histograms[category][item.rank - 1] += 1.0

    entropies = {}
    for category, histogram in histograms.items():
        total = histogram.sum()
        if total == 0:
            entropies[category] = 0.0
            continue
        p = histogram[histogram > 0] / total
        entropies[category] = float(-(p * np.log(p)).sum())
    return entropies


def proportion_top5(results: Sequence[Sequence[EvidenceItem]],
                    categories: Sequence = EVIDENCE_CATEGORIES,
                    top: int = config.EVAL_DEFAULTS['top_window']) -> Dict[Any, float]:
    """Share of the pooled top-``top`` items (those carrying a category of the family) per category."""
    categories = _resolve_categories(categories)
    counts = {category: 0 for category in categories}
    for ranked in results:
        for item in _top(ranked, top):
            category = _category(item, categories)
            if category in counts:
                counts[category] += 1
    total = sum(counts.values())
    return {category: (count / total if total else 0.0) for category, count in counts.items()}


@dataclass(frozen=True)
class CategoryReport:
    categories: Tuple[Any, ...]
    rrf: Mapping[Any, float]
    entropy: Mapping[Any, float]
    proportion_top5: Mapping[Any, float]

    def rows(self) -> Dict[str, Dict[str, float]]:
        return {
            RRF_ROW: {c.value: self.rrf[c] for c in self.categories},
            ENTROPY_ROW: {c.value: self.entropy[c] for c in self.categories},
            PROPORTION_ROW: {c.value: self.proportion_top5[c] for c in self.categories}
        }


def category_report(results: Sequence[Sequence[EvidenceItem]],
                    categories: Sequence = EVIDENCE_CATEGORIES,
                    kappa: float = config.EVAL_DEFAULTS['rrf_kappa'],
                    top: int = config.EVAL_DEFAULTS['top_window']) -> CategoryReport:
    categories = _resolve_categories(categories)
    return CategoryReport(categories=tuple(categories),
                          rrf=rrf_by_category(results, categories, kappa, top),
                          entropy=entropy_by_category(results, categories, top),
                          proportion_top5=proportion_top5(results, categories, top))


def category_table(reports: Mapping[str, CategoryReport]) -> pd.DataFrame:
    """
    Rows (dataset, metric) for RRF Score, Information Entropy and Proportion in Top 5;
    one column per category.
    """
    frames = []
    for dataset, report in reports.items():
        frame = pd.DataFrame.from_dict(report.rows(), orient='index')
        frame = frame.reindex(index=list(CATEGORY_ROWS), columns=[c.value for c in report.categories])
        frame.index = pd.MultiIndex.from_product([[dataset], frame.index], names=['dataset', 'metric'])
        frames.append(frame)
    return pd.concat(frames)


def classification_metrics(predictions: Sequence[str], gold: Sequence[str],
                           classes: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """
    Accuracy and macro-averaged precision, recall and F1.

    A class that is never predicted contributes precision 0 (logged).
    Predictions outside ``classes`` (abstentions) only count as errors.
    """
    if len(predictions) != len(gold):
        raise PreconditionError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if not gold:
        raise PreconditionError("classification metrics need at least one example")

    labels = list(classes) if classes is not None else sorted(set(gold))
    never_predicted = [label for label in labels if label not in set(predictions)]
    if never_predicted:
        logger.warning(f"No predictions for class(es) {never_predicted}; their precision counts as 0")

    precision, recall, f1, _ = precision_recall_fscore_support(
        list(gold), list(predictions), labels=labels, average='macro', zero_division=0
    )
    return {
        'accuracy': float(accuracy_score(list(gold), list(predictions))),
        'precision': float(precision),
        'recall': float(recall),
        'f1': float(f1)
    }


def load_term_list(path) -> List[str]:
    """Terms of a '|'-separated synonym file, one concept per line."""
    terms = []
    for line in read_word_list(path):
        terms.extend(part.strip() for part in line.split('|') if part.strip())
    return terms


def _term_pattern(terms: Sequence[str]) -> re.Pattern:
    escaped = sorted({r'\s+'.join(re.escape(word) for word in term.split()) for term in terms},
                     key=lambda pattern: (-len(pattern), pattern))
    return re.compile(r'(?<!\w)(?:' + '|'.join(escaped) + r')(?!\w)', re.IGNORECASE)


def mesh_filter(questions: Sequence[Mapping[str, Any]], term_list: Sequence[str]) -> List[Mapping[str, Any]]:
    """
    Questions mentioning any term as a whole word, in the question or its options.

    Args:
        questions: Records with 'question' and optional 'options'
        term_list: Terms and synonyms

    Returns:
        Matching records in input order
    """
    terms = [term for term in term_list if term and term.strip()]
    if not terms:
        raise PreconditionError("term list is empty")
    pattern = _term_pattern(terms)

    kept = []
    for record in questions:
        options = record.get('options') or []
        if isinstance(options, Mapping):
            options = list(options.values())
        haystack = '\n'.join([record.get('question', '')] + [str(option) for option in options])
        if pattern.search(haystack):
            kept.append(record)
    logger.info(f"MeSH filter kept {len(kept)} of {len(questions)} questions")
    return kept


def _is_wrong(record: Mapping[str, Any]) -> bool:
    answer = record.get('answer', ABSTAIN)
    return answer in (None, ABSTAIN) or answer != record.get('gold')


def hard_negative_set(run_a: Sequence[Mapping[str, Any]], run_b: Sequence[Mapping[str, Any]]) -> List[str]:
    """
    Question ids both runs answered wrongly (abstentions are wrong).

    Raises:
        PreconditionError: the runs cover different question ids
    """
    a = {str(record['id']): record for record in run_a}
    b = {str(record['id']): record for record in run_b}
    if set(a) != set(b):
        difference = sorted(set(a) ^ set(b))
        raise PreconditionError(f"runs cover different question ids: {difference}")
    return sorted(qid for qid in a if _is_wrong(a[qid]) and _is_wrong(b[qid]))


def synthetic_pairs(chunks: Sequence[Chunk], generator: GenerationClient, n: int,
                    seed: int = 0) -> List[RetrievalJudgment]:
    """
    Generate one question per sampled chunk; the chunk is its only relevant id.

    Chunks whose generation fails or comes back empty are skipped and tallied.
    """
    if n < 1:
        raise PreconditionError("n must be positive")
    if n > len(chunks):
        raise PreconditionError(f"cannot sample {n} chunks from a corpus of {len(chunks)}")

    rng = np.random.default_rng(seed)
    picked = rng.choice(len(chunks), size=n, replace=False)

    system = load_prompt('synthetic_question_system')
    template = load_prompt('synthetic_question_user')
    judgments = []
    failed = empty = 0
    for position in picked:
        chunk = chunks[int(position)]
        try:
            question = generator.generate(system, template.format(passage=chunk.text)).strip()
        except GenerationError as e:
            logger.debug(f"Generation failed for chunk {chunk.key}: {e}")
            failed += 1
            continue
        if not question:
            empty += 1
            continue
        judgments.append(RetrievalJudgment(query_id=f"syn-{len(judgments) + 1:04d}",
                                           relevant_ids=frozenset({chunk.key}), query=question))
    if failed or empty:
        logger.warning(f"Skipped {failed + empty} chunk(s): {failed} generation failure(s), {empty} empty question(s)")
    return judgments


def judgment_to_json(judgment: RetrievalJudgment) -> Dict[str, Any]:
    return {
        'query_id': judgment.query_id,
        'query': judgment.query,
        'relevant_ids': [[doc_id, chunk_index] for doc_id, chunk_index in
                         sorted(judgment.relevant_ids, key=lambda rid: (rid[0], -1 if rid[1] is None else rid[1]))],
        'results': [evidence_to_json(item) for item in judgment.results]
    }


def judgment_from_json(record: Mapping[str, Any],
                       results: Optional[Sequence[EvidenceItem]] = None) -> RetrievalJudgment:
    relevant = []
    for entry in record.get('relevant_ids', []):
        if isinstance(entry, (list, tuple)):
            doc_id, chunk_index = entry[0], (entry[1] if len(entry) > 1 else None)
        else:
            doc_id, chunk_index = entry, None
        relevant.append((str(doc_id), int(chunk_index) if chunk_index is not None else None))
    if results is None:
        results = [evidence_from_json(item) for item in record.get('results', [])]
    return RetrievalJudgment(query_id=str(record['query_id']), relevant_ids=frozenset(relevant),
                             results=tuple(results), query=record.get('query', ''))


def retrieval_grid_table(rows: Sequence[Mapping[str, Any]], k: int = config.EVAL_DEFAULTS['k'],
                         row_key: str = 'splitter', column_key: str = 'retriever') -> pd.DataFrame:
    """
    Grid table: one row per ``row_key`` value, (``column_key`` value, metric) columns.

    Args:
        rows: Records with row_key, column_key, 'hits@k' and 'mrr@k'
        k: Cutoff the metrics were computed at
        row_key: Field naming the table rows (splitter, or embedder)
        column_key: Field naming the column groups (retriever, or reranker)
    """
    frame = pd.DataFrame(rows)
    frame = frame.melt(id_vars=[row_key, column_key], value_vars=[f'hits@{k}', f'mrr@{k}'], var_name='metric')
    return frame.pivot_table(index=row_key, columns=[column_key, 'metric'], values='value', sort=False)


def ablation_table(rows: Mapping[str, Mapping[str, float]]) -> pd.DataFrame:
    """One row per source subset with accuracy and macro precision, recall and F1."""
    table = pd.DataFrame.from_dict(rows, orient='index')[['accuracy', 'precision', 'recall', 'f1']]
    table.columns = ['Accuracy', 'Precision', 'Recall', 'F1']
    table.index.name = 'sources'
    return table


def table_to_json(table: pd.DataFrame) -> Dict[str, Any]:
    """Index, columns and values in a deterministic JSON-friendly layout."""
    def label(value):
        return list(value) if isinstance(value, tuple) else value

    return {
        'index': [label(value) for value in table.index],
        'columns': [label(value) for value in table.columns],
        'data': [[None if pd.isna(value) else float(value) for value in row] for row in table.to_numpy()]
    }


def render_table(table: pd.DataFrame) -> str:
    return table.to_string(float_format=lambda value: f"{value:.4f}")
