"""
Query pipeline coordination.

This module provides:
1. The QueryPipeline class that wires retrieval, chunking, reranking and generation
   together from a RunConfig
2. answer_question, the one-call question answering entry point
3. Experiment drivers: splitter x retriever grid, embedder x reranker grid,
   data-source ablation and category reports over answer runs
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import config
from eutils_client import EUtilsClient, build_eutils_client
from exceptions import GenerationError, PartialFetchError, PreconditionError
from models.corpus import (Chunk, Document, EvidenceCategory, EvidenceItem, evidence_from_json, evidence_to_json,
                           parse_pubmed_xml, read_chunks)
from models.embedding import Embedder, VectorIndex, build_embedder, read_index
from models.evaluation import (EVIDENCE_CATEGORIES, RetrievalJudgment, ablation_table, category_report,
                               category_table, classification_metrics, mean_hits_at_k, mean_mrr_at_k,
                               retrieval_grid_table)
from models.generation import ABSTAIN, GenerationClient, answer_prompt, build_generation_client, parse_answer
from models.query_rewrite import QueryLadder, generate_ladder_llm, generate_ladder_rule_based, ladder_to_json, normalize
from models.retrieval import (DocumentPool, HsrdrConfig, Reranker, assemble_context, bm25_search, build_reranker,
                              hsrdr_retrieve, two_stage_retrieve, with_evidence_metadata)
from models.seos import DocumentChunker, SeosConfig, chunk_document, chunk_document_fixed
from utils.logger import setup_logger
from utils.performance import performance_tracker, timeit

logger = setup_logger("pipeline")


def map_ordered(func: Callable, items: Iterable, workers: int = 1) -> List:
    """Apply ``func`` to every item, in parallel when workers > 1; results keep input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def option_list(options) -> Optional[List[str]]:
    """Options as a list; a mapping such as {"A": ..., "B": ...} is read in key order."""
    if not options:
        return None
    if isinstance(options, Mapping):
        return [str(options[key]) for key in sorted(options)]
    return [str(option) for option in options]


def semantic_text(doc: Document) -> str:
    """Text embedded for the semantic document index: title and abstract."""
    return ' '.join(part for part in (doc.title, doc.abstract) if part)


def build_semantic_index(documents: Sequence[Document], embedder: Embedder) -> VectorIndex:
    """Index the abstracts of ``documents`` by PMID."""
    docs = [doc for doc in documents if doc.abstract]
    return VectorIndex.build([doc.pmid for doc in docs], [semantic_text(doc) for doc in docs], embedder)


class QueryPipeline:
    """
    Coordinates one configured run of the query pipeline.

    The pipeline retrieves a document pool (semantic + term paths), chunks it,
    ranks passages, assembles a context and asks the generation client. The
    answer mode selects how much of that runs:
    - cot: no retrieval, the question alone
    - naive_rag: whole text of the top semantic documents
    - optimized: the full retrieve, chunk, rerank path
    """

    def __init__(self, run_config: config.RunConfig,
                 eutils: Optional[EUtilsClient] = None,
                 generation_client: Optional[GenerationClient] = None,
                 semantic_index: Optional[VectorIndex] = None):
        """
        Initialize the pipeline.

        Args:
            run_config: Validated run configuration
            eutils: E-Utilities client (built from the config when omitted)
            generation_client: Language model (built from the config when omitted)
            semantic_index: Document index (read from index.semantic_index when omitted)
        """
        self.run_config = run_config
        self.retrieval_embedder = build_embedder(run_config.retrieval.embedder)
        self.query_embedder = build_embedder(run_config.index.query_embedder)
        self.reranker: Optional[Reranker] = build_reranker(run_config.retrieval.reranker,
                                                           embedder=self.retrieval_embedder,
                                                           url=run_config.retrieval.reranker_url)
        self.chunker = DocumentChunker.from_section(run_config.chunker, self.retrieval_embedder)
        self.hsrdr_config = HsrdrConfig.from_run_config(run_config)
        self._eutils = eutils
        self._generation_client = generation_client

        self.semantic_index = semantic_index
        if self.semantic_index is None and run_config.index.semantic_index is not None:
            self.semantic_index = read_index(run_config.index.semantic_index)

        # persistent pre-chunked corpus; when set, per-query document retrieval is skipped
        self.stored_chunks: Optional[List[Chunk]] = None
        if run_config.retrieval.chunks is not None:
            self.stored_chunks = read_chunks(run_config.retrieval.chunks)
            logger.info(f"Loaded {len(self.stored_chunks)} pre-built chunks")

    @property
    def eutils(self) -> EUtilsClient:
        if self._eutils is None:
            self._eutils = build_eutils_client(self.run_config.eutils)
        return self._eutils

    @property
    def generation_client(self) -> GenerationClient:
        if self._generation_client is None:
            self._generation_client = build_generation_client(self.run_config.generation)
        return self._generation_client

    @property
    def mode(self) -> str:
        return self.run_config.retrieval.mode

    def rewrite(self, query: str) -> QueryLadder:
        """Query ladder for the term path, by language model or by rules."""
        rewrite = self.run_config.rewrite
        if rewrite.mode == 'llm':
            return generate_ladder_llm(query, self.generation_client, max_levels=rewrite.max_levels)
        return generate_ladder_rule_based(normalize(query), rewrite.max_levels)

    def retrieve_documents(self, query: str) -> DocumentPool:
        return hsrdr_retrieve(query, self.semantic_index, self.query_embedder, self.eutils,
                              self.rewrite, self.hsrdr_config)

    def chunk_pool(self, pool: DocumentPool) -> List[Chunk]:
        """Chunk every pooled document, tagging chunks with the document's evidence category."""
        return with_evidence_metadata([chunk for doc in pool.documents for chunk in self.chunker(doc)], pool)

    def rank_passages(self, query: str, chunks: Sequence[Chunk]) -> List[EvidenceItem]:
        retrieval = self.run_config.retrieval
        if retrieval.retriever == 'bm25':
            return bm25_search(query, chunks, retrieval.k_final)
        return two_stage_retrieve(query, chunks, self.retrieval_embedder, self.reranker,
                                  k_dense=retrieval.k_dense, k_final=retrieval.k_final,
                                  embed_metadata_in_text=self.run_config.chunker.embed_metadata_in_text)

    def retrieve(self, query: str) -> Dict[str, Any]:
        """
        Evidence for a query in the configured mode.

        Returns:
            Dictionary with the ladder, pool, evidence, chunk store and context
        """
        retrieval = self.run_config.retrieval
        if self.mode == 'cot':
            return {'ladder': None, 'pool': None, 'evidence': [], 'chunks': {}, 'context': ''}
        if self.mode == 'naive_rag':
            return self._retrieve_naive(query)

        ladder = None
        pool = None
        if self.stored_chunks is not None:
            chunks = self.stored_chunks
        else:
            pool = self.retrieve_documents(query)
            ladder = pool.ladder
            chunks = self.chunk_pool(pool)

        evidence = self.rank_passages(query, chunks)
        store = {chunk.key: chunk for chunk in chunks}
        context = assemble_context(evidence, store, retrieval.context_budget_tokens,
                                   self.retrieval_embedder.count_tokens) if evidence else ''
        return {'ladder': ladder, 'pool': pool, 'evidence': evidence, 'chunks': store, 'context': context}

    def _retrieve_naive(self, query: str) -> Dict[str, Any]:
        """Whole text of the top-k_final semantic documents, unchunked."""
        if self.semantic_index is None:
            raise PreconditionError("naive_rag mode needs index.semantic_index")
        k = self.run_config.retrieval.k_final
        hits = self.semantic_index.search(self.query_embedder.embed_one(query), k)
        pmids = [pmid for pmid, _ in hits]
        try:
            xml = self.eutils.efetch('pubmed', pmids) if pmids else b''
        except PartialFetchError as e:
            logger.warning(f"efetch incomplete: {e}")
            xml = e.partial
        docs = {doc.pmid: doc for doc in parse_pubmed_xml(xml)} if xml else {}

        evidence, store = [], {}
        for pmid, score in hits:
            doc = docs.get(pmid)
            if doc is None or not doc.retrieval_text():
                continue
            item = EvidenceItem(doc_id=pmid, score=score, rank=len(evidence) + 1,
                                evidence_category=EvidenceCategory.E1, source_category=doc.source_category)
            evidence.append(item)
            store[item.key] = Chunk(doc_id=pmid, chunk_index=0, core_text=doc.retrieval_text(),
                                    metadata={'title': doc.title, 'pub_year': doc.pub_year,
                                              'source_category': doc.source_category.value if doc.source_category else None})
        context = assemble_context(evidence, store, self.run_config.retrieval.context_budget_tokens,
                                   self.retrieval_embedder.count_tokens) if evidence else ''
        return {'ladder': None, 'pool': None, 'evidence': evidence, 'chunks': store, 'context': context}

    @timeit(performance_tracker, "answer_question")
    def answer(self, record: Mapping[str, Any]) -> Dict[str, Any]:
        """
        Answer one question record ({"id", "question", "options"?, "gold"?}).

        Returns:
            Run artifact with every intermediate result
        """
        question = record['question']
        options = option_list(record.get('options'))
        retrieved = self.retrieve(question)

        system, user = answer_prompt(question, options, retrieved['context'])
        error = None
        try:
            raw_output = self.generation_client.generate(system, user)
        except GenerationError as e:
            logger.warning(f"Generation failed for question {record.get('id')}: {e}")
            raw_output, error = '', str(e)

        answer = parse_answer(raw_output, options) if options else (raw_output.strip() or ABSTAIN)
        gold = record.get('gold')
        artifact = {
            'id': str(record.get('id', '')),
            'question': question,
            'options': list(options) if options else None,
            'gold': gold,
            'mode': self.mode,
            'ladder': ladder_to_json(retrieved['ladder']) if retrieved['ladder'] else None,
            'pool': retrieved['pool'].to_json() if retrieved['pool'] else None,
            'evidence': [evidence_to_json(item) for item in retrieved['evidence']],
            'context': retrieved['context'],
            'raw_output': raw_output,
            'answer': answer,
            'correct': (answer == gold) if gold is not None else None
        }
        if error:
            artifact['error'] = error
        return artifact


def answer_question(question: str, options: Optional[Sequence[str]], run_config: config.RunConfig,
                    generation_client: GenerationClient, **components) -> Dict[str, Any]:
    """Answer a single question with a fresh pipeline; see QueryPipeline.answer."""
    pipeline = QueryPipeline(run_config, generation_client=generation_client, **components)
    return pipeline.answer({'id': '', 'question': question, 'options': list(options) if options else None})


def _splitters(embedder: Embedder, seos_cfg: SeosConfig) -> List[Tuple[str, Callable[[Document], List[Chunk]]]]:
    splitters = []
    for chunk_tokens, overlap_tokens in config.FIXED_SPLITTER_GRID:
        name = f"{chunk_tokens}Overlap{overlap_tokens}"
        splitters.append((name, lambda doc, c=chunk_tokens, o=overlap_tokens: chunk_document_fixed(doc, c, o)))
    splitters.append(('SEOS', lambda doc: chunk_document(doc, embedder, seos_cfg)))
    return splitters


def _retrieval_rows(judgments: Sequence[RetrievalJudgment], rank: Callable[[str], List[EvidenceItem]],
                    k: int) -> Dict[str, float]:
    ranked = [RetrievalJudgment(j.query_id, j.relevant_ids, tuple(rank(j.query)), j.query) for j in judgments]
    return {f'hits@{k}': mean_hits_at_k(ranked, k), f'mrr@{k}': mean_mrr_at_k(ranked, k)}


def run_splitter_grid(documents: Sequence[Document], judgments: Sequence[RetrievalJudgment],
                      embedder: Embedder, reranker: Optional[Reranker] = None,
                      k: int = config.EVAL_DEFAULTS['k'],
                      k_dense: int = config.RETRIEVAL_DEFAULTS['k_dense'],
                      seos_cfg: Optional[SeosConfig] = None):
    """
    Hits@k and MRR@k for every splitter and retriever combination.

    Splitters: the fixed-size grid rows and SEOS. Retrievers: BM25, dense and
    dense followed by ``reranker``. Judgments should name relevant documents
    (chunk index None) since chunk indexes differ between splitters.

    Returns:
        Grid table (rows splitter, columns (retriever, metric))
    """
    seos_cfg = seos_cfg or SeosConfig()
    k_dense = max(k_dense, k)
    rows = []
    for splitter_name, split in _splitters(embedder, seos_cfg):
        chunks = [chunk for doc in documents for chunk in split(doc)]
        retrievers = [
            ('BM25', lambda q: bm25_search(q, chunks, k)),
            ('Dense', lambda q: two_stage_retrieve(q, chunks, embedder, None, k_dense, k))
        ]
        if reranker is not None:
            retrievers.append(('Dense+Reranker', lambda q: two_stage_retrieve(q, chunks, embedder, reranker, k_dense, k)))
        for retriever_name, rank in retrievers:
            row = {'splitter': splitter_name, 'retriever': retriever_name}
            row.update(_retrieval_rows(judgments, rank, k))
            rows.append(row)
            logger.info(f"{splitter_name} x {retriever_name}: {row}")
    return retrieval_grid_table(rows, k)


def run_retriever_grid(chunks: Sequence[Chunk], judgments: Sequence[RetrievalJudgment],
                       embedders: Mapping[str, Embedder], rerankers: Mapping[str, Optional[Reranker]],
                       k: int = config.EVAL_DEFAULTS['k'],
                       k_dense: int = config.RETRIEVAL_DEFAULTS['k_dense']):
    """Hits@k and MRR@k for every embedder and reranker pair over a fixed chunk set."""
    k_dense = max(k_dense, k)
    rows = []
    for embedder_name, embedder in embedders.items():
        for reranker_name, reranker in rerankers.items():
            row = {'embedder': embedder_name, 'reranker': reranker_name}
            row.update(_retrieval_rows(
                judgments, lambda q: two_stage_retrieve(q, chunks, embedder, reranker, k_dense, k), k))
            rows.append(row)
    return retrieval_grid_table(rows, k, row_key='embedder', column_key='reranker')


def run_source_ablation(questions: Sequence[Mapping[str, Any]], run_config: config.RunConfig,
                        subsets: Mapping[str, Sequence[str]], classes: Optional[Sequence[str]] = None,
                        workers: int = 1, **components):
    """
    Accuracy and macro precision/recall/F1 per enabled source subset.

    Args:
        questions: Multiple-choice question records with 'gold'
        run_config: Base configuration
        subsets: Name -> enabled source categories (e.g. {"D1+D2": ["D1", "D2"]})
        classes: Answer letters to macro-average over
        workers: Parallel questions

    Returns:
        Ablation table (rows subset, columns Accuracy/Precision/Recall/F1)
    """
    rows = {}
    for name, enabled in subsets.items():
        subset_config = config.with_overrides(run_config, {'sources.enabled': list(enabled)})
        pipeline = QueryPipeline(subset_config, **components)
        records = map_ordered(pipeline.answer, questions, workers)
        rows[name] = classification_metrics([r['answer'] for r in records], [r['gold'] for r in records], classes)
    return ablation_table(rows)


def category_reports(runs: Mapping[str, Sequence[Mapping[str, Any]]],
                     categories: Sequence = EVIDENCE_CATEGORIES,
                     kappa: float = config.EVAL_DEFAULTS['rrf_kappa'],
                     top: int = config.EVAL_DEFAULTS['top_window']):
    """Category table over the evidence lists of answer runs, one block per dataset."""
    reports = {}
    for dataset, records in runs.items():
        results = [[evidence_from_json(item) for item in record.get('evidence', [])] for record in records]
        reports[dataset] = category_report(results, categories, kappa, top)
    return category_table(reports)
