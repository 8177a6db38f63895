import math
from datetime import date

import numpy as np
import pytest

from eutils_client import ESearchResult
from exceptions import DimensionMismatchError, LadderExecutionError, PipelineError, PreconditionError, TransportError
from models.corpus import Chunk, EvidenceCategory, EvidenceItem, SourceCategory
from models.embedding import HashEmbedder, VectorIndex
from models.query_rewrite import generate_ladder_rule_based, normalize
from models.retrieval import (BM25, DocumentPool, EmbeddingReranker, HsrdrConfig, HttpReranker, OverlapReranker,
                              Reranker, assemble_context, bm25_search, build_reranker, chunk_key, hsrdr_retrieve,
                              partition_evidence, passage_text, rank_chunks, two_stage_retrieve,
                              with_evidence_metadata)

TERM_PMIDS = ['90000003', '90000004', '90000001', '90000002', '90000006', '90000007']


def rewriter(query):
    return generate_ladder_rule_based(normalize(query))


def semantic_index(docs, pmids, embedder):
    wanted = [doc for doc in docs if doc.pmid in pmids]
    return VectorIndex.build([doc.pmid for doc in wanted], [f"{doc.title} {doc.abstract}" for doc in wanted], embedder)


class StubEUtils:
    """esearch answers from ``search``; efetch serves the corpus for PubMed and nothing for PMC."""

    def __init__(self, corpus_xml, search):
        self.corpus_xml = corpus_xml
        self.search = search
        self.fetched = []

    def esearch(self, db, term, retmax=20, date_range=None):
        return self.search(term)

    def efetch(self, db, ids):
        self.fetched.append((db, list(ids)))
        return self.corpus_xml if db == 'pubmed' else b''


@pytest.fixture
def corpus_xml(fixtures_dir):
    return (fixtures_dir / 'corpus.xml').read_bytes()


def chunk(doc_id, index, text, **metadata):
    prefix = 'x' if index else ''
    return Chunk(doc_id=doc_id, chunk_index=index, core_text=text, overlap_prefix=prefix, metadata=metadata)


# ---------------------------------------------------------------------------
# HSRDR

def test_partition_evidence():
    categories = partition_evidence(['1', '2'], ['2', '3'])
    assert categories == {'1': EvidenceCategory.E1, '2': EvidenceCategory.E3, '3': EvidenceCategory.E2}
    assert list(categories) == ['1', '2', '3']


def test_hsrdr_merges_both_paths(corpus_docs, embedder, eutils):
    index = semantic_index(corpus_docs, {'90000003', '90000005'}, embedder)

    pool = hsrdr_retrieve('aspirin colorectal cancer prevention', index, embedder, eutils, rewriter,
                          HsrdrConfig(k_semantic=2))

    assert {doc.pmid for doc in pool.documents} == set(TERM_PMIDS) | {'90000005'}
    assert pool.category_of('90000003') == EvidenceCategory.E3
    assert pool.category_of('90000005') == EvidenceCategory.E1
    assert pool.category_of('90000007') == EvidenceCategory.E2
    assert pool.level_used == 0
    assert pool.ladder_counts == (6,)
    assert not pool.term_path_failed


def test_hsrdr_applies_date_and_source_filters(corpus_docs, embedder, eutils):
    index = semantic_index(corpus_docs, {'90000005', '90000008'}, embedder)

    dated = hsrdr_retrieve('aspirin cancer', index, embedder, eutils, rewriter,
                           HsrdrConfig(date_range=(date(2018, 1, 1), None)))
    assert {doc.pmid for doc in dated.documents} == {'90000001', '90000002', '90000004', '90000006', '90000007'}

    d1_only = hsrdr_retrieve('aspirin cancer', index, embedder, eutils, rewriter,
                             HsrdrConfig(sources_enabled={'D1'}))
    assert {doc.pmid for doc in d1_only.documents} == {'90000001', '90000003', '90000005', '90000007', '90000008'}
    assert all(doc.source_category == SourceCategory.D1 for doc in d1_only.documents)


def test_hsrdr_term_path_only(eutils):
    pool = hsrdr_retrieve('aspirin cancer', None, None, eutils, rewriter)
    assert [doc.pmid for doc in pool.documents] == TERM_PMIDS
    assert set(pool.evidence_category_by_pmid.values()) == {EvidenceCategory.E2}


def test_hsrdr_degrades_when_term_path_fails(corpus_docs, corpus_xml, embedder):
    def failing(term):
        raise TransportError('esearch down', attempts=4)

    index = semantic_index(corpus_docs, {'90000001', '90000008'}, embedder)
    pool = hsrdr_retrieve('melanoma', index, embedder, StubEUtils(corpus_xml, failing), rewriter)

    assert pool.term_path_failed
    assert {doc.pmid for doc in pool.documents} == {'90000001', '90000008'}
    assert set(pool.evidence_category_by_pmid.values()) == {EvidenceCategory.E1}


def test_hsrdr_raises_when_nothing_can_be_searched(corpus_xml):
    def failing(term):
        raise TransportError('esearch down', attempts=4)

    with pytest.raises(LadderExecutionError):
        hsrdr_retrieve('melanoma', None, None, StubEUtils(corpus_xml, failing), rewriter)


def test_hsrdr_empty_pool(corpus_xml):
    eutils = StubEUtils(corpus_xml, lambda term: ESearchResult(pmids=(), total_count=0))

    pool = hsrdr_retrieve('rare lymphoma', None, None, eutils, rewriter)

    assert pool.documents == ()
    assert eutils.fetched == []


def test_hsrdr_dimension_mismatch(corpus_docs, embedder, eutils):
    index = semantic_index(corpus_docs, {'90000001'}, embedder)
    with pytest.raises(DimensionMismatchError):
        hsrdr_retrieve('melanoma', index, HashEmbedder(dim=128), eutils, rewriter)


def test_hsrdr_config_validation(run_config):
    with pytest.raises(PreconditionError):
        HsrdrConfig(sources_enabled=frozenset())
    with pytest.raises(PreconditionError):
        HsrdrConfig(min_docs=0)

    cfg = HsrdrConfig.from_run_config(run_config)
    assert cfg.sources_enabled == frozenset(SourceCategory)
    assert cfg.date_range is None


def test_pool_to_json(eutils):
    record = hsrdr_retrieve('aspirin cancer', None, None, eutils, rewriter).to_json()
    assert record['documents'] == TERM_PMIDS
    assert record['source_categories']['90000002'] == 'D2'
    assert record['semantic_pmids'] == []
    assert record['level_used'] == 0


# ---------------------------------------------------------------------------
# Rerankers

class TableReranker(Reranker):
    def __init__(self, table):
        self.table = table

    def score(self, query, passage):
        return self.table[passage]


def test_overlap_reranker():
    reranker = OverlapReranker()
    assert reranker.score('aspirin cancer', 'Aspirin lowers cancer risk') == 1.0
    assert reranker.score('aspirin melanoma', 'Aspirin lowers cancer risk') == 0.5
    assert reranker.score('???', 'anything') == 0.0


class FakeSession:
    def __init__(self, payload):
        self.payload = payload
        self.bodies = []

    def post(self, url, json=None, timeout=None):
        self.bodies.append(json)
        payload = self.payload

        class Response:
            status_code = 200

            def json(self):
                return payload

        return Response()


def test_http_reranker_request_and_reply():
    session = FakeSession({'scores': [0.2, 0.9]})
    reranker = HttpReranker('http://rerank.test', model='medcpt-cross', session=session)

    assert reranker.score_batch('q', ['a', 'b']) == [0.2, 0.9]
    assert session.bodies == [{'query': 'q', 'passages': ['a', 'b'], 'model': 'medcpt-cross'}]
    assert reranker.score_batch('q', []) == []


def test_http_reranker_score_count_mismatch():
    reranker = HttpReranker('http://rerank.test', session=FakeSession({'scores': [0.2]}))
    with pytest.raises(PipelineError):
        reranker.score_batch('q', ['a', 'b'])


def test_build_reranker(embedder):
    assert build_reranker(None) is None
    assert isinstance(build_reranker('overlap'), OverlapReranker)
    assert isinstance(build_reranker('embedding', embedder), EmbeddingReranker)
    assert isinstance(build_reranker('http', url='http://rerank.test'), HttpReranker)
    for name, kwargs in [('embedding', {}), ('http', {}), ('cross', {})]:
        with pytest.raises(PreconditionError):
            build_reranker(name, **kwargs)


# ---------------------------------------------------------------------------
# Two-stage retrieval

def passages():
    return [
        chunk('1', 0, 'aspirin lowers colorectal cancer risk', source_category='D1', evidence_category='E3'),
        chunk('1', 1, 'aspirin users had fewer adenomas'),
        chunk('2', 0, 'pembrolizumab improves melanoma survival'),
        chunk('3', 0, 'statins and breast cancer recurrence'),
    ]


def test_two_stage_dense_only(embedder):
    results = two_stage_retrieve('pembrolizumab improves melanoma survival', passages(), embedder, k_dense=4, k_final=2)

    assert [item.rank for item in results] == [1, 2]
    assert results[0].key == ('2', 0)
    assert results[0].score == pytest.approx(1.0, abs=1e-5)


def test_two_stage_evidence_fields(embedder):
    top = two_stage_retrieve('aspirin lowers colorectal cancer risk', passages(), embedder, k_dense=2, k_final=1)[0]
    assert top.key == ('1', 0)
    assert top.evidence_category == EvidenceCategory.E3
    assert top.source_category == SourceCategory.D1


def test_two_stage_reranker_replaces_dense_order(embedder):
    chunks = passages()
    table = {c.text: score for c, score in zip(chunks, [0.1, 0.4, 0.3, 0.9])}

    results = two_stage_retrieve('aspirin', chunks, embedder, TableReranker(table), k_dense=4, k_final=3)

    assert [item.key for item in results] == [('3', 0), ('1', 1), ('2', 0)]
    assert [item.score for item in results] == [0.9, 0.4, 0.3]


def test_embedding_reranker_with_same_embedder_keeps_order(embedder):
    plain = two_stage_retrieve('aspirin cancer risk', passages(), embedder, k_dense=4, k_final=4)
    reranked = two_stage_retrieve('aspirin cancer risk', passages(), embedder, EmbeddingReranker(embedder),
                                  k_dense=4, k_final=4)
    assert [item.key for item in reranked] == [item.key for item in plain]


def test_two_stage_preconditions(embedder):
    with pytest.raises(PreconditionError):
        two_stage_retrieve('q', passages(), embedder, k_dense=2, k_final=3)
    assert two_stage_retrieve('q', [], embedder) == []


def test_rank_chunks_ties_by_document_then_index():
    scored = [(chunk('2', 0, 'a'), 1.0), (chunk('1', 1, 'b'), 1.0), (chunk('1', 0, 'c'), 1.0), (chunk('9', 0, 'd'), 2.0)]
    assert [item.key for item in rank_chunks(scored, 3)] == [('9', 0), ('1', 0), ('1', 1)]


def test_chunk_key_orders_like_chunk_identity():
    assert chunk_key(chunk('12', 2, 'a')) < chunk_key(chunk('12', 10, 'a')) < chunk_key(chunk('13', 0, 'a'))


def test_passage_text_metadata_lead():
    assert passage_text(chunk('1', 0, 'body', title='T', pub_year=2020), True) == 'T (2020). body'
    assert passage_text(chunk('1', 0, 'body', title='T'), True) == 'T. body'
    assert passage_text(chunk('1', 0, 'body'), True) == 'body'
    assert passage_text(chunk('1', 0, 'body', title='T'), False) == 'body'


# ---------------------------------------------------------------------------
# BM25

def test_bm25_scores():
    bm25 = BM25([['a', 'b'], ['b', 'c'], ['a', 'a', 'd']])
    scores = bm25.get_scores(['a'])

    idf = math.log((3 - 2 + 0.5) / (2 + 0.5) + 1.0)
    norm = 1.0 - 0.75 + 0.75 * (2 / (7 / 3))
    assert scores[0] == pytest.approx(idf * 2.2 / (1 + 1.2 * norm))
    assert scores[1] == 0.0
    assert scores[2] > scores[0]


def test_bm25_repeated_query_terms_count_each_time():
    chunks = passages()
    once = bm25_search('aspirin', chunks, k=4)
    twice = bm25_search('aspirin aspirin', chunks, k=4)
    assert twice[0].score == pytest.approx(2 * once[0].score)


def test_bm25_search_ranking():
    results = bm25_search('melanoma survival', passages(), k=2)
    assert results[0].key == ('2', 0)
    assert [item.rank for item in results] == [1, 2]


def test_bm25_search_preconditions():
    with pytest.raises(PreconditionError):
        bm25_search('q', passages(), k=0)
    assert bm25_search('q', [], k=3) == []


# ---------------------------------------------------------------------------
# Context assembly

def context_store():
    return {
        ('1', 0): chunk('1', 0, 'One two three. Four five six. Seven eight.', pub_year=2020, source_category='D1'),
        ('2', None): Chunk(doc_id='2', chunk_index=0, core_text='Nine ten.', metadata={}),
    }


def test_assemble_context_blocks_in_rank_order():
    evidence = [EvidenceItem(doc_id='2', score=0.5, rank=2, source_category=SourceCategory.D2),
                EvidenceItem(doc_id='1', chunk_index=0, score=0.9, rank=1)]

    context = assemble_context(evidence, context_store(), budget_tokens=100)

    assert context == ('[1] (1, 2020, D1) One two three. Four five six. Seven eight.\n\n'
                       '[2] (2, n.d., D2) Nine ten.')


def test_assemble_context_stops_at_budget():
    evidence = [EvidenceItem(doc_id='1', chunk_index=0, score=0.9, rank=1), EvidenceItem(doc_id='2', score=0.5, rank=2)]
    context = assemble_context(evidence, context_store(), budget_tokens=13)
    assert context == '[1] (1, 2020, D1) One two three. Four five six. Seven eight.'


@pytest.mark.parametrize('budget, expected', [
    (8, '[1] (1, 2020, D1) One two three.'),
    (11, '[1] (1, 2020, D1) One two three. Four five six.'),
    (2, '[1] (1, 2020, D1) One two three.'),
])
def test_assemble_context_cuts_first_block_to_sentences(budget, expected):
    evidence = [EvidenceItem(doc_id='1', chunk_index=0, score=0.9, rank=1), EvidenceItem(doc_id='2', score=0.5, rank=2)]
    assert assemble_context(evidence, context_store(), budget_tokens=budget) == expected


def test_assemble_context_preconditions():
    evidence = [EvidenceItem(doc_id='7', score=0.1, rank=1)]
    with pytest.raises(PreconditionError):
        assemble_context(evidence, context_store())
    with pytest.raises(PreconditionError):
        assemble_context([], context_store(), budget_tokens=0)
    assert assemble_context([], context_store()) == ''


def test_with_evidence_metadata():
    pool = DocumentPool(documents=(), evidence_category_by_pmid={'1': EvidenceCategory.E2},
                        semantic_pmids=frozenset(), term_pmids=frozenset({'1'}))

    tagged = with_evidence_metadata([chunk('1', 0, 'a', title='T'), chunk('5', 0, 'b')], pool)

    assert tagged[0].metadata == {'title': 'T', 'evidence_category': 'E2'}
    assert tagged[1].metadata['evidence_category'] is None


# ---------------------------------------------------------------------------
# Randomized checks

def test_partition_is_exact_on_random_sets():
    rng = np.random.default_rng(23)
    for _ in range(1000):
        semantic = [str(p) for p in rng.choice(40, size=int(rng.integers(0, 15)), replace=False)]
        term = [str(p) for p in rng.choice(40, size=int(rng.integers(0, 15)), replace=False)]

        categories = partition_evidence(semantic, term)

        by_category = {c: {p for p, cat in categories.items() if cat == c} for c in EvidenceCategory}
        assert by_category[EvidenceCategory.E3] == set(semantic) & set(term)
        assert by_category[EvidenceCategory.E1] == set(semantic) - set(term)
        assert by_category[EvidenceCategory.E2] == set(term) - set(semantic)
        assert set(categories) == set(semantic) | set(term)


def bm25_oracle(corpus, query, k1=1.2, b=0.75):
    vocabulary = sorted({term for doc in corpus for term in doc} | set(query))
    counts = np.array([[doc.count(term) for term in vocabulary] for doc in corpus], dtype=np.float64)
    lengths = counts.sum(axis=1)
    df = (counts > 0).sum(axis=0)
    idf = np.log((len(corpus) - df + 0.5) / (df + 0.5) + 1.0)
    norm = 1.0 - b + b * lengths / lengths.mean()
    weights = idf * counts * (k1 + 1.0) / (counts + k1 * norm[:, None])
    query_counts = np.array([query.count(term) for term in vocabulary], dtype=np.float64)
    return weights @ query_counts


def test_bm25_matches_oracle_on_random_corpora():
    rng = np.random.default_rng(29)
    vocabulary = [f'w{i}' for i in range(12)]
    for _ in range(100):
        corpus = [[vocabulary[i] for i in rng.integers(0, 12, size=int(rng.integers(1, 20)))]
                  for _ in range(int(rng.integers(1, 12)))]
        query = [vocabulary[i] for i in rng.integers(0, 12, size=int(rng.integers(1, 6)))]

        scores = BM25(corpus).get_scores(query)

        assert scores == pytest.approx(bm25_oracle(corpus, query).tolist(), abs=1e-9)


def test_dropping_d3_never_adds_documents(corpus_docs, corpus_xml, embedder):
    rng = np.random.default_rng(43)
    pmids = [doc.pmid for doc in corpus_docs]
    for _ in range(40):
        term = tuple(pmid for pmid in pmids if rng.random() < 0.5)
        eutils = StubEUtils(corpus_xml, lambda text: ESearchResult(pmids=term, total_count=len(term)))
        index = semantic_index(corpus_docs, {pmid for pmid in pmids if rng.random() < 0.5} or {pmids[0]}, embedder)
        others = {source for source in ('D1', 'D2') if rng.random() < 0.7} or {'D1'}

        def pool_for(sources):
            pool = hsrdr_retrieve('aspirin cancer', index, embedder, eutils, rewriter,
                                  HsrdrConfig(sources_enabled=sources, k_semantic=3))
            return {doc.pmid for doc in pool.documents}

        assert pool_for(others) <= pool_for(others | {'D3'})


class OrderKeepingReranker(Reranker):
    """Scores candidates in the order they arrive, so stage two changes nothing."""

    def score(self, query, passage):
        raise NotImplementedError

    def score_batch(self, query, passages):
        return [float(len(passages) - i) for i in range(len(passages))]


def test_identity_reranker_equals_dense_argsort(embedder):
    rng = np.random.default_rng(47)
    vocabulary = [f'word{i}' for i in range(60)]
    for _ in range(100):
        n = int(rng.integers(1, 30))
        chunks = [Chunk(doc_id=str(i // 3), chunk_index=i % 3,
                        core_text=' '.join(rng.choice(vocabulary, size=int(rng.integers(3, 12)))))
                  for i in range(n)]
        query = ' '.join(rng.choice(vocabulary, size=4))
        k_dense = int(rng.integers(1, 25))
        k_final = int(rng.integers(1, k_dense + 1))

        vectors = embedder.embed([c.text for c in chunks]).astype(np.float64)
        scores = vectors @ embedder.embed_one(query).astype(np.float64)
        order = sorted(range(n), key=lambda i: (-scores[i], chunks[i].doc_id, chunks[i].chunk_index))
        expected = [chunks[i].key for i in order[:k_final]]

        plain = two_stage_retrieve(query, chunks, embedder, k_dense=k_dense, k_final=k_final)
        reranked = two_stage_retrieve(query, chunks, embedder, OrderKeepingReranker(), k_dense=k_dense,
                                      k_final=k_final)

        assert [item.key for item in plain] == expected
        assert [item.key for item in reranked] == expected
