from datetime import date

import numpy as np
import pytest

from exceptions import NothingToSegmentError, PreconditionError
from models.corpus import Document, SourceCategory
from models.embedding import HashEmbedder
from models.seos import (DocumentChunker, GapSeries, SeosConfig, chunk_document, chunk_document_fixed,
                         compute_gap_series, depth_scores, detect_boundaries, fixed_splitter, moving_average,
                         sentence_overlap, split_sentences)

ASPIRIN = 'Aspirin lowers colorectal cancer risk.'
MELANOMA = 'Melanoma responds to pembrolizumab.'


def abstract_doc(text, pmid='1'):
    return Document(pmid=pmid, title='T', pub_date=date(2020, 1, 1), abstract=text,
                    source_category=SourceCategory.D1)


def two_topic_text():
    return ' '.join([ASPIRIN] * 3 + [MELANOMA] * 3)


def series_for(depths):
    depths = np.asarray(depths, dtype=np.float64)
    return GapSeries(scores=depths, smoothed=depths, depths=depths)


# ---------------------------------------------------------------------------
# Sentence splitting

def test_split_sentences_terminators():
    text = 'Patients took drugs, e.g. Aspirin daily. Results improved! Was it safe? Yes 2 times.'
    assert [s.text for s in split_sentences(text)] == [
        'Patients took drugs, e.g. Aspirin daily.', 'Results improved!', 'Was it safe?', 'Yes 2 times.'
    ]


def test_split_sentences_abbreviations_and_lowercase():
    text = 'Smith et al. Reported a pH of 7.4 in vivo. then it fell. Fig. 2 shows this.'
    assert [s.text for s in split_sentences(text)] == [
        'Smith et al. Reported a pH of 7.4 in vivo. then it fell.', 'Fig. 2 shows this.'
    ]


def test_split_sentences_line_breaks_and_spans():
    text = 'Introduction\n  Checkpoint inhibitors work. They are toxic.\n\nConclusion'
    sentences = split_sentences(text)

    assert [s.text for s in sentences] == ['Introduction', 'Checkpoint inhibitors work.', 'They are toxic.',
                                           'Conclusion']
    assert all(text[s.start:s.end] == s.text for s in sentences)


def test_split_sentences_empty():
    assert split_sentences('') == []
    assert split_sentences(' \n ') == []


# ---------------------------------------------------------------------------
# Gap series and boundaries

def test_moving_average_shrinks_at_edges():
    assert moving_average(np.array([1.0, 2.0, 3.0, 4.0]), 3).tolist() == [1.5, 2.0, 3.0, 3.5]
    assert moving_average(np.array([1.0, 5.0]), 1).tolist() == [1.0, 5.0]


def test_depth_scores_at_local_minima():
    depths = depth_scores(np.array([0.9, 0.5, 0.8, 0.2, 0.7]))
    assert depths == pytest.approx([0.0, 0.7, 0.0, 1.1, 0.0])


def test_depth_scores_flat_series():
    assert depth_scores(np.array([0.5, 0.5, 0.5])).tolist() == [0.0, 0.0, 0.0]


@pytest.mark.parametrize('coefficient, distance, expected', [
    (0.5, 2, (3,)),
    (2.0, 2, (1, 3)),
    (2.0, 3, (3,)),
])
def test_detect_boundaries_threshold_and_pruning(coefficient, distance, expected):
    cfg = SeosConfig(depth_coefficient=coefficient, min_boundary_distance=distance)
    assert detect_boundaries(series_for([0.0, 0.7, 0.0, 1.1, 0.0]), cfg) == expected


def test_detect_boundaries_without_positive_depth():
    assert detect_boundaries(series_for([0.0, 0.0])) == ()


def test_gap_series_finds_topic_shift():
    sentences = [ASPIRIN] * 3 + [MELANOMA] * 3
    cfg = SeosConfig(window_w=1, smoothing_width=1)

    series = compute_gap_series(sentences, HashEmbedder(dim=1024), cfg)

    assert len(series.scores) == 5
    assert int(np.argmin(series.scores)) == 2
    assert series.scores[0] == pytest.approx(1.0)
    assert detect_boundaries(series, cfg) == (2,)


def test_gap_series_needs_two_sentences(embedder):
    with pytest.raises(NothingToSegmentError):
        compute_gap_series(['Only one.'], embedder)


# ---------------------------------------------------------------------------
# SEOS chunking

def test_chunk_document_respects_topics_and_overlap():
    cfg = SeosConfig(window_w=1, smoothing_width=1, target_chunk_tokens=10, overlap_tokens=5)

    chunks = chunk_document(abstract_doc(two_topic_text()), HashEmbedder(dim=1024), cfg)

    assert [c.core_text for c in chunks] == [f'{ASPIRIN} {ASPIRIN}', ASPIRIN, f'{MELANOMA} {MELANOMA}', MELANOMA]
    assert [c.overlap_prefix for c in chunks] == ['', ASPIRIN, ASPIRIN, MELANOMA]
    assert [c.chunk_index for c in chunks] == [0, 1, 2, 3]
    assert [c.metadata['segment_index'] for c in chunks] == [0, 0, 1, 1]
    assert chunks[1].token_count == 10


def test_chunk_cores_partition_the_text(corpus_docs, embedder):
    cfg = SeosConfig(target_chunk_tokens=20, overlap_tokens=6)
    for doc in corpus_docs:
        chunks = chunk_document(doc, embedder, cfg)
        sentences = [s.text for s in split_sentences(doc.retrieval_text())]
        assert ' '.join(c.core_text for c in chunks) == ' '.join(sentences)
        assert all(c.doc_id == doc.pmid for c in chunks)
        assert all(len(c.overlap_prefix.split()) <= 6 for c in chunks)


def test_chunk_document_metadata(embedder):
    chunk = chunk_document(abstract_doc(ASPIRIN), embedder, extra_metadata={'dataset': 'demo'})[0]
    assert chunk.metadata == {'title': 'T', 'pub_year': 2020, 'source_category': 'D1', 'dataset': 'demo',
                              'method': 'seos', 'segment_index': 0}


def test_oversized_sentence_stands_alone(embedder):
    cfg = SeosConfig(target_chunk_tokens=3, overlap_tokens=1)
    chunks = chunk_document(abstract_doc(f'{ASPIRIN} Yes.'), embedder, cfg)

    assert chunks[0].core_text == ASPIRIN
    assert chunks[0].metadata['oversized'] is True
    assert chunks[1].core_text == 'Yes.'
    assert chunks[1].overlap_prefix == ''


def test_chunk_document_empty_text(embedder):
    doc = Document(pmid='2', title='No abstract', pub_date=None)
    assert chunk_document(doc, embedder) == []


def test_sentence_overlap_takes_whole_sentences():
    previous = ['One two three.', 'Four five.']
    assert sentence_overlap(previous, 2, lambda s: len(s.split())) == 'Four five.'
    assert sentence_overlap(previous, 5, lambda s: len(s.split())) == 'One two three. Four five.'
    assert sentence_overlap(previous, 1, lambda s: len(s.split())) == ''


def test_seos_config_defaults_follow_embedder(embedder):
    assert SeosConfig().resolve(embedder)[:2] == (128, 32)
    assert SeosConfig().resolve(HashEmbedder(family='general'))[:2] == (512, 32)
    assert SeosConfig(target_chunk_tokens=64).resolve(embedder)[:2] == (64, 32)
    with pytest.raises(PreconditionError):
        SeosConfig(overlap_tokens=200).resolve(embedder)


@pytest.mark.parametrize('kwargs', [
    {'window_w': 0},
    {'smoothing_width': 2},
    {'target_chunk_tokens': 10, 'overlap_tokens': 10},
    {'overlap_tokens': -1},
])
def test_seos_config_validation(kwargs):
    with pytest.raises(PreconditionError):
        SeosConfig(**kwargs)


# ---------------------------------------------------------------------------
# Fixed-size splitter

FIXED_TEXT = 'One two three four. Five six seven. Eight nine ten eleven twelve thirteen.'


def test_fixed_splitter_packs_and_cuts():
    chunks = fixed_splitter(FIXED_TEXT, chunk_tokens=4, overlap_tokens=2, doc_id='9')

    assert [c.core_text for c in chunks] == ['One two three four.', 'Five six seven.', 'Eight nine ten eleven',
                                             'twelve thirteen.']
    assert [c.overlap_prefix for c in chunks] == ['', 'three four.', 'six seven.', 'ten eleven']
    assert chunks[1].token_count == 5
    assert {c.metadata['method'] for c in chunks} == {'fixed'}


def test_fixed_splitter_without_overlap():
    chunks = fixed_splitter(FIXED_TEXT, chunk_tokens=512, overlap_tokens=0)
    assert len(chunks) == 1
    assert chunks[0].text == FIXED_TEXT


@pytest.mark.parametrize('chunk_tokens, overlap_tokens', [(0, 0), (4, 4), (4, -1)])
def test_fixed_splitter_preconditions(chunk_tokens, overlap_tokens):
    with pytest.raises(PreconditionError):
        fixed_splitter(FIXED_TEXT, chunk_tokens, overlap_tokens)


def test_document_chunker_dispatch(embedder):
    doc = abstract_doc(FIXED_TEXT)
    fixed = DocumentChunker('fixed', embedder, SeosConfig(target_chunk_tokens=4, overlap_tokens=2))

    assert fixed(doc) == chunk_document_fixed(doc, 4, 2)
    assert fixed(doc)[0].metadata['title'] == 'T'
    assert DocumentChunker('seos', embedder)(doc)[0].metadata['method'] == 'seos'
    with pytest.raises(PreconditionError):
        DocumentChunker('paragraph', embedder)


# ---------------------------------------------------------------------------
# Generated corpora

def random_sentence(rng, pool, length):
    words = [pool[i] for i in rng.integers(0, len(pool), size=length)]
    return ' '.join([words[0].capitalize()] + words[1:]) + '.'


def topic_pool(name, size=20):
    return [f'{name}term{i}' for i in range(size)]


def test_boundary_found_near_topic_change():
    rng = np.random.default_rng(11)
    pools = (topic_pool('alpha'), topic_pool('beta'))
    embedder = HashEmbedder(dim=256, seed=0)

    hits = 0
    trials = 200
    for _ in range(trials):
        first, second = (int(n) for n in rng.integers(5, 16, size=2))
        sentences = ([random_sentence(rng, pools[0], int(rng.integers(6, 11))) for _ in range(first)]
                     + [random_sentence(rng, pools[1], int(rng.integers(6, 11))) for _ in range(second)])
        boundaries = detect_boundaries(compute_gap_series(sentences, embedder))
        hits += any(abs(gap - (first - 1)) <= 1 for gap in boundaries)

    assert hits / trials >= 0.95


@pytest.fixture(scope='module')
def random_docs():
    rng = np.random.default_rng(5)
    pools = [topic_pool(name, 40) for name in ('gamma', 'delta', 'omega')]
    docs = []
    for n in range(1000):
        sentences = []
        for _ in range(int(rng.integers(1, 4))):
            pool = pools[int(rng.integers(0, len(pools)))]
            sentences.extend(random_sentence(rng, pool, int(rng.integers(3, 25)))
                             for _ in range(int(rng.integers(1, 15))))
        docs.append(abstract_doc(' '.join(sentences), pmid=str(n)))
    return docs


def test_seos_cores_reproduce_sentences(random_docs, embedder):
    for doc in random_docs:
        chunks = chunk_document(doc, embedder, SeosConfig(target_chunk_tokens=40, overlap_tokens=12))
        sentences = [s.text for s in split_sentences(doc.abstract)]
        assert ' '.join(c.core_text for c in chunks) == ' '.join(sentences)
        assert [c.chunk_index for c in chunks] == list(range(len(chunks)))


def test_fixed_cores_reproduce_words(random_docs):
    for doc in random_docs:
        for chunk_tokens, overlap_tokens in ((16, 0), (16, 4), (64, 32)):
            chunks = fixed_splitter(doc.abstract, chunk_tokens, overlap_tokens, doc_id=doc.pmid)
            assert ' '.join(c.core_text for c in chunks).split() == doc.abstract.split()
            assert all(len(c.core_text.split()) <= chunk_tokens for c in chunks)
            assert all(len(c.overlap_prefix.split()) <= overlap_tokens for c in chunks)


def test_bert_family_budgets(random_docs, embedder):
    assert embedder.family == 'bert_family'
    for doc in random_docs:
        for chunk in chunk_document(doc, embedder):
            if not chunk.metadata.get('oversized'):
                assert len(chunk.core_text.split()) <= 128
            assert len(chunk.overlap_prefix.split()) <= 32


def sentences_per_core(chunks, sentences):
    """Split the document's sentence list back into each chunk's core."""
    remaining = list(sentences)
    per_core = []
    for chunk in chunks:
        taken = []
        while ' '.join(taken) != chunk.core_text:
            taken.append(remaining.pop(0))
        per_core.append(taken)
    assert not remaining
    return per_core


def test_overlap_prefix_is_whole_sentence_suffix_of_previous_core(random_docs, embedder):
    cfg = SeosConfig(target_chunk_tokens=40, overlap_tokens=12)
    for doc in random_docs:
        chunks = chunk_document(doc, embedder, cfg)
        per_core = sentences_per_core(chunks, [s.text for s in split_sentences(doc.abstract)])

        for previous, chunk in zip(per_core, chunks[1:]):
            suffixes = {' '.join(previous[len(previous) - m:]) for m in range(len(previous) + 1)}
            assert chunk.overlap_prefix in suffixes
            assert len(chunk.overlap_prefix.split()) <= 12
