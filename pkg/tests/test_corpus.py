from datetime import date

import numpy as np
import pytest

from exceptions import CorpusParseError, InvalidDateRangeError, UnretrievableDocumentError
from models.corpus import (Chunk, Document, EvidenceItem, SourceCategory, attach_full_text, chunk_from_json,
                           chunk_to_json, classify_source, document_from_json, document_to_json, filter_documents,
                           parse_pmc_xml, parse_pubmed_xml, read_documents, write_documents)


def by_pmid(docs):
    return {doc.pmid: doc for doc in docs}


def test_parse_pubmed_fields(pubmed_xml):
    docs = by_pmid(parse_pubmed_xml(pubmed_xml))

    assert list(docs) == ['11111111', '22222222', '33333333', '44444444']
    first = docs['11111111']
    assert first.title == 'Aspirin use and colorectal cancer risk.'
    assert first.abstract == ('BACKGROUND: Aspirin may lower the risk of colorectal cancer. '
                              'RESULTS: Regular use was associated with a lower incidence.')
    assert first.pub_date == date(2020, 3, 15)
    assert first.pmcid is None
    assert first.source_category == SourceCategory.D1


def test_parse_pubmed_classification(pubmed_xml):
    docs = by_pmid(parse_pubmed_xml(pubmed_xml))

    assert docs['22222222'].source_category == SourceCategory.D2
    assert docs['22222222'].pmcid == 'PMC1000002'
    assert docs['33333333'].source_category == SourceCategory.D3
    # bare numeric PMC ids get the PMC prefix
    assert docs['33333333'].pmcid == 'PMC1000003'
    assert docs['44444444'].source_category is None


def test_parse_pubmed_dates(pubmed_xml):
    docs = by_pmid(parse_pubmed_xml(pubmed_xml))

    # earliest of the electronic and issue dates
    assert docs['22222222'].pub_date == date(2018, 9, 2)
    assert docs['33333333'].pub_date == date(2015, 11, 1)
    assert docs['44444444'].pub_date == date(2021, 1, 1)


def test_parse_pubmed_skips_articles_without_pmid(pubmed_xml, caplog):
    with caplog.at_level('WARNING'):
        parse_pubmed_xml(pubmed_xml)
    assert 'Skipped 1 article' in caplog.text


def test_parse_pubmed_malformed_reports_offset():
    with pytest.raises(CorpusParseError) as excinfo:
        parse_pubmed_xml(b'<PubmedArticleSet><PubmedArticle></PubmedArticleSet>')
    assert excinfo.value.byte_offset is not None
    assert 'byte offset' in str(excinfo.value)


def test_parse_pubmed_empty_set():
    assert parse_pubmed_xml(b'<PubmedArticleSet></PubmedArticleSet>') == []


def test_parse_pmc_full_text(fixtures_dir):
    texts = parse_pmc_xml((fixtures_dir / 'pmc_small.xml').read_bytes())

    assert list(texts) == ['PMC1000002']
    assert texts['PMC1000002'].split('\n') == [
        'Introduction',
        'Checkpoint inhibitors target PD-1 and CTLA-4.',
        'Response rates improved markedly. Toxicity remains a concern.',
        'Conclusion',
        'Combination therapy is promising.'
    ]


def test_attach_full_text_and_retrieval_text(pubmed_xml, fixtures_dir):
    docs = parse_pubmed_xml(pubmed_xml)
    texts = parse_pmc_xml((fixtures_dir / 'pmc_small.xml').read_bytes())
    docs = by_pmid(attach_full_text(docs, texts))

    assert docs['22222222'].full_text.startswith('Introduction\n')
    assert docs['22222222'].retrieval_text() == docs['22222222'].full_text
    # D3 without full text falls back to its abstract
    assert docs['33333333'].retrieval_text() == docs['33333333'].abstract
    assert docs['44444444'].retrieval_text() == ''


def test_classify_source_unretrievable():
    doc = Document(pmid='5', title='t', pub_date=None)
    with pytest.raises(UnretrievableDocumentError):
        classify_source(doc)


@pytest.mark.parametrize('kwargs', [
    {'pmid': '', 'title': 't', 'pub_date': None},
    {'pmid': 'PMC12', 'title': 't', 'pub_date': None},
    {'pmid': '1', 'title': 't', 'pub_date': None, 'source_category': 'D2', 'pmcid': 'PMC1'},
    {'pmid': '1', 'title': 't', 'pub_date': None, 'source_category': 'D1'},
])
def test_document_invariants(kwargs):
    with pytest.raises(ValueError):
        Document(**kwargs)


def test_chunk_and_evidence_invariants():
    with pytest.raises(ValueError):
        Chunk(doc_id='1', chunk_index=0, core_text='a', overlap_prefix='b')
    with pytest.raises(ValueError):
        EvidenceItem(doc_id='1', score=1.0, rank=0)
    chunk = Chunk(doc_id='1', chunk_index=1, core_text='core', overlap_prefix='prefix')
    assert chunk.text == 'prefix core'
    assert chunk.key == ('1', 1)


def test_filter_documents(pubmed_xml):
    docs = parse_pubmed_xml(pubmed_xml)

    kept = filter_documents(docs, min_date=date(2018, 1, 1), max_date=date(2020, 12, 31))
    assert [doc.pmid for doc in kept] == ['11111111', '22222222']

    with_abstract = filter_documents(docs, require_abstract=True)
    assert '44444444' not in [doc.pmid for doc in with_abstract]

    undated = Document(pmid='9', title='t', pub_date=None, abstract='a')
    assert filter_documents([undated], min_date=date(2000, 1, 1)) == []
    assert filter_documents([undated], max_date=date(2000, 1, 1)) == [undated]


def test_filter_documents_rejects_inverted_range():
    with pytest.raises(InvalidDateRangeError):
        filter_documents([], min_date=date(2021, 1, 1), max_date=date(2020, 1, 1))


def test_documents_survive_jsonl(tmp_path, pubmed_xml):
    docs = parse_pubmed_xml(pubmed_xml)
    path = tmp_path / 'docs.jsonl'

    assert write_documents(docs, path) == 4
    assert read_documents(path) == docs
    assert document_from_json(document_to_json(docs[1])) == docs[1]


def test_chunk_json_keeps_metadata():
    chunk = Chunk(doc_id='7', chunk_index=2, core_text='b', overlap_prefix='a', token_count=2,
                  metadata={'title': 'T', 'pub_year': 2020})
    assert chunk_from_json(chunk_to_json(chunk)) == chunk


def pmc_article(paragraph):
    return ('<pmc-articleset><article><front><article-meta>'
            '<article-id pub-id-type="pmc">PMC1</article-id>'
            f'</article-meta></front><body><sec><p>{paragraph}</p></sec></body></article></pmc-articleset>').encode()


@pytest.mark.parametrize('paragraph, expected', [
    ('A <italic>x</italic> B <table-wrap><table><tr><td>9</td></tr></table></table-wrap> C', 'A x B C'),
    ('Dose<sup>2</sup> rose<fig><caption>Figure 1</caption></fig>sharply <bold>here</bold>.',
     'Dose2 rose sharply here.'),
    ('<xref>[1]</xref> first <table-wrap/><fig/> second <italic>third</italic>', '[1] first second third'),
])
def test_parse_pmc_keeps_paragraph_order_around_dropped_floats(paragraph, expected):
    assert parse_pmc_xml(pmc_article(paragraph)) == {'PMC1': expected}


LABELLED = {
    '70000001': SourceCategory.D1, '70000002': SourceCategory.D2, '70000003': SourceCategory.D3,
    '70000004': SourceCategory.D1, '70000005': SourceCategory.D2, '70000006': SourceCategory.D3,
    '70000007': None, '70000008': SourceCategory.D2, '70000009': SourceCategory.D3,
    '70000010': SourceCategory.D1, '70000011': SourceCategory.D2, '70000012': SourceCategory.D3,
    '70000013': SourceCategory.D1, '70000014': SourceCategory.D3, '70000015': None,
    '70000016': SourceCategory.D2, '70000017': SourceCategory.D1, '70000018': SourceCategory.D3,
    '70000019': SourceCategory.D2, '70000020': SourceCategory.D1,
}


def test_classification_matches_hand_labels(fixtures_dir):
    docs = by_pmid(parse_pubmed_xml((fixtures_dir / 'labelled_articles.xml').read_bytes()))

    assert len(docs) == 20
    assert {pmid: doc.source_category for pmid, doc in docs.items()} == LABELLED
    assert docs['70000005'].pmcid == 'PMC7000005'
    assert docs['70000008'].abstract is None
    assert docs['70000016'].publication_types == {'Review', 'Research Support, N.I.H., Extramural'}
    assert all(doc.pub_date == date(2021, 6, 1) for doc in docs.values())


def test_filter_documents_is_idempotent():
    rng = np.random.default_rng(13)
    for _ in range(200):
        docs = []
        for n in range(int(rng.integers(0, 30))):
            pub_date = None if rng.random() < 0.2 else date(int(rng.integers(2000, 2024)), 1, 1)
            abstract = 'text' if rng.random() < 0.7 else None
            docs.append(Document(pmid=str(n + 1), title='t', pub_date=pub_date, abstract=abstract))
        low, high = sorted(int(year) for year in rng.integers(2000, 2024, size=2))
        bounds = {
            'min_date': date(low, 1, 1) if rng.random() < 0.7 else None,
            'max_date': date(high, 1, 1) if rng.random() < 0.7 else None,
            'require_abstract': bool(rng.random() < 0.5),
        }

        once = filter_documents(docs, **bounds)
        assert filter_documents(once, **bounds) == once
