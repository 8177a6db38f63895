"""
Corpus types and NCBI XML ingestion.

This module provides:
1. Document, Chunk and EvidenceItem, the records every other module passes around
2. Parsing of PubMed efetch XML (PubmedArticleSet) and PMC full-text XML
3. Source classification (D1 PubMed abstract, D2 PMC review, D3 other PMC article)
4. Temporal and abstract filtering
5. JSON-lines persistence for documents and chunks
"""
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

from exceptions import CorpusParseError, InvalidDateRangeError, UnretrievableDocumentError
from utils.jsonl import iter_jsonl, write_jsonl
from utils.logger import setup_logger

logger = setup_logger("corpus")

_PMID_RE = re.compile(r"^\d+$")

_MONTHS = {
    'jan': 1, 'feb': 2, 'mar': 3, 'apr': 4, 'may': 5, 'jun': 6,
    'jul': 7, 'aug': 8, 'sep': 9, 'oct': 10, 'nov': 11, 'dec': 12
}


class SourceCategory(str, Enum):
    """Where a document comes from."""
    D1 = 'D1'  # PubMed abstract
    D2 = 'D2'  # PMC review article
    D3 = 'D3'  # other PMC article


class EvidenceCategory(str, Enum):
    """Which retrieval path found a document."""
    E1 = 'E1'  # semantic path only
    E2 = 'E2'  # term-based path only
    E3 = 'E3'  # both paths


@dataclass(frozen=True)
class Document:
    """One PubMed/PMC record."""

    pmid: str
    title: str
    pub_date: Optional[date]
    abstract: Optional[str] = None
    full_text: Optional[str] = None
    pmcid: Optional[str] = None
    publication_types: FrozenSet[str] = frozenset()
    source_category: Optional[SourceCategory] = None

    def __post_init__(self):
        if not self.pmid or not _PMID_RE.match(self.pmid):
            raise ValueError(f"pmid must be a non-empty string of digits, got {self.pmid!r}")
        object.__setattr__(self, 'publication_types', frozenset(self.publication_types))

        category = self.source_category
        if category is not None and not isinstance(category, SourceCategory):
            category = SourceCategory(category)
            object.__setattr__(self, 'source_category', category)
        if category == SourceCategory.D2 and not (self.pmcid and 'Review' in self.publication_types):
            raise ValueError(f"{self.pmid}: D2 requires a PMCID and the Review publication type")
        if category == SourceCategory.D3 and not (self.pmcid and 'Review' not in self.publication_types):
            raise ValueError(f"{self.pmid}: D3 requires a PMCID and no Review publication type")
        if category == SourceCategory.D1 and not self.abstract:
            raise ValueError(f"{self.pmid}: D1 requires a non-empty abstract")

    @property
    def pub_year(self) -> Optional[int]:
        return self.pub_date.year if self.pub_date else None

    def retrieval_text(self) -> str:
        """Text used for passage retrieval: full text for PMC articles when present."""
        if self.source_category in (SourceCategory.D2, SourceCategory.D3) and self.full_text:
            return self.full_text
        if self.source_category is None and self.full_text:
            return self.full_text
        return self.abstract or ''


@dataclass(frozen=True)
class Chunk:
    """A contiguous span of complete sentences with its overlap prefix."""

    doc_id: str
    chunk_index: int
    core_text: str
    overlap_prefix: str = ''
    token_count: int = 0
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.chunk_index < 0:
            raise ValueError("chunk_index must be non-negative")
        if self.chunk_index == 0 and self.overlap_prefix:
            raise ValueError("the first chunk of a document cannot carry an overlap prefix")

    @property
    def key(self) -> Tuple[str, int]:
        return (self.doc_id, self.chunk_index)

    @property
    def text(self) -> str:
        """overlap_prefix and core_text joined by a single space."""
        if self.overlap_prefix:
            return f"{self.overlap_prefix} {self.core_text}"
        return self.core_text


@dataclass(frozen=True)
class EvidenceItem:
    """One ranked retrieval result."""

    doc_id: str
    score: float
    rank: int
    chunk_index: Optional[int] = None
    evidence_category: Optional[EvidenceCategory] = None
    source_category: Optional[SourceCategory] = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank is 1-based")

    @property
    def key(self) -> Tuple[str, Optional[int]]:
        return (self.doc_id, self.chunk_index)


def _text(elem: Optional[ET.Element]) -> str:
    if elem is None:
        return ''
    return ' '.join(''.join(elem.itertext()).split())


def _month(value: str) -> int:
    value = value.strip()
    if value.isdigit():
        month = int(value)
        return month if 1 <= month <= 12 else 1
    return _MONTHS.get(value[:3].lower(), 1)


def _date_from(elem: Optional[ET.Element]) -> Optional[date]:
    """Date from a Year/Month/Day (or MedlineDate) element; month and day default to 1."""
    if elem is None:
        return None
    year_text = (elem.findtext('Year') or '').strip()
    if not year_text:
        match = re.search(r"\b(\d{4})\b", elem.findtext('MedlineDate') or '')
        if not match:
            return None
        year_text = match.group(1)
        month_match = re.search(r"\d{4}\s+([A-Za-z]{3})", elem.findtext('MedlineDate') or '')
        month = _month(month_match.group(1)) if month_match else 1
        return date(int(year_text), month, 1)
    if not year_text.isdigit():
        return None
    month = _month(elem.findtext('Month') or '1')
    day_text = (elem.findtext('Day') or '1').strip()
    day = int(day_text) if day_text.isdigit() else 1
    try:
        return date(int(year_text), month, day)
    except ValueError:
        return date(int(year_text), month, 1)


def _byte_offset(xml_bytes: bytes, position: Tuple[int, int]) -> int:
    line, column = position
    lines = xml_bytes.split(b'\n')
    return sum(len(part) + 1 for part in lines[:max(line - 1, 0)]) + column


def _parse_root(xml_bytes: bytes) -> ET.Element:
    try:
        return ET.fromstring(xml_bytes)
    except ET.ParseError as e:
        raise CorpusParseError(f"malformed XML: {e}", byte_offset=_byte_offset(xml_bytes, e.position)) from e


def _abstract(article: ET.Element) -> Optional[str]:
    parts = []
    for section in article.findall('./MedlineCitation/Article/Abstract/AbstractText'):
        text = _text(section)
        if not text:
            continue
        label = section.get('Label')
        parts.append(f"{label}: {text}" if label else text)
    return ' '.join(parts) if parts else None


def _pub_date(article: ET.Element) -> Optional[date]:
    candidates = [
        _date_from(article.find('./MedlineCitation/Article/ArticleDate')),
        _date_from(article.find('./MedlineCitation/Article/Journal/JournalIssue/PubDate'))
    ]
    candidates = [candidate for candidate in candidates if candidate is not None]
    return min(candidates) if candidates else None


def _pmcid(article: ET.Element) -> Optional[str]:
    for article_id in article.findall('./PubmedData/ArticleIdList/ArticleId'):
        if article_id.get('IdType') == 'pmc' and article_id.text and article_id.text.strip():
            value = article_id.text.strip()
            return value if value.upper().startswith('PMC') else f"PMC{value}"
    return None


def classify_source(doc: Document) -> SourceCategory:
    """
    Classify a document by source.

    Returns:
        D2 for PMC reviews, D3 for other PMC articles, D1 for abstract-only PubMed records

    Raises:
        UnretrievableDocumentError: no PMCID and no abstract
    """
    if doc.pmcid:
        return SourceCategory.D2 if 'Review' in doc.publication_types else SourceCategory.D3
    if doc.abstract:
        return SourceCategory.D1
    raise UnretrievableDocumentError(f"document {doc.pmid} has neither a PMCID nor an abstract")


def classify_document(doc: Document) -> Document:
    """Return ``doc`` with source_category set, or unchanged (None) when unretrievable."""
    try:
        return replace(doc, source_category=classify_source(doc))
    except UnretrievableDocumentError as e:
        logger.debug(str(e))
        return replace(doc, source_category=None)


def parse_pubmed_xml(xml_bytes: bytes) -> List[Document]:
    """
    Parse PubMed efetch XML into classified Documents.

    Args:
        xml_bytes: A PubmedArticleSet document

    Returns:
        One Document per PubmedArticle with a PMID, in document order
    """
    root = _parse_root(xml_bytes)

    documents = []
    skipped = 0
    for article in root.iter('PubmedArticle'):
        pmid = (article.findtext('./MedlineCitation/PMID') or '').strip()
        if not pmid or not _PMID_RE.match(pmid):
            skipped += 1
            continue

        publication_types = frozenset(
            _text(pt) for pt in article.findall('./MedlineCitation/Article/PublicationTypeList/PublicationType')
            if _text(pt)
        )
        doc = Document(
            pmid=pmid,
            title=_text(article.find('./MedlineCitation/Article/ArticleTitle')),
            pub_date=_pub_date(article),
            abstract=_abstract(article),
            pmcid=_pmcid(article),
            publication_types=publication_types
        )
        documents.append(classify_document(doc))

    if skipped:
        logger.warning(f"Skipped {skipped} article(s) without a PMID")

    return documents


_DROPPED_BODY_TAGS = ('table-wrap', 'fig', 'table-wrap-group', 'fig-group', 'supplementary-material')


def _paragraph_pieces(elem: ET.Element, pieces: List[str]):
    if elem.text:
        pieces.append(elem.text)
    for sub in elem:
        if sub.tag in _DROPPED_BODY_TAGS:
            # a dropped float still separates the words around it
            pieces.append(' ')
        else:
            _paragraph_pieces(sub, pieces)
        if sub.tail:
            pieces.append(sub.tail)


def _body_lines(elem: ET.Element, lines: List[str]):
    for child in elem:
        tag = child.tag
        if tag in _DROPPED_BODY_TAGS:
            continue
        if tag == 'title':
            text = _text(child)
            if text:
                lines.append(text)
        elif tag == 'p':
            pieces = []
            _paragraph_pieces(child, pieces)
            text = ' '.join(''.join(pieces).split())
            if text:
                lines.append(text)
        else:
            _body_lines(child, lines)


def parse_pmc_xml(xml_bytes: bytes) -> Dict[str, str]:
    """
    Parse PMC efetch XML into full text keyed by PMCID.

    Body paragraphs are concatenated in document order with section titles on
    their own lines; tables and figures are dropped.
    """
    root = _parse_root(xml_bytes)
    texts = {}
    for article in root.iter('article'):
        pmcid = None
        for article_id in article.findall('./front/article-meta/article-id'):
            if article_id.get('pub-id-type') in ('pmc', 'pmcid') and article_id.text:
                value = article_id.text.strip()
                pmcid = value if value.upper().startswith('PMC') else f"PMC{value}"
                break
        body = article.find('./body')
        if pmcid is None or body is None:
            continue
        lines = []
        _body_lines(body, lines)
        if lines:
            texts[pmcid] = '\n'.join(lines)
    return texts


def attach_full_text(docs: Iterable[Document], texts: Mapping[str, str]) -> List[Document]:
    """Attach PMC full text to documents whose PMCID appears in ``texts``."""
    attached = []
    for doc in docs:
        if doc.pmcid and doc.pmcid in texts:
            doc = replace(doc, full_text=texts[doc.pmcid])
        attached.append(doc)
    return attached


def filter_documents(docs: Iterable[Document],
                     min_date: Optional[date] = None,
                     max_date: Optional[date] = None,
                     require_abstract: bool = False) -> List[Document]:
    """
    Keep documents inside the date range (and with an abstract when required).

    Documents without a publication date fail any filter with a lower bound.
    Input order is preserved.
    """
    if min_date and max_date and min_date > max_date:
        raise InvalidDateRangeError(f"min_date {min_date} is later than max_date {max_date}")

    kept = []
    for doc in docs:
        if min_date is not None and (doc.pub_date is None or doc.pub_date < min_date):
            continue
        if max_date is not None and doc.pub_date is not None and doc.pub_date > max_date:
            continue
        if require_abstract and not (doc.abstract and doc.abstract.strip()):
            continue
        kept.append(doc)
    return kept


def document_to_json(doc: Document) -> Dict[str, Any]:
    return {
        'pmid': doc.pmid,
        'pmcid': doc.pmcid,
        'title': doc.title,
        'abstract': doc.abstract,
        'full_text': doc.full_text,
        'pub_date': doc.pub_date.isoformat() if doc.pub_date else None,
        'publication_types': sorted(doc.publication_types),
        'source_category': doc.source_category.value if doc.source_category else None
    }


def document_from_json(record: Mapping[str, Any]) -> Document:
    return Document(
        pmid=str(record['pmid']),
        pmcid=record.get('pmcid'),
        title=record.get('title', ''),
        abstract=record.get('abstract'),
        full_text=record.get('full_text'),
        pub_date=date.fromisoformat(record['pub_date']) if record.get('pub_date') else None,
        publication_types=frozenset(record.get('publication_types', ())),
        source_category=record.get('source_category')
    )


def write_documents(docs: Iterable[Document], path) -> int:
    return write_jsonl((document_to_json(doc) for doc in docs), path)


def read_documents(path) -> List[Document]:
    return [document_from_json(record) for record in iter_jsonl(path)]


def chunk_to_json(chunk: Chunk) -> Dict[str, Any]:
    return {
        'doc_id': chunk.doc_id,
        'chunk_index': chunk.chunk_index,
        'core_text': chunk.core_text,
        'overlap_prefix': chunk.overlap_prefix,
        'token_count': chunk.token_count,
        'metadata': dict(chunk.metadata)
    }


def chunk_from_json(record: Mapping[str, Any]) -> Chunk:
    return Chunk(
        doc_id=str(record['doc_id']),
        chunk_index=int(record['chunk_index']),
        core_text=record['core_text'],
        overlap_prefix=record.get('overlap_prefix', ''),
        token_count=int(record.get('token_count', 0)),
        metadata=dict(record.get('metadata', {}))
    )


def write_chunks(chunks: Iterable[Chunk], path) -> int:
    return write_jsonl((chunk_to_json(chunk) for chunk in chunks), path)


def read_chunks(path) -> List[Chunk]:
    return [chunk_from_json(record) for record in iter_jsonl(path)]


def evidence_to_json(item: EvidenceItem) -> Dict[str, Any]:
    return {
        'doc_id': item.doc_id,
        'chunk_index': item.chunk_index,
        'score': item.score,
        'rank': item.rank,
        'evidence_category': item.evidence_category.value if item.evidence_category else None,
        'source_category': item.source_category.value if item.source_category else None
    }


def evidence_from_json(record: Mapping[str, Any]) -> EvidenceItem:
    evidence = record.get('evidence_category')
    source = record.get('source_category')
    chunk_index = record.get('chunk_index')
    return EvidenceItem(
        doc_id=str(record['doc_id']),
        chunk_index=int(chunk_index) if chunk_index is not None else None,
        score=float(record.get('score', 0.0)),
        rank=int(record['rank']),
        evidence_category=EvidenceCategory(evidence) if evidence else None,
        source_category=SourceCategory(source) if source else None
    )
