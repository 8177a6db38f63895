"""
Configuration settings for the query pipeline.

Module-level dictionaries hold the defaults used across the code base.
RunConfig is the validated JSON run configuration consumed by the CLI;
CLI flags override its values.
"""
import json
import re
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from exceptions import ConfigError

# NCBI E-Utilities endpoints and request defaults
EUTILS = {
    'base_url': 'https://eutils.ncbi.nlm.nih.gov/entrez/eutils',
    'esearch_endpoint': 'esearch.fcgi',
    'efetch_endpoint': 'efetch.fcgi',
    'efetch_batch_size': 200,   # ids per efetch request
    'timeout': 30,              # seconds per HTTP request
    'api_key_env': 'NCBI_API_KEY'
}

# Requests per second admitted by the throttle gate
RATE_LIMITS = {
    'without_api_key': 3,
    'with_api_key': 10
}

# Retry policy for transport failures and HTTP 429/5xx
RETRY = {
    'max_retries': 3,
    'backoff_delays': (0.5, 1.0, 2.0)
}

# Hybrid semantic + term-based document retrieval
HSRDR_DEFAULTS = {
    'sources_enabled': ('D1', 'D2', 'D3'),
    'min_docs': 5,        # documents needed before a ladder level is accepted
    'retmax_term': 20,    # PMIDs requested per esearch
    'k_semantic': 20,     # PMIDs taken from the vector index
    'max_levels': 5,      # rule-based ladder depth
    'require_abstract': True
}

# Semantic enhanced overlap segmentation
SEOS_DEFAULTS = {
    'window_w': 3,             # sentences on each side of a gap
    'smoothing_width': 3,      # odd moving-average width
    'depth_coefficient': 0.5,  # boundary cutoff = mean - c * std of positive depths
    'min_boundary_distance': 2
}

# Preferred chunk sizes per embedder family
EMBEDDER_FAMILIES = {
    'bert_family': {'chunk_tokens': 128, 'overlap_tokens': 32},
    'general': {'chunk_tokens': 512, 'overlap_tokens': 32}
}

# Known dense retrievers and their family
EMBEDDER_PROFILES = {
    'hash': {'family': 'bert_family'},
    'medcpt': {'family': 'bert_family'},
    'pubmedbert-base-embeddings-matryoshka': {'family': 'bert_family'},
    'bge-large-en-v1.5': {'family': 'bert_family'},
    'UAE-Large-V1': {'family': 'bert_family'},
    'SFR-Embedding-Mistral': {'family': 'general'},
    'text-embedding-3-small': {'family': 'general'}
}

# Fixed-size splitter grid rows (chunk tokens, overlap tokens)
FIXED_SPLITTER_GRID = (
    (512, 0),
    (512, 32),
    (512, 128)
)

# Passage retrieval and context assembly
RETRIEVAL_DEFAULTS = {
    'k_dense': 20,
    'k_final': 5,
    'bm25_k1': 1.2,
    'bm25_b': 0.75,
    'context_budget_tokens': 2000
}

# Evaluation
EVAL_DEFAULTS = {
    'k': 5,
    'rrf_kappa': 60.0,
    'top_window': 5
}

# Data-source ablation rows (name -> enabled source categories)
ABLATION_SUBSETS = {
    'D1': ('D1',),
    'D1+D2': ('D1', 'D2'),
    'D1+D2+D3': ('D1', 'D2', 'D3')
}

# Performance tracking
PERFORMANCE_TRACKING = {
    'max_samples': 1000  # Maximum number of samples to keep for each metric
}

# Logging
LOGGING = {
    'level': 'INFO',
    'log_to_file': False,
    'log_dir': 'logs'
}


def _existing_path(value: Optional[Path]) -> Optional[Path]:
    if value is not None and not Path(value).exists():
        raise ValueError(f"path does not exist: {value}")
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class SourcesSection(_Section):
    enabled: List[Literal['D1', 'D2', 'D3']] = Field(default_factory=lambda: list(HSRDR_DEFAULTS['sources_enabled']))
    min_date: Optional[date] = None
    max_date: Optional[date] = None
    require_abstract: bool = HSRDR_DEFAULTS['require_abstract']

    @field_validator('enabled')
    @classmethod
    def check_non_empty(cls, value):
        if not value:
            raise ValueError('at least one source category must be enabled')
        return value

    @model_validator(mode='after')
    def check_ordered_dates(self):
        if self.min_date and self.max_date and self.min_date > self.max_date:
            raise ValueError('min_date is later than max_date')
        return self


class RewriteSection(_Section):
    mode: Literal['llm', 'rule'] = 'rule'
    min_docs: int = Field(HSRDR_DEFAULTS['min_docs'], gt=0)
    max_levels: int = Field(HSRDR_DEFAULTS['max_levels'], gt=0)


class EmbedderSection(_Section):
    id: str = 'hash'
    dim: int = Field(256, ge=8)
    seed: int = 0
    family: Optional[Literal['bert_family', 'general']] = None
    url: Optional[str] = None


class IndexSection(_Section):
    semantic_index: Optional[Path] = None
    k_semantic: int = Field(HSRDR_DEFAULTS['k_semantic'], gt=0)
    query_embedder: EmbedderSection = Field(default_factory=EmbedderSection)

    @field_validator('semantic_index')
    @classmethod
    def check_index_exists(cls, value):
        return _existing_path(value)


class ChunkerSection(_Section):
    method: Literal['seos', 'fixed'] = 'seos'
    window_w: int = Field(SEOS_DEFAULTS['window_w'], ge=1)
    smoothing_width: int = Field(SEOS_DEFAULTS['smoothing_width'], ge=1)
    depth_coefficient: float = SEOS_DEFAULTS['depth_coefficient']
    target_chunk_tokens: Optional[int] = Field(None, gt=0)
    overlap_tokens: Optional[int] = Field(None, ge=0)
    embed_metadata_in_text: bool = False

    @field_validator('smoothing_width')
    @classmethod
    def check_odd(cls, value):
        if value % 2 == 0:
            raise ValueError('smoothing_width must be odd')
        return value

    @model_validator(mode='after')
    def check_overlap_below_target(self):
        if (self.target_chunk_tokens is not None and self.overlap_tokens is not None
                and self.overlap_tokens >= self.target_chunk_tokens):
            raise ValueError('overlap_tokens must be smaller than target_chunk_tokens')
        return self


class RetrievalSection(_Section):
    mode: Literal['optimized', 'naive_rag', 'cot'] = 'optimized'
    retriever: Literal['dense', 'bm25'] = 'dense'
    embedder: EmbedderSection = Field(default_factory=EmbedderSection)
    reranker: Optional[Literal['overlap', 'embedding', 'http']] = None
    reranker_url: Optional[str] = None
    k_dense: int = Field(RETRIEVAL_DEFAULTS['k_dense'], gt=0)
    k_final: int = Field(RETRIEVAL_DEFAULTS['k_final'], gt=0)
    context_budget_tokens: int = Field(RETRIEVAL_DEFAULTS['context_budget_tokens'], gt=0)
    chunks: Optional[Path] = None

    @field_validator('chunks')
    @classmethod
    def check_chunks_exist(cls, value):
        return _existing_path(value)

    @model_validator(mode='after')
    def check_consistent(self):
        if self.k_final > self.k_dense:
            raise ValueError('k_final must not exceed k_dense')
        if self.reranker == 'http' and not self.reranker_url:
            raise ValueError('reranker_url is required for the http reranker')
        return self


class GenerationSection(_Section):
    client: Literal['fixture', 'http'] = 'fixture'
    fixture_path: Optional[Path] = None
    default_response: Optional[str] = None
    url: Optional[str] = None
    model: Optional[str] = None

    @field_validator('fixture_path')
    @classmethod
    def check_fixture_exists(cls, value):
        return _existing_path(value)

    @model_validator(mode='after')
    def check_client_inputs(self):
        if self.client == 'http' and not self.url:
            raise ValueError('url is required for the http generation client')
        return self


class EutilsSection(_Section):
    transport: Literal['live', 'fixture', 'record'] = 'live'
    fixture_dir: Optional[Path] = None
    retmax: int = Field(HSRDR_DEFAULTS['retmax_term'], gt=0)
    batch_size: int = Field(EUTILS['efetch_batch_size'], gt=0, le=EUTILS['efetch_batch_size'])

    @model_validator(mode='after')
    def check_fixture_dir(self):
        if self.transport in ('fixture', 'record') and self.fixture_dir is None:
            raise ValueError(f'fixture_dir is required for the {self.transport} transport')
        if self.transport == 'fixture':
            _existing_path(self.fixture_dir)
        return self


class IoSection(_Section):
    documents: Optional[Path] = None
    output_dir: Optional[Path] = None

    @field_validator('documents')
    @classmethod
    def check_documents_exist(cls, value):
        return _existing_path(value)


class RunConfig(_Section):
    """Validated run configuration; every section rejects unknown keys."""

    sources: SourcesSection = Field(default_factory=SourcesSection)
    rewrite: RewriteSection = Field(default_factory=RewriteSection)
    index: IndexSection = Field(default_factory=IndexSection)
    chunker: ChunkerSection = Field(default_factory=ChunkerSection)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    generation: GenerationSection = Field(default_factory=GenerationSection)
    eutils: EutilsSection = Field(default_factory=EutilsSection)
    io: IoSection = Field(default_factory=IoSection)


def _position(raw: str, offset: int):
    line = raw.count('\n', 0, offset) + 1
    column = offset - (raw.rfind('\n', 0, offset) + 1) + 1
    return line, column


def _locate_key(raw: str, loc) -> Optional[tuple]:
    """Line and column of the deepest key of ``loc`` found in the raw JSON text."""
    offset = 0
    found = None
    for part in loc:
        if not isinstance(part, str):
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(part)).search(raw, offset)
        if match is None:
            break
        offset = found = match.start()
    return _position(raw, found) if found is not None else None


def _raise_config_error(error: ValidationError, raw: str, source: str):
    first = error.errors()[0]
    loc = first.get('loc', ())
    key = '.'.join(str(part) for part in loc) or None
    if first.get('type') == 'extra_forbidden':
        message = f"{source}: unknown configuration key"
    else:
        message = f"{source}: {first.get('msg', 'invalid value')}"
    raise ConfigError(message, key=key, position=_locate_key(raw, loc) if raw else None) from error


def parse_run_config(data: Dict[str, Any], raw: str = '', source: str = '<config>') -> RunConfig:
    """Validate a configuration mapping, converting pydantic errors into ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        _raise_config_error(e, raw, source)


def load_run_config(path=None) -> RunConfig:
    """
    Load and validate a JSON run configuration.

    Args:
        path: JSON file path, or None for defaults

    Returns:
        RunConfig instance
    """
    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")

    raw = path.read_text(encoding='utf-8')
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})", key=None,
                          position=(e.lineno, e.colno)) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")

    return parse_run_config(data, raw=raw, source=str(path))


def with_overrides(run_config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Return a copy of ``run_config`` with dotted-key overrides applied.

    None values are ignored so unset CLI flags leave the config untouched.
    """
    data = run_config.model_dump(mode='json', exclude_none=False)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return parse_run_config(data, source='<command line>')
