"""Shared fixtures for the pipeline tests."""
import json
from pathlib import Path

import pytest

import config
from eutils_client import EUtilsClient, FixtureTransport, RateLimitPolicy, SimulatedClock
from models.corpus import parse_pubmed_xml
from models.embedding import HashEmbedder
from models.generation import FixtureGenerationClient

FIXTURES = Path(__file__).resolve().parent / 'fixtures'


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def pubmed_xml():
    return (FIXTURES / 'pubmed_small.xml').read_bytes()


@pytest.fixture
def corpus_docs():
    """Eight classified PubMed documents (PMIDs 90000001..90000008)."""
    return parse_pubmed_xml((FIXTURES / 'corpus.xml').read_bytes())


@pytest.fixture
def embedder():
    return HashEmbedder(dim=256, seed=0)


@pytest.fixture
def clock():
    return SimulatedClock()


@pytest.fixture
def eutils_dir():
    return FIXTURES / 'eutils'


@pytest.fixture
def eutils(eutils_dir, clock):
    """Client replaying the canned esearch/efetch responses."""
    return EUtilsClient(transport=FixtureTransport(eutils_dir), policy=RateLimitPolicy.for_api_key(None),
                        clock=clock)


@pytest.fixture
def answer_client():
    return FixtureGenerationClient(default_response="Reasoning first.\nAnswer: A")


@pytest.fixture
def write_config(tmp_path):
    """Write a run configuration file and return its path."""
    def write(data, name='run.json'):
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2), encoding='utf-8')
        return path
    return write


@pytest.fixture
def offline_config(eutils_dir):
    """Configuration mapping that never touches the network."""
    return {
        'eutils': {'transport': 'fixture', 'fixture_dir': str(eutils_dir)},
        'generation': {'client': 'fixture', 'default_response': 'Answer: A'},
        'retrieval': {'k_dense': 10, 'k_final': 3}
    }


@pytest.fixture
def run_config(offline_config):
    return config.parse_run_config(offline_config)
