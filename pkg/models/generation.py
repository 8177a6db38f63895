"""
Generation clients and prompt handling.

This module provides:
1. GenerationClient, the interface every language-model backend implements (system + user -> text)
2. Transcript-fixture replay and a live HTTP JSON client
3. The fixed prompt templates shipped under resources/prompts
4. Answer-letter parsing for multiple-choice questions
"""
import hashlib
import json
import re
from abc import ABC, abstractmethod
from functools import lru_cache
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import requests

import config
from exceptions import GenerationError, PreconditionError, TransportError
from utils.connection_manager import ConnectionManager
from utils.logger import setup_logger
from utils.text import resource_path

logger = setup_logger("generation")

ABSTAIN = 'abstain'

_ANSWER_RE = re.compile(r"Answer:\s*\(?([A-Z])\)?(?![A-Za-z])")


def prompt_hash(system: str, user: str) -> str:
    """Key of a transcript entry: sha256 of the system and user strings."""
    digest = hashlib.sha256()
    digest.update(system.encode('utf-8'))
    digest.update(b'\x00')
    digest.update(user.encode('utf-8'))
    return digest.hexdigest()


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Read a fixed prompt template from resources/prompts."""
    path = resource_path(f"prompts/{name}.txt")
    if not path.exists():
        raise PreconditionError(f"unknown prompt template: {name}")
    return path.read_text(encoding='utf-8').rstrip('\n')


class GenerationClient(ABC):
    """A language model: one system and one user string in, one string out."""

    @abstractmethod
    def generate(self, system: str, user: str) -> str:
        ...


class FixtureGenerationClient(GenerationClient):
    """
    Replays recorded responses.

    Transcripts map prompt_hash(system, user) to the response string. When a
    prompt has no transcript, ``default_response`` is returned if set.
    """

    def __init__(self, transcripts: Optional[Mapping[str, str]] = None,
                 default_response: Optional[str] = None):
        self.transcripts: Dict[str, str] = dict(transcripts or {})
        self.default_response = default_response

    @classmethod
    def from_file(cls, path=None, default_response: Optional[str] = None) -> 'FixtureGenerationClient':
        transcripts = {}
        if path is not None:
            try:
                transcripts = json.loads(Path(path).read_text(encoding='utf-8'))
            except json.JSONDecodeError as e:
                raise GenerationError(f"{path}: invalid transcript file ({e.msg})") from e
            if not isinstance(transcripts, dict):
                raise GenerationError(f"{path}: transcript file must map prompt hashes to strings")
        return cls(transcripts, default_response)

    def add(self, system: str, user: str, response: str):
        self.transcripts[prompt_hash(system, user)] = response

    def generate(self, system: str, user: str) -> str:
        key = prompt_hash(system, user)
        if key in self.transcripts:
            return self.transcripts[key]
        if self.default_response is not None:
            return self.default_response
        raise GenerationError(f"no transcript for prompt {key[:12]}")


class HttpGenerationClient(GenerationClient):
    """POSTs {"system", "user"[, "model"]} and reads {"text"} from the reply."""

    def __init__(self, url: str, model: Optional[str] = None,
                 timeout: float = config.EUTILS['timeout'],
                 session: Optional[requests.Session] = None):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, system: str, user: str) -> str:
        payload = {'system': system, 'user': user}
        if self.model:
            payload['model'] = self.model
        manager = ConnectionManager(max_retries=config.RETRY['max_retries'],
                                    backoff_delays=config.RETRY['backoff_delays'])
        try:
            response = manager.run(lambda: self.session.post(self.url, json=payload, timeout=self.timeout),
                                   description=f"POST {self.url}")
        except TransportError as e:
            raise GenerationError(str(e)) from e
        if response.status_code >= 400:
            raise GenerationError(f"generation service returned HTTP {response.status_code}")
        try:
            text = response.json()['text']
        except (ValueError, KeyError, TypeError) as e:
            raise GenerationError(f"unexpected generation reply: {e}") from e
        return str(text)


def build_generation_client(section) -> GenerationClient:
    """Client described by a GenerationSection of the run configuration."""
    if section.client == 'http':
        return HttpGenerationClient(section.url, model=section.model)
    return FixtureGenerationClient.from_file(section.fixture_path, section.default_response)


def option_letters(count: int) -> str:
    if not 1 <= count <= 26:
        raise PreconditionError("between 1 and 26 options are supported")
    return ''.join(chr(ord('A') + i) for i in range(count))


def format_options(options: Sequence[str]) -> str:
    letters = option_letters(len(options))
    return '\n'.join(f"{letter}. {option}" for letter, option in zip(letters, options))


def answer_prompt(question: str, options: Optional[Sequence[str]] = None, context: str = ''):
    """
    Build the fixed chain-of-thought answer prompt.

    Args:
        question: Question text
        options: Multiple-choice options, or None for open questions
        context: Assembled evidence; empty for the retrieval-free mode

    Returns:
        (system, user) tuple
    """
    context_section = f"Evidence:\n{context}\n\n" if context else ''
    system = load_prompt('answer_system')
    if options:
        user = load_prompt('answer_user').format(context_section=context_section, question=question,
                                                 options_section=format_options(options) + '\n')
    else:
        user = load_prompt('answer_user_open').format(context_section=context_section, question=question)
    return system, user


def parse_answer(text: str, options: Optional[Sequence[str]] = None) -> str:
    """
    Final answer letter of a model response.

    The last "Answer: X" line wins. A letter outside the option range, or no
    letter at all, is an abstention.
    """
    matches = _ANSWER_RE.findall(text or '')
    if not matches:
        return ABSTAIN
    letter = matches[-1]
    if options is not None and letter not in option_letters(len(options)):
        return ABSTAIN
    return letter
