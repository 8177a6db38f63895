"""
Shared text helpers: frozen word lists and token counting.
"""
import re
from functools import lru_cache
from pathlib import Path
from typing import FrozenSet, List

RESOURCE_DIR = Path(__file__).resolve().parent.parent / 'resources'

_TERM_RE = re.compile(r"\w+(?:-\w+)*", re.UNICODE)


def resource_path(name: str) -> Path:
    return RESOURCE_DIR / name


def read_word_list(path) -> List[str]:
    """Read one entry per line, skipping blanks and '#' comments."""
    entries = []
    for line in Path(path).read_text(encoding='utf-8').splitlines():
        line = line.strip()
        if line and not line.startswith('#'):
            entries.append(line)
    return entries


@lru_cache(maxsize=None)
def stopwords() -> FrozenSet[str]:
    """Frozen English stopword list."""
    return frozenset(word.lower() for word in read_word_list(resource_path('stopwords.txt')))


@lru_cache(maxsize=None)
def common_medical_terms() -> FrozenSet[str]:
    """High-frequency general-medical words; these get the lower query weight."""
    return frozenset(word.lower() for word in read_word_list(resource_path('common_medical_terms.txt')))


@lru_cache(maxsize=None)
def abbreviations() -> tuple:
    """Abbreviations that never end a sentence, lowercased, longest first."""
    entries = {word.lower() for word in read_word_list(resource_path('abbreviations.txt'))}
    return tuple(sorted(entries, key=lambda entry: (-len(entry), entry)))


def count_words(text: str) -> int:
    """Default token counter: whitespace-delimited words."""
    return len(text.split())


def tokenize_terms(text: str) -> List[str]:
    """Lowercased word tokens (hyphenated compounds kept whole) for lexical scoring."""
    return _TERM_RE.findall(text.lower())
