"""
Client for the NCBI E-Utilities esearch/efetch endpoints.

This module provides:
1. RateLimitPolicy and RateLimiter, the sliding-window throttle gate every request passes
2. Transport implementations: live HTTPS (requests), fixture replay and fixture recording
3. EUtilsClient with esearch (JSON) and efetch (XML, batched) operations

The client is shareable across threads; the rate limiter is the single
synchronization point.
"""
import hashlib
import json
import os
import threading
import time
import xml.etree.ElementTree as ET
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from urllib.parse import urlencode

import requests

import config
from exceptions import (FixtureMissingError, PartialFetchError, PreconditionError,
                        QueryError, TransportError)
from utils.connection_manager import ConnectionManager
from utils.logger import setup_logger
from utils.performance import performance_tracker, timeit

logger = setup_logger("eutils_client")

Params = List[Tuple[str, str]]


@dataclass(frozen=True)
class RateLimitPolicy:
    """Requests admitted per sliding one-second window."""

    max_requests_per_second: int
    api_key: Optional[str] = None

    def __post_init__(self):
        if self.max_requests_per_second < 1:
            raise ValueError("max_requests_per_second must be positive")

    @classmethod
    def for_api_key(cls, api_key: Optional[str] = None) -> 'RateLimitPolicy':
        """NCBI defaults: 3 requests/s without a key, 10 with one."""
        limit = config.RATE_LIMITS['with_api_key'] if api_key else config.RATE_LIMITS['without_api_key']
        return cls(max_requests_per_second=limit, api_key=api_key)

    @classmethod
    def from_environment(cls) -> 'RateLimitPolicy':
        return cls.for_api_key(os.environ.get(config.EUTILS['api_key_env']) or None)


class Clock(ABC):
    """Time source used by the rate limiter."""

    @abstractmethod
    def now(self) -> float:
        ...

    @abstractmethod
    def sleep(self, seconds: float) -> None:
        ...


class SystemClock(Clock):
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimulatedClock(Clock):
    """Clock whose sleep advances simulated time instantly."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self._now += max(seconds, 0.0)

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


class RateLimiter:
    """
    Sliding-window throttle gate.

    No more than ``policy.max_requests_per_second`` admissions fall in any
    half-open one-second window; excess callers wait on the clock.
    """

    # smallest wait, keeps simulated time moving when float rounding leaves a tiny gap
    _MIN_WAIT = 1e-9

    def __init__(self, policy: RateLimitPolicy, clock: Optional[Clock] = None):
        self.policy = policy
        self.clock = clock or SystemClock()
        self._admitted = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a request may be sent; returns the admission time."""
        limit = self.policy.max_requests_per_second
        with self._lock:
            while True:
                now = self.clock.now()
                while self._admitted and now - self._admitted[0] >= 1.0:
                    self._admitted.popleft()
                if len(self._admitted) < limit:
                    self._admitted.append(now)
                    return now
                wait = self._admitted[0] + 1.0 - now
                self.clock.sleep(max(wait, self._MIN_WAIT))


def throttle(policy: RateLimitPolicy, clock: Optional[Clock] = None) -> RateLimiter:
    """Build the gate that every E-Utilities request passes."""
    return RateLimiter(policy, clock)


@dataclass(frozen=True)
class TransportResponse:
    status: int
    body: bytes
    headers: Dict[str, str] = field(default_factory=dict)
    reason: str = ''


def request_key(url: str, params: Params) -> str:
    """Stable fixture key of a request; the API key never takes part."""
    visible = sorted((k, v) for k, v in params if k != 'api_key')
    return hashlib.sha256(f"{url}?{urlencode(visible)}".encode('utf-8')).hexdigest()[:24]


class Transport(ABC):
    """
    Issues one GET request and returns status, headers and body.

    ``before_send`` is called before every attempt that reaches the network,
    retries included; the client passes the throttle gate here.
    """

    @abstractmethod
    def get(self, url: str, params: Params, before_send: Optional[Callable[[], object]] = None) -> TransportResponse:
        ...


class HttpTransport(Transport):
    """Live HTTPS transport with retries on transport errors and HTTP 429/5xx."""

    def __init__(self, timeout: float = config.EUTILS['timeout'],
                 connection_manager_factory=None, session: Optional[requests.Session] = None):
        self.timeout = timeout
        self.session = session or requests.Session()
        self._manager_factory = connection_manager_factory or (lambda: ConnectionManager(
            max_retries=config.RETRY['max_retries'],
            backoff_delays=config.RETRY['backoff_delays']
        ))

    def get(self, url: str, params: Params, before_send: Optional[Callable[[], object]] = None) -> TransportResponse:
        def attempt():
            if before_send is not None:
                before_send()
            return self.session.get(url, params=params, timeout=self.timeout)

        manager = self._manager_factory()
        response = manager.run(attempt, description=f"GET {url}")
        return TransportResponse(status=response.status_code, body=response.content,
                                 headers=dict(response.headers), reason=response.reason or '')


def _serialize_fixture(response: TransportResponse) -> bytes:
    lines = [f"HTTP/1.1 {response.status} {response.reason}".rstrip()]
    for name in sorted(response.headers):
        lines.append(f"{name}: {response.headers[name]}")
    return ('\r\n'.join(lines) + '\r\n\r\n').encode('latin-1') + response.body


def _parse_fixture(data: bytes) -> TransportResponse:
    head, separator, body = data.partition(b'\r\n\r\n')
    if not separator:
        head, separator, body = data.partition(b'\n\n')
    lines = head.decode('latin-1').splitlines()
    status_parts = lines[0].split(' ', 2)
    headers = {}
    for line in lines[1:]:
        name, _, value = line.partition(':')
        headers[name.strip()] = value.strip()
    return TransportResponse(status=int(status_parts[1]), body=body, headers=headers,
                             reason=status_parts[2] if len(status_parts) > 2 else '')


class FixtureTransport(Transport):
    """
    Replays recorded responses byte-exactly.

    A request is served from ``<dir>/<request_key>.http``; when that file is
    missing, ``<dir>/<endpoint>.fixture`` (e.g. ``esearch.fcgi.fixture``)
    serves every request to that endpoint.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    def get(self, url: str, params: Params, before_send: Optional[Callable[[], object]] = None) -> TransportResponse:
        if before_send is not None:
            before_send()
        exact = self.directory / f"{request_key(url, params)}.http"
        if exact.exists():
            return _parse_fixture(exact.read_bytes())
        endpoint = self.directory / f"{url.rstrip('/').rsplit('/', 1)[-1]}.fixture"
        if endpoint.exists():
            return _parse_fixture(endpoint.read_bytes())
        raise FixtureMissingError(f"no fixture for {url} ({exact.name})")


class RecordingTransport(Transport):
    """Forwards requests to ``inner`` and stores every response as a fixture."""

    def __init__(self, inner: Transport, directory):
        self.inner = inner
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def get(self, url: str, params: Params, before_send: Optional[Callable[[], object]] = None) -> TransportResponse:
        response = self.inner.get(url, params, before_send)
        path = self.directory / f"{request_key(url, params)}.http"
        path.write_bytes(_serialize_fixture(response))
        logger.debug(f"Recorded fixture {path.name}")
        return response


@dataclass(frozen=True)
class ESearchResult:
    pmids: Tuple[str, ...]
    total_count: int
    query_translation: str = ''


def _format_date(value: date) -> str:
    return value.strftime('%Y/%m/%d')


def _merge_article_sets(bodies: Sequence[bytes]) -> bytes:
    """Merge several efetch XML documents into one article set, preserving order."""
    if len(bodies) == 1:
        return bodies[0]
    roots = [ET.fromstring(body) for body in bodies]
    merged = roots[0]
    for root in roots[1:]:
        for child in list(root):
            merged.append(child)
    return ET.tostring(merged, encoding='utf-8', xml_declaration=True)


class EUtilsClient:
    """
    Rate-limited client for esearch and efetch.

    Every request goes through the RateLimiter before reaching the transport.
    """

    DATABASES = ('pubmed', 'pmc')

    def __init__(self,
                 transport: Optional[Transport] = None,
                 policy: Optional[RateLimitPolicy] = None,
                 clock: Optional[Clock] = None,
                 batch_size: int = config.EUTILS['efetch_batch_size'],
                 base_url: str = config.EUTILS['base_url']):
        """
        Initialize the client.

        Args:
            transport: Transport to use (live HTTPS by default)
            policy: Rate limit policy (from NCBI_API_KEY by default)
            clock: Clock for the throttle gate
            batch_size: Maximum ids per efetch request
            base_url: E-Utilities base URL
        """
        if not 1 <= batch_size <= config.EUTILS['efetch_batch_size']:
            raise ValueError(f"batch_size must be in 1..{config.EUTILS['efetch_batch_size']}")
        self.transport = transport or HttpTransport()
        self.policy = policy or RateLimitPolicy.from_environment()
        self.gate = throttle(self.policy, clock)
        self.batch_size = batch_size
        self.base_url = base_url.rstrip('/')

    def _url(self, endpoint: str) -> str:
        return f"{self.base_url}/{endpoint}"

    def _request(self, endpoint: str, params: Params) -> TransportResponse:
        if self.policy.api_key:
            params = params + [('api_key', self.policy.api_key)]
        response = self.transport.get(self._url(endpoint), params, before_send=self.gate.acquire)
        if response.status >= 400:
            raise TransportError(f"{endpoint} returned HTTP {response.status}", status=response.status)
        return response

    def _check_db(self, db: str):
        if db not in self.DATABASES:
            raise PreconditionError(f"db must be one of {self.DATABASES}, got {db!r}")

    @timeit(performance_tracker, "esearch")
    def esearch(self, db: str, term: str, retmax: int = config.HSRDR_DEFAULTS['retmax_term'],
                date_range: Optional[Tuple[Optional[date], Optional[date]]] = None) -> ESearchResult:
        """
        Search a database.

        Args:
            db: 'pubmed' or 'pmc'
            term: Query term (rendered Boolean expression)
            retmax: Maximum ids to return
            date_range: Optional (min, max) publication dates

        Returns:
            ESearchResult with ids in server order
        """
        self._check_db(db)
        if not term or not term.strip():
            raise PreconditionError("esearch term must be non-empty")
        if retmax < 1:
            raise PreconditionError("retmax must be positive")

        params: Params = [('db', db), ('term', term), ('retmax', str(retmax)), ('retmode', 'json')]
        if date_range is not None:
            min_date, max_date = date_range
            params.append(('datetype', 'pdat'))
            if min_date is not None:
                params.append(('mindate', _format_date(min_date)))
            if max_date is not None:
                params.append(('maxdate', _format_date(max_date)))

        response = self._request(config.EUTILS['esearch_endpoint'], params)
        try:
            payload = json.loads(response.body.decode('utf-8'))
        except (ValueError, UnicodeDecodeError) as e:
            raise QueryError(f"unreadable esearch response: {e}") from e

        if 'error' in payload:
            raise QueryError(str(payload['error']))
        result = payload.get('esearchresult', {})
        if 'ERROR' in result:
            raise QueryError(str(result['ERROR']))

        total_count = int(result.get('count', 0) or 0)
        pmids = tuple(str(pmid) for pmid in result.get('idlist', []))[:retmax]
        logger.debug(f"esearch db={db} count={total_count} returned={len(pmids)} term={term}")
        return ESearchResult(pmids=pmids, total_count=total_count,
                             query_translation=result.get('querytranslation', ''))

    @timeit(performance_tracker, "efetch")
    def efetch(self, db: str, ids: Sequence[str]) -> bytes:
        """
        Fetch records as XML in batches of at most ``batch_size`` ids.

        Raises:
            PartialFetchError: some batches failed; the error carries the merged
                XML of the batches that succeeded
        """
        self._check_db(db)
        ids = [str(value).strip() for value in ids]
        if not ids:
            raise PreconditionError("efetch needs at least one id")
        bad = [value for value in ids if not value.isdigit()]
        if bad:
            raise PreconditionError(f"efetch ids must be numeric: {bad[:5]}")

        bodies = []
        failures = []
        for index, start in enumerate(range(0, len(ids), self.batch_size)):
            batch = ids[start:start + self.batch_size]
            params: Params = [('db', db), ('id', ','.join(batch)), ('retmode', 'xml')]
            try:
                bodies.append(self._request(config.EUTILS['efetch_endpoint'], params).body)
            except (TransportError, QueryError) as e:
                logger.error(f"efetch batch {index} ({len(batch)} ids) failed: {e}")
                failures.append((index, batch, e))

        if failures:
            raise PartialFetchError(failures, _merge_article_sets(bodies) if bodies else b'')
        return _merge_article_sets(bodies)


def build_eutils_client(section, clock: Optional[Clock] = None) -> EUtilsClient:
    """
    Client described by an EutilsSection of the run configuration.

    Fixture replay never reaches NCBI, so its gate runs on simulated time
    unless a clock is given.
    """
    if section.transport == 'fixture':
        transport = FixtureTransport(section.fixture_dir)
        clock = clock or SimulatedClock()
    elif section.transport == 'record':
        transport = RecordingTransport(HttpTransport(), section.fixture_dir)
    else:
        transport = HttpTransport()
    return EUtilsClient(transport=transport, clock=clock, batch_size=section.batch_size)
