"""
transports to a completion endpoint

HttpTransport talks to a real (or the mock) server through httpx, MockTransport answers in-process
from a prefix table model. Both bound the number of requests in flight.
"""

import asyncio
import logging
from collections.abc import Awaitable, Callable
from typing import Protocol

import httpx
import numpy as np
from pydantic import ValidationError

from ..errors import LabError, RequestRejected, TransportError
from ..model.mock import PrefixTableModel
from .completion import serve_completion
from .schema import CompletionRequest, CompletionResponse

logger = logging.getLogger(__name__)

RETRY_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class Transport(Protocol):
    async def complete(self, request: CompletionRequest) -> CompletionResponse: ...


class HttpTransport:
    """
    POSTs to <base_url>/completions. Connection errors and retryable status codes are retried
    with exponential backoff and jitter, up to `attempts` tries in total.
    """

    def __init__(
            self,
            base_url: str,
            api_key: str = '',
            max_in_flight: int = 4,
            attempts: int = 5,
            base_delay: float = 0.5,
            timeout: float = 60.0,
            transport: httpx.AsyncBaseTransport | None = None,
            sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
            seed: int = 0,
            ) -> None:
        if attempts < 1:
            raise TransportError(f'attempts must be at least 1, got {attempts}')
        headers = {'Authorization': f'Bearer {api_key}'} if api_key else {}
        self._client = httpx.AsyncClient(base_url=base_url.rstrip('/'), headers=headers, timeout=timeout, transport=transport)
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self._sleep = sleep
        self._jitter = np.random.default_rng(seed)
        self.attempts = attempts
        self.base_delay = base_delay

    async def __aenter__(self) -> "HttpTransport":
        return self

    async def __aexit__(self, *exc_info) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._client.aclose()

    async def complete(self, request: CompletionRequest) -> CompletionResponse:
        body = request.model_dump(exclude_none=True)
        async with self._semaphore:
            failure = ''
            for attempt in range(self.attempts):
                try:
                    response = await self._client.post('/completions', json=body)
                except httpx.TransportError as e:
                    failure = f'{type(e).__name__}: {e}'
                else:
                    if response.status_code == 200:
                        try:
                            return CompletionResponse.model_validate(response.json())
                        except (ValueError, ValidationError) as e:
                            raise TransportError(f'malformed completion response: {e}') from e
                    if response.status_code not in RETRY_STATUS:
                        raise RequestRejected(response.status_code, response.text)
                    failure = f'status {response.status_code}'

                if attempt + 1 < self.attempts:
                    delay = self.base_delay * 2 ** attempt * (1.0 + float(self._jitter.random()))
                    logger.warning('completion request failed (%s), retry %d in %.2fs', failure, attempt + 1, delay)
                    await self._sleep(delay)
        raise TransportError(f'completion request failed {self.attempts} times, last: {failure}')


class MockTransport:
    """
    Serves completions from a prefix table model. `peak_in_flight` records the largest number of
    concurrent requests seen, `calls` the number of requests answered.
    """

    def __init__(
            self, model: PrefixTableModel, supports_echo: bool = True, max_in_flight: int = 4, latency: float = 0.0,
            ) -> None:
        self.model = model
        self.supports_echo = supports_echo
        self.latency = latency
        self._semaphore = asyncio.Semaphore(max_in_flight)
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

    async def complete(self, request: CompletionRequest) -> CompletionResponse:
        async with self._semaphore:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                await asyncio.sleep(self.latency)
                self.calls += 1
                return serve_completion(self.model, request, self.supports_echo)
            except LabError as e:
                raise RequestRejected(400, str(e)) from e
            finally:
                self.in_flight -= 1
