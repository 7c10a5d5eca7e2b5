"""Small JSON-over-HTTP client shared by the remote embedder and generator."""

import threading
from typing import Any, Dict, Optional

import requests
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from .errors import RemoteServiceError
from .logger import LoggerMixin

BODY_EXCERPT_CHARS = 200


def _is_transient(error: BaseException) -> bool:
    return isinstance(error, RemoteServiceError) and error.transient


class JsonHttpClient(LoggerMixin):
    """POSTs JSON payloads with bounded concurrency and tenacity retries.

    Transport failures, HTTP 429 and 5xx are retried with exponential backoff;
    other non-success statuses fail on the first attempt.
    """

    def __init__(self,
                 timeout_seconds: float = 30.0,
                 retries: int = 2,
                 backoff_seconds: float = 1.0,
                 max_in_flight: int = 4,
                 headers: Optional[Dict[str, str]] = None,
                 stage: str = "remote"):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.timeout_seconds = timeout_seconds
        self.retries = retries
        self.backoff_seconds = backoff_seconds
        self.stage = stage
        self.session = requests.Session()
        self.session.headers.update({'Content-Type': 'application/json'})
        if headers:
            self.session.headers.update(headers)
        self._in_flight = threading.BoundedSemaphore(max_in_flight)

    def post_json(self, url: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST ``payload`` and return the decoded JSON object response.

        Raises:
            RemoteServiceError: After retries are exhausted, or immediately for
                non-transient statuses and malformed bodies.
        """
        retrying = Retrying(
            stop=stop_after_attempt(self.retries + 1),
            wait=wait_exponential(multiplier=self.backoff_seconds, min=0, max=30),
            retry=retry_if_exception(_is_transient),
            reraise=True,
        )
        with self._in_flight:
            return retrying(self._post_once, url, payload)

    def _post_once(self, url: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = self.session.post(url, json=payload, timeout=self.timeout_seconds)
        except requests.Timeout as e:
            self.logger.warning("Remote request timed out", url=url, error=str(e))
            raise RemoteServiceError(f"timeout after {self.timeout_seconds}s calling {url}",
                                     stage=self.stage) from e
        except requests.RequestException as e:
            self.logger.warning("Remote request failed", url=url, error=str(e))
            raise RemoteServiceError(f"transport failure calling {url}: {e}",
                                     stage=self.stage) from e

        if not 200 <= response.status_code < 300:
            excerpt = (response.text or "")[:BODY_EXCERPT_CHARS]
            self.logger.warning("Remote request rejected", url=url,
                                status=response.status_code)
            raise RemoteServiceError(f"non-success response from {url}",
                                     status=response.status_code,
                                     body_excerpt=excerpt,
                                     stage=self.stage)
        try:
            body = response.json()
        except ValueError as e:
            raise RemoteServiceError(f"malformed JSON response from {url}",
                                     status=response.status_code,
                                     body_excerpt=(response.text or "")[:BODY_EXCERPT_CHARS],
                                     stage=self.stage) from e
        if not isinstance(body, dict):
            raise RemoteServiceError(f"response from {url} is not a JSON object",
                                     status=response.status_code, stage=self.stage)
        return body
