"""JSON-over-HTTP with bounded retries for OpenAI-compatible endpoints."""

from __future__ import annotations

import logging
import time

import httpx

logger = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class TransportError(RuntimeError):
    """A remote call failed after ``attempts`` tries."""

    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


def post_json(
    url: str,
    payload: dict,
    *,
    api_key: str | None = None,
    timeout: float = 60.0,
    attempts: int = 3,
    backoff: float = 1.0,
) -> dict:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
        headers["api-key"] = api_key  # Azure-style deployments
    last = "no attempt made"
    for attempt in range(1, attempts + 1):
        try:
            resp = httpx.post(url, json=payload, headers=headers, timeout=timeout)
        except httpx.HTTPError as exc:
            last = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code < 300:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise TransportError(f"non-JSON response from {url}", attempt) from exc
            last = f"HTTP {resp.status_code} from {url}: {resp.text[:200]}"
            if resp.status_code not in RETRY_STATUS:
                raise TransportError(last, attempt)
        if attempt < attempts:
            delay = backoff * 2 ** (attempt - 1)
            logger.warning("request to %s failed (%s); retrying in %.1fs", url, last, delay)
            time.sleep(delay)
    raise TransportError(last, attempts)
