"""Minimal HTTP client on ``http.client`` with explicit redirect control.

The authorization-code flow needs to observe 302 responses instead of
following them, which urllib's default opener does not allow without
ceremony. One connection per request; no TLS (loopback transport).
"""

from __future__ import annotations

import http.client
import json
from dataclasses import dataclass, field
from urllib.parse import urlsplit


@dataclass
class HttpReply:
    status: int
    reason: str
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def header(self, name: str) -> str | None:
        return self.headers.get(name.lower())

    def json(self):
        return json.loads(self.body.decode("utf-8"))


def request(
    method: str,
    url: str,
    headers: dict[str, str] | None = None,
    body: bytes | None = None,
    timeout: float = 10.0,
) -> HttpReply:
    """Issue one request and return the raw reply. Never follows redirects."""
    parts = urlsplit(url)
    if parts.scheme == "http":
        conn = http.client.HTTPConnection(parts.hostname, parts.port, timeout=timeout)
    elif parts.scheme == "https":
        conn = http.client.HTTPSConnection(parts.hostname, parts.port, timeout=timeout)
    else:
        raise ValueError(f"unsupported URL scheme in {url!r}")
    path = parts.path or "/"
    if parts.query:
        path = f"{path}?{parts.query}"
    try:
        conn.request(method, path, body=body, headers=dict(headers or {}))
        resp = conn.getresponse()
        payload = resp.read()
        reply_headers = {k.lower(): v for k, v in resp.getheaders()}
        return HttpReply(resp.status, resp.reason, reply_headers, payload)
    finally:
        conn.close()


def get(url: str, headers: dict[str, str] | None = None, timeout: float = 10.0) -> HttpReply:
    return request("GET", url, headers=headers, timeout=timeout)


def post(
    url: str,
    body: bytes,
    headers: dict[str, str] | None = None,
    timeout: float = 10.0,
) -> HttpReply:
    return request("POST", url, headers=headers, body=body, timeout=timeout)
