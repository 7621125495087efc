"""File-backed token cache for the client harness.

Stands in for an OS keychain: a JSON file created with owner-only
permissions and replaced atomically on every write. Expired entries are
never returned; an unparseable file is treated as empty (with a warning)
rather than failing the flow.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable

log = logging.getLogger("mcpidg.tokenstore")


@dataclass(frozen=True)
class TokenEntry:
    access_token: str
    expires_at: float


class TokenStore:
    def __init__(self, path: str, clock: Callable[[], float] = time.time):
        self.path = path
        self._clock = clock

    def _load(self) -> dict[str, dict]:
        try:
            with open(self.path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            return {}
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            log.warning("token store %r is corrupt (%s); treating as empty", self.path, exc)
            return {}
        entries = doc.get("entries") if isinstance(doc, dict) else None
        return entries if isinstance(entries, dict) else {}

    def get(self, resource: str) -> TokenEntry | None:
        entry = self._load().get(resource)
        if not isinstance(entry, dict):
            return None
        token = entry.get("access_token")
        expires_at = entry.get("expires_at")
        if not isinstance(token, str) or not isinstance(expires_at, (int, float)):
            return None
        if self._clock() >= expires_at:
            return None
        return TokenEntry(access_token=token, expires_at=float(expires_at))

    def put(self, resource: str, access_token: str, expires_at: float) -> None:
        entries = self._load()
        entries[resource] = {"access_token": access_token, "expires_at": expires_at}
        payload = json.dumps({"entries": entries}, indent=2).encode("utf-8")
        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        tmp_path = f"{self.path}.{os.getpid()}.tmp"
        fd = os.open(tmp_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
        except BaseException:
            os.unlink(tmp_path)
            raise
        os.replace(tmp_path, self.path)
