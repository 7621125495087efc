from __future__ import annotations

import json
import sys
import threading
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mcpidg import httpclient
from mcpidg.idp import MockIdp
from mcpidg.policy import ToolRegistry
from mcpidg.stack import LocalStack, start_stack
from mcpidg.tools import default_policy, default_registry

TEST_ISSUER = "http://idp.test/realms/master"
TEST_RESOURCE = "http://rs.test/mcp"

PERSONAS = ("developer-persona", "contractor-persona", "operator-persona")
TOOLS = ("docs_search", "code_search", "build_status", "ops_status")


@pytest.fixture
def registry() -> ToolRegistry:
    return default_registry()


@pytest.fixture
def policy(registry):
    return default_policy(registry)


@pytest.fixture
def idp_core() -> MockIdp:
    """Offline provider core: mints and signs without any HTTP."""
    return MockIdp(issuer=TEST_ISSUER, audience=TEST_RESOURCE)


@pytest.fixture(scope="session")
def signer() -> MockIdp:
    """Shared signing core for tests that never rotate its keys."""
    return MockIdp(issuer=TEST_ISSUER, audience=TEST_RESOURCE)


class CountingRegistry:
    """Default registry with handler-invocation counting, for
    asserting that rejected requests never reach tool dispatch."""

    def __init__(self) -> None:
        self.registry = ToolRegistry()
        self.calls = 0
        self._lock = threading.Lock()
        base = default_registry()
        for descriptor in base.descriptors():
            self.registry.register(
                descriptor.name,
                descriptor.description,
                descriptor.required_scopes,
                self._wrap(base, descriptor.name),
            )

    def _wrap(self, base: ToolRegistry, name: str):
        def handler(arguments):
            with self._lock:
                self.calls += 1
            return base.call(name, arguments)

        return handler


@pytest.fixture
def counting_registry() -> CountingRegistry:
    return CountingRegistry()


@pytest.fixture
def stack(tmp_path) -> LocalStack:
    """Self-contained provider + server pair on ephemeral loopback ports."""
    local = start_stack(audit_path=str(tmp_path / "audit.jsonl"))
    yield local
    local.stop()


@pytest.fixture
def counted_stack(tmp_path, counting_registry):
    registry = counting_registry.registry
    local = start_stack(
        audit_path=str(tmp_path / "audit.jsonl"),
        registry=registry,
        policy=default_policy(registry),
    )
    yield local, counting_registry
    local.stop()


def mcp_post(
    mcp_url: str,
    body: dict | bytes,
    token: str | None = None,
    bearer_mode: str = "header",
    extra_headers: dict | None = None,
) -> httpclient.HttpReply:
    """Raw POST helper so tests control every byte on the wire."""
    headers = {"Content-Type": "application/json"}
    if token is not None and bearer_mode == "header":
        headers["Authorization"] = f"Bearer {token}"
    if token is not None and bearer_mode == "body" and isinstance(body, dict):
        body = dict(body)
        params = dict(body.get("params") or {})
        params["authorization"] = token
        body["params"] = params
    if extra_headers:
        headers.update(extra_headers)
    raw = body if isinstance(body, bytes) else json.dumps(body).encode()
    return httpclient.post(mcp_url, raw, headers)


def rpc(method: str, request_id=None, params: dict | None = None) -> dict:
    doc = {"jsonrpc": "2.0", "method": method}
    if request_id is not None:
        doc["id"] = request_id
    if params is not None:
        doc["params"] = params
    return doc
