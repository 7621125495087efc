"""The HTTP-facing MCP resource server.

Serves the OAuth-protected-resource discovery document, challenges
unauthenticated requests with a machine-followable WWW-Authenticate
header, validates bearer tokens before any request parsing, dispatches
authorized tool calls, and appends one audit record per tool invocation
(fail-closed).
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from http import client as http_client_mod
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import urlsplit

from . import __version__, protocol
from .audit import AuditLog, AuditRecord, AuditSinkFailure, utc_timestamp
from .policy import PolicyTable, ToolRegistry, authorize, visible_tools
from .tokens import (
    JwksCache,
    JwksFetcher,
    TokenError,
    VerifierConfig,
    fetch_jwks_via_discovery,
    verify_bearer,
)

log = logging.getLogger("mcpidg.server")

WELL_KNOWN_PATH = "/.well-known/oauth-protected-resource"
BEARER_METHODS = ("header", "body")

ENV_ISSUER = "MCPIDG_ISSUER"
ENV_RESOURCE = "MCPIDG_RESOURCE"
ENV_BIND = "MCPIDG_BIND"
ENV_POLICY = "MCPIDG_POLICY"
ENV_AUDIT = "MCPIDG_AUDIT"


class BindFailure(Exception):
    pass


class MalformedAuthorizationHeader(Exception):
    """Authorization header present but not a usable Bearer credential."""


@dataclass(frozen=True)
class ProtectedResourceMetadata:
    """The discovery document advertised at the well-known paths."""

    resource: str
    scopes_supported: tuple[str, ...]
    authorization_servers: tuple[str, ...]
    bearer_methods_supported: tuple[str, ...] = BEARER_METHODS

    def __post_init__(self) -> None:
        if not self.authorization_servers:
            raise ValueError("authorization_servers must not be empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "resource": self.resource,
            "scopes_supported": list(self.scopes_supported),
            "authorization_servers": list(self.authorization_servers),
            "bearer_methods_supported": list(self.bearer_methods_supported),
        }

    def to_json_bytes(self) -> bytes:
        # Byte-stable: fixed field order, compact separators.
        return json.dumps(self.to_dict(), separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class ServerConfig:
    bind_address: str = "localhost:8000"
    mcp_path: str = "/mcp"
    issuer_url: str = "http://localhost:8081/realms/master"
    resource_url: str | None = None  # derived from bind + mcp_path when unset
    required_scopes: frozenset[str] = frozenset({"openid", "profile"})
    jwks_ttl: float = 300.0
    clock_skew: float = 30.0
    audit_sink: str = "audit.jsonl"
    policy_path: str | None = None

    @property
    def host(self) -> str:
        return self.bind_address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rsplit(":", 1)[1])

    @classmethod
    def from_env(cls, **overrides: Any) -> "ServerConfig":
        """Defaults < environment < explicit overrides."""
        env_map = {
            "issuer_url": os.environ.get(ENV_ISSUER),
            "resource_url": os.environ.get(ENV_RESOURCE),
            "bind_address": os.environ.get(ENV_BIND),
            "policy_path": os.environ.get(ENV_POLICY),
            "audit_sink": os.environ.get(ENV_AUDIT),
        }
        merged = {k: v for k, v in env_map.items() if v is not None}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**merged)


def metadata_document(config: ServerConfig) -> ProtectedResourceMetadata:
    if config.resource_url is None:
        raise ValueError("resource_url must be resolved before building metadata")
    return ProtectedResourceMetadata(
        resource=config.resource_url,
        scopes_supported=tuple(sorted(config.required_scopes)),
        authorization_servers=(config.issuer_url,),
    )


def extract_bearer(headers: dict[str, str], body: bytes) -> str | None:
    """Token from the Authorization header, else from params.authorization.

    The header wins when both are present. Raises
    MalformedAuthorizationHeader for non-Bearer schemes or an empty
    credential; returns None when nothing was presented at all.
    """
    auth = headers.get("authorization")
    if auth is not None:
        scheme, _, credential = auth.partition(" ")
        credential = credential.strip()
        if scheme.lower() != "bearer" or not credential:
            raise MalformedAuthorizationHeader(
                f"authorization scheme {scheme!r} is not a usable Bearer credential"
            )
        return credential
    # Tolerant peek only: a malformed body is handled later, after the
    # request is (un)authenticated through some other channel.
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    if isinstance(doc, dict):
        params = doc.get("params")
        if isinstance(params, dict):
            token = params.get("authorization")
            if isinstance(token, str) and token:
                return token
    return None


@dataclass
class HttpResult:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


class McpApp:
    """Transport-independent request pipeline behind the HTTP handler."""

    def __init__(
        self,
        config: ServerConfig,
        policy: PolicyTable,
        registry: ToolRegistry,
        fetcher: JwksFetcher = fetch_jwks_via_discovery,
    ):
        if config.resource_url is None:
            raise ValueError("resource_url must be resolved before serving")
        self.config = config
        self.policy = policy  # swapped atomically on reload
        self.registry = registry
        self.cache = JwksCache(ttl=config.jwks_ttl)
        self.audit = AuditLog(config.audit_sink)
        self._fetcher = fetcher
        self.verifier_config = VerifierConfig(
            issuer=config.issuer_url,
            resource=config.resource_url,
            required_scopes=config.required_scopes,
            skew=config.clock_skew,
        )
        origin = urlsplit(config.resource_url)
        self.metadata_url = f"{origin.scheme}://{origin.netloc}{WELL_KNOWN_PATH}"
        self.metadata = metadata_document(config)

    def reload_policy(self, policy: PolicyTable) -> None:
        self.policy = policy

    # -- responses ---------------------------------------------------------

    def challenge(self, token_presented: bool) -> HttpResult:
        """401 with a WWW-Authenticate header pointing at the metadata URL.

        The error parameter appears only when a credential was presented
        and rejected, distinguishing "authenticate" from "re-authenticate".
        """
        value = f'Bearer resource_metadata="{self.metadata_url}"'
        if token_presented:
            value += ', error="invalid_token"'
        return HttpResult(status=401, headers={"WWW-Authenticate": value})

    def metadata_result(self) -> HttpResult:
        return HttpResult(
            status=200,
            headers={"Content-Type": "application/json"},
            body=self.metadata.to_json_bytes(),
        )

    def _rpc_result(self, response: protocol.RpcResponse) -> HttpResult:
        return HttpResult(
            status=200,
            headers={"Content-Type": "application/json"},
            body=protocol.encode_response(response),
        )

    def _rpc_error(
        self,
        request_id: protocol.RequestId | None,
        code: int,
        message: str,
        data: Any = None,
    ) -> HttpResult:
        return self._rpc_result(protocol.error_response(request_id, code, message, data))

    # -- audit -------------------------------------------------------------

    def _append_audit(
        self,
        *,
        subject: str,
        roles: frozenset[str],
        scopes: frozenset[str],
        tool: str,
        decision: str,
        deny_reason: dict[str, Any] | None,
        validation_us: int,
        started: float,
    ) -> None:
        record = AuditRecord(
            timestamp=utc_timestamp(),
            request_id=str(uuid.uuid4()),
            subject=subject,
            roles=tuple(sorted(roles)),
            scopes=tuple(sorted(scopes)),
            tool=tool,
            decision=decision,
            deny_reason=deny_reason,
            validation_latency_us=validation_us,
            total_latency_us=int((time.perf_counter() - started) * 1e6),
        )
        self.audit.append(record)

    # -- pipeline ----------------------------------------------------------

    def handle_mcp_post(self, headers: dict[str, str], body: bytes) -> HttpResult:
        """Authentication strictly precedes request parsing and dispatch."""
        started = time.perf_counter()

        def audit_unauthenticated(reason: str, validation_us: int = 0) -> None:
            self._append_audit(
                subject="-",
                roles=frozenset(),
                scopes=frozenset(),
                tool="-",
                decision="unauthenticated",
                deny_reason={"kind": reason},
                validation_us=validation_us,
                started=started,
            )

        try:
            token = extract_bearer(headers, body)
        except MalformedAuthorizationHeader:
            audit_unauthenticated("malformed_authorization_header")
            return self.challenge(token_presented=True)
        if token is None:
            audit_unauthenticated("no_token")
            return self.challenge(token_presented=False)

        validation_started = time.perf_counter()
        try:
            identity = verify_bearer(
                token, self.verifier_config, self.cache, fetcher=self._fetcher
            )
        except TokenError:
            validation_us = int((time.perf_counter() - validation_started) * 1e6)
            audit_unauthenticated("invalid_token", validation_us)
            return self.challenge(token_presented=True)
        validation_us = int((time.perf_counter() - validation_started) * 1e6)

        try:
            request = protocol.decode_request(body)
        except protocol.ParseError as exc:
            return self._rpc_error(None, exc.code, str(exc))
        except protocol.InvalidRequest as exc:
            return self._rpc_error(exc.request_id, exc.code, str(exc))

        if request.is_notification:
            # Notifications never receive an RPC body, even for unknown
            # methods; the transport acknowledges with 202.
            return HttpResult(status=202)

        if request.method == "initialize":
            return self._rpc_result(
                protocol.RpcResponse(id=request.id, result=self._initialize_result())
            )
        if request.method == "tools/list":
            tools = visible_tools(identity, self.policy, self.registry)
            result = {
                "tools": [
                    {
                        "name": t.name,
                        "description": t.description,
                        "required_scopes": sorted(t.required_scopes),
                    }
                    for t in tools
                ]
            }
            return self._rpc_result(protocol.RpcResponse(id=request.id, result=result))
        if request.method == "tools/call":
            return self._handle_tool_call(request, identity, validation_us, started)
        if request.method in protocol.method_table():
            # Only notification methods remain; carrying an id is a shape error.
            return self._rpc_error(
                request.id, protocol.INVALID_REQUEST,
                f"method {request.method!r} is a notification and must not carry an id",
            )
        return self._rpc_error(
            request.id, protocol.METHOD_NOT_FOUND, f"method not found: {request.method}"
        )

    def _initialize_result(self) -> dict[str, Any]:
        return {
            "protocolVersion": "2025-06-18",
            "capabilities": {"tools": {"listChanged": False}},
            "serverInfo": {"name": "mcpidg", "version": __version__},
        }

    def _handle_tool_call(
        self,
        request: protocol.RpcRequest,
        identity,
        validation_us: int,
        started: float,
    ) -> HttpResult:
        params = dict(request.params or {})
        # Transport-level field, never forwarded to handlers or audit.
        params.pop("authorization", None)
        name = params.get("name")
        arguments = params.get("arguments", {})
        if not isinstance(name, str) or not name or not isinstance(arguments, dict):
            return self._rpc_error(
                request.id, protocol.INVALID_PARAMS,
                "tools/call requires a string 'name' and an object 'arguments'",
            )

        decision = authorize(identity, name, self.policy, self.registry)
        deny_reason: dict[str, Any] | None = None
        if not decision.allowed:
            deny_reason = {"kind": decision.reason}
            if decision.missing_scopes:
                deny_reason["missing"] = sorted(decision.missing_scopes)

        try:
            self._append_audit(
                subject=identity.subject,
                roles=identity.roles,
                scopes=identity.scopes,
                tool=name,
                decision=decision.outcome,
                deny_reason=deny_reason,
                validation_us=validation_us,
                started=started,
            )
        except AuditSinkFailure as exc:
            log.error("audit sink failure: %s", exc)
            return self._rpc_error(
                request.id, protocol.INTERNAL_ERROR, "audit sink unavailable"
            )

        if not decision.allowed:
            data = {"reason": decision.reason, "tool": name}
            if decision.missing_scopes:
                data["missing_scopes"] = sorted(decision.missing_scopes)
            return self._rpc_error(request.id, protocol.FORBIDDEN, "forbidden", data)

        try:
            payload = self.registry.call(name, arguments)
        except Exception:
            log.exception("tool handler %r failed", name)
            return self._rpc_error(
                request.id, protocol.INTERNAL_ERROR, "tool handler failure"
            )
        return self._rpc_result(protocol.RpcResponse(id=request.id, result=payload))


class _McpHttpServer(ThreadingHTTPServer):
    daemon_threads = False  # graceful stop waits for in-flight requests
    block_on_close = True
    app: McpApp

    def handle_error(self, request, client_address) -> None:
        # Client disconnects mid-response are routine, not tracebacks.
        log.debug("connection error from %s", client_address, exc_info=True)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "mcpidg"

    @property
    def app(self) -> McpApp:
        return self.server.app  # type: ignore[attr-defined]

    def log_message(self, fmt: str, *args: Any) -> None:
        pass  # replaced by the explicit access-log lines below

    def _send(self, result: HttpResult) -> None:
        # Logged before the body is written (the send_response convention)
        # so observers never see a response whose line is still pending.
        reason = http_client_mod.responses.get(result.status, "")
        log.info('"%s %s HTTP/1.1" %d %s', self.command, self.path, result.status, reason)
        self.send_response(result.status)
        for name, value in result.headers.items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(result.body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if result.body:
            self.wfile.write(result.body)
        self.close_connection = True

    def do_GET(self) -> None:
        mcp_path = self.app.config.mcp_path
        if self.path in (WELL_KNOWN_PATH, WELL_KNOWN_PATH + mcp_path):
            self._send(self.app.metadata_result())
            return
        self._send(HttpResult(status=404, body=b""))

    def do_POST(self) -> None:
        if self.path != self.app.config.mcp_path:
            self._send(HttpResult(status=404))
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError:
            self._send(HttpResult(status=400))
            return
        body = self.rfile.read(length) if length > 0 else b""
        headers = {k.lower(): v for k, v in self.headers.items()}
        try:
            result = self.app.handle_mcp_post(headers, body)
        except Exception:
            log.exception("unhandled server error")
            result = HttpResult(
                status=200,
                headers={"Content-Type": "application/json"},
                body=protocol.encode_response(
                    protocol.error_response(None, protocol.INTERNAL_ERROR, "internal error")
                ),
            )
        self._send(result)


class ServerHandle:
    """A running resource server; stop() completes in-flight requests."""

    def __init__(self, httpd: _McpHttpServer, thread: threading.Thread, app: McpApp):
        self._httpd = httpd
        self._thread = thread
        self.app = app

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def resource_url(self) -> str:
        return self.app.config.resource_url  # type: ignore[return-value]

    @property
    def mcp_url(self) -> str:
        return self.resource_url

    @property
    def metadata_url(self) -> str:
        return self.app.metadata_url

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=10)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()


def serve(
    config: ServerConfig,
    policy: PolicyTable,
    registry: ToolRegistry,
    fetcher: JwksFetcher = fetch_jwks_via_discovery,
) -> ServerHandle:
    """Bind, resolve the externally visible resource URL, and start serving."""
    try:
        httpd = _McpHttpServer((config.host, config.port), _Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {config.bind_address!r}: {exc}") from exc
    actual_port = httpd.server_address[1]
    resource_url = config.resource_url or (
        f"http://{config.host}:{actual_port}{config.mcp_path}"
    )
    resolved = replace(
        config,
        bind_address=f"{config.host}:{actual_port}",
        resource_url=resource_url,
    )
    app = McpApp(resolved, policy, registry, fetcher=fetcher)
    httpd.app = app
    thread = threading.Thread(
        target=lambda: httpd.serve_forever(poll_interval=0.05),
        name="mcpidg-server",
        daemon=True,
    )
    thread.start()
    return ServerHandle(httpd, thread, app)
