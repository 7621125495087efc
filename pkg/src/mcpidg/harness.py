"""Conformance client: plays the IDE-extension side of the flow.

A cold run produces a 13-step transcript: the challenged request (1-2),
both metadata fetches (3-6), the PKCE authorization and token exchange
(7-9), and the authenticated MCP traffic (10-13). Steps 11-12 are the
server-side token validation, which the client cannot observe on the
wire; they are recorded as annotation steps and cross-checked against the
provider's request counters by the conformance command. A warm run (valid
cached token) contains steps 10-13 only and touches the identity provider
zero times.

Secrets hygiene: bearer tokens and PKCE verifiers never appear in the
transcript; only the verifier's S256 digest is recorded.
"""

from __future__ import annotations

import base64
import hashlib
import json
import secrets
import time
import uuid
from dataclasses import dataclass, field
from typing import Any
from urllib.parse import parse_qs, urlencode, urlsplit

from . import httpclient, protocol
from .tokenstore import TokenStore

DEFAULT_CLIENT_ID = "ide-extension"
DEFAULT_REDIRECT_URI = "http://localhost:33418/callback"

# Scope vocabulary the client is configured to request; the provider
# narrows it to what the authenticated user may actually be granted.
DEFAULT_REQUEST_SCOPES = frozenset(
    {"openid", "profile", "mcp.docs.read", "mcp.code.search", "mcp.ops.read"}
)


class TransportError(Exception):
    pass


class Unauthorized(Exception):
    """The server answered 401 to a request that carried a token."""


class AuthFlowError(Exception):
    pass


class StepFailure(Exception):
    def __init__(self, index: int, detail: str, transcript: "FlowTranscript"):
        super().__init__(f"step {index}: {detail}")
        self.index = index
        self.detail = detail
        self.transcript = transcript


@dataclass(frozen=True)
class StepRecord:
    index: int
    description: str
    request_summary: str
    response_summary: str
    wall_latency_us: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "description": self.description,
            "request_summary": self.request_summary,
            "response_summary": self.response_summary,
            "wall_latency_us": self.wall_latency_us,
        }


@dataclass
class FlowTranscript:
    steps: list[StepRecord] = field(default_factory=list)

    def add(
        self,
        index: int,
        description: str,
        request_summary: str,
        response_summary: str,
        wall_latency_us: int = 0,
    ) -> StepRecord:
        if not 1 <= index <= 13:
            raise ValueError(f"step index {index} outside 1..13")
        if self.steps and index <= self.steps[-1].index:
            raise ValueError("step indices must be strictly increasing")
        record = StepRecord(
            index, description, request_summary, response_summary, wall_latency_us
        )
        self.steps.append(record)
        return record

    def indices(self) -> list[int]:
        return [s.index for s in self.steps]

    def step(self, index: int) -> StepRecord | None:
        for record in self.steps:
            if record.index == index:
                return record
        return None

    @property
    def final_step(self) -> StepRecord:
        return self.steps[-1]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(s.to_dict(), separators=(",", ":")) for s in self.steps)


@dataclass(frozen=True)
class PkcePair:
    verifier: str
    challenge: str
    method: str = "S256"


def generate_pkce() -> PkcePair:
    """Fresh high-entropy verifier (86 chars, within the 43-128 bound)."""
    verifier = secrets.token_urlsafe(64)
    digest = hashlib.sha256(verifier.encode("ascii")).digest()
    challenge = base64.urlsafe_b64encode(digest).rstrip(b"=").decode("ascii")
    return PkcePair(verifier=verifier, challenge=challenge)


def parse_www_authenticate(value: str) -> dict[str, str]:
    """Parse `Bearer k="v", ...` into its parameters."""
    scheme, _, rest = value.partition(" ")
    if scheme.lower() != "bearer":
        raise AuthFlowError(f"unexpected challenge scheme {scheme!r}")
    params: dict[str, str] = {}
    for part in rest.split(","):
        part = part.strip()
        if not part or "=" not in part:
            continue
        key, _, raw = part.partition("=")
        params[key.strip()] = raw.strip().strip('"')
    return params


def _mcp_post(
    mcp_url: str,
    body: dict[str, Any],
    token: str | None,
    bearer_mode: str = "header",
) -> httpclient.HttpReply:
    headers = {"Content-Type": "application/json"}
    if token is not None:
        if bearer_mode == "header":
            headers["Authorization"] = f"Bearer {token}"
        elif bearer_mode == "body":
            body = dict(body)
            params = dict(body.get("params") or {})
            params["authorization"] = token
            body["params"] = params
        else:
            raise ValueError(f"unknown bearer mode {bearer_mode!r}")
    try:
        return httpclient.post(mcp_url, json.dumps(body).encode("utf-8"), headers)
    except OSError as exc:
        raise TransportError(f"POST {mcp_url} failed: {exc}") from exc


def _rpc_body(method: str, request_id: Any = None, params: dict | None = None) -> dict:
    doc: dict[str, Any] = {"jsonrpc": "2.0", "method": method}
    if request_id is not None:
        doc["id"] = request_id
    if params is not None:
        doc["params"] = params
    return doc


def discover_oidc(issuer: str) -> dict[str, Any]:
    url = issuer.rstrip("/") + "/.well-known/openid-configuration"
    try:
        reply = httpclient.get(url)
    except OSError as exc:
        raise AuthFlowError(f"discovery fetch failed: {exc}") from exc
    if reply.status != 200:
        raise AuthFlowError(f"discovery endpoint returned {reply.status}")
    return reply.json()


def acquire_token(
    discovery: dict[str, Any],
    persona: str,
    pkce: PkcePair,
    scopes: frozenset[str],
    client_id: str = DEFAULT_CLIENT_ID,
    redirect_uri: str = DEFAULT_REDIRECT_URI,
) -> dict[str, Any]:
    """Run the authorization-code exchange; returns the token response.

    Raises AuthFlowError on any provider rejection, and also when the
    response carries a refresh_token -- this deployment never issues one.
    """
    state = secrets.token_urlsafe(16)
    query = urlencode(
        {
            "response_type": "code",
            "client_id": client_id,
            "redirect_uri": redirect_uri,
            "scope": " ".join(sorted(scopes)),
            "state": state,
            "code_challenge": pkce.challenge,
            "code_challenge_method": pkce.method,
            "username": persona,
        }
    )
    authorize_url = f"{discovery['authorization_endpoint']}?{query}"
    try:
        reply = httpclient.get(authorize_url)
    except OSError as exc:
        raise AuthFlowError(f"authorize request failed: {exc}") from exc
    if reply.status != 302:
        raise AuthFlowError(
            f"authorize endpoint returned {reply.status}: {reply.body.decode(errors='replace')}"
        )
    location = reply.header("location") or ""
    redirect_query = parse_qs(urlsplit(location).query)
    code = redirect_query.get("code", [""])[0]
    echoed_state = redirect_query.get("state", [""])[0]
    if not code:
        raise AuthFlowError("redirect carries no authorization code")
    if echoed_state != state:
        raise AuthFlowError("state parameter was not echoed back intact")

    form = urlencode(
        {
            "grant_type": "authorization_code",
            "code": code,
            "code_verifier": pkce.verifier,
            "client_id": client_id,
            "redirect_uri": redirect_uri,
        }
    ).encode("ascii")
    try:
        token_reply = httpclient.post(
            discovery["token_endpoint"],
            form,
            {"Content-Type": "application/x-www-form-urlencoded"},
        )
    except OSError as exc:
        raise AuthFlowError(f"token request failed: {exc}") from exc
    if token_reply.status != 200:
        raise AuthFlowError(
            f"token endpoint returned {token_reply.status}: "
            f"{token_reply.body.decode(errors='replace')}"
        )
    response = token_reply.json()
    if "refresh_token" in response:
        raise AuthFlowError("token response carries a refresh_token; none may be issued")
    if not isinstance(response.get("access_token"), str):
        raise AuthFlowError("token response lacks an access_token")
    return response


def call_tool(
    mcp_url: str,
    token: str,
    tool: str,
    arguments: dict[str, Any] | None = None,
    bearer_mode: str = "header",
) -> protocol.RpcResponse:
    """One authenticated tools/call; returns the parsed JSON-RPC response."""
    body = _rpc_body(
        "tools/call",
        request_id=str(uuid.uuid4()),
        params={"name": tool, "arguments": arguments or {}},
    )
    reply = _mcp_post(mcp_url, body, token, bearer_mode)
    if reply.status == 401:
        raise Unauthorized(f"server rejected the bearer token for {tool!r}")
    if reply.status != 200:
        raise TransportError(f"unexpected status {reply.status} for tools/call")
    return protocol.decode_response(reply.body)


def _summarize_rpc(reply: httpclient.HttpReply) -> str:
    if reply.status == 202:
        return "202 Accepted (no body)"
    try:
        parsed = protocol.decode_response(reply.body)
    except protocol.ProtocolError:
        return f"{reply.status} (unparseable body)"
    if parsed.error is not None:
        return f"{reply.status} error {parsed.error.code}: {parsed.error.message}"
    return f"{reply.status} result keys={sorted((parsed.result or {}).keys())}"


class _StepTimer:
    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc_info):
        self.elapsed_us = int((time.perf_counter() - self._t0) * 1e6)
        return False


def run_sequence(
    mcp_url: str,
    persona: str,
    client_id: str = DEFAULT_CLIENT_ID,
    redirect_uri: str = DEFAULT_REDIRECT_URI,
    tool: str = "docs_search",
    tool_arguments: dict[str, Any] | None = None,
    scopes: frozenset[str] = DEFAULT_REQUEST_SCOPES,
    token_store: TokenStore | None = None,
    bearer_mode: str = "header",
) -> FlowTranscript:
    """Drive the full end-to-end authorization sequence against a server.

    Returns the transcript; raises StepFailure (with the transcript so
    far) when a step cannot complete. A final tools/call carrying a
    JSON-RPC authorization error is a *completed* sequence -- deciding
    whether a deny was expected is the caller's business.
    """
    transcript = FlowTranscript()

    def fail(index: int, detail: str) -> StepFailure:
        return StepFailure(index, detail, transcript)

    cached = token_store.get(mcp_url) if token_store is not None else None
    if cached is not None:
        token = cached.access_token
    else:
        token = _cold_start(
            transcript, mcp_url, persona, client_id, redirect_uri, scopes, token_store, fail
        )

    # Step 10: authenticated MCP traffic up to the tools/call request.
    preliminary: list[str] = []
    with _StepTimer() as timer:
        try:
            init_reply = _mcp_post(
                mcp_url, _rpc_body("initialize", request_id=1), token, bearer_mode
            )
        except TransportError as exc:
            raise fail(10, str(exc))
        if init_reply.status == 401:
            raise fail(10, "server rejected the bearer token on initialize")
        if init_reply.status != 200:
            raise fail(10, f"initialize returned {init_reply.status}")
        preliminary.append("initialize -> 200")

        notify_reply = _mcp_post(
            mcp_url, _rpc_body("notifications/initialized"), token, bearer_mode
        )
        if notify_reply.status != 202:
            raise fail(10, f"initialized notification returned {notify_reply.status}, wanted 202")
        preliminary.append("notifications/initialized -> 202")

        list_reply = _mcp_post(
            mcp_url, _rpc_body("tools/list", request_id=2), token, bearer_mode
        )
        if list_reply.status != 200:
            raise fail(10, f"tools/list returned {list_reply.status}")
        preliminary.append("tools/list -> 200")

        call_body = _rpc_body(
            "tools/call",
            request_id=3,
            params={"name": tool, "arguments": tool_arguments or {}},
        )
        call_reply = _mcp_post(mcp_url, call_body, token, bearer_mode)
        if call_reply.status == 401:
            raise fail(10, "server rejected the bearer token on tools/call")
        if call_reply.status != 200:
            raise fail(10, f"tools/call returned {call_reply.status}")
    transcript.add(
        10,
        "MCP requests with bearer token",
        f"POST {mcp_url} x4 ({bearer_mode} bearer): initialize, "
        f"notifications/initialized, tools/list, tools/call {tool}",
        "; ".join(preliminary),
        timer.elapsed_us,
    )

    # Steps 11-12 happen between resource server and provider; annotate.
    transcript.add(
        11,
        "token validation against provider keys (server side)",
        "(not client-observable)",
        "see provider jwks counters",
    )
    transcript.add(
        12,
        "validation result (server side)",
        "(not client-observable)",
        "implied by authorized response",
    )
    transcript.add(
        13,
        "authorized MCP response",
        f"tools/call {tool}",
        _summarize_rpc(call_reply),
    )
    return transcript


def _cold_start(
    transcript: FlowTranscript,
    mcp_url: str,
    persona: str,
    client_id: str,
    redirect_uri: str,
    scopes: frozenset[str],
    token_store: TokenStore | None,
    fail,
) -> str:
    """Steps 1-9: challenge, discovery, PKCE code flow. Returns the token."""
    with _StepTimer() as timer:
        try:
            bare = _mcp_post(mcp_url, _rpc_body("initialize", request_id=0), token=None)
        except TransportError as exc:
            raise fail(1, str(exc))
    transcript.add(
        1, "MCP request without token", f"POST {mcp_url} initialize (no credentials)",
        f"status {bare.status}", timer.elapsed_us,
    )
    if bare.status != 401:
        raise fail(2, f"expected 401 challenge, got {bare.status}")
    challenge_header = bare.header("www-authenticate") or ""
    challenge = parse_www_authenticate(challenge_header)
    metadata_url = challenge.get("resource_metadata", "")
    if not metadata_url:
        raise fail(2, "401 challenge lacks a resource_metadata parameter")
    transcript.add(
        2, "401 challenge with metadata pointer",
        "(response to step 1)", f"WWW-Authenticate: {challenge_header}",
    )

    with _StepTimer() as timer:
        try:
            meta_reply = httpclient.get(metadata_url)
        except OSError as exc:
            raise fail(3, f"metadata fetch failed: {exc}")
    if meta_reply.status != 200:
        raise fail(4, f"metadata endpoint returned {meta_reply.status}")
    metadata = meta_reply.json()
    transcript.add(
        3, "GET resource metadata (challenge URL)", f"GET {metadata_url}",
        f"status {meta_reply.status}", timer.elapsed_us,
    )
    transcript.add(
        4, "resource metadata with authorization server",
        "(response to step 3)",
        f"authorization_servers={metadata.get('authorization_servers')}",
    )

    resource = metadata.get("resource", "")
    suffix = urlsplit(resource).path or ""
    suffixed_url = metadata_url.rstrip("/") + suffix
    with _StepTimer() as timer:
        try:
            suffixed_reply = httpclient.get(suffixed_url)
        except OSError as exc:
            raise fail(5, f"suffixed metadata fetch failed: {exc}")
    if suffixed_reply.status != 200:
        raise fail(6, f"suffixed metadata endpoint returned {suffixed_reply.status}")
    if suffixed_reply.body != meta_reply.body:
        raise fail(6, "metadata documents at the two well-known paths differ")
    transcript.add(
        5, "GET resource metadata (path-suffixed variant)", f"GET {suffixed_url}",
        f"status {suffixed_reply.status}", timer.elapsed_us,
    )
    transcript.add(
        6, "resource metadata (identical to step 4)",
        "(response to step 5)", "body equals step 4 body",
    )

    servers = metadata.get("authorization_servers") or []
    if not servers:
        raise fail(7, "metadata names no authorization servers")
    issuer = servers[0]
    pkce = generate_pkce()
    verifier_digest = hashlib.sha256(pkce.verifier.encode("ascii")).hexdigest()
    with _StepTimer() as timer:
        try:
            discovery = discover_oidc(issuer)
            # acquire_token runs authorize (7) and token (8-9) together;
            # any provider rejection surfaces here.
            token_response = acquire_token(
                discovery, persona, pkce, scopes, client_id, redirect_uri
            )
        except AuthFlowError as exc:
            raise fail(7, str(exc))
    transcript.add(
        7, "authorization request (PKCE)",
        f"GET {discovery.get('authorization_endpoint', issuer)} "
        f"(S256 verifier sha256={verifier_digest[:16]}...)",
        "302 redirect with authorization code", timer.elapsed_us,
    )
    transcript.add(
        8, "token request (PKCE)",
        f"POST {discovery.get('token_endpoint', issuer)} grant_type=authorization_code",
        "(see step 9)",
    )
    transcript.add(
        9, "access token issued",
        "(response to step 8)",
        f"token_type={token_response.get('token_type')} "
        f"expires_in={token_response.get('expires_in')} (token withheld)",
    )

    token = token_response["access_token"]
    if token_store is not None:
        token_store.put(
            mcp_url, token, time.time() + float(token_response.get("expires_in", 0))
        )
    return token
