"""Embedded deterministic OAuth 2.0 / OIDC provider.

Drives the full authorization sequence without a browser: the authorize
endpoint takes the username directly and auto-approves, simulating an
already-authenticated session. PKCE (S256) is mandatory, authorization
codes are single-use with short expiry, access tokens are short-lived
RS256 JWTs, and no refresh tokens are ever issued. Key rotation exists so
stale-JWKS scenarios can be exercised.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import secrets
import threading
import time
import uuid
from dataclasses import dataclass, field
from http import client as http_client_mod
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlencode, urlsplit

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from .tokens import b64url_encode

log = logging.getLogger("mcpidg.idp")

DEFAULT_TOKEN_LIFETIME = 300.0
DEFAULT_CODE_LIFETIME = 60.0


class IdpError(Exception):
    """Rendered as an OAuth error JSON body."""

    oauth_error = "invalid_request"
    http_status = 400


class UnknownClient(IdpError):
    oauth_error = "invalid_client"
    http_status = 401


class RedirectUriNotWhitelisted(IdpError):
    oauth_error = "invalid_request"


class MissingPkceChallenge(IdpError):
    oauth_error = "invalid_request"


class UnsupportedChallengeMethod(IdpError):
    oauth_error = "invalid_request"


class UnknownUser(IdpError):
    oauth_error = "access_denied"


class InvalidGrant(IdpError):
    oauth_error = "invalid_grant"


class PkceVerificationFailed(IdpError):
    oauth_error = "invalid_grant"


@dataclass(frozen=True)
class UserRecord:
    username: str
    roles: frozenset[str]
    grantable_scopes: frozenset[str]


@dataclass(frozen=True)
class ClientRegistration:
    client_id: str
    redirect_uris: frozenset[str]
    public: bool = True
    pkce_required: bool = True


@dataclass
class AuthorizationCodeRecord:
    code: str
    client_id: str
    redirect_uri: str
    code_challenge: str
    challenge_method: str
    username: str
    scopes: frozenset[str]
    expires_at: float
    consumed: bool = False


@dataclass
class SigningKey:
    kid: str
    private_key: rsa.RSAPrivateKey
    active: bool


def default_users() -> tuple[UserRecord, ...]:
    base = frozenset({"openid", "profile"})
    return (
        UserRecord(
            "developer-persona",
            frozenset({"developer"}),
            base | {"mcp.docs.read", "mcp.code.search"},
        ),
        UserRecord(
            "contractor-persona", frozenset({"contractor"}), base | {"mcp.docs.read"}
        ),
        UserRecord(
            "operator-persona", frozenset({"operator"}), base | {"mcp.ops.read"}
        ),
    )


DEFAULT_CLIENT_ID = "ide-extension"
DEFAULT_REDIRECT_URI = "http://localhost:33418/callback"


def default_clients() -> tuple[ClientRegistration, ...]:
    return (
        ClientRegistration(
            client_id=DEFAULT_CLIENT_ID,
            redirect_uris=frozenset(
                {DEFAULT_REDIRECT_URI, "http://127.0.0.1:33418/callback"}
            ),
        ),
    )


def s256_challenge(verifier: str) -> str:
    return b64url_encode(hashlib.sha256(verifier.encode("ascii")).digest())


def load_fixtures(
    document: dict[str, Any],
) -> tuple[tuple[UserRecord, ...], tuple[ClientRegistration, ...]]:
    """Users and client registrations from a config document.

    Either section may be omitted, in which case the shipped defaults
    apply. Schema: {"users": [{"username", "roles", "grantable_scopes"}],
    "clients": [{"client_id", "redirect_uris"}]}.
    """
    users = tuple(
        UserRecord(
            username=entry["username"],
            roles=frozenset(entry.get("roles", [])),
            grantable_scopes=frozenset(entry.get("grantable_scopes", [])),
        )
        for entry in document.get("users", [])
    ) or default_users()
    clients = tuple(
        ClientRegistration(
            client_id=entry["client_id"],
            redirect_uris=frozenset(entry.get("redirect_uris", [])),
        )
        for entry in document.get("clients", [])
    ) or default_clients()
    return users, clients


def _rsa_jwk(kid: str, key: rsa.RSAPrivateKey) -> dict[str, str]:
    numbers = key.public_key().public_numbers()

    def enc(value: int) -> str:
        raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
        return b64url_encode(raw)

    return {
        "kid": kid,
        "kty": "RSA",
        "alg": "RS256",
        "use": "sig",
        "n": enc(numbers.n),
        "e": enc(numbers.e),
    }


# kid values never repeat within a process lifetime, across every
# provider instance (next() on itertools.count is atomic in CPython).
_KID_SEQUENCE = itertools.count(1)


class MockIdp:
    """Protocol core; the HTTP layer in serve_idp() is a thin adapter."""

    def __init__(
        self,
        issuer: str,
        audience: str,
        users: tuple[UserRecord, ...] | None = None,
        clients: tuple[ClientRegistration, ...] | None = None,
        token_lifetime: float = DEFAULT_TOKEN_LIFETIME,
        code_lifetime: float = DEFAULT_CODE_LIFETIME,
        clock: Callable[[], float] = time.time,
    ):
        self.issuer = issuer.rstrip("/")
        self.audience = audience
        self.token_lifetime = token_lifetime
        self.code_lifetime = code_lifetime
        self._clock = clock
        self.users = {u.username: u for u in (users or default_users())}
        self.clients = {c.client_id: c for c in (clients or default_clients())}
        self._codes: dict[str, AuthorizationCodeRecord] = {}
        self._code_lock = threading.Lock()
        self._keys: list[SigningKey] = []
        self._key_lock = threading.Lock()
        self._new_active_key()

    # -- keys ----------------------------------------------------------------

    def _new_active_key(self) -> str:
        kid = f"key-{next(_KID_SEQUENCE)}"
        key = SigningKey(
            kid=kid,
            private_key=rsa.generate_private_key(public_exponent=65537, key_size=2048),
            active=True,
        )
        with self._key_lock:
            for existing in self._keys:
                existing.active = False
            self._keys.append(key)
        return kid

    def rotate_keys(self, retain_old: bool) -> str:
        """Swap in a fresh signing key; drop retired keys unless retained."""
        with self._key_lock:
            if not retain_old:
                self._keys.clear()
        return self._new_active_key()

    def active_kid(self) -> str:
        with self._key_lock:
            for key in self._keys:
                if key.active:
                    return key.kid
        raise RuntimeError("no active signing key")

    def jwks_document(self) -> dict[str, Any]:
        with self._key_lock:
            return {"keys": [_rsa_jwk(k.kid, k.private_key) for k in self._keys]}

    # -- token minting -------------------------------------------------------

    def sign_claims(self, claims: dict[str, Any], kid: str | None = None) -> str:
        """RS256-sign an arbitrary claims map (tests craft corpora with it)."""
        with self._key_lock:
            signer = next(
                (k for k in self._keys if (k.kid == kid if kid else k.active)), None
            )
            if signer is None:
                raise ValueError(f"no signing key {kid!r}")
            private_key = signer.private_key
            header = {"alg": "RS256", "kid": kid or signer.kid, "typ": "JWT"}
        signing_input = (
            b64url_encode(json.dumps(header, separators=(",", ":")).encode())
            + "."
            + b64url_encode(json.dumps(claims, separators=(",", ":")).encode())
        )
        signature = private_key.sign(
            signing_input.encode("ascii"), padding.PKCS1v15(), hashes.SHA256()
        )
        return signing_input + "." + b64url_encode(signature)

    def standard_claims(
        self,
        username: str,
        scopes: frozenset[str],
        lifetime: float | None = None,
    ) -> dict[str, Any]:
        user = self.users[username]
        now = int(self._clock())
        return {
            "iss": self.issuer,
            "sub": username,
            "aud": [self.audience],
            "iat": now,
            "exp": now + int(lifetime if lifetime is not None else self.token_lifetime),
            "jti": str(uuid.uuid4()),
            "scope": " ".join(sorted(scopes)),
            "roles": sorted(user.roles),
        }

    def issue_token_for(
        self,
        username: str,
        scopes: frozenset[str] | None = None,
        lifetime: float | None = None,
    ) -> str:
        """Direct mint, bypassing the code flow (test and bench helper)."""
        user = self.users[username]
        granted = user.grantable_scopes if scopes is None else scopes
        return self.sign_claims(self.standard_claims(username, frozenset(granted), lifetime))

    # -- endpoints -----------------------------------------------------------

    def discovery_document(self) -> dict[str, Any]:
        return {
            "issuer": self.issuer,
            "authorization_endpoint": f"{self.issuer}/authorize",
            "token_endpoint": f"{self.issuer}/token",
            "jwks_uri": f"{self.issuer}/jwks",
            "response_types_supported": ["code"],
            "code_challenge_methods_supported": ["S256"],
        }

    def handle_authorize(self, params: dict[str, str]) -> str:
        """Validate an authorization request and return the redirect location.

        Auto-approves as the named user; the granted scopes are the
        requested set intersected with the user's grantable scopes.
        """
        client_id = params.get("client_id", "")
        client = self.clients.get(client_id)
        if client is None:
            raise UnknownClient(f"client {client_id!r} is not registered")
        redirect_uri = params.get("redirect_uri", "")
        if redirect_uri not in client.redirect_uris:
            raise RedirectUriNotWhitelisted(
                f"redirect_uri {redirect_uri!r} is not whitelisted for client "
                f"{client_id!r}; add the exact URL (scheme, host, port and path) "
                f"to the client's registered redirect list"
            )
        if params.get("response_type", "code") != "code":
            raise IdpError("only response_type=code is supported")
        challenge = params.get("code_challenge", "")
        if not challenge:
            raise MissingPkceChallenge("code_challenge is required (PKCE mandatory)")
        method = params.get("code_challenge_method", "")
        if method != "S256":
            raise UnsupportedChallengeMethod(
                f"code_challenge_method {method!r} unsupported; only S256"
            )
        username = params.get("username", "")
        user = self.users.get(username)
        if user is None:
            raise UnknownUser(f"no such user {username!r}")
        requested = frozenset(params.get("scope", "").split())
        granted = requested & user.grantable_scopes
        code = secrets.token_urlsafe(32)  # 256 bits of entropy
        record = AuthorizationCodeRecord(
            code=code,
            client_id=client_id,
            redirect_uri=redirect_uri,
            code_challenge=challenge,
            challenge_method=method,
            username=username,
            scopes=granted,
            expires_at=self._clock() + self.code_lifetime,
        )
        with self._code_lock:
            self._codes[code] = record
        query = {"code": code}
        if params.get("state"):
            query["state"] = params["state"]
        separator = "&" if "?" in redirect_uri else "?"
        return f"{redirect_uri}{separator}{urlencode(query)}"

    def handle_token(self, params: dict[str, str]) -> dict[str, Any]:
        """Redeem a code for an access token; never issues refresh tokens."""
        if params.get("grant_type") != "authorization_code":
            raise IdpError(
                f"grant_type {params.get('grant_type')!r} unsupported "
                "(authorization_code only)"
            )
        code = params.get("code", "")
        verifier = params.get("code_verifier", "")
        now = self._clock()
        with self._code_lock:
            record = self._codes.get(code)
            if record is None:
                raise InvalidGrant("unknown authorization code")
            if record.consumed:
                raise InvalidGrant("authorization code already redeemed")
            if now > record.expires_at:
                raise InvalidGrant("authorization code expired")
            if record.client_id != params.get("client_id"):
                raise InvalidGrant("client_id does not match the authorization code")
            if record.redirect_uri != params.get("redirect_uri"):
                raise InvalidGrant("redirect_uri does not match the authorization code")
            if s256_challenge(verifier) != record.code_challenge:
                raise PkceVerificationFailed(
                    "code_verifier does not match the bound code_challenge"
                )
            record.consumed = True
        token = self.sign_claims(
            self.standard_claims(record.username, record.scopes)
        )
        return {
            "access_token": token,
            "token_type": "Bearer",
            "expires_in": int(self.token_lifetime),
            "scope": " ".join(sorted(record.scopes)),
        }


@dataclass
class IdpConfig:
    bind_address: str = "localhost:8081"
    issuer_path: str = "/realms/master"
    issuer_url: str | None = None  # derived from bind + issuer_path when unset
    audience: str = "http://localhost:8000/mcp"
    token_lifetime: float = DEFAULT_TOKEN_LIFETIME
    code_lifetime: float = DEFAULT_CODE_LIFETIME
    users: tuple[UserRecord, ...] = field(default_factory=default_users)
    clients: tuple[ClientRegistration, ...] = field(default_factory=default_clients)

    @property
    def host(self) -> str:
        return self.bind_address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rsplit(":", 1)[1])


class _IdpHttpServer(ThreadingHTTPServer):
    daemon_threads = False
    block_on_close = True
    core: MockIdp
    prefix: str
    counters: dict[str, int]
    counter_lock: threading.Lock

    def handle_error(self, request, client_address) -> None:
        log.debug("connection error from %s", client_address, exc_info=True)


class _IdpHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "mcpidg-idp"

    def log_message(self, fmt: str, *args: Any) -> None:
        pass

    def _count(self, endpoint: str) -> None:
        srv = self.server  # type: ignore[assignment]
        with srv.counter_lock:
            srv.counters[endpoint] = srv.counters.get(endpoint, 0) + 1
            srv.counters["total"] = srv.counters.get("total", 0) + 1

    def _reply(self, status: int, body: bytes, headers: dict[str, str] | None = None) -> None:
        reason = http_client_mod.responses.get(status, "")
        log.info('"%s %s HTTP/1.1" %d %s', self.command, self.path.split("?")[0], status, reason)
        self.send_response(status)
        for name, value in (headers or {}).items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Connection", "close")
        self.end_headers()
        if body:
            self.wfile.write(body)
        self.close_connection = True

    def _reply_json(self, doc: dict[str, Any], status: int = 200) -> None:
        self._reply(
            status,
            json.dumps(doc).encode("utf-8"),
            {"Content-Type": "application/json"},
        )

    def _reply_error(self, exc: IdpError) -> None:
        self._reply_json(
            {"error": exc.oauth_error, "error_description": str(exc)},
            status=exc.http_status,
        )

    def do_GET(self) -> None:
        srv = self.server  # type: ignore[assignment]
        parts = urlsplit(self.path)
        path = parts.path
        prefix = srv.prefix
        if path == f"{prefix}/.well-known/openid-configuration":
            self._count("discovery")
            self._reply_json(srv.core.discovery_document())
        elif path == f"{prefix}/jwks":
            self._count("jwks")
            self._reply_json(srv.core.jwks_document())
        elif path == f"{prefix}/authorize":
            self._count("authorize")
            params = {k: v[0] for k, v in parse_qs(parts.query).items()}
            try:
                location = srv.core.handle_authorize(params)
            except IdpError as exc:
                self._reply_error(exc)
                return
            self._reply(302, b"", {"Location": location})
        else:
            self._reply(404, b"")

    def do_POST(self) -> None:
        srv = self.server  # type: ignore[assignment]
        if urlsplit(self.path).path != f"{srv.prefix}/token":
            self._reply(404, b"")
            return
        self._count("token")
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length).decode("utf-8") if length else ""
        params = {k: v[0] for k, v in parse_qs(body).items()}
        try:
            response = srv.core.handle_token(params)
        except IdpError as exc:
            self._reply_error(exc)
            return
        self._reply_json(response)


class IdpHandle:
    """A running mock identity provider with per-endpoint request counters."""

    def __init__(self, httpd: _IdpHttpServer, thread: threading.Thread, core: MockIdp):
        self._httpd = httpd
        self._thread = thread
        self.core = core

    @property
    def issuer(self) -> str:
        return self.core.issuer

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def counters(self) -> dict[str, int]:
        with self._httpd.counter_lock:
            return dict(self._httpd.counters)

    @property
    def total_requests(self) -> int:
        return self.counters().get("total", 0)

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=10)

    def __enter__(self) -> "IdpHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()


def serve_idp(config: IdpConfig) -> IdpHandle:
    """Bind, resolve the issuer URL, and start the provider."""
    from .server import BindFailure  # shared failure type for CLI handling

    try:
        httpd = _IdpHttpServer((config.host, config.port), _IdpHandler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {config.bind_address!r}: {exc}") from exc
    actual_port = httpd.server_address[1]
    issuer = config.issuer_url or (
        f"http://{config.host}:{actual_port}{config.issuer_path}"
    )
    core = MockIdp(
        issuer=issuer,
        audience=config.audience,
        users=config.users,
        clients=config.clients,
        token_lifetime=config.token_lifetime,
        code_lifetime=config.code_lifetime,
    )
    httpd.core = core
    httpd.prefix = urlsplit(issuer).path.rstrip("/")
    httpd.counters = {}
    httpd.counter_lock = threading.Lock()
    thread = threading.Thread(
        target=lambda: httpd.serve_forever(poll_interval=0.05),
        name="mcpidg-idp",
        daemon=True,
    )
    thread.start()
    return IdpHandle(httpd, thread, core)
