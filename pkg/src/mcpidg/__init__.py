"""Identity-gated MCP resource server toolkit.

Ships an HTTP resource server that validates OAuth2/OIDC bearer tokens,
enforces role/scope policy per tool, and audits every invocation; an
embedded deterministic mock identity provider (PKCE authorization-code
flow, RS256 tokens, JWKS with rotation); a client harness that drives the
full discovery/authorization sequence; and a latency benchmark.
"""

__version__ = "0.1.0"
