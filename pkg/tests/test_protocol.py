import json

import pytest
from hypothesis import given, strategies as st

from mcpidg import protocol
from mcpidg.protocol import (
    InvalidRequest,
    ParseError,
    RpcError,
    RpcRequest,
    RpcResponse,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    error_response,
    method_table,
)


class TestDecodeRequest:
    def test_minimal_valid_request(self):
        req = decode_request(b'{"jsonrpc":"2.0","id":1,"method":"tools/list"}')
        assert req == RpcRequest(method="tools/list", id=1)
        assert not req.is_notification

    def test_notification_has_no_id(self):
        req = decode_request(
            b'{"jsonrpc":"2.0","method":"notifications/initialized"}'
        )
        assert req.id is None
        assert req.is_notification

    def test_version_mismatch_rejected(self):
        with pytest.raises(InvalidRequest):
            decode_request(b'{"jsonrpc":"1.0","id":1,"method":"x"}')

    def test_version_mismatch_salvages_id(self):
        with pytest.raises(InvalidRequest) as excinfo:
            decode_request(b'{"jsonrpc":"1.0","id":7,"method":"x"}')
        assert excinfo.value.request_id == 7

    def test_malformed_json_is_parse_error(self):
        with pytest.raises(ParseError):
            decode_request(b'{"jsonrpc":')

    def test_non_utf8_is_parse_error(self):
        with pytest.raises(ParseError):
            decode_request(b"\xff\xfe{}")

    def test_non_object_document(self):
        with pytest.raises(InvalidRequest):
            decode_request(b"[1,2,3]")

    @pytest.mark.parametrize("bad_id", ["true", "1.5", "null", "[1]"])
    def test_bad_id_types(self, bad_id):
        raw = f'{{"jsonrpc":"2.0","id":{bad_id},"method":"m"}}'.encode()
        with pytest.raises(InvalidRequest):
            decode_request(raw)

    def test_empty_method_rejected(self):
        with pytest.raises(InvalidRequest):
            decode_request(b'{"jsonrpc":"2.0","id":1,"method":""}')

    def test_array_params_rejected(self):
        with pytest.raises(InvalidRequest):
            decode_request(b'{"jsonrpc":"2.0","id":1,"method":"m","params":[1]}')

    def test_string_id_and_object_params(self):
        req = decode_request(
            b'{"jsonrpc":"2.0","id":"abc","method":"tools/call","params":{"name":"x"}}'
        )
        assert req.id == "abc"
        assert req.params == {"name": "x"}


class TestEncodeResponse:
    def test_result_encoding_is_canonical(self):
        raw = encode_response(RpcResponse(id=1, result={}))
        assert raw == b'{"jsonrpc":"2.0","id":1,"result":{}}'

    def test_error_encoding(self):
        raw = encode_response(error_response(2, -32601, "method not found"))
        doc = json.loads(raw)
        assert doc == {
            "jsonrpc": "2.0",
            "id": 2,
            "error": {"code": -32601, "message": "method not found"},
        }

    def test_result_and_error_mutually_exclusive(self):
        with pytest.raises(ValueError):
            RpcResponse(id=1, result={}, error=RpcError(-1, "boom"))
        with pytest.raises(ValueError):
            RpcResponse(id=1)


class TestMethodTable:
    def test_contains_tools_call(self):
        assert "tools/call" in method_table()

    def test_excludes_out_of_scope_methods(self):
        assert "resources/read" not in method_table()

    def test_size_is_four(self):
        assert len(method_table()) == 4

    def test_exact_contents(self):
        assert method_table() == {
            "initialize",
            "notifications/initialized",
            "tools/list",
            "tools/call",
        }


# -- round-trip property: decode . encode is the identity --------------------

_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**31), max_value=2**31),
    st.floats(allow_nan=False, allow_infinity=False),
    _text,
)
_json_values = st.recursive(
    _scalars,
    lambda children: st.one_of(
        st.lists(children, max_size=3),
        st.dictionaries(_text, children, max_size=3),
    ),
    max_leaves=12,
)
_ids = st.one_of(st.integers(min_value=-(2**31), max_value=2**31), _text.filter(bool))
_params = st.one_of(st.none(), st.dictionaries(_text, _json_values, max_size=4))
_methods = _text.filter(bool)

_requests = st.builds(
    RpcRequest,
    method=_methods,
    id=st.one_of(st.none(), _ids),
    params=_params,
)

_results = st.dictionaries(_text, _json_values, max_size=4)
_errors = st.builds(
    RpcError,
    code=st.integers(min_value=-33000, max_value=-31000),
    message=_text,
    data=st.one_of(st.none(), _json_values.filter(lambda v: v is not None)),
)
_responses = st.one_of(
    st.builds(lambda i, r: RpcResponse(id=i, result=r), st.one_of(st.none(), _ids), _results),
    st.builds(lambda i, e: RpcResponse(id=i, error=e), st.one_of(st.none(), _ids), _errors),
)


@given(_requests)
def test_request_round_trip(req):
    assert decode_request(encode_request(req)) == req


@given(_responses)
def test_response_round_trip(resp):
    assert decode_response(encode_response(resp)) == resp


@given(_requests)
def test_notification_iff_no_id(req):
    assert req.is_notification == (req.id is None)


def test_decode_response_rejects_both_result_and_error():
    raw = b'{"jsonrpc":"2.0","id":1,"result":{},"error":{"code":-1,"message":"x"}}'
    with pytest.raises(InvalidRequest):
        decode_response(raw)


def test_decode_response_rejects_neither():
    with pytest.raises(InvalidRequest):
        decode_response(b'{"jsonrpc":"2.0","id":1}')


def test_error_codes_exported():
    assert protocol.PARSE_ERROR == -32700
    assert protocol.INVALID_REQUEST == -32600
    assert protocol.METHOD_NOT_FOUND == -32601
    assert protocol.INVALID_PARAMS == -32602
    assert protocol.INTERNAL_ERROR == -32603
    assert -32099 <= protocol.FORBIDDEN <= -32000
