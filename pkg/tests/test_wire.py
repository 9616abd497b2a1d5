import numpy as np

from fedbiwgan.wire import (
    HEADER,
    MSG_FEEDBACK,
    MSG_GEN_PACKET,
    Message,
    decode_message,
    encode_message,
    overhead_bytes,
    payload_bytes,
)


def test_roundtrip_bitwise():
    rng = np.random.default_rng(0)
    tensors = [rng.standard_normal((3, 4)), rng.standard_normal(7),
               rng.standard_normal((2, 2, 2))]
    msg = Message(MSG_GEN_PACKET, 1, 2, 42, tensors)
    out = decode_message(encode_message(msg))
    assert (out.msg_type, out.slice_id, out.monitor_id, out.iteration) == (
        MSG_GEN_PACKET, 1, 2, 42)
    for a, b in zip(tensors, out.tensors):
        np.testing.assert_array_equal(a, b)


def test_negative_monitor_id():
    msg = Message(MSG_FEEDBACK, 0, -1, 1, [np.zeros(1)])
    out = decode_message(encode_message(msg))
    assert out.monitor_id == -1


def test_payload_is_eight_bytes_per_float():
    tensors = [np.zeros((3, 4)), np.zeros(5)]
    assert payload_bytes(tensors) == 8 * 17


def test_overhead_accounts_header_and_shapes():
    tensors = [np.zeros((3, 4)), np.zeros(5)]
    msg = Message(MSG_FEEDBACK, 0, 0, 0, tensors)
    encoded = encode_message(msg)
    assert len(encoded) == payload_bytes(tensors) + overhead_bytes(tensors)
    assert HEADER.size == 16


def test_empty_tensor_list():
    out = decode_message(encode_message(Message(MSG_FEEDBACK, 0, 0, 0, [])))
    assert out.tensors == []
