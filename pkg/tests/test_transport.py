import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gorila.transport import (
    Ack,
    BadChecksum,
    BadMagic,
    ConnectionClosed,
    Err,
    GradPush,
    MalformedPayload,
    MessageKind,
    ParamFetchReq,
    PayloadTooLarge,
    ProtocolError,
    RemoteError,
    ServiceHost,
    SocketConnection,
    StatsReq,
    TransportError,
    TruncatedFrame,
    UnknownKind,
    backoff_delays,
    decode,
    decode_prefix,
    encode,
    in_process_channel,
    scripted_exchange,
    socket_connect,
    socket_listen,
)
from oracles import hand_frame, random_message


def test_kind_numbers():
    assert [k.name for k in sorted(MessageKind)] == [
        "GRAD_PUSH", "PARAM_FETCH_REQ", "PARAM_FETCH_RESP", "PUT_EXP", "SAMPLE_REQ",
        "SAMPLE_RESP", "STATS_REQ", "STATS_RESP", "ACK", "ERR"]
    assert [int(k) for k in sorted(MessageKind)] == list(range(1, 11))


# --- byte-exact examples ------------------------------------------------------------------


def test_stats_req_frame_bytes():
    frame = encode(StatsReq())
    assert frame == b"GRL1\x07\x00\x00\x00\x00\x00\x00\x00\x00"
    assert decode(frame) == StatsReq()


def test_grad_push_frame_bytes():
    msg = GradPush(3, [(0, np.array([1.0, -2.0]))])
    payload = struct.pack("<QIIQ2d", 3, 1, 0, 2, 1.0, -2.0)
    assert encode(msg) == hand_frame(1, payload)
    back = decode(encode(msg))
    assert back.base_version == 3 and back.slices[0][0] == 0
    assert back.slices[0][1].tolist() == [1.0, -2.0]


def test_fetch_bitmap_bytes():
    assert ParamFetchReq().payload() == b"\x00\x00\x00\x00"
    assert ParamFetchReq(frozenset({0, 9})).payload() == struct.pack("<I", 10) + b"\x01\x02"


def test_ack_and_err_bytes():
    assert encode(Ack(1, 42)) == hand_frame(9, struct.pack("<IQ", 1, 42))
    assert encode(Err(2, "no")) == hand_frame(10, b"\x02\x00no")


# --- round trips --------------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_random_messages_round_trip(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        msg = random_message(rng)
        frame = encode(msg)
        back = decode(frame)
        assert type(back) is type(msg) and back == msg
        assert encode(back) == frame


def test_decode_prefix_consumes_one_frame():
    a, b = encode(Ack(1, 2)), encode(StatsReq())
    msg, used = decode_prefix(a + b)
    assert msg == Ack(1, 2) and used == len(a)


# --- corruption ---------------------------------------------------------------------------


def test_bad_magic():
    frame = bytearray(encode(Ack()))
    frame[0] ^= 0xFF
    with pytest.raises(BadMagic):
        decode(bytes(frame))


def test_bad_checksum():
    frame = bytearray(encode(Ack(5, 6)))
    frame[9] ^= 0x01
    with pytest.raises(BadChecksum):
        decode(bytes(frame))


def test_truncated():
    frame = encode(Ack(5, 6))
    with pytest.raises(TruncatedFrame):
        decode(frame[:-1])
    with pytest.raises(TruncatedFrame):
        decode(frame[:3])


def test_unknown_kind():
    with pytest.raises(UnknownKind):
        decode(hand_frame(0, b""))
    with pytest.raises(UnknownKind):
        decode(hand_frame(11, b""))


def test_oversize_rejected_before_reading():
    header = b"GRL1" + struct.pack("<BI", 1, 64 * 1024 * 1024 + 1)
    with pytest.raises(PayloadTooLarge):
        decode(header)
    with pytest.raises(PayloadTooLarge):
        encode(Err(1, "x" * 100), max_payload=10)


def test_malformed_payload():
    with pytest.raises(MalformedPayload):
        decode(hand_frame(9, b"\x00" * 11))
    with pytest.raises(MalformedPayload):
        decode(hand_frame(7, b"x"))
    with pytest.raises(MalformedPayload):
        decode(hand_frame(8, b"[1]"))


@given(st.binary(max_size=64))
def test_arbitrary_bytes_never_crash(data):
    try:
        decode(data)
    except ProtocolError:
        pass


@given(st.integers(0, 2**32 - 1), st.data())
def test_single_byte_corruption_detected(seed, data):
    frame = bytearray(encode(random_message(np.random.default_rng(seed))))
    # the kind byte is not covered by crc32; every other byte is checked somewhere
    pos = data.draw(st.sampled_from([i for i in range(len(frame)) if i != 4]))
    frame[pos] ^= data.draw(st.integers(1, 255))
    with pytest.raises(ProtocolError):
        decode(bytes(frame))


# --- connections --------------------------------------------------------------------------


def echo(msg):
    return msg


def _fifo(conn):
    msgs = [Ack(i, i * 7) for i in range(200)]
    for m in msgs:
        conn.send(m)
    assert [conn.recv(timeout=5) for _ in msgs] == msgs


def test_in_process_fifo():
    host = ServiceHost(echo)
    _fifo(host.connect_in_process())


def test_socket_fifo():
    host = ServiceHost(echo)
    addr = host.listen()
    try:
        with socket_connect(addr) as conn:
            _fifo(conn)
    finally:
        host.close()


def test_in_process_close():
    a, b = in_process_channel()
    a.close()
    with pytest.raises(ConnectionClosed):
        b.recv(timeout=1)
    with pytest.raises(ConnectionClosed):
        a.send(Ack())


def test_recv_timeout():
    a, _ = in_process_channel()
    with pytest.raises(TimeoutError):
        a.recv(timeout=0.01)


def test_handler_errors_become_err_replies():
    def handler(msg):
        raise ValueError("boom")

    conn = ServiceHost(handler).connect_in_process()
    conn.send(StatsReq())
    reply = conn.recv(timeout=5)
    assert isinstance(reply, Err) and reply.code == 4 and "boom" in reply.message
    # the connection keeps serving, and request() raises the remote error
    with pytest.raises(RemoteError) as exc:
        conn.request(StatsReq(), timeout=5)
    assert exc.value.code == 4


def test_garbage_frame_gets_protocol_error():
    host = ServiceHost(echo)
    addr = host.listen()
    try:
        with socket_connect(addr) as conn:
            conn.send_raw(b"XXXX" + b"\x00" * 5)
            reply = conn.recv(timeout=5)
            assert isinstance(reply, Err) and reply.code == 1
    finally:
        host.close()


def test_scripted_exchange_records_replies():
    conn = ServiceHost(echo).connect_in_process()
    trace = scripted_exchange(conn, [Ack(1, 2), StatsReq()])
    assert trace == [("ACK", Ack(1, 2).payload()), ("STATS_REQ", b"")]


# --- reconnect and disconnect -------------------------------------------------------------


def test_backoff_schedule():
    assert backoff_delays() == pytest.approx([0.1, 0.2, 0.4, 0.8, 1.6, 3.2])
    assert backoff_delays(10)[-1] == 5.0


def test_connect_retries_then_fails():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    addr = probe.getsockname()
    probe.close()
    slept = []
    with pytest.raises(TransportError):
        socket_connect(addr, sleep=slept.append)
    assert slept == pytest.approx([0.1, 0.2, 0.4, 0.8, 1.6, 3.2])


def test_connect_succeeds_after_server_appears():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    addr = probe.getsockname()
    probe.close()
    host = ServiceHost(echo)
    slept = []

    def fake_sleep(d):
        slept.append(d)
        if len(slept) == 2:
            host.serve(socket_listen(*addr))

    try:
        conn = socket_connect(addr, sleep=fake_sleep)
        assert conn.request(Ack(3, 4), timeout=5) == Ack(3, 4)
        conn.close()
    finally:
        host.close()
    assert slept == pytest.approx([0.1, 0.2])


def test_mid_frame_disconnect_is_truncation():
    listener = socket_listen()
    got = {}

    def server():
        conn = listener.accept()
        try:
            conn.recv(timeout=5)
        except Exception as exc:
            got["exc"] = exc

    t = threading.Thread(target=server)
    t.start()
    raw = socket.create_connection(listener.address)
    raw.sendall(encode(Ack(1, 1))[:10])
    raw.close()
    t.join(5)
    listener.close()
    assert isinstance(got["exc"], TruncatedFrame)


def test_clean_close_between_frames():
    listener = socket_listen()
    got = {}

    def server():
        conn = listener.accept()
        got["first"] = conn.recv(timeout=5)
        try:
            conn.recv(timeout=5)
        except Exception as exc:
            got["exc"] = exc

    t = threading.Thread(target=server)
    t.start()
    raw = socket.create_connection(listener.address)
    raw.sendall(encode(Ack(1, 1)))
    raw.close()
    t.join(5)
    listener.close()
    assert got["first"] == Ack(1, 1)
    assert type(got["exc"]) is ConnectionClosed


def test_socket_connection_type():
    host = ServiceHost(echo)
    addr = host.listen()
    try:
        conn = socket_connect(addr)
        assert isinstance(conn, SocketConnection)
        conn.close()
    finally:
        host.close()
