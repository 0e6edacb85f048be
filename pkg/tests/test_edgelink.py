import math
import socket
import struct
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fnv1a64_bytes
from tofc.codec.container import compress_request
from tofc.errors import ConfigError, CRCError, FormatError, NetworkError, TruncationError
from tofc.features import FeatureTensor
from tofc.edgelink import (
    DEFAULT_MAX_FRAME,
    FRAME_REQUEST,
    FRAME_RESPONSE,
    ChannelConfig,
    DeviceComputeModel,
    EdgeClient,
    EdgeServer,
    LoopbackClient,
    PipelineConfig,
    Response,
    ServerComputeModel,
    Status,
    TcpEdgeServer,
    account_latency,
    compare_pipelines,
    decode_frame,
    decode_request_body,
    decode_response_body,
    encode_frame,
    encode_request_body,
    encode_response_body,
    write_bench,
)


@pytest.fixture(scope="module")
def served(trained_bank):
    bank, y = trained_bank
    return EdgeServer(bank, echo=True), bank, y


class TestFrames:
    def test_layout(self):
        buf = encode_frame(FRAME_REQUEST, 7, b"abc")
        assert struct.unpack_from("<I", buf)[0] == len(buf) - 4 == 1 + 8 + 3 + 4
        assert buf[4] == FRAME_REQUEST and struct.unpack_from("<Q", buf, 5)[0] == 7
        assert struct.unpack_from("<I", buf, len(buf) - 4)[0] == zlib.crc32(buf[:-4])

    @settings(max_examples=100)
    @given(st.sampled_from([FRAME_REQUEST, FRAME_RESPONSE]), st.integers(0, 2**64 - 1), st.binary(max_size=512))
    def test_round_trip(self, kind, cid, body):
        f = decode_frame(encode_frame(kind, cid, body))
        assert (f.frame_type, f.correlation_id, f.body) == (kind, cid, body)

    def test_size_guard(self):
        body = bytes(DEFAULT_MAX_FRAME - 13)
        assert len(encode_frame(FRAME_REQUEST, 1, body)) == DEFAULT_MAX_FRAME + 4
        with pytest.raises(FormatError):
            encode_frame(FRAME_REQUEST, 1, body + b"x")

    def test_oversized_prefix_rejected(self):
        with pytest.raises(FormatError):
            decode_frame(struct.pack("<I", DEFAULT_MAX_FRAME + 1) + bytes(16))

    def test_crc(self):
        buf = bytearray(encode_frame(FRAME_REQUEST, 1, b"payload"))
        buf[10] ^= 0x01
        with pytest.raises(CRCError):
            decode_frame(bytes(buf))

    def test_truncated(self):
        buf = encode_frame(FRAME_REQUEST, 1, b"payload")
        with pytest.raises(TruncationError):
            decode_frame(buf[:-1])

    def test_trailing(self):
        with pytest.raises(FormatError):
            decode_frame(encode_frame(FRAME_REQUEST, 1, b"") + b"\x00")

    def test_unknown_type(self):
        body = struct.pack("<I", 13) + struct.pack("<BQ", 9, 1)
        with pytest.raises(FormatError):
            decode_frame(body + struct.pack("<I", zlib.crc32(body)))


class TestBodies:
    def test_request(self):
        r = decode_request_body(encode_request_body("caption this", b"\x01\x02"))
        assert (r.instruction, r.container) == ("caption this", b"\x01\x02")

    def test_request_bad_utf8(self):
        with pytest.raises(FormatError):
            decode_request_body(struct.pack("<I", 1) + b"\xff")

    def test_request_short(self):
        with pytest.raises(TruncationError):
            decode_request_body(struct.pack("<I", 10) + b"abc")

    def test_response_with_echo(self):
        echo = np.arange(-12, 12, dtype=np.int32).reshape(2, 3, 4)
        back = decode_response_body(encode_response_body(Response(Status.OK, 1.5, 2**64 - 1, echo)))
        assert back.status is Status.OK and back.server_ms == 1.5 and back.checksum == 2**64 - 1
        assert np.array_equal(back.echo, echo)

    def test_response_unknown_status(self):
        body = bytearray(encode_response_body(Response(Status.OK, 0.0, 0)))
        body[0] = 200
        with pytest.raises(FormatError):
            decode_response_body(bytes(body))

    def test_response_echo_length(self):
        body = encode_response_body(Response(Status.OK, 0.0, 0, np.zeros((1, 1, 2), np.int32)))
        with pytest.raises(FormatError):
            decode_response_body(body[:-1])


class TestEdgeServer:
    def test_ok_checksum(self, served):
        edge, bank, y = served
        enc = compress_request(y[:2], bank)
        resp = LoopbackClient(edge).request("q", enc.bitstream.to_bytes())
        assert resp.status is Status.OK
        assert resp.checksum == enc.checksum == fnv1a64_bytes(enc.residuals.astype("<i4").tobytes())
        assert np.array_equal(resp.echo, enc.residuals)

    def test_statuses(self, served):
        edge, bank, y = served
        good = bytearray(compress_request(y[:1], bank).bitstream.to_bytes())
        client = LoopbackClient(edge)
        bad_crc = bytearray(good)
        bad_crc[-1] ^= 0xFF
        assert client.request("q", bytes(bad_crc)).status is Status.CRC_ERROR
        assert client.request("q", b"nope").status in (Status.FORMAT_ERROR, Status.BAD_REQUEST)
        other = EdgeServer(type(bank)(16, n_e=bank.n_e, d_z=2))
        assert LoopbackClient(other).request("q", bytes(good)).status is Status.BANK_MISMATCH

    def test_malformed_frame(self, served):
        edge, _, _ = served
        client = LoopbackClient(edge)
        client.send_raw(b"\x05\x00\x00\x00garbage")
        cid, resp = client.receive()
        assert cid == 0 and resp.status is Status.BAD_REQUEST

    def test_response_frame_rejected(self, served):
        edge, _, _ = served
        client = LoopbackClient(edge)
        client.send_raw(encode_frame(FRAME_RESPONSE, 5, b""))
        cid, resp = client.receive()
        assert cid == 5 and resp.status is Status.BAD_REQUEST

    def test_modeled_cost_added(self, trained_bank):
        bank, y = trained_bank
        edge = EdgeServer(bank, compute_model=ServerComputeModel(c0_ms=1000.0))
        resp = LoopbackClient(edge).request("q", compress_request(y[:1], bank).bitstream.to_bytes())
        assert resp.server_ms >= 1000.0 and resp.echo is None

    def test_nothing_pending(self, served):
        with pytest.raises(NetworkError):
            LoopbackClient(served[0]).receive()


class TestTcp:
    def test_concurrent_clients(self, served):
        edge, bank, y = served
        payloads = []
        for i in range(10):
            enc = compress_request(y[i % len(y) : i % len(y) + 1], bank)
            payloads.append((enc.bitstream.to_bytes(), enc.checksum))
        failures = []

        def worker():
            try:
                with EdgeClient(*server.address) as client:
                    for data, checksum in payloads:
                        resp = client.request("q", data)
                        if resp.status is not Status.OK or resp.checksum != checksum:
                            failures.append(resp)
            except Exception as exc:  # surfaced below
                failures.append(exc)

        with TcpEdgeServer(edge) as server:
            threads = [threading.Thread(target=worker) for _ in range(16)]
            for t in threads:
                t.start()
            for t in threads:
                t.join(60)
        assert not failures

    def test_bad_length_closes_connection(self, served):
        with TcpEdgeServer(served[0]) as server:
            with socket.create_connection(server.address, timeout=5) as s:
                s.sendall(struct.pack("<I", DEFAULT_MAX_FRAME + 1))
                data = b""
                while chunk := s.recv(4096):
                    data += chunk
        assert decode_response_body(decode_frame(data).body).status is Status.BAD_REQUEST

    def test_connect_refused(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        with pytest.raises(NetworkError):
            EdgeClient("127.0.0.1", port, timeout=1.0)


class TestLatency:
    def test_transmission(self):
        ch = ChannelConfig(uplink_bps=2e6, base_rtt_ms=5.0)
        assert ch.uplink_ms(1_000_000) == 505.0

    def test_sum(self):
        r = account_latency(3.0, 8000, ChannelConfig(1e6), 10, ServerComputeModel(2.0, 0.5), 1.0)
        assert (r.device_ms, r.tx_ms, r.server_ms) == (3.0, 8.0, 8.0)
        assert r.total_ms == 19.0

    def test_real_socket_needs_measurement(self):
        ch = ChannelConfig(mode="real-socket")
        with pytest.raises(ConfigError):
            account_latency(0.0, 10, ch, 1, ServerComputeModel())
        assert account_latency(0.0, 10, ch, 1, ServerComputeModel(), measured_tx_ms=4.0).tx_ms == 4.0

    @pytest.mark.parametrize(
        "kwargs", [{"uplink_bps": 0.0}, {"downlink_bps": -1.0}, {"base_rtt_ms": -1.0}, {"mode": "carrier-pigeon"}]
    )
    def test_bad_channel(self, kwargs):
        with pytest.raises(ConfigError):
            ChannelConfig(**kwargs)

    def test_bad_compute_model(self):
        with pytest.raises(ConfigError):
            ServerComputeModel(c1_ms_per_token=-1.0)

    @settings(max_examples=50)
    @given(st.floats(1e3, 1e9), st.integers(0, 10**8), st.integers(0, 5000))
    def test_linear_in_bits_and_tokens(self, bps, bits, tokens):
        m = ServerComputeModel(1.0, 0.25)
        r = account_latency(0.0, bits, ChannelConfig(bps), tokens, m)
        assert math.isclose(r.tx_ms, bits / bps * 1000.0, rel_tol=1e-12)
        assert math.isclose(r.server_ms, 1.0 + 0.25 * tokens, rel_tol=1e-12)


class TestBench:
    @pytest.fixture
    def setup(self, trained_bank):
        bank, _ = trained_bank
        x = FeatureTensor(np.random.default_rng(0).normal(size=(2, 32, 8)).astype(np.float32))
        configs = [PipelineConfig("raw", "raw"), PipelineConfig("tofc-4", "tofc", n_c=4)]
        return bank, x, configs

    def test_rows(self, setup, tmp_path):
        bank, x, configs = setup
        channel = ChannelConfig(1e6)
        rows = compare_pipelines(x, configs, channel, ServerComputeModel(0.0, 0.1), bank, DeviceComputeModel(1.0, 0.0))
        raw, tofc = rows
        assert raw["bits"] == 2 * 32 * 8 * 32 and raw["device_ms"] == 0.0
        assert tofc["bits"] < raw["bits"] and tofc["device_ms"] == 1.0
        assert math.isclose(raw["server_ms"], 0.1 * 64) and math.isclose(tofc["server_ms"], 0.1 * 8)
        for r in rows:
            assert math.isclose(r["total_ms"], r["device_ms"] + r["tx_ms"] + r["server_ms"])
        path = tmp_path / "bench.csv"
        write_bench(rows, path)
        assert path.read_text().splitlines()[0] == "pipeline,bits,device_ms,tx_ms,server_ms,total_ms"

    def test_modeled_is_deterministic(self, setup):
        bank, x, configs = setup
        a = compare_pipelines(x, configs, ChannelConfig(), bank=bank)
        b = compare_pipelines(x, configs, ChannelConfig(), bank=bank)
        assert a == b

    def test_errors(self, setup):
        bank, x, configs = setup
        with pytest.raises(ConfigError):
            compare_pipelines(x, configs[:1], ChannelConfig(), bank=bank)
        with pytest.raises(ConfigError):
            compare_pipelines(x, configs, ChannelConfig())
        with pytest.raises(ConfigError):
            compare_pipelines(x, configs, ChannelConfig(), bank=bank, timing="guessed")
        with pytest.raises(ConfigError):
            PipelineConfig("x", "jpeg")
