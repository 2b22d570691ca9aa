"""Binary wire protocol and socket server/client for process-separated runs.

Frame layout (little-endian)::

    msg_type  u8
    length    u32   byte length of payload
    payload   bytes

Parameters travel as ``layers u16`` then per layer ``rows u16, cols u16,
weight f32[rows*cols] (row-major), bias f32[rows]``. Feature blocks are
``count u32, d u16, f32[count*d]``. Floats cross the wire as float32, which is
also their storage type, so a socket run reproduces the in-process simulator
bit for bit.
"""

from __future__ import annotations

import logging
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

import numpy as np

from .bank import RemoteBankSet
from .config import ExperimentConfig
from .core import EncoderParams, ShapeError
from .data import ClientShard
from .federation import (
    ClientMetrics,
    ExperimentResult,
    RoundReport,
    Server,
    build_environment,
    client_local_update,
    initial_params,
    make_client,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<BI")
MAX_PAYLOAD = 1 << 28
MAX_U32 = 0xFFFFFFFF


class MsgType(IntEnum):
    HELLO = 1
    MODEL_UP = 2
    FEATURES_UP = 3
    MODEL_DOWN = 4
    FEATURES_DOWN = 5
    ROUND_BEGIN = 6
    ROUND_DONE = 7
    BYE = 8


class ProtocolError(Exception):
    code = 0

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class UnknownMessageType(ProtocolError):
    code = 1


class TruncatedPayload(ProtocolError):
    code = 2


class LengthMismatch(ProtocolError):
    code = 3


class MalformedPayload(ProtocolError):
    code = 4


class FrameTooLarge(ProtocolError):
    code = 5


class ProtocolOrderError(ProtocolError):
    code = 6


class ConfigMismatch(ProtocolError):
    code = 7


class PeerDisconnected(ProtocolError):
    code = 8


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------


class Message:
    kind: MsgType

    def payload(self) -> bytes:
        return b""

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.payload() == other.payload()

    def __hash__(self) -> int:
        return hash((self.kind, self.payload()))


@dataclass(eq=False)
class Hello(Message):
    client_id: int
    shard_size: int
    kind = MsgType.HELLO

    def payload(self) -> bytes:
        return struct.pack("<II", self.client_id, self.shard_size)


@dataclass(eq=False)
class _Models(Message):
    params_q: EncoderParams
    params_k: EncoderParams

    def payload(self) -> bytes:
        return _pack_params(self.params_q) + _pack_params(self.params_k)


class ModelUp(_Models):
    kind = MsgType.MODEL_UP


class ModelDown(_Models):
    kind = MsgType.MODEL_DOWN


@dataclass(eq=False)
class _Features(Message):
    features: np.ndarray

    def payload(self) -> bytes:
        f = np.ascontiguousarray(self.features, dtype="<f4")
        if f.ndim != 2:
            raise ValueError("features must be a (count, d) array")
        return struct.pack("<IH", f.shape[0], f.shape[1]) + f.tobytes()


class FeaturesUp(_Features):
    kind = MsgType.FEATURES_UP


class FeaturesDown(_Features):
    kind = MsgType.FEATURES_DOWN


@dataclass(eq=False)
class RoundBegin(Message):
    round_index: int
    config_digest: bytes
    kind = MsgType.ROUND_BEGIN

    def payload(self) -> bytes:
        if len(self.config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        return struct.pack("<I", self.round_index) + self.config_digest


@dataclass(eq=False)
class RoundDone(Message):
    metrics: ClientMetrics
    kind = MsgType.ROUND_DONE

    def payload(self) -> bytes:
        m = self.metrics
        hists = (m.query_hist, m.local_hist, m.upload_hist, m.shard_hist)
        M = len(m.query_hist)
        if any(len(h) != M for h in hists):
            raise ValueError("histograms must share one length")
        out = struct.pack("<dddIH", m.contrast, m.neigh, m.total, m.steps, len(m.epoch_losses))
        out += struct.pack(f"<{len(m.epoch_losses)}d", *m.epoch_losses)
        out += struct.pack("<H", M)
        for h in hists:
            out += struct.pack(f"<{M}I", *h)
        return out


@dataclass(eq=False)
class Bye(Message):
    kind = MsgType.BYE


def _pack_params(p: EncoderParams) -> bytes:
    out = [struct.pack("<H", len(p.layers))]
    for w, b in p.layers:
        rows, cols = w.shape
        out.append(struct.pack("<HH", rows, cols))
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def encode_frame(message: Message) -> bytes:
    payload = message.payload()
    if len(payload) > MAX_U32:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds the u32 length field")
    return HEADER.pack(int(message.kind), len(payload)) + payload


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedPayload(f"payload ends inside {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").astype(np.float32)

    def finish(self) -> None:
        if self.pos != self.end:
            raise LengthMismatch(f"{self.end - self.pos} unread payload bytes", self.pos)


def _read_params(r: _Reader) -> EncoderParams:
    (n_layers,) = r.unpack("H", "layer count")
    if n_layers == 0:
        raise MalformedPayload("parameter block with zero layers", r.pos - 2)
    layers = []
    for i in range(n_layers):
        rows, cols = r.unpack("HH", f"layer {i} shape")
        w = r.floats(rows * cols, f"layer {i} weights").reshape(rows, cols)
        b = r.floats(rows, f"layer {i} bias")
        layers.append((w, b))
    try:
        return EncoderParams(layers)
    except ShapeError as exc:
        raise MalformedPayload(str(exc), r.pos) from exc


def _read_features(r: _Reader) -> np.ndarray:
    count, d = r.unpack("IH", "feature header")
    if count * d * 4 > r.end - r.pos:
        raise TruncatedPayload(f"{count}x{d} feature block longer than payload", r.pos)
    return r.floats(count * d, "feature rows").reshape(count, d)


def _read_metrics(r: _Reader) -> ClientMetrics:
    contrast, neigh, total, steps, n_epochs = r.unpack("dddIH", "metrics header")
    epochs = r.unpack(f"{n_epochs}d", "epoch losses")
    (M,) = r.unpack("H", "class count")
    hists = [r.unpack(f"{M}I", "label histogram") for _ in range(4)]
    return ClientMetrics(contrast, neigh, total, steps, tuple(epochs), *(tuple(h) for h in hists))


def _parse(kind: MsgType, r: _Reader) -> Message:
    if kind == MsgType.HELLO:
        return Hello(*r.unpack("II", "hello"))
    if kind in (MsgType.MODEL_UP, MsgType.MODEL_DOWN):
        q = _read_params(r)
        k = _read_params(r)
        if q.shapes != k.shapes:
            raise MalformedPayload("main and momentum parameter shapes differ", r.pos)
        return (ModelUp if kind == MsgType.MODEL_UP else ModelDown)(q, k)
    if kind in (MsgType.FEATURES_UP, MsgType.FEATURES_DOWN):
        return (FeaturesUp if kind == MsgType.FEATURES_UP else FeaturesDown)(_read_features(r))
    if kind == MsgType.ROUND_BEGIN:
        (t,) = r.unpack("I", "round index")
        return RoundBegin(t, r.take(32, "config digest"))
    if kind == MsgType.ROUND_DONE:
        return RoundDone(_read_metrics(r))
    return Bye()


def decode_frame(buf: bytes, start: int = 0) -> tuple[Message, int] | None:
    """Decode one frame from ``buf[start:]``.

    Returns ``(message, bytes_consumed)``, or ``None`` when the frame is not
    complete yet. Bytes after the frame are left alone.
    """
    avail = len(buf) - start
    if avail < HEADER.size:
        return None
    type_byte, length = HEADER.unpack_from(buf, start)
    try:
        kind = MsgType(type_byte)
    except ValueError:
        raise UnknownMessageType(f"unknown message type 0x{type_byte:02X}", start) from None
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}", start + 1)
    if avail < HEADER.size + length:
        return None
    r = _Reader(buf, start + HEADER.size, start + HEADER.size + length)
    msg = _parse(kind, r)
    r.finish()
    return msg, HEADER.size + length


# --------------------------------------------------------------------------
# connections
# --------------------------------------------------------------------------


class Connection:
    """Blocking message stream over a socket."""

    def __init__(self, sock: socket.socket, name: str = "peer"):
        self.sock = sock
        self.name = name
        self._buf = bytearray()

    def send(self, message: Message) -> None:
        self.sock.sendall(encode_frame(message))

    def recv(self) -> Message:
        while True:
            got = decode_frame(bytes(self._buf))
            if got is not None:
                msg, used = got
                del self._buf[:used]
                return msg
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise PeerDisconnected(f"{self.name} closed the connection")
            self._buf.extend(chunk)

    def expect(self, *kinds: type[Message], step: str = "") -> Message:
        msg = self.recv()
        if not isinstance(msg, kinds):
            wanted = "/".join(k.__name__ for k in kinds)
            raise ProtocolOrderError(f"{self.name}: got {type(msg).__name__} while expecting {wanted}"
                                     + (f" during {step}" if step else ""))
        return msg

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class RoundAborted(RuntimeError):
    def __init__(self, round_index: int, step: str, cause: Exception):
        super().__init__(f"round {round_index} aborted during {step}: {cause}")
        self.round_index = round_index
        self.step = step
        self.cause = cause


def _handshake(conns: list[Connection], num_clients: int) -> dict[int, tuple[Connection, int]]:
    peers: dict[int, tuple[Connection, int]] = {}
    for conn in conns:
        hello = conn.expect(Hello, step="handshake")
        if not 0 <= hello.client_id < num_clients or hello.client_id in peers:
            raise ProtocolOrderError(f"unexpected or duplicate client id {hello.client_id}")
        if hello.shard_size == 0:
            raise MalformedPayload(f"client {hello.client_id} announced an empty shard")
        conn.name = f"client {hello.client_id}"
        peers[hello.client_id] = (conn, hello.shard_size)
    return peers


def serve(cfg: ExperimentConfig, listener: socket.socket, env=None,
          sink: Callable[[RoundReport], None] | None = None, io_timeout: float = 300.0) -> ExperimentResult:
    """Accept ``cfg.experiment.clients`` connections on ``listener`` and drive the rounds."""
    env = env or build_environment(cfg)
    C = cfg.experiment.clients
    digest = cfg.digest()
    conns: list[Connection] = []
    try:
        while len(conns) < C:
            sock, addr = listener.accept()
            sock.settimeout(io_timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conns.append(Connection(sock, f"{addr}"))
        peers = _handshake(conns, C)
        if len(peers) != C:
            raise ProtocolOrderError(f"expected {C} clients, got {len(peers)}")
        server = Server(cfg, env, {cid: size for cid, (_, size) in peers.items()})
        baseline = server.probe()
        reports: list[RoundReport] = []
        selected: list[int] = []
        import time

        def collect_uploads(t: int, ids: list[int]) -> None:
            step = "upload"
            try:
                for cid in ids:
                    peers[cid][0].send(RoundBegin(t, digest))
                for cid in ids:
                    conn = peers[cid][0]
                    models = conn.expect(ModelUp, step=step)
                    feats = conn.expect(FeaturesUp, step=step)
                    server.receive_upload(cid, models.params_q, models.params_k, feats.features)
            except (PeerDisconnected, OSError) as exc:
                raise RoundAborted(t, step, exc) from exc

        for t in range(cfg.experiment.rounds):
            start = time.perf_counter()
            selected = server.select(t)
            collect_uploads(t, selected)
            server.aggregate()
            probe = server.probe()
            step = "download"
            try:
                for cid in selected:
                    remote = server.remote_for(cid)
                    conn = peers[cid][0]
                    conn.send(ModelDown(server.params_q, server.params_k))
                    conn.send(FeaturesDown(remote.features))
                step = "local learning"
                metrics = {cid: peers[cid][0].expect(RoundDone, step=step).metrics for cid in selected}
            except (PeerDisconnected, OSError) as exc:
                raise RoundAborted(t, step, exc) from exc
            report = server.complete_round(t, selected, probe, metrics, time.perf_counter() - start)
            reports.append(report)
            if sink is not None:
                sink(report)
        if reports:
            collect_uploads(cfg.experiment.rounds, selected)
            server.aggregate()
            server._events.clear()
            final = server.probe()
        else:
            final = baseline
        for conn, _ in peers.values():
            conn.send(Bye())
        return ExperimentResult(reports, server.params_q, server.params_k, baseline, final)
    finally:
        for conn in conns:
            conn.close()


def server_loop(host: str, port: int, cfg: ExperimentConfig, env=None,
                on_listening: Callable[[tuple[str, int]], None] | None = None, **kwargs) -> ExperimentResult:
    with socket.create_server((host, port)) as listener:
        if on_listening is not None:
            on_listening(listener.getsockname()[:2])
        return serve(cfg, listener, env, **kwargs)


def client_session(host: str, port: int, cfg: ExperimentConfig, shard: ClientShard,
                   io_timeout: float = 300.0) -> int:
    """Run one client until the server says BYE; returns the number of rounds trained."""
    init_q, init_k = initial_params(cfg)
    state = make_client(cfg, shard, init_q, init_k)
    digest = cfg.digest()
    sock = socket.create_connection((host, port), timeout=io_timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = Connection(sock, "server")
    trained = 0
    try:
        conn.send(Hello(shard.client_id, len(shard)))
        while True:
            msg = conn.expect(RoundBegin, Bye, step="round start")
            if isinstance(msg, Bye):
                break
            if msg.config_digest != digest:
                raise ConfigMismatch("server and client configurations differ")
            conn.send(ModelUp(state.params_q, state.params_k))
            conn.send(FeaturesUp(state.upload_bank.features))
            down = conn.expect(ModelDown, Bye, step="download")
            if isinstance(down, Bye):
                break
            feats = conn.expect(FeaturesDown, step="download").features
            update = client_local_update(state, down.params_q, down.params_k,
                                         RemoteBankSet.from_flat(shard.client_id, feats), cfg, msg.round_index)
            conn.send(RoundDone(update.metrics))
            trained += 1
    finally:
        conn.close()
    return trained
