"""Patch-only inference over TCP: the server holds the model and threshold,
the client aligns a face locally and transmits nothing but skin patches."""

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from . import model as model_mod
from . import pem, protocol
from .errors import ProtocolError

log = logging.getLogger("spf.service")

CONNECTION_TIMEOUT_S = 10.0


@dataclass(frozen=True)
class PredictionResponse:
    request_id: int
    p_bona_fide: float
    label: int
    infer_ms: float
    model_digest: str


# --------------------------------------------------------------------- server

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server.spf
        if not srv.slots.acquire(blocking=False):
            try:
                self.request.sendall(protocol.encode_error(
                    "BUSY", f"connection limit {srv.max_connections} reached"))
            except OSError:
                pass
            return
        try:
            self._serve_connection()
        finally:
            srv.slots.release()

    def _serve_connection(self):
        self.request.settimeout(CONNECTION_TIMEOUT_S)
        reader = self.request.makefile("rb")
        try:
            while True:
                try:
                    frame = protocol.read_frame(reader)
                except ProtocolError as exc:
                    self._send_error(exc)
                    return
                if frame is None:
                    return
                msg_type, body = frame
                try:
                    reply = self._dispatch(msg_type, body)
                except ProtocolError as exc:
                    self._send_error(exc)
                    return
                self.request.sendall(reply)
        except (ConnectionError, socket.timeout, OSError):
            return
        finally:
            reader.close()

    def _send_error(self, exc):
        try:
            self.request.sendall(protocol.encode_error(exc.code, str(exc)))
        except OSError:
            pass

    def _dispatch(self, msg_type, body):
        srv = self.server.spf
        if msg_type == protocol.MSG_PREDICT:
            request_id, patches = protocol.decode_predict_request(body)
            if len(patches) != srv.branches:
                raise ProtocolError("ARITY", f"server model takes "
                                    f"{srv.branches} patches, got {len(patches)}")
            worker = srv.thread_model()
            t0 = time.perf_counter()
            probs = worker.probabilities(patches)[0]
            infer_ms = (time.perf_counter() - t0) * 1e3
            p_bona = float(probs[model_mod.Label.BONA_FIDE])
            label = model_mod.decide(
                model_mod.Score(p_bona_fide=p_bona, p_attack=float(probs[0])),
                srv.decision)
            return protocol.encode_predict_response(request_id, p_bona,
                                                    int(label), infer_ms,
                                                    srv.digest)
        if msg_type == protocol.MSG_HEALTH:
            return protocol.encode_health_response(srv.digest)
        raise ProtocolError("TYPE", f"unknown message type {msg_type}")


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class PatchServer:
    """Owns the listening socket plus one shared weight set; every handler
    thread gets its own cache-private model clone."""

    def __init__(self, m, decision=None, host="127.0.0.1", port=0,
                 max_connections=64):
        self.model = m
        self.branches = m.config.branches
        self.decision = decision or model_mod.DecisionConfig()
        self.digest = model_mod.model_digest(m)
        self.max_connections = max_connections
        self.slots = threading.BoundedSemaphore(max_connections)
        self._local = threading.local()
        try:
            self._server = _TcpServer((host, port), _Handler)
        except OSError as exc:
            raise ProtocolError("INTERNAL", f"cannot bind {host}:{port}: {exc}")
        self._server.spf = self
        self._thread = None

    @property
    def address(self):
        return self._server.server_address

    def thread_model(self):
        worker = getattr(self._local, "model", None)
        if worker is None:
            worker = model_mod.clone_for_inference(self.model)
            self._local.model = worker
        return worker

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        log.info("serving on %s:%d (digest %s)", *self.address, self.digest[:12])
        return self

    def serve_forever(self):
        log.info("serving on %s:%d (digest %s)", *self.address, self.digest[:12])
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve(m, decision=None, host="127.0.0.1", port=0, max_connections=64):
    return PatchServer(m, decision, host, port, max_connections)


# --------------------------------------------------------------------- client

def _round_trip(address, frame, timeout_ms):
    with socket.create_connection(address, timeout=timeout_ms / 1000.0) as sock:
        sock.sendall(frame)
        reader = sock.makefile("rb")
        try:
            reply = protocol.read_frame(reader)
        finally:
            reader.close()
    if reply is None:
        raise ProtocolError("MALFORMED", "server closed the connection "
                            "without a response")
    return reply


def predict_remote(face, address, seed, k=2, out_size=64, timeout_ms=2000,
                   cfg=None):
    """Align locally, extract k patches, submit only those patches."""
    cfg = cfg or pem.PemConfig()
    aligned = pem.align(face, cfg)
    patchset = pem.select_patches(aligned, k=k, out_size=out_size, seed=seed,
                                  cfg=cfg)
    frame = protocol.encode_predict_request(patchset, request_id=seed)
    msg_type, body = _round_trip(address, frame, timeout_ms)
    if msg_type == protocol.MSG_ERROR:
        code, message = protocol.decode_error(body)
        raise ProtocolError(code, message)
    if msg_type != protocol.MSG_PREDICT:
        raise ProtocolError("TYPE", f"unexpected response type {msg_type}")
    request_id, p, label, infer_ms, digest = protocol.decode_predict_response(body)
    return PredictionResponse(request_id=request_id, p_bona_fide=p, label=label,
                              infer_ms=infer_ms, model_digest=digest)


def submit_patchset(patchset, address, request_id, timeout_ms=2000):
    """Lower-level path for already-extracted patches."""
    frame = protocol.encode_predict_request(patchset, request_id=request_id)
    msg_type, body = _round_trip(address, frame, timeout_ms)
    if msg_type == protocol.MSG_ERROR:
        code, message = protocol.decode_error(body)
        raise ProtocolError(code, message)
    request_id, p, label, infer_ms, digest = protocol.decode_predict_response(body)
    return PredictionResponse(request_id=request_id, p_bona_fide=p, label=label,
                              infer_ms=infer_ms, model_digest=digest)


def health(address, timeout_ms=2000):
    """-> (protocol version, model digest hex)."""
    msg_type, body = _round_trip(address, protocol.encode_health_request(),
                                 timeout_ms)
    if msg_type == protocol.MSG_ERROR:
        code, message = protocol.decode_error(body)
        raise ProtocolError(code, message)
    return protocol.decode_health_response(body)
