"""Cloud server: the shared middle of the network, the epoch barrier, and extractor averaging."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .protocol import (ConnectionClosed, ErrorCode, Frame, FrameType, ProtocolError, decode_params,
                       decode_tensor, encode_params, error_frame, tensor_frame)
from .tensor import DTYPE, ShapeError
from .transport import Connection, listen

log = logging.getLogger(__name__)

SCHEDULES = ("round-robin", "arrival", "script")


class ServerError(ProtocolError):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message, code)


def average_extractors(uploads: Mapping[int, Mapping[str, np.ndarray]]) -> M.Params:
    """Elementwise mean of each tensor over all uploads.

    Sums run in float64 in ascending client-id order and are cast back to
    float32 once, so identical uploads average to themselves exactly.
    """
    if not uploads:
        raise ValueError("no extractor uploads to average")
    ids = sorted(uploads)
    ref = uploads[ids[0]]
    for cid in ids[1:]:
        other = uploads[cid]
        if list(other) != list(ref):
            raise ShapeError(f"client {cid} uploaded tensors {list(other)}, client {ids[0]} uploaded {list(ref)}")
        for name, t in other.items():
            if t.shape != ref[name].shape:
                raise ShapeError(f"{name}: client {cid} has shape {t.shape}, client {ids[0]} has {ref[name].shape}")
    out: M.Params = {}
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for cid in ids:
            acc += uploads[cid][name]
        out[name] = (acc / len(ids)).astype(DTYPE)
    return out


@dataclass
class _Epoch:
    number: int
    active: set = field(default_factory=set)
    done: set = field(default_factory=set)
    uploads: dict = field(default_factory=dict)
    result: tuple | None = None    # (averaged params, digest) once the barrier completes


class CloudServer:
    """Owns the cloud-model parameters and serializes every client's batch through them.

    A batch is atomic: after a client's FEATURE_BATCH the cloud is held by that
    client until its GRADIENT_BATCH arrives. ``schedule`` picks who goes next:
    ``round-robin`` (ascending client id, deterministic), ``arrival`` (first
    come), or ``script`` (replay a recorded order of client ids).
    """

    def __init__(self, model: M.ModelSpec, depth: int, lr: float, seed: int, expected_clients: int = 1,
                 schedule: str = "round-robin", script: Sequence[int] | None = None,
                 run_log: str | Path | None = None, barrier_timeout: float = 300.0):
        if schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
        if schedule == "script" and not script:
            raise ValueError("script schedule needs a client order")
        if expected_clients < 1:
            raise ValueError("expected_clients must be >= 1")
        self.model = model
        self.plan = M.split(model, depth)
        self.lr = lr
        self.params = M.init_model_params(model, seed, self.plan.cloud)
        self.cut_shape = model.shapes()[self.plan.cloud.start]
        self.expected = expected_clients
        self.schedule = schedule
        self.script = list(script or [])
        self.barrier_timeout = barrier_timeout
        self.order: list[tuple[int, int, int]] = []   # (epoch, batch_id, client_id) as processed
        self.trace: list[str] = []                     # cloud checksum after each batch
        self._cache: dict[tuple[int, int], tuple[M.Cache, tuple]] = {}
        self._cond = threading.Condition()
        self._clients: set[int] = set()
        self._left: set[int] = set()
        self._requests: dict[int, str] = {}
        self._epoch: _Epoch | None = None
        self._holder: int | None = None
        self._turn: int | None = None
        self._script_pos = 0
        self._failure: str | None = None
        self._log = open(run_log, "w", encoding="utf-8") if run_log else None

    # compute

    def handle_feature_batch(self, client_id: int, batch_id: int, features: np.ndarray) -> np.ndarray:
        """Cloud forward for one batch; the activations are kept for its gradient."""
        if features.ndim != 1 + len(self.cut_shape) or features.shape[1:] != self.cut_shape:
            raise ServerError(ErrorCode.SHAPE_MISMATCH,
                              f"features {features.shape} do not match cut shape (N,)+{self.cut_shape}")
        key = (client_id, batch_id)
        if key in self._cache:
            raise ServerError(ErrorCode.BAD_STATE, f"batch {batch_id} of client {client_id} is already pending")
        out, cache = M.forward(self.model, self.params, features, self.plan.cloud)
        self._cache[key] = (cache, out.shape)
        return out

    def handle_gradient_batch(self, client_id: int, batch_id: int, grad: np.ndarray) -> np.ndarray:
        """Cloud backward and SGD step; returns the gradient at the cut."""
        try:
            cache, out_shape = self._cache.pop((client_id, batch_id))
        except KeyError:
            raise ServerError(ErrorCode.NO_CACHE,
                              f"no pending forward for batch {batch_id} of client {client_id}") from None
        if grad.shape != out_shape:
            raise ServerError(ErrorCode.SHAPE_MISMATCH, f"gradient {grad.shape} does not match output {out_shape}")
        grad_in, grads = M.backward(self.model, self.params, cache, grad)
        if grads:
            M.apply_sgd(self.params, grads, self.lr)
        return grad_in

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        if features.ndim != 1 + len(self.cut_shape) or features.shape[1:] != self.cut_shape:
            raise ServerError(ErrorCode.SHAPE_MISMATCH,
                              f"features {features.shape} do not match cut shape (N,)+{self.cut_shape}")
        out, _ = M.forward(self.model, self.params, features, self.plan.cloud)
        return out

    @property
    def pending(self) -> int:
        return len(self._cache)

    # coordination (all called with self._cond held)

    def _wait(self, predicate, what: str) -> None:
        ok = self._cond.wait_for(lambda: self._failure is not None or predicate(), self.barrier_timeout)
        if self._failure is not None:
            raise ServerError(ErrorCode.BARRIER, self._failure)
        if not ok:
            self._fail(f"timed out after {self.barrier_timeout}s waiting for {what}")
            raise ServerError(ErrorCode.BARRIER, self._failure)

    def _fail(self, reason: str) -> None:
        if self._failure is None:
            self._failure = reason
            log.error("aborting run: %s", reason)
        self._cond.notify_all()

    def _may_start(self, cid: int) -> bool:
        if self._holder is not None:
            return False
        if self.schedule == "round-robin":
            return self._turn == cid
        if self.schedule == "script":
            if self._script_pos >= len(self.script):
                return False
            return self.script[self._script_pos] == cid
        return True

    def _advance_turn(self, after: int) -> None:
        active = sorted(self._epoch.active) if self._epoch else []
        later = [c for c in active if c > after]
        self._turn = (later or active or [None])[0]

    # frame handlers

    def _on_train_request(self, cid: int, frame: Frame) -> list[Frame]:
        digest = frame.payload.decode("ascii", errors="replace")
        with self._cond:
            if cid not in self._clients:
                if len(self._clients) >= self.expected:
                    raise ServerError(ErrorCode.BAD_STATE, f"server expects {self.expected} clients, "
                                                           f"client {cid} is one too many")
                self._clients.add(cid)
            current = self._epoch.number if self._epoch else -1
            if frame.epoch != current + 1 or cid in self._requests:
                raise ServerError(ErrorCode.BAD_STATE, f"client {cid} requested epoch {frame.epoch} "
                                                       f"while the server is at epoch {current}")
            if self._epoch and cid not in self._epoch.done:
                raise ServerError(ErrorCode.BAD_STATE, f"client {cid} has not finished epoch {current}")
            self._requests[cid] = digest
            if len(self._requests) == self.expected:
                digests = set(self._requests.values())
                if len(digests) > 1:
                    self._fail(f"extractor checksums differ at the start of epoch {frame.epoch}: "
                               + ", ".join(f"client {c}={d[:12] or 'none'}" for c, d in sorted(self._requests.items())))
                else:
                    self._epoch = _Epoch(frame.epoch, active=set(self._requests))
                    self._requests = {}
                    self._turn = min(self._epoch.active)
                    self._cond.notify_all()
            if self._left:
                self._fail(f"client(s) {sorted(self._left)} disconnected before epoch {frame.epoch}")
            self._wait(lambda: self._epoch is not None and self._epoch.number == frame.epoch,
                       f"all {self.expected} clients to request epoch {frame.epoch}")
        return [Frame(FrameType.TRAIN_REQUEST, cid, frame.epoch)]

    def _check_training(self, cid: int, frame: Frame) -> None:
        ep = self._epoch
        if ep is None or ep.number != frame.epoch or cid not in ep.active:
            raise ServerError(ErrorCode.BAD_STATE,
                              f"client {cid} sent {frame.type.name} outside a running epoch {frame.epoch}")

    def _on_feature_batch(self, cid: int, frame: Frame) -> list[Frame]:
        features = decode_tensor(frame.payload)
        with self._cond:
            self._check_training(cid, frame)
            self._wait(lambda: self._may_start(cid), f"client {cid}'s turn")
            self._holder = cid
        try:
            out = self.handle_feature_batch(cid, frame.batch_id, features)
        except Exception:
            with self._cond:
                self._holder = None
                self._cond.notify_all()
            raise
        return [tensor_frame(FrameType.FEATURE_BATCH, out, cid, frame.epoch, frame.batch_id)]

    def _on_gradient_batch(self, cid: int, frame: Frame) -> list[Frame]:
        grad = decode_tensor(frame.payload)
        with self._cond:
            self._check_training(cid, frame)
            if self._holder != cid:
                raise ServerError(ErrorCode.NO_CACHE, f"client {cid} sent a gradient without a pending forward")
        try:
            grad_in = self.handle_gradient_batch(cid, frame.batch_id, grad)
            # still holding the cloud, so records land in processing order
            digest = M.checksum(self.params)
            self.order.append((frame.epoch, frame.batch_id, cid))
            self.trace.append(digest)
            if self._log:
                self._log.write(f"{frame.epoch} {frame.batch_id} {cid} - {digest[:16]}\n")
                self._log.flush()
        finally:
            with self._cond:
                self._holder = None
                if self.schedule == "script":
                    self._script_pos += 1
                self._advance_turn(cid)
                self._cond.notify_all()
        return [tensor_frame(FrameType.GRADIENT_BATCH, grad_in, cid, frame.epoch, frame.batch_id)]

    def _on_weight_upload(self, cid: int, frame: Frame) -> list[Frame]:
        params = decode_params(frame.payload)
        with self._cond:
            self._check_training(cid, frame)
            self._epoch.uploads[cid] = params
        return []

    def _on_epoch_done(self, cid: int, frame: Frame) -> list[Frame]:
        with self._cond:
            self._check_training(cid, frame)
            ep = self._epoch
            if cid not in ep.uploads:
                raise ServerError(ErrorCode.BAD_STATE, f"client {cid} sent EPOCH_DONE before WEIGHT_UPLOAD")
            if self._holder == cid:
                raise ServerError(ErrorCode.BAD_STATE, f"client {cid} finished with a batch still pending")
            ep.active.discard(cid)
            ep.done.add(cid)
            if self._turn == cid:
                self._advance_turn(cid)
            self._cond.notify_all()
            if len(ep.done) == self.expected:
                self._complete_barrier(ep)
            self._wait(lambda: ep.result is not None, f"the epoch {ep.number} barrier")
            averaged, digest = ep.result
        return [Frame(FrameType.WEIGHT_BROADCAST, cid, frame.epoch, 0, encode_params(averaged)),
                Frame(FrameType.AVG_COMMIT, cid, frame.epoch, 0, digest.encode("ascii"))]

    def _complete_barrier(self, ep: _Epoch) -> None:
        if self._cache:
            self._fail(f"{len(self._cache)} cached activations left at the epoch {ep.number} barrier")
            return
        shared = {cid: p for cid, p in ep.uploads.items() if p}
        if not shared:
            ep.result = ({}, "")
        elif len(shared) != len(ep.uploads):
            self._fail(f"epoch {ep.number}: clients {sorted(set(ep.uploads) - set(shared))} did not share "
                       f"their extractor while {sorted(shared)} did")
            return
        else:
            try:
                averaged = average_extractors(shared)
            except ShapeError as exc:
                self._fail(f"epoch {ep.number}: cannot average extractors: {exc}")
                return
            ep.result = (averaged, M.checksum(averaged))
        log.info("epoch %d barrier complete (%d clients)", ep.number, len(ep.done))
        self._cond.notify_all()

    def _on_eval_request(self, cid: int, frame: Frame) -> list[Frame]:
        features = decode_tensor(frame.payload)
        with self._cond:
            ep = self._epoch
            if ep is None or cid not in ep.done or ep.result is None:
                raise ServerError(ErrorCode.BAD_STATE, f"client {cid} may evaluate only after an epoch barrier")
        out = self.evaluate(features)
        return [tensor_frame(FrameType.LOGITS_BATCH, out, cid, frame.epoch, frame.batch_id)]

    _HANDLERS = {
        FrameType.TRAIN_REQUEST: _on_train_request,
        FrameType.FEATURE_BATCH: _on_feature_batch,
        FrameType.GRADIENT_BATCH: _on_gradient_batch,
        FrameType.WEIGHT_UPLOAD: _on_weight_upload,
        FrameType.EPOCH_DONE: _on_epoch_done,
        FrameType.EVAL_REQUEST: _on_eval_request,
    }

    def serve_connection(self, conn: Connection) -> None:
        """Run one client session until the client disconnects or an error occurs."""
        cid = None
        clean = False
        try:
            while True:
                try:
                    frame = conn.recv()
                except ConnectionClosed:
                    clean = True
                    break
                if cid is None:
                    cid = frame.client_id
                elif frame.client_id != cid:
                    raise ServerError(ErrorCode.UNKNOWN_SESSION,
                                      f"session of client {cid} received a frame for client {frame.client_id}")
                if frame.type == FrameType.ERROR:
                    raise ServerError(ErrorCode.BAD_STATE, f"client {cid} reported an error")
                handler = self._HANDLERS.get(frame.type)
                if handler is None:
                    raise ServerError(ErrorCode.BAD_STATE, f"clients may not send {frame.type.name}")
                for reply in handler(self, cid, frame):
                    conn.send(reply)
        except ProtocolError as exc:
            log.warning("session %s: %s", cid, exc)
            self._send_error(conn, exc.code, str(exc), cid)
        except (OSError, ValueError) as exc:
            log.warning("session %s: %s", cid, exc)
            self._send_error(conn, ErrorCode.INTERNAL, str(exc), cid)
        finally:
            with self._cond:
                if cid is not None:
                    ep = self._epoch
                    unfinished = ep is not None and cid in ep.active
                    if not clean or unfinished or cid in self._requests:
                        self._fail(f"client {cid} session ended abnormally")
                    self._left.add(cid)
                    if self._holder == cid:
                        self._holder = None
                    self._cond.notify_all()
            conn.close()

    @staticmethod
    def _send_error(conn: Connection, code: int, message: str, cid) -> None:
        try:
            conn.send(error_frame(code, message, cid or 0))
        except OSError:
            pass

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None

    @property
    def failure(self) -> str | None:
        return self._failure


def serve_tcp(server: CloudServer, address: str, ready: threading.Event | None = None,
              bound: list | None = None) -> None:
    """Accept ``server.expected`` clients on ``address`` and serve them until all disconnect.

    The actual bound address (useful with port 0) is appended to ``bound``.
    """
    listener = listen(address)
    if bound is not None:
        bound.append(listener.getsockname()[:2])
    if ready is not None:
        ready.set()
    threads = []
    try:
        for _ in range(server.expected):
            sock, peer = listener.accept()
            log.info("client connected from %s:%d", *peer[:2])
            t = threading.Thread(target=server.serve_connection, args=(Connection(sock),), daemon=True)
            t.start()
            threads.append(t)
    finally:
        listener.close()
    for t in threads:
        t.join()
