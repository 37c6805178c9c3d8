"""Client side of split training, plus the monolithic trainer used as its oracle."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .data import Dataset, batches
from .protocol import (Frame, FrameType, RemoteError, decode_params, decode_tensor, encode_params,
                       tensor_frame)
from .tensor import softmax_cross_entropy
from .transport import Connection

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class ClientConfig:
    client_id: int
    train: Dataset
    test: Dataset | None = None
    depth: int = 2
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    share: bool = True
    barrier_timeout: float = 300.0
    max_batches: int | None = None     # cap per epoch, for smoke runs
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.depth not in (1, 2, 3):
            raise ValueError(f"depth must be 1, 2 or 3, got {self.depth}")
        if not 0 <= self.client_id <= 0xFFFFFFFF:
            raise ValueError(f"client_id must fit in u32, got {self.client_id}")

    def build_model(self) -> M.ModelSpec:
        _, c, h, _ = self.train.images.shape
        return M.reference_model(c, h, self.train.num_classes)

    def epoch_batches(self, epoch: int):
        it = batches(len(self.train), self.batch_size, self.seed, self.client_id, epoch)
        for b, idx in enumerate(it):
            if self.max_batches is not None and b >= self.max_batches:
                break
            yield b, idx


@dataclass
class EpochRow:
    epoch: int
    loss: float
    accuracy: float | None


@dataclass
class TrainReport:
    client_id: int
    rows: list[EpochRow] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Path | None = None
    params: M.Params = field(default_factory=dict)
    # (epoch, batch_id, extractor checksum, classifier checksum, cloud checksum or None) per batch
    trace: list[tuple] = field(default_factory=list)

    def metrics_csv(self) -> str:
        lines = ["epoch,loss,accuracy"]
        for r in self.rows:
            acc = "" if r.accuracy is None else repr(r.accuracy)
            lines.append(f"{r.epoch},{r.loss!r},{acc}")
        return "\n".join(lines) + "\n"

    def write_metrics(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.metrics_csv(), encoding="utf-8")
        return path


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("cannot score an empty test slice")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: M.ModelSpec, params: M.Params, test: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions of the whole model on ``test``."""
    if test is None or len(test) == 0:
        raise ValueError("cannot score an empty test slice")
    correct = 0
    for start in range(0, len(test), batch_size):
        logits, _ = M.forward(model, params, test.images[start:start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == test.labels[start:start + batch_size]))
    return correct / len(test)


def monolithic_train(config: ClientConfig, params: M.Params | None = None) -> TrainReport:
    """Train the whole model in one process: the oracle for split training."""
    config.validate()
    model = config.build_model()
    plan = M.split(model, config.depth)
    params = dict(params) if params is not None else M.init_model_params(model, config.seed)
    report = TrainReport(config.client_id)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        losses = []
        for b, idx in config.epoch_batches(epoch):
            logits, cache = M.forward(model, params, config.train.images[idx])
            loss, grad = softmax_cross_entropy(logits, config.train.labels[idx])
            _, grads = M.backward(model, params, cache, grad)
            M.apply_sgd(params, grads, config.lr)
            losses.append(loss)
            report.trace.append((epoch, b, M.checksum(M.select(params, plan.extractor)),
                                 M.checksum(M.select(params, plan.classifier)),
                                 M.checksum(M.select(params, plan.cloud))))
        acc = evaluate(model, params, config.test, config.eval_batch_size) if config.test is not None else None
        report.rows.append(EpochRow(epoch, float(np.mean(losses)), acc))
        log.info("client %d epoch %d loss %.4f acc %s", config.client_id, epoch, report.rows[-1].loss, acc)
    report.wall_time = time.perf_counter() - t0
    report.params = params
    return report


class SplitClient:
    """Holds the extractor and classifier; the cloud part lives behind ``conn``."""

    def __init__(self, config: ClientConfig, conn: Connection):
        config.validate()
        self.config = config
        self.conn = conn
        self.model = config.build_model()
        self.plan = M.split(self.model, config.depth)
        full = M.init_model_params(self.model, config.seed)
        self.params = {**M.select(full, self.plan.extractor), **M.select(full, self.plan.classifier)}
        conn.settimeout(config.barrier_timeout)

    @property
    def extractor(self) -> M.Params:
        return M.select(self.params, self.plan.extractor)

    def _frame(self, ftype: FrameType, epoch: int, batch_id: int = 0, payload: bytes = b"") -> Frame:
        return Frame(ftype, self.config.client_id, epoch, batch_id, payload)

    def _exchange(self, ftype: FrameType, reply: FrameType, t: np.ndarray, epoch: int, batch_id: int) -> np.ndarray:
        self.conn.send(tensor_frame(ftype, t, self.config.client_id, epoch, batch_id))
        frame = self.conn.expect(reply)
        if frame.batch_id != batch_id:
            raise TrainingAborted(f"server answered batch {frame.batch_id} for batch {batch_id}")
        return decode_tensor(frame.payload)

    def train_epoch(self, epoch: int, report: TrainReport | None = None) -> EpochRow:
        cfg, model, plan, params = self.config, self.model, self.plan, self.params
        digest = M.checksum(self.extractor).encode("ascii") if cfg.share else b""
        self.conn.send(self._frame(FrameType.TRAIN_REQUEST, epoch, payload=digest))
        self.conn.expect(FrameType.TRAIN_REQUEST)
        losses = []
        for b, idx in cfg.epoch_batches(epoch):
            features, ext_cache = M.forward(model, params, cfg.train.images[idx], plan.extractor)
            processed = self._exchange(FrameType.FEATURE_BATCH, FrameType.FEATURE_BATCH, features, epoch, b)
            logits, clf_cache = M.forward(model, params, processed, plan.classifier)
            loss, grad = softmax_cross_entropy(logits, cfg.train.labels[idx])
            grad_processed, clf_grads = M.backward(model, params, clf_cache, grad)
            M.apply_sgd(params, clf_grads, cfg.lr)
            grad_cut = self._exchange(FrameType.GRADIENT_BATCH, FrameType.GRADIENT_BATCH, grad_processed, epoch, b)
            _, ext_grads = M.backward(model, params, ext_cache, grad_cut)
            M.apply_sgd(params, ext_grads, cfg.lr)
            losses.append(loss)
            if report is not None:
                report.trace.append((epoch, b, M.checksum(self.extractor),
                                     M.checksum(M.select(params, plan.classifier)), None))
        self._barrier(epoch)
        acc = self.evaluate(epoch) if cfg.test is not None else None
        return EpochRow(epoch, float(np.mean(losses)), acc)

    def _barrier(self, epoch: int) -> None:
        cfg = self.config
        upload = encode_params(self.extractor if cfg.share else None)
        self.conn.send(self._frame(FrameType.WEIGHT_UPLOAD, epoch, payload=upload))
        self.conn.send(self._frame(FrameType.EPOCH_DONE, epoch))
        averaged = decode_params(self.conn.expect(FrameType.WEIGHT_BROADCAST).payload)
        commit = self.conn.expect(FrameType.AVG_COMMIT).payload.decode("ascii")
        if not cfg.share:
            return
        if list(averaged) != list(self.extractor):
            raise TrainingAborted(f"broadcast tensors {list(averaged)} do not match extractor {list(self.extractor)}")
        self.params.update(averaged)
        if M.checksum(self.extractor) != commit:
            raise TrainingAborted(f"extractor checksum after averaging does not match the server's commit")

    def evaluate(self, epoch: int = 0) -> float:
        cfg, model, plan = self.config, self.model, self.plan
        test = cfg.test
        if test is None or len(test) == 0:
            raise ValueError("cannot score an empty test slice")
        correct = 0
        for b, start in enumerate(range(0, len(test), cfg.eval_batch_size)):
            x = test.images[start:start + cfg.eval_batch_size]
            features, _ = M.forward(model, self.params, x, plan.extractor)
            processed = self._exchange(FrameType.EVAL_REQUEST, FrameType.LOGITS_BATCH, features, epoch, b)
            logits, _ = M.forward(model, self.params, processed, plan.classifier)
            correct += int(np.sum(np.argmax(logits, axis=1) == test.labels[start:start + cfg.eval_batch_size]))
        return correct / len(test)

    def run(self) -> TrainReport:
        report = TrainReport(self.config.client_id)
        t0 = time.perf_counter()
        try:
            for epoch in range(self.config.epochs):
                row = self.train_epoch(epoch, report)
                report.rows.append(row)
                log.info("client %d epoch %d loss %.4f acc %s", self.config.client_id, epoch, row.loss, row.accuracy)
        except RemoteError as exc:
            raise TrainingAborted(f"client {self.config.client_id}: server error {exc.code}: {exc.message}") from exc
        except TimeoutError as exc:
            raise TrainingAborted(f"client {self.config.client_id}: timed out after "
                                  f"{self.config.barrier_timeout}s waiting for the server") from exc
        finally:
            self.conn.close()
        report.wall_time = time.perf_counter() - t0
        report.params = self.params
        return report
