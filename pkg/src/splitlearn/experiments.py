"""Experiment runners behind the CLI modes."""
from __future__ import annotations

import logging
import threading
from pathlib import Path

import numpy as np

from . import attack as A
from . import model as M
from .client import ClientConfig, SplitClient, TrainingAborted, TrainReport, monolithic_train
from .config import RunConfig
from .data import DEFAULT_PARTITION, Dataset, even_partition, format_classes, load_idx, partition, synthetic
from .server import CloudServer, serve_tcp
from .transport import connect, inprocess_pair

log = logging.getLogger(__name__)


# data

def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        train = synthetic(cfg.samples, cfg.classes, cfg.image_size, cfg.seed, cfg.channels, split_key=0)
        test = synthetic(cfg.test_samples, cfg.classes, cfg.image_size, cfg.seed, cfg.channels, split_key=1)
    else:
        train = load_idx(cfg.idx_images, cfg.idx_labels, cfg.classes)
        if cfg.idx_test_images:
            test = load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.classes)
        else:
            hold = cfg.test_limit or max(1, len(train) // 6)
            train, test = train.head(len(train) - hold), train.take(slice(len(train) - hold, None))
    if cfg.train_limit:
        train = train.head(cfg.train_limit)
    if cfg.test_limit:
        test = test.head(cfg.test_limit)
    return train, test


def partition_spec(cfg: RunConfig, num_classes: int) -> dict[int, tuple[int, ...]]:
    if cfg.partition_spec is not None:
        return cfg.partition_spec
    if cfg.clients == 3 and num_classes == 10:
        return dict(DEFAULT_PARTITION)
    return even_partition(range(num_classes), cfg.clients)


def client_configs(cfg: RunConfig, share: bool | None = None) -> dict[int, ClientConfig]:
    train, test = load_datasets(cfg)
    spec = partition_spec(cfg, train.num_classes)
    trains, tests = partition(train, spec), partition(test, spec)
    share = cfg.share if share is None else share
    return {cid: ClientConfig(cid, trains[cid], tests[cid], cfg.depth, cfg.epochs, cfg.batch_size, cfg.lr,
                              cfg.seed, share, cfg.barrier_timeout, cfg.max_batches or None)
            for cid in spec}


def _write_outputs(out: Path, reports: dict[int, TrainReport], tag: str) -> None:
    for cid, rep in sorted(reports.items()):
        rep.write_metrics(out / f"metrics_{tag}client{cid}.csv")
        rep.checkpoint = M.save_checkpoint(out / f"{tag}client{cid}.ckpt", rep.params)


# modes

def local_sim(cfg: RunConfig, configs: dict[int, ClientConfig] | None = None,
              out: Path | None = None) -> tuple[dict[int, TrainReport], CloudServer]:
    """Cloud server and all clients in one process, over socket pairs or loopback TCP."""
    configs = configs if configs is not None else client_configs(cfg)
    out = Path(cfg.out) if out is None else out
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(configs.values()))
    server = CloudServer(first.build_model(), cfg.depth, cfg.lr, cfg.seed, len(configs), cfg.schedule,
                         run_log=out / "run.log", barrier_timeout=cfg.barrier_timeout)
    reports: dict[int, TrainReport] = {}
    errors: list[BaseException] = []

    def run_client(ccfg: ClientConfig, conn) -> None:
        try:
            reports[ccfg.client_id] = SplitClient(ccfg, conn).run()
        except BaseException as exc:   # reported after join
            errors.append(exc)

    threads = []
    if cfg.transport == "tcp":
        ready, bound = threading.Event(), []
        srv_thread = threading.Thread(target=serve_tcp, args=(server, "127.0.0.1:0", ready, bound), daemon=True)
        srv_thread.start()
        ready.wait()
        address = f"{bound[0][0]}:{bound[0][1]}"
        for ccfg in configs.values():
            conn = connect(address, cfg.barrier_timeout)
            threads.append(threading.Thread(target=run_client, args=(ccfg, conn)))
        for t in threads:
            t.start()
        threads.append(srv_thread)
    else:
        for ccfg in configs.values():
            client_end, server_end = inprocess_pair(cfg.barrier_timeout)
            threads.append(threading.Thread(target=server.serve_connection, args=(server_end,), daemon=True))
            threads.append(threading.Thread(target=run_client, args=(ccfg, client_end)))
        for t in threads:
            t.start()
    for t in threads:
        t.join()
    server.close()
    if errors:
        raise errors[0]
    for rep in reports.values():
        rep.params = {**rep.params, **server.params}
        rep.params = {k: rep.params[k] for k in sorted(rep.params, key=_param_order)}
    _write_outputs(out, reports, "")
    M.save_checkpoint(out / "cloud.ckpt", server.params)
    return reports, server


def _param_order(name: str):
    idx, key = name.split(".")
    return int(idx), key != "weight"


def baseline(cfg: RunConfig, configs: dict[int, ClientConfig] | None = None,
             out: Path | None = None) -> dict[int, TrainReport]:
    """Each client trains the whole model alone; nothing is shared."""
    configs = configs if configs is not None else client_configs(cfg, share=False)
    out = Path(cfg.out) if out is None else out
    reports = {cid: monolithic_train(c) for cid, c in sorted(configs.items())}
    _write_outputs(out, reports, "baseline_")
    return reports


def format_compare(configs: dict[int, ClientConfig], shared: dict[int, TrainReport],
                   alone: dict[int, TrainReport]) -> str:
    lines = [f"{'client':<8}{'classes':<10}{'sharing(%)':>12}{'non-sharing(%)':>16}", "-" * 46]
    for cid in sorted(configs):
        s = shared[cid].rows[-1].accuracy * 100
        n = alone[cid].rows[-1].accuracy * 100
        lines.append(f"{'client' + str(cid):<8}{format_classes(configs[cid].train.classes):<10}{s:>12.2f}{n:>16.2f}")
    return "\n".join(lines) + "\n"


def compare(cfg: RunConfig) -> tuple[str, dict[int, TrainReport], dict[int, TrainReport]]:
    out = Path(cfg.out)
    configs = client_configs(cfg, share=True)
    shared, _ = local_sim(cfg, configs, out / "sharing")
    for c in configs.values():
        c.share = False
    alone = baseline(cfg, configs, out / "non_sharing")
    table = format_compare(configs, shared, alone)
    (out / "compare.txt").write_text(table, encoding="utf-8")
    return table, shared, alone


def load_params(paths: str) -> M.Params:
    params: M.Params = {}
    for path in paths.split(","):
        params.update(M.load_checkpoint(path))
    return {k: params[k] for k in sorted(params, key=_param_order)}


def attack(cfg: RunConfig, params: M.Params | None = None) -> list[A.ReconstructionReport]:
    """Invert the trained extractor at each requested depth on held-out images."""
    params = params if params is not None else load_params(cfg.checkpoint)
    model = M.model_from_params(params, cfg.image_size)
    _, test = load_datasets(cfg)
    n = min(cfg.attack_samples, len(test))
    half = n // 2
    attack_images, eval_images = test.images[:half], test.images[half:n]
    out = Path(cfg.out)
    reports = []
    for depth in cfg.depth_list:
        needed = M.split(model, depth).extractor
        missing = [M.param_name(i, key) for i in needed if model.layers[i].has_params
                   for key in ("weight", "bias") if M.param_name(i, key) not in params]
        if missing:
            raise ValueError(f"checkpoint lacks extractor tensors {missing} needed for depth {depth}")
        rep = A.run_attack(model, params, depth, attack_images, eval_images, cfg.attack_steps, cfg.attack_lr,
                           cfg.attack_batch, cfg.seed, out / "attack")
        log.info("depth %d: decoder loss %.6f score %.2f", depth, rep.decoder_loss, rep.score)
        reports.append(rep)
    (out / "attack").mkdir(parents=True, exist_ok=True)
    (out / "attack" / "report.txt").write_text(A.format_reports(reports), encoding="utf-8")
    return reports


def serve(cfg: RunConfig) -> CloudServer:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = M.reference_model(cfg.channels, cfg.image_size, 1)
    server = CloudServer(model, cfg.depth, cfg.lr, cfg.seed, cfg.clients, cfg.schedule,
                         run_log=out / "run.log", barrier_timeout=cfg.barrier_timeout)
    log.info("serving %d clients on %s (depth %d)", cfg.clients, cfg.listen, cfg.depth)
    try:
        serve_tcp(server, cfg.listen)
    finally:
        server.close()
    M.save_checkpoint(out / "cloud.ckpt", server.params)
    if server.failure:
        raise TrainingAborted(server.failure)
    return server


def client(cfg: RunConfig) -> TrainReport:
    configs = client_configs(cfg)
    if cfg.client_id not in configs:
        raise ValueError(f"client-id {cfg.client_id} is not in the partition (clients {sorted(configs)})")
    ccfg = configs[cfg.client_id]
    report = SplitClient(ccfg, connect(cfg.connect, cfg.barrier_timeout)).run()
    _write_outputs(Path(cfg.out), {cfg.client_id: report}, "")
    return report


def mean_accuracy(reports: dict[int, TrainReport]) -> float:
    return float(np.mean([r.rows[-1].accuracy for r in reports.values()]))
