"""Command-line entry point: ``splitlearn MODE [flags]`` or ``splitlearn --mode MODE``.

Settings come from built-in defaults, then ``--config FILE`` (flat key=value
lines), then flags.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as X
from .attack import format_reports
from .config import MODES, ConfigError, RunConfig, read_config_file


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitlearn", description="Split learning with a shared common extractor.")
    p.add_argument("command", nargs="?", choices=MODES, help="mode to run (same as --mode)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--config", help="key=value settings file")
    a = p.add_argument
    a("--seed", type=int)
    a("--clients", type=int, help="number of clients (serve, local-sim, baseline, compare)")
    a("--client-id", type=int, help="this client's id (client mode)")
    a("--depth", type=int, choices=(1, 2, 3), help="extractor depth: ends after block 1, 2 or 3")
    a("--epochs", type=int)
    a("--batch-size", type=int)
    a("--lr", type=float)
    a("--share", choices=("on", "off"), help="average the common extractor at each epoch barrier")
    a("--dataset", choices=("idx", "synthetic"))
    a("--idx-images")
    a("--idx-labels")
    a("--idx-test-images")
    a("--idx-test-labels")
    a("--train-limit", type=int, help="keep only the first N training samples")
    a("--test-limit", type=int, help="keep only the first N test samples")
    a("--samples", type=int, help="synthetic training samples")
    a("--test-samples", type=int, help="synthetic test samples")
    a("--classes", type=int)
    a("--image-size", type=int, choices=(28, 32))
    a("--channels", type=int, choices=(1, 3))
    a("--partition", help='client class sets, e.g. "0-3/4-6/7-9"')
    a("--listen", help="host:port for serve")
    a("--connect", help="host:port of the server for client")
    a("--transport", choices=("inproc", "tcp"), help="local-sim transport")
    a("--schedule", choices=("round-robin", "arrival"), help="order of client batches on the server")
    a("--barrier-timeout", type=float, help="seconds to wait for the server or a barrier")
    a("--out", help="output directory")
    a("--checkpoint", help="attack: checkpoint file(s), comma-separated")
    a("--depths", help="attack: comma-separated depths")
    a("--attack-steps", type=int)
    a("--attack-lr", type=float)
    a("--attack-batch", type=int)
    a("--attack-samples", type=int, help="held-out images used by the attack (half train, half score)")
    a("--max-batches", type=int, help="cap batches per epoch (0 = no cap)")
    a("--log-level")
    return p


def resolve_config(argv=None) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    cfg = RunConfig()
    config_path = args.pop("config")
    if config_path:
        try:
            cfg.update(read_config_file(config_path))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {config_path}: {exc.strerror}") from None
    command, mode = args.pop("command"), args.pop("mode")
    if command and mode and command != mode:
        raise ConfigError("mode", f"positional mode {command!r} conflicts with --mode {mode!r}")
    if command or mode:
        cfg.mode = command or mode
    cfg.update({k: v for k, v in args.items() if v is not None})
    return cfg.validate()


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    if cfg.mode == "serve":
        X.serve(cfg)
    elif cfg.mode == "client":
        rep = X.client(cfg)
        print(rep.metrics_csv(), end="")
    elif cfg.mode == "local-sim":
        reports, _ = X.local_sim(cfg)
        for cid, rep in sorted(reports.items()):
            print(f"client{cid}: final accuracy {rep.rows[-1].accuracy:.4f}  metrics {out}/metrics_client{cid}.csv")
    elif cfg.mode == "baseline":
        reports = X.baseline(cfg)
        for cid, rep in sorted(reports.items()):
            print(f"client{cid}: final accuracy {rep.rows[-1].accuracy:.4f}")
    elif cfg.mode == "compare":
        table, _, _ = X.compare(cfg)
        print(table, end="")
    elif cfg.mode == "attack":
        print(format_reports(X.attack(cfg)), end="")
    return 0


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"splitlearn: invalid configuration: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(cfg)
    except Exception as exc:  # any failure is a non-zero exit with a diagnostic
        logging.getLogger("splitlearn").debug("failure", exc_info=True)
        print(f"splitlearn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
