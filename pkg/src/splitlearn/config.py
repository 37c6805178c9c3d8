"""Run configuration: defaults, flat ``key=value`` files, and validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import PartitionError, parse_partition
from .transport import parse_address

MODES = ("serve", "client", "local-sim", "baseline", "attack", "compare")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    mode: str = "local-sim"
    seed: int = 0
    clients: int = 3
    client_id: int = 1
    depth: int = 2
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    share: bool = True
    dataset: str = "synthetic"
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    train_limit: int = 0          # 0 = use everything
    test_limit: int = 0
    samples: int = 3000           # synthetic train size
    test_samples: int = 600
    classes: int = 10
    image_size: int = 28
    channels: int = 1
    partition: str = ""           # e.g. "0-3/4-6/7-9"; empty = default split
    listen: str = "127.0.0.1:5770"
    connect: str = "127.0.0.1:5770"
    transport: str = "inproc"     # local-sim only: inproc | tcp
    schedule: str = "round-robin"
    barrier_timeout: float = 300.0
    out: str = "runs/latest"
    checkpoint: str = ""          # attack: comma-separated checkpoint files, merged
    depths: str = "1,2,3"
    attack_steps: int = 5000
    attack_lr: float = 0.01
    attack_batch: int = 64
    attack_samples: int = 1000
    max_batches: int = 0          # 0 = full epochs
    log_level: str = "INFO"

    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls) if f.name != "extra"]

    def update(self, values: dict[str, object]) -> "RunConfig":
        """Apply string or typed values by key, converting to each field's type."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for raw_key, value in values.items():
            key = raw_key.replace("-", "_")
            if key not in types or key == "extra":
                raise ConfigError(raw_key, "unknown setting")
            setattr(self, key, _convert(key, types[key], value))
        return self

    @property
    def depth_list(self) -> list[int]:
        return [int(d) for d in self.depths.split(",") if d.strip()]

    @property
    def partition_spec(self) -> dict[int, tuple[int, ...]] | None:
        return parse_partition(self.partition) if self.partition else None

    def validate(self) -> "RunConfig":
        """Check every setting the selected mode uses; raises ``ConfigError`` naming the key."""
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(key, msg)

        need(self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}, got {self.mode!r}")
        need(0 <= self.seed < 2 ** 64, "seed", f"must be a 64-bit non-negative integer, got {self.seed}")
        need(self.clients >= 1, "clients", f"must be >= 1, got {self.clients}")
        need(1 <= self.client_id <= 0xFFFFFFFF, "client-id", f"must be in 1..2^32-1, got {self.client_id}")
        need(self.depth in (1, 2, 3), "depth", f"must be 1, 2 or 3, got {self.depth}")
        need(self.epochs >= 1, "epochs", f"must be >= 1, got {self.epochs}")
        need(self.batch_size >= 1, "batch-size", f"must be >= 1, got {self.batch_size}")
        need(self.lr > 0, "lr", f"must be > 0, got {self.lr}")
        need(self.dataset in ("synthetic", "idx"), "dataset", f"must be idx or synthetic, got {self.dataset!r}")
        need(self.image_size in (28, 32), "image-size", f"must be 28 or 32, got {self.image_size}")
        need(self.channels in (1, 3), "channels", f"must be 1 or 3, got {self.channels}")
        need(self.classes >= 1, "classes", f"must be >= 1, got {self.classes}")
        need(self.train_limit >= 0, "train-limit", "must be >= 0")
        need(self.test_limit >= 0, "test-limit", "must be >= 0")
        need(self.max_batches >= 0, "max-batches", "must be >= 0")
        need(self.barrier_timeout > 0, "barrier-timeout", f"must be > 0, got {self.barrier_timeout}")
        need(self.transport in ("inproc", "tcp"), "transport", f"must be inproc or tcp, got {self.transport!r}")
        need(self.schedule in ("round-robin", "arrival"), "schedule",
             f"must be round-robin or arrival, got {self.schedule!r}")
        need(bool(self.out), "out", "must name an output directory")
        need(self.log_level.upper() in LOG_LEVELS, "log-level",
             f"must be one of {', '.join(LOG_LEVELS)}, got {self.log_level!r}")
        if self.dataset == "synthetic":
            need(self.samples >= 1, "samples", f"must be >= 1, got {self.samples}")
            need(self.test_samples >= 1, "test-samples", f"must be >= 1, got {self.test_samples}")
        elif self.mode != "serve":
            for key in ("idx_images", "idx_labels"):
                path = getattr(self, key)
                need(bool(path), key.replace("_", "-"), "required when dataset=idx")
                need(Path(path).is_file(), key.replace("_", "-"), f"no such file: {path}")
            for key in ("idx_test_images", "idx_test_labels"):
                path = getattr(self, key)
                need(not path or Path(path).is_file(), key.replace("_", "-"), f"no such file: {path}")
            need(bool(self.idx_test_images) == bool(self.idx_test_labels), "idx-test-images",
                 "idx-test-images and idx-test-labels must be given together")
        try:
            spec = self.partition_spec
        except (PartitionError, ValueError) as exc:
            raise ConfigError("partition", str(exc)) from None
        if spec is not None:
            need(len(spec) == self.clients, "partition",
                 f"names {len(spec)} clients but clients={self.clients}")
            flat = [c for cs in spec.values() for c in cs]
            need(len(flat) == len(set(flat)), "partition", "class sets must be disjoint")
            need(max(flat) < self.classes, "partition", f"class {max(flat)} >= classes={self.classes}")
        elif self.mode != "serve":
            need(self.clients <= self.classes, "clients",
                 f"cannot split {self.classes} classes over {self.clients} clients")
        for key in ("listen", "connect"):
            try:
                parse_address(getattr(self, key))
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        if self.mode == "attack":
            need(bool(self.checkpoint), "checkpoint", "required for attack mode")
            for path in self.checkpoint.split(","):
                need(Path(path).is_file(), "checkpoint", f"no such file: {path}")
            try:
                depths = self.depth_list
            except ValueError:
                raise ConfigError("depths", f"must be a comma-separated list, got {self.depths!r}") from None
            need(bool(depths) and all(d in (1, 2, 3) for d in depths), "depths",
                 f"each depth must be 1, 2 or 3, got {self.depths!r}")
            need(self.attack_steps >= 0, "attack-steps", "must be >= 0")
            need(self.attack_lr > 0, "attack-lr", "must be > 0")
            need(self.attack_batch >= 1, "attack-batch", "must be >= 1")
            need(self.attack_samples >= 2, "attack-samples", "must be >= 2")
        return self


def _convert(key: str, typ, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError(text)
        if name == "int":
            return int(text)
        if name == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key.replace("_", "-"), f"cannot parse {text!r} as {name}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError("config", f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values
