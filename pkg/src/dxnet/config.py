"""Configuration: defaults, ``key=value`` file loading, validation."""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

KiB = 1024
MiB = 1024 * KiB

PROFILES = {
    # receive buffer size, SGEs per receive WR
    "small": (32 * KiB, 4),
    "large": (1 * MiB, 1),
}


@dataclass
class EngineConfig:
    sq_depth: int = 20
    srq_depth: int = 2000
    profile: str = "small"
    recv_buffer_size: int = 32 * KiB
    sges_per_wr: int = 4
    # 4 GiB on the original testbed; desk-scale default
    pool_capacity_bytes: int = 64 * MiB
    irb_size: int = 4000
    yield_after_ms: float = 100.0
    park_after_ms: float = 1000.0
    park_quantum_ns: int = 1

    @property
    def max_transfer_size(self) -> int:
        return self.recv_buffer_size * self.sges_per_wr

    @property
    def pool_buffers(self) -> int:
        return self.pool_capacity_bytes // self.recv_buffer_size


@dataclass
class FlowControlConfig:
    window_size: int = 16 * MiB
    threshold: float = 0.1
    mode: str = "slice"


@dataclass
class ConnectionConfig:
    max_connections: int = 100
    discovery_interval_ms: float = 100.0
    exchange_timeout_ms: float = 1000.0
    exchange_retries: int = 3
    creation_timeout_ms: float = 5000.0


@dataclass
class CoreConfig:
    orb_capacity: int = 4 * MiB
    ibq_max_buffers: int = 8192
    ibq_max_bytes: int = 128 * MiB
    message_handlers: int = 1
    send_timeout_ms: float = 10000.0
    request_timeout_ms: float = 5000.0


@dataclass
class Config:
    engine: EngineConfig = field(default_factory=EngineConfig)
    fc: FlowControlConfig = field(default_factory=FlowControlConfig)
    connection: ConnectionConfig = field(default_factory=ConnectionConfig)
    core: CoreConfig = field(default_factory=CoreConfig)

    def validate(self) -> "Config":
        validate(self)
        return self


def _camel(name):
    head, *rest = name.split("_")
    return head + "".join(p.capitalize() for p in rest)


_SECTION_TYPES = {
    "engine": EngineConfig,
    "fc": FlowControlConfig,
    "connection": ConnectionConfig,
    "core": CoreConfig,
}
KEYS = {
    f"{sec}.{_camel(f.name)}": (sec, f)
    for sec, cls in _SECTION_TYPES.items()
    for f in dataclasses.fields(cls)
}
_SIZE_RE = re.compile(r"^(\d+)\s*(k|ki|kib|m|mi|mib|g|gi|gib)?$", re.IGNORECASE)
_SIZE_MULT = {"k": KiB, "m": MiB, "g": 1024 * MiB}


def _parse_value(f, text):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "int":
        m = _SIZE_RE.match(text)
        if not m:
            raise ValueError(f"expected an integer, got {text!r}")
        mult = _SIZE_MULT[m.group(2)[0].lower()] if m.group(2) else 1
        return int(m.group(1)) * mult
    if kind == "float":
        return float(text)
    return text


_warned = set()


def validate(cfg: Config) -> None:
    e, fc, c, core = cfg.engine, cfg.fc, cfg.connection, cfg.core
    positive = [
        ("engine.sqDepth", e.sq_depth), ("engine.srqDepth", e.srq_depth),
        ("engine.recvBufferSize", e.recv_buffer_size), ("engine.sgesPerWr", e.sges_per_wr),
        ("engine.irbSize", e.irb_size), ("fc.windowSize", fc.window_size),
        ("connection.maxConnections", c.max_connections), ("core.orbCapacity", core.orb_capacity),
        ("core.ibqMaxBuffers", core.ibq_max_buffers), ("core.ibqMaxBytes", core.ibq_max_bytes),
        ("core.messageHandlers", core.message_handlers),
    ]
    for name, value in positive:
        if value < 1:
            raise ValidationError(f"{name} must be positive, got {value}")
    if e.profile not in PROFILES and e.profile != "custom":
        raise ValidationError(f"engine.profile must be one of {sorted(PROFILES)} or custom")
    if not 0 < fc.threshold <= 1:
        raise ValidationError("fc.threshold must lie in (0, 1]")
    if fc.mode not in ("slice", "scaled"):
        raise ValidationError("fc.mode must be 'slice' or 'scaled'")
    from .flow_control import window_geometry
    limit, unit = window_geometry(fc.window_size, fc.threshold, fc.mode)
    if unit < 1:
        raise ValidationError("flow control slice (windowSize x threshold) must be >= 1 byte")
    if e.irb_size < e.srq_depth:
        raise ValidationError("engine.irbSize must be >= engine.srqDepth")
    if core.orb_capacity & (core.orb_capacity - 1):
        raise ValidationError("core.orbCapacity must be a power of two")
    if e.pool_buffers < e.sges_per_wr:
        raise ValidationError("receive pool cannot fill a single receive WR")
    if e.yield_after_ms < 0 or e.park_after_ms < 0:
        raise ValidationError("parking timeouts must be non-negative")
    key = (e.pool_buffers, e.srq_depth, e.sges_per_wr)
    if e.pool_buffers < e.srq_depth * e.sges_per_wr and key not in _warned:
        _warned.add(key)
        log.warning("receive pool (%d buffers) cannot fill the SRQ (%d WRs x %d SGEs); "
                    "refilling will pause when the pool runs dry",
                    e.pool_buffers, e.srq_depth, e.sges_per_wr)


def parse_config(text: str) -> Config:
    cfg = Config()
    seen = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(no, f"expected key=value, got {raw.strip()!r}")
        if key not in KEYS:
            raise ParseError(no, f"unknown key {key!r}")
        if key in seen:
            raise ParseError(no, f"duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = no
        sec, f = KEYS[key]
        try:
            setattr(getattr(cfg, sec), f.name, _parse_value(f, value))
        except ValueError as exc:
            raise ParseError(no, f"{key}: {exc}") from None
    e = cfg.engine
    if e.profile in PROFILES:
        size, sges = PROFILES[e.profile]
        if "engine.recvBufferSize" not in seen:
            e.recv_buffer_size = size
        if "engine.sgesPerWr" not in seen:
            e.sges_per_wr = sges
    if "engine.irbSize" not in seen:
        e.irb_size = 2 * e.srq_depth
    validate(cfg)
    return cfg


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: Config) -> str:
    """Canonical text form: every key, sorted by section then field order."""
    lines = []
    for key, (sec, f) in KEYS.items():
        value = getattr(getattr(cfg, sec), f.name)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: Config, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
