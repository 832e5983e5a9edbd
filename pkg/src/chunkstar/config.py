"""Scenario configuration: a small INI grammar parsed with configparser.

Sections and keys (all optional; defaults mirror the 8 x 32 GB GPU /
240 GB CPU reference testbed)::

    [model]
    rung = 1B            ; named ladder row, or give layers/hidden_dim
    layers = 20
    hidden_dim = 2048
    heads = 16
    seq_len = 1024
    vocab = 50304
    batch = 8
    context = 1GiB       ; framework/runtime reserve per GPU
    fragmentation = 1.0

    [hardware]
    gpu_count = 8
    gpu_bytes = 32GB
    cpu_bytes = 240GB
    pcie_gbps = 12
    intra_gpu_gbps = 100

    [policy]
    capacity_elems = 32Mi
    eviction = latest_next_use   ; or list_order
    limit_fraction = 0.8
    checkpointing = false
    strategies = chunk, static_offload, ddp
    os_placement = auto          ; auto | cpu | gpu

    [sweep]
    batches = 4, 8, 16, 32, 64
    gpu_counts = 1, 2, 4, 8
    rungs =                      ; empty = the full built-in ladder

    [run]
    seed = 0
    iterations = 3               ; 1 warm-up + 2 measured

Byte values accept plain integers or the suffixes KB/MB/GB (decimal) and
KiB/MiB/GiB (binary); element counts accept Ki/Mi/Gi.  Parse failures
raise :class:`ConfigError` carrying the section and key (and the line
number for syntax errors), so the CLI can point at the offending field.
"""

import configparser
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

from .baselines import CHUNK, DDP, L2L, STATIC_OFFLOAD
from .chunks import DEFAULT_CAPACITY_ELEMS
from .memory import EvictionStrategy
from .model import (
    DEFAULT_CONTEXT_BYTES,
    LadderRung,
    ModelSchema,
    SchemaError,
    build_gpt_schema,
    default_ladder,
    ladder_rung,
)

KNOWN_STRATEGIES = (CHUNK, STATIC_OFFLOAD, DDP, L2L)

_BYTE_SUFFIXES = {
    "": 1, "B": 1,
    "KB": 10**3, "MB": 10**6, "GB": 10**9, "TB": 10**12,
    "KIB": 1 << 10, "MIB": 1 << 20, "GIB": 1 << 30, "TIB": 1 << 40,
}
_COUNT_SUFFIXES = {"": 1, "KI": 1 << 10, "MI": 1 << 20, "GI": 1 << 30}


class ConfigError(ValueError):
    """Configuration problem, annotated with where it was found."""

    def __init__(self, message: str, section: Optional[str] = None,
                 key: Optional[str] = None, line: Optional[int] = None):
        self.section = section
        self.key = key
        self.line = line
        where = ""
        if section is not None:
            where = f"[{section}]" + (f" {key}" if key else "")
        if line is not None:
            where = (where + f" (line {line})").strip()
        super().__init__(f"{where}: {message}" if where else message)


def _scaled_int(text: str, suffixes: Dict[str, int]) -> int:
    raw = text.strip().replace("_", "")
    value = None
    for suffix in sorted(suffixes, key=len, reverse=True):
        if suffix and raw.upper().endswith(suffix):
            number = raw[: -len(suffix)].strip()
            value = int(float(number) * suffixes[suffix]) if "." in number \
                else int(number) * suffixes[suffix]
            break
    if value is None:
        value = int(raw)
    if value < 0:
        raise ValueError("size must not be negative: %r" % text)
    return value


def parse_bytes(text: str) -> int:
    """'32GB' -> 32_000_000_000; '1GiB' -> 1073741824; '123' -> 123."""
    return _scaled_int(text, _BYTE_SUFFIXES)


def parse_count(text: str) -> int:
    """'32Mi' -> 33554432; '1024' -> 1024."""
    return _scaled_int(text, _COUNT_SUFFIXES)


@dataclass(frozen=True)
class HardwareSpec:
    gpu_count: int = 8
    gpu_bytes: int = 32 * 10**9
    cpu_bytes: int = 240 * 10**9
    pcie_gbps: float = 12.0
    intra_gpu_gbps: float = 100.0

    def __post_init__(self) -> None:
        if self.gpu_count < 1:
            raise ConfigError("gpu_count must be >= 1", "hardware", "gpu_count")
        if self.gpu_bytes <= 0 or self.cpu_bytes <= 0:
            raise ConfigError("capacities must be > 0", "hardware")
        if self.pcie_gbps <= 0 or self.intra_gpu_gbps <= 0:
            raise ConfigError("bandwidths must be > 0", "hardware")


@dataclass(frozen=True)
class PolicySpec:
    capacity_elems: int = DEFAULT_CAPACITY_ELEMS
    eviction: EvictionStrategy = EvictionStrategy.LATEST_NEXT_USE
    limit_fraction: float = 0.8
    checkpointing: bool = False
    strategies: Tuple[str, ...] = (CHUNK, STATIC_OFFLOAD, DDP)
    os_placement: str = "auto"

    def __post_init__(self) -> None:
        if self.capacity_elems <= 0:
            raise ConfigError("capacity_elems must be > 0", "policy", "capacity_elems")
        if not 0.0 < self.limit_fraction <= 1.0:
            raise ConfigError("limit_fraction must be in (0, 1]", "policy", "limit_fraction")
        if not self.strategies:
            raise ConfigError("strategies must be non-empty", "policy", "strategies")
        for name in self.strategies:
            if name not in KNOWN_STRATEGIES:
                raise ConfigError(f"unknown strategy {name!r} "
                                  f"(known: {', '.join(KNOWN_STRATEGIES)})",
                                  "policy", "strategies")
        if self.os_placement not in ("auto", "cpu", "gpu"):
            raise ConfigError("os_placement must be auto, cpu, or gpu",
                              "policy", "os_placement")


@dataclass(frozen=True)
class SweepSpec:
    batches: Tuple[int, ...] = (4, 8, 16, 32, 64)
    gpu_counts: Tuple[int, ...] = (1, 2, 4, 8)
    rungs: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.batches or any(b < 1 for b in self.batches):
            raise ConfigError("batches must be positive", "sweep", "batches")
        if not self.gpu_counts or any(g < 1 for g in self.gpu_counts):
            raise ConfigError("gpu_counts must be positive", "sweep", "gpu_counts")

    def ladder(self) -> Sequence[LadderRung]:
        if not self.rungs:
            return default_ladder()
        try:
            return [ladder_rung(label) for label in self.rungs]
        except KeyError as exc:
            raise ConfigError(f"unknown ladder rung {exc.args[0]!r}",
                              "sweep", "rungs") from None


@dataclass(frozen=True)
class ScenarioConfig:
    model: ModelSchema = field(default_factory=lambda: ladder_rung("1B").schema(batch=8))
    hardware: HardwareSpec = field(default_factory=HardwareSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0
    iterations: int = 3

    def __post_init__(self) -> None:
        if self.iterations < 2:
            raise ConfigError("iterations must be >= 2 (1 warm-up + measured)",
                              "run", "iterations")


class _SectionReader:
    """Typed access to one INI section with field-level error reporting."""

    def __init__(self, parser: configparser.ConfigParser, section: str):
        self._parser = parser
        self._section = section

    def _fetch(self, key: str, conv, default):
        if not self._parser.has_option(self._section, key):
            return default
        raw = self._parser.get(self._section, key)
        try:
            return conv(raw)
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(f"cannot parse value {raw!r}: {exc}",
                              self._section, key) from None

    def get_int(self, key, default=None):
        return self._fetch(key, lambda s: int(s.strip()), default)

    def get_float(self, key, default=None):
        return self._fetch(key, lambda s: float(s.strip()), default)

    def get_bytes(self, key, default=None):
        return self._fetch(key, parse_bytes, default)

    def get_count(self, key, default=None):
        return self._fetch(key, parse_count, default)

    def get_str(self, key, default=None):
        return self._fetch(key, lambda s: s.strip(), default)

    def get_bool(self, key, default=None):
        def conv(s: str) -> bool:
            norm = s.strip().lower()
            if norm in ("1", "true", "yes", "on"):
                return True
            if norm in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return self._fetch(key, conv, default)

    def get_list(self, key, item_conv, default=None):
        def conv(s: str):
            items = [part.strip() for part in s.split(",") if part.strip()]
            return tuple(item_conv(item) for item in items)
        return self._fetch(key, conv, default)


_KNOWN_KEYS = {
    "model": {"rung", "layers", "hidden_dim", "heads", "seq_len", "vocab",
              "batch", "context", "fragmentation"},
    "hardware": {"gpu_count", "gpu_bytes", "cpu_bytes", "pcie_gbps",
                 "intra_gpu_gbps"},
    "policy": {"capacity_elems", "eviction", "limit_fraction",
               "checkpointing", "strategies", "os_placement"},
    "sweep": {"batches", "gpu_counts", "rungs"},
    "run": {"seed", "iterations"},
}


def _check_unknown(parser: configparser.ConfigParser) -> None:
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown section (known: {', '.join(_KNOWN_KEYS)})",
                              section)
        for key in parser.options(section):
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key (known: "
                                  f"{', '.join(sorted(_KNOWN_KEYS[section]))})",
                                  section, key)


def _build_model(reader: _SectionReader, parser) -> ModelSchema:
    rung_label = reader.get_str("rung")
    batch = reader.get_int("batch", 8)
    kwargs = dict(
        seq_len=reader.get_int("seq_len", 1024),
        vocab=reader.get_int("vocab", 50304),
        context_bytes=reader.get_bytes("context", DEFAULT_CONTEXT_BYTES),
        fragmentation=reader.get_float("fragmentation", 1.0),
    )
    try:
        if rung_label is not None:
            if parser.has_option("model", "layers") or \
                    parser.has_option("model", "hidden_dim"):
                raise ConfigError("give either rung or layers/hidden_dim, not both",
                                  "model", "rung")
            return ladder_rung(rung_label).schema(batch=batch, **kwargs)
        layers = reader.get_int("layers")
        hidden = reader.get_int("hidden_dim")
        if layers is None or hidden is None:
            raise ConfigError("need rung, or both layers and hidden_dim", "model")
        return build_gpt_schema(layers=layers, hidden_dim=hidden,
                                heads=reader.get_int("heads", 16),
                                batch=batch, **kwargs)
    except KeyError:
        raise ConfigError(f"unknown ladder rung {rung_label!r}", "model", "rung") from None
    except SchemaError as exc:
        raise ConfigError(str(exc), "model") from None


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    """Parse INI text into a ScenarioConfig, reporting precise locations."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ConfigError(f"syntax error in {source}: {exc}", line=line) from None
    except configparser.Error as exc:
        raise ConfigError(f"syntax error in {source}: {exc}") from None
    _check_unknown(parser)

    model = _build_model(_SectionReader(parser, "model"), parser) \
        if parser.has_section("model") else ScenarioConfig().model

    hw = _SectionReader(parser, "hardware")
    hardware = HardwareSpec(
        gpu_count=hw.get_int("gpu_count", 8),
        gpu_bytes=hw.get_bytes("gpu_bytes", 32 * 10**9),
        cpu_bytes=hw.get_bytes("cpu_bytes", 240 * 10**9),
        pcie_gbps=hw.get_float("pcie_gbps", 12.0),
        intra_gpu_gbps=hw.get_float("intra_gpu_gbps", 100.0),
    )

    pol = _SectionReader(parser, "policy")
    eviction_name = pol.get_str("eviction", EvictionStrategy.LATEST_NEXT_USE.value)
    try:
        eviction = EvictionStrategy(eviction_name)
    except ValueError:
        raise ConfigError(
            f"unknown eviction strategy {eviction_name!r} "
            f"(known: {', '.join(s.value for s in EvictionStrategy)})",
            "policy", "eviction") from None
    policy = PolicySpec(
        capacity_elems=pol.get_count("capacity_elems", DEFAULT_CAPACITY_ELEMS),
        eviction=eviction,
        limit_fraction=pol.get_float("limit_fraction", 0.8),
        checkpointing=pol.get_bool("checkpointing", False),
        strategies=pol.get_list("strategies", str, (CHUNK, STATIC_OFFLOAD, DDP)),
        os_placement=pol.get_str("os_placement", "auto"),
    )

    sw = _SectionReader(parser, "sweep")
    sweep = SweepSpec(
        batches=sw.get_list("batches", int, (4, 8, 16, 32, 64)),
        gpu_counts=sw.get_list("gpu_counts", int, (1, 2, 4, 8)),
        rungs=sw.get_list("rungs", str, ()),
    )
    sweep.ladder()  # validate rung labels eagerly

    run = _SectionReader(parser, "run")
    return ScenarioConfig(model=model, hardware=hardware, policy=policy,
                          sweep=sweep, seed=run.get_int("seed", 0),
                          iterations=run.get_int("iterations", 3))


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text, source=path)
