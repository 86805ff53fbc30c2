"""Strict experiment-config files: flat `key = value` lines in module sections.

Unknown keys are rejected with the offending line number so that programmatic
sweeps cannot silently mutate a misspelled key. parse -> serialize -> parse
round-trips to an identical config.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .aggregation import Strategy
from .data import CorruptionSpec, Severity, kind_from_name
from .errors import ConfigError
from .model import NormOrder, OptConfig
from .simulator import DataConfig, ExperimentConfig, FederationConfig, PartitionScheme


def _p_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"expected an integer, got {raw!r}") from None


def _p_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"expected a number, got {raw!r}") from None


def _p_bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _p_str(raw: str) -> str:
    return raw


def _p_enum(enum_cls):
    def parse(raw: str):
        try:
            return enum_cls(raw.lower())
        except ValueError:
            options = ", ".join(e.value for e in enum_cls)
            raise ValueError(f"expected one of {options}, got {raw!r}") from None

    return parse


def _p_int_tuple(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(_p_int(p) for p in parts)


def _p_kinds(raw: str) -> tuple:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    return tuple(kind_from_name(p) for p in parts)


def _in_range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(v):
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise ValueError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            raise ValueError(f"must be {'<' if hi_open else '<='} {hi}, got {v}")

    return check


def _positive_dims(v):
    if any(h < 1 for h in v):
        raise ValueError(f"all dims must be >= 1, got {v}")


def _check_source(v):
    if v not in ("synth", "idx"):
        raise ValueError(f"expected synth or idx, got {v!r}")


@dataclass(frozen=True)
class _KeySpec:
    section: str
    name: str
    parse: Callable
    default: object
    check: Callable | None = None
    fmt: Callable[[object], str] | None = None

    @property
    def full(self) -> str:
        return f"{self.section}.{self.name}"

    def format(self, value) -> str:
        if self.fmt is not None:
            return self.fmt(value)
        if isinstance(value, bool):
            return "true" if value else "false"
        if hasattr(value, "value"):  # enums
            return value.value
        if isinstance(value, float):
            return repr(value)
        return str(value)


def _fmt_tuple(value) -> str:
    return ",".join(getattr(v, "value", str(v)) for v in value)


_DEFAULT_KINDS = "defocus_blur,gaussian_blur,contrast"

_SCHEMA: list[_KeySpec] = [
    _KeySpec("data", "source", _p_str, "synth", _check_source),
    _KeySpec("data", "synth_classes", _p_int, 4, _in_range(lo=2)),
    _KeySpec("data", "synth_train_per_class", _p_int, 500, _in_range(lo=1)),
    _KeySpec("data", "synth_test_per_class", _p_int, 100, _in_range(lo=1)),
    _KeySpec("data", "synth_side", _p_int, 8, _in_range(lo=4)),
    _KeySpec("data", "synth_sigma", _p_float, 0.1, _in_range(lo=0.0)),
    _KeySpec("data", "idx_train_images", _p_str, ""),
    _KeySpec("data", "idx_train_labels", _p_str, ""),
    _KeySpec("data", "idx_test_images", _p_str, ""),
    _KeySpec("data", "idx_test_labels", _p_str, ""),
    _KeySpec("data", "idx_train_limit", _p_int, 0, _in_range(lo=0)),
    _KeySpec("data", "idx_test_limit", _p_int, 0, _in_range(lo=0)),
    _KeySpec("data", "partition", _p_enum(PartitionScheme), PartitionScheme.IID),
    _KeySpec("data", "dirichlet_alpha", _p_float, 0.5, _in_range(lo=0.0, lo_open=True)),
    _KeySpec("corruption", "kinds", _p_kinds, _p_kinds(_DEFAULT_KINDS), fmt=_fmt_tuple),
    _KeySpec("corruption", "severity", _p_enum(Severity), Severity.HIGH),
    _KeySpec("corruption", "noise_level", _p_float, 1.0, _in_range(lo=0.0, hi=1.0)),
    _KeySpec("federation", "num_clients", _p_int, 20, _in_range(lo=1)),
    _KeySpec("federation", "noisy_clients", _p_int, 15, _in_range(lo=0)),
    _KeySpec("federation", "rounds", _p_int, 30, _in_range(lo=1)),
    _KeySpec("federation", "participation", _p_float, 1.0, _in_range(lo=0.0, hi=1.0, lo_open=True)),
    _KeySpec("federation", "first_round_participation", _p_float, 1.0, _in_range(lo=0.0, hi=1.0, lo_open=True)),
    _KeySpec("federation", "strategy", _p_enum(Strategy), Strategy.FEDAVG),
    _KeySpec("federation", "ns_enabled", _p_bool, True),
    _KeySpec("federation", "alpha", _p_float, 2.0, _in_range(lo=0.0, lo_open=True)),
    _KeySpec("federation", "beta", _p_float, 0.3, _in_range(lo=0.0)),
    _KeySpec("federation", "trim_ratio", _p_float, 0.2, _in_range(lo=0.0, hi=0.5, hi_open=True)),
    _KeySpec("model", "hidden_dims", _p_int_tuple, (128,), _positive_dims, fmt=_fmt_tuple),
    _KeySpec("optim", "lr", _p_float, 0.01, _in_range(lo=0.0, lo_open=True)),
    _KeySpec("optim", "momentum", _p_float, 0.9, _in_range(lo=0.0, hi=1.0, hi_open=True)),
    _KeySpec("optim", "weight_decay", _p_float, 1e-4, _in_range(lo=0.0)),
    _KeySpec("optim", "batch_size", _p_int, 32, _in_range(lo=1)),
    _KeySpec("optim", "local_epochs", _p_int, 5, _in_range(lo=0)),
    _KeySpec("optim", "prox_mu", _p_float, 0.01, _in_range(lo=0.0)),
    _KeySpec("optim", "temperature", _p_float, 1.0, _in_range(lo=0.0, lo_open=True)),
    _KeySpec("detection", "norm_order", _p_enum(NormOrder), NormOrder.L1),
    _KeySpec("detection", "norm_batch", _p_int, 32, _in_range(lo=1)),
    _KeySpec("run", "seed", _p_int, 0),
]

_SCHEMA_BY_KEY = {spec.full: spec for spec in _SCHEMA}
_SECTIONS = list(dict.fromkeys(spec.section for spec in _SCHEMA))


def read_kv_lines(text: str, known_sections: set[str]) -> dict[str, tuple[str, int]]:
    """Parse `key = value` lines under [section] headers into
    {"section.key": (raw_value, line_no)}; structural errors only."""
    out: dict[str, tuple[str, int]] = {}
    section = None
    for line_no, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in known_sections:
                raise ConfigError(f"line {line_no}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw_line.strip()!r}")
        if section is None:
            raise ConfigError(f"line {line_no}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        full = f"{section}.{key}"
        if full in out:
            raise ConfigError(f"line {line_no}: duplicate key '{full}'")
        out[full] = (value, line_no)
    return out


def _parse_values(raw: dict[str, tuple[str, int]]) -> dict[str, object]:
    values = {spec.full: spec.default for spec in _SCHEMA}
    for full, (text, line_no) in raw.items():
        spec = _SCHEMA_BY_KEY.get(full)
        if spec is None:
            raise ConfigError(f"line {line_no}: unknown key '{full}'")
        try:
            value = spec.parse(text)
            if spec.check is not None:
                spec.check(value)
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: key '{full}': {exc}") from None
        values[full] = value
    return values


def assemble(values: dict[str, object]) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a full values map."""

    def v(full: str):
        return values[full]

    try:
        cfg = ExperimentConfig(
            data=DataConfig(
                source=v("data.source"),
                synth_classes=v("data.synth_classes"),
                synth_train_per_class=v("data.synth_train_per_class"),
                synth_test_per_class=v("data.synth_test_per_class"),
                synth_side=v("data.synth_side"),
                synth_sigma=v("data.synth_sigma"),
                idx_train_images=v("data.idx_train_images"),
                idx_train_labels=v("data.idx_train_labels"),
                idx_test_images=v("data.idx_test_images"),
                idx_test_labels=v("data.idx_test_labels"),
                idx_train_limit=v("data.idx_train_limit"),
                idx_test_limit=v("data.idx_test_limit"),
                partition=v("data.partition"),
                dirichlet_alpha=v("data.dirichlet_alpha"),
            ),
            corruption=CorruptionSpec(
                kinds=v("corruption.kinds"),
                severity=v("corruption.severity"),
                noise_level=v("corruption.noise_level"),
                seed=0,
            ),
            federation=FederationConfig(
                num_clients=v("federation.num_clients"),
                noisy_clients=v("federation.noisy_clients"),
                rounds=v("federation.rounds"),
                participation=v("federation.participation"),
                first_round_participation=v("federation.first_round_participation"),
                strategy=v("federation.strategy"),
                ns_enabled=v("federation.ns_enabled"),
                alpha=v("federation.alpha"),
                beta=v("federation.beta"),
                trim_ratio=v("federation.trim_ratio"),
            ),
            hidden_dims=v("model.hidden_dims"),
            opt=OptConfig(
                lr=v("optim.lr"),
                momentum=v("optim.momentum"),
                weight_decay=v("optim.weight_decay"),
                batch_size=v("optim.batch_size"),
                local_epochs=v("optim.local_epochs"),
                prox_mu=v("optim.prox_mu"),
                temperature=v("optim.temperature"),
            ),
            norm_order=v("detection.norm_order"),
            norm_batch=v("detection.norm_batch"),
            seed=v("run.seed"),
        )
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def config_values(cfg: ExperimentConfig) -> dict[str, object]:
    """Inverse of assemble: the full values map of a config."""
    fed, data, opt = cfg.federation, cfg.data, cfg.opt
    return {
        "data.source": data.source,
        "data.synth_classes": data.synth_classes,
        "data.synth_train_per_class": data.synth_train_per_class,
        "data.synth_test_per_class": data.synth_test_per_class,
        "data.synth_side": data.synth_side,
        "data.synth_sigma": data.synth_sigma,
        "data.idx_train_images": data.idx_train_images,
        "data.idx_train_labels": data.idx_train_labels,
        "data.idx_test_images": data.idx_test_images,
        "data.idx_test_labels": data.idx_test_labels,
        "data.idx_train_limit": data.idx_train_limit,
        "data.idx_test_limit": data.idx_test_limit,
        "data.partition": data.partition,
        "data.dirichlet_alpha": data.dirichlet_alpha,
        "corruption.kinds": cfg.corruption.kinds,
        "corruption.severity": cfg.corruption.severity,
        "corruption.noise_level": cfg.corruption.noise_level,
        "federation.num_clients": fed.num_clients,
        "federation.noisy_clients": fed.noisy_clients,
        "federation.rounds": fed.rounds,
        "federation.participation": fed.participation,
        "federation.first_round_participation": fed.first_round_participation,
        "federation.strategy": fed.strategy,
        "federation.ns_enabled": fed.ns_enabled,
        "federation.alpha": fed.alpha,
        "federation.beta": fed.beta,
        "federation.trim_ratio": fed.trim_ratio,
        "model.hidden_dims": cfg.hidden_dims,
        "optim.lr": opt.lr,
        "optim.momentum": opt.momentum,
        "optim.weight_decay": opt.weight_decay,
        "optim.batch_size": opt.batch_size,
        "optim.local_epochs": opt.local_epochs,
        "optim.prox_mu": opt.prox_mu,
        "optim.temperature": opt.temperature,
        "detection.norm_order": cfg.norm_order,
        "detection.norm_batch": cfg.norm_batch,
        "run.seed": cfg.seed,
    }


def parse_config_text(text: str) -> ExperimentConfig:
    return assemble(_parse_values(read_kv_lines(text, set(_SECTIONS))))


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form with every key explicit."""
    values = config_values(cfg)
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for spec in _SCHEMA:
            if spec.section == section:
                lines.append(f"{spec.name} = {spec.format(values[spec.full])}")
        lines.append("")
    return "\n".join(lines)


@dataclass
class SweepSpec:
    """A base config, axis overrides (cartesian product) and seeded repeats."""

    base: ExperimentConfig
    axes: list[tuple[str, list[object]]]
    repeats: int


def parse_sweep(path: str | Path) -> SweepSpec:
    """Parse a sweep file: [sweep] base/repeats plus [axes] value lists.

    Axis lines reuse config keys; alternatives are separated by '|' so that
    comma-valued keys (kinds, hidden_dims) stay sweepable.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"sweep file not found: {path}")
    raw = read_kv_lines(path.read_text(encoding="utf-8"), {"sweep", "axes"})
    base_path = None
    repeats = 1
    axes: list[tuple[str, list[object]]] = []
    for full, (text, line_no) in raw.items():
        section, name = full.split(".", 1)
        if section == "sweep":
            if name == "base":
                base_path = (path.parent / text).resolve() if not Path(text).is_absolute() else Path(text)
            elif name == "repeats":
                try:
                    repeats = _p_int(text)
                except ValueError as exc:
                    raise ConfigError(f"line {line_no}: key 'sweep.repeats': {exc}") from None
                if repeats < 1:
                    raise ConfigError(f"line {line_no}: sweep.repeats must be >= 1")
            else:
                raise ConfigError(f"line {line_no}: unknown key 'sweep.{name}'")
        else:  # axes
            spec = _SCHEMA_BY_KEY.get(name)
            if spec is None:
                raise ConfigError(f"line {line_no}: axis 'axes.{name}' is not a config key")
            parts = [p.strip() for p in text.split("|") if p.strip()]
            if not parts:
                raise ConfigError(f"line {line_no}: axis '{name}' has no values")
            try:
                parsed = [spec.parse(p) for p in parts]
                if spec.check is not None:
                    for value in parsed:
                        spec.check(value)
            except ValueError as exc:
                raise ConfigError(f"line {line_no}: axis '{name}': {exc}") from None
            axes.append((name, parsed))
    if base_path is None:
        raise ConfigError("sweep file must set sweep.base")
    return SweepSpec(base=parse_config(base_path), axes=axes, repeats=repeats)


def _cell_dir_name(axis_items: tuple[tuple[str, object], ...], rep: int) -> str:
    parts = []
    for key, value in axis_items:
        spec = _SCHEMA_BY_KEY[key]
        parts.append(f"{key.replace('.', '_')}={spec.format(value).replace(',', '+')}")
    parts.append(f"rep{rep}")
    return "__".join(parts)


def expand_cells(spec: SweepSpec) -> list[tuple[str, tuple[tuple[str, object], ...], ExperimentConfig]]:
    """All (cell_dir_name, axis_settings, config) runs of a sweep, in
    deterministic cartesian-product order; repeats offset the base seed."""
    base_values = config_values(spec.base)
    cells = []
    axis_keys = [k for k, _ in spec.axes]
    axis_value_lists = [v for _, v in spec.axes]
    for combo in itertools.product(*axis_value_lists) if spec.axes else [()]:
        axis_items = tuple(zip(axis_keys, combo))
        for rep in range(spec.repeats):
            values = dict(base_values)
            for key, value in axis_items:
                values[key] = value
            values["run.seed"] = spec.base.seed + rep
            cells.append((_cell_dir_name(axis_items, rep), axis_items, assemble(values)))
    return cells
