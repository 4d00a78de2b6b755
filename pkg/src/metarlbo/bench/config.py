"""Sectioned key=value experiment configs.

Each INI section fills one dataclass; every key is typed by the dataclass
field it sets. Unknown sections/keys and bad values raise
:class:`ConfigError` naming the ``section.key`` path. ``schema_text()``
renders the full schema with defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..bayesopt import ACQUISITION_KINDS, METHODS, AcquisitionSpec, CampaignConfig, config_to_dict
from ..metarl import GenPhaseConfig, MetaConfig, TaskSamplerConfig
from ..oracles import ORACLE_KINDS, OracleSpec
from ..policy import RLConfig
from ..surrogate import ARCHS, TrainConfig
from .baselines import BASELINE_KINDS, BaselineSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSettings:
    name: str = "experiment"
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class AnalysisSettings:
    archs: tuple[str, ...] = ("conv1d", "mlp")
    members: int = 8
    p: float = 0.8


@dataclass(frozen=True)
class ExperimentConfig:
    campaign: CampaignConfig
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)

    def hash(self) -> str:
        """Digest of the campaign settings, ignoring the seed."""
        d = config_to_dict(self.campaign)
        d.pop("master_seed")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# section -> (dataclass, keys that belong to a nested dataclass elsewhere)
SECTIONS: dict[str, type] = {
    "experiment": ExperimentSettings,
    "oracle": OracleSpec,
    "campaign": CampaignConfig,
    "acquisition": AcquisitionSpec,
    "meta": MetaConfig,
    "rl": RLConfig,
    "gen": GenPhaseConfig,
    "tasks": TaskSamplerConfig,
    "proxy_train": TrainConfig,
    "baseline": BaselineSpec,
    "analysis": AnalysisSettings,
}
# fields filled from other sections, not settable as keys
NESTED = {"campaign": {"oracle", "acquisition", "meta", "gen", "tasks", "baseline"},
          "meta": {"rl"}, "tasks": {"proxy_train", "horizon"}}
CHOICES = {
    "oracle.kind": ORACLE_KINDS,
    "campaign.method": METHODS,
    "campaign.surrogate": ("proxies", "fresh"),
    "acquisition.kind": ACQUISITION_KINDS,
    "tasks.proxy_arch": ARCHS,
    "tasks.distance": ("hamming", "edit"),
    "tasks.weighting": ("linear", "uniform"),
    "rl.baseline": ("none", "mean"),
    "proxy_train.dtype": ("float32", "float64"),
    "baseline.kind": BASELINE_KINDS,
}
REQUIRED = {"oracle": ("kind", "alphabet", "length")}


def _fields(section: str) -> dict[str, tuple[dataclasses.Field, object]]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    skip = NESTED.get(section, set())
    return {f.name: (f, hints[f.name]) for f in dataclasses.fields(cls)
            if not f.name.startswith("_") and f.name not in skip}


def _parse_scalar(text: str, tp) -> object:
    if tp is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp in (int, float):
        return tp(text.strip())
    if tp is str:
        return text.strip()
    raise ValueError(f"unsupported field type {tp}")


def parse_value(text: str, tp) -> object:
    """Coerce a config string to the annotated field type."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        if len(args) == 1:
            return parse_value(text, args[0])
        raise ValueError(f"unsupported field type {tp}")
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(_parse_scalar(p, inner) for p in parts)
    return _parse_scalar(text, tp)


def _section_values(cp: configparser.ConfigParser, section: str) -> dict[str, object]:
    if not cp.has_section(section):
        return {}
    known = _fields(section)
    out = {}
    for key, raw in cp.items(section, raw=True):
        path = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"{path}: unknown key (valid: {', '.join(sorted(known))})")
        try:
            value = parse_value(raw, known[key][1])
        except ValueError as err:
            raise ConfigError(f"{path}: {err}") from None
        if path in CHOICES and value not in CHOICES[path]:
            raise ConfigError(f"{path}: {value!r} is not one of {', '.join(CHOICES[path])}")
        out[key] = value
    for key in REQUIRED.get(section, ()):
        if key not in out:
            raise ConfigError(f"{section}.{key}: required")
    return out


def _build(section: str, values: dict, **nested):
    try:
        return SECTIONS[section](**values, **nested)
    except (TypeError, ValueError) as err:
        # point at the first field the message mentions
        words = str(err).replace(",", " ").split()
        name = next((w for w in words if w in _fields(section)), None)
        path = f"{section}.{name}" if name else section
        raise ConfigError(f"{path}: {err}") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{', '.join(sorted(unknown))}: unknown section "
                          f"(valid: {', '.join(SECTIONS)})")
    if not cp.has_section("oracle"):
        raise ConfigError("oracle: required section missing")
    v = {s: _section_values(cp, s) for s in SECTIONS}

    rl = _build("rl", v["rl"])
    meta = _build("meta", v["meta"], rl=rl)
    tasks = _build("tasks", v["tasks"], proxy_train=_build("proxy_train", v["proxy_train"]))
    method = v["campaign"].get("method", "metarlbo")
    baseline = None
    if v["baseline"] or method in BASELINE_KINDS:
        values = dict(v["baseline"])
        values.setdefault("kind", method if method in BASELINE_KINDS else "random_mutation")
        baseline = _build("baseline", values)
    campaign = _build("campaign", v["campaign"], oracle=_build("oracle", v["oracle"]),
                      acquisition=_build("acquisition", v["acquisition"]), meta=meta,
                      gen=_build("gen", v["gen"]), tasks=tasks, baseline=baseline)
    experiment = _build("experiment", v["experiment"])
    if not experiment.seeds:
        raise ConfigError("experiment.seeds: at least one seed required")
    return ExperimentConfig(campaign, experiment, _build("analysis", v["analysis"]))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    return parse_config(text, str(path))


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(map(str, value))
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to `cfg`."""
    objects = {"experiment": cfg.experiment, "oracle": cfg.campaign.oracle,
               "campaign": cfg.campaign, "acquisition": cfg.campaign.acquisition,
               "meta": cfg.campaign.meta, "rl": cfg.campaign.meta.rl, "gen": cfg.campaign.gen,
               "tasks": cfg.campaign.tasks, "proxy_train": cfg.campaign.tasks.proxy_train,
               "baseline": cfg.campaign.baseline, "analysis": cfg.analysis}
    lines = []
    for section, obj in objects.items():
        if obj is None:
            continue
        lines.append(f"[{section}]")
        for name in _fields(section):
            lines.append(f"{name} = {_render(getattr(obj, name))}")
        lines.append("")
    return "\n".join(lines)


def _type_name(tp) -> str:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return f"{_type_name(args[0])} or none"
    if origin is tuple:
        return f"list of {typing.get_args(tp)[0].__name__}"
    return tp.__name__


def schema_text() -> str:
    """Human-readable schema: every section, key, type, default and allowed values."""
    out = ["# Experiment config schema", "",
           "Sectioned `key = value` file. Lists are comma or space separated;",
           "`none` clears an optional value. Only `[oracle]` is required.", ""]
    for section in SECTIONS:
        out += [f"## [{section}]", "", "| key | type | default | allowed |", "|---|---|---|---|"]
        for name, (f, tp) in _fields(section).items():
            if f.default is not dataclasses.MISSING:
                default = _render(f.default)
            elif f.default_factory is not dataclasses.MISSING:
                default = _render(f.default_factory())
            else:
                default = "(required)"
            allowed = ", ".join(CHOICES.get(f"{section}.{name}", ()))
            out.append(f"| `{name}` | {_type_name(tp)} | {default} | {allowed} |")
        out.append("")
    return "\n".join(out)
