"""Run configuration: an INI file with [model], [corpus], [train] and [transform] sections.

Precedence is defaults < file < command-line overrides.  Unknown sections and
keys are rejected so a typo never silently falls back to a default.
"""
import configparser
import io
from dataclasses import dataclass, field, fields, replace

from emocat.corpus import CorpusSpec
from emocat.inverter import GradTransformSpec
from emocat.model import EmoCatConfig
from emocat.train import TrainPlan


class ConfigError(ValueError):
    pass


_MODEL_FIELDS = [f for f in fields(EmoCatConfig) if f.name != "transform"]
SECTIONS = {
    "model": (EmoCatConfig, _MODEL_FIELDS),
    "corpus": (CorpusSpec, list(fields(CorpusSpec))),
    "train": (TrainPlan, list(fields(TrainPlan))),
    "transform": (GradTransformSpec, list(fields(GradTransformSpec))),
}


@dataclass
class RunConfig:
    model: EmoCatConfig = field(default_factory=EmoCatConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainPlan = field(default_factory=TrainPlan)

    @property
    def transform(self):
        return self.model.transform

    def section(self, name):
        return self.transform if name == "transform" else getattr(self, name)

    def to_ini(self):
        parser = configparser.ConfigParser()
        for name, (_, flds) in SECTIONS.items():
            obj = self.section(name)
            parser[name] = {f.name: _format(getattr(obj, f.name)) for f in flds}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(section, key, text, default):
    kind = type(default)
    try:
        if kind is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(v) for v in text.split(","))
        return text.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {kind.__name__}") from None


def _apply(run, values):
    """values: {section: {key: str}}"""
    built = {}
    for name, (cls, flds) in SECTIONS.items():
        current = run.section(name)
        given = values.get(name, {})
        known = {f.name for f in flds}
        unknown = set(given) - known
        if unknown:
            raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
        changes = {k: _parse(name, k, v, getattr(current, k)) for k, v in given.items()}
        try:
            built[name] = replace(current, **changes)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"[{name}] {err}") from None
    try:
        model = replace(built["model"], transform=built["transform"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return RunConfig(model=model, corpus=built["corpus"], train=built["train"])


def parse_ini(text, base=None):
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"unreadable config: {err}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    values = {s: dict(parser[s]) for s in parser.sections()}
    return _apply(base or RunConfig(), values)


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` ({section: {key: value}})."""
    run = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        run = parse_ini(text, run)
    if overrides:
        run = _apply(run, {s: {k: str(v) for k, v in kv.items()} for s, kv in overrides.items()})
    return run
