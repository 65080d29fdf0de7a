from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union
import configparser

from core.errors import ConfigError

SECTIONS = ("run", "model", "moe", "data")

# RunConfig keys that live under [data] in config files
DATA_KEYS = ("corpus_paths", "val_fraction", "min_val_tokens", "eval_max_windows")

Sections = Dict[str, Dict[str, str]]


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    return parser


def read_sections(path: Union[str, Path], extra_sections: Iterable[str] = ()) -> Sections:
    """Read an INI run configuration into {section: {key: raw value}}."""
    allowed = SECTIONS + tuple(extra_sections)
    parser = _parser()
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    unknown = [s for s in parser.sections() if s not in allowed]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown} in {path}, expected {list(allowed)}")
    return {section: dict(parser[section]) for section in parser.sections()}


def apply_overrides(sections: Sections, overrides: Optional[Iterable[str]]) -> Sections:
    """Apply `section.key=value` overrides; returns a new mapping."""
    merged = {name: dict(values) for name, values in sections.items()}
    for item in overrides or ():
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override '{item}' names unknown section '{section}'")
        merged.setdefault(section, {})[key.strip()] = value.strip()
    return merged


def sections_to_dict(sections: Sections) -> Dict[str, Any]:
    """Nest flat sections into the RunConfig.from_dict layout."""
    data = dict(sections.get("run", {}))
    for key, value in sections.get("data", {}).items():
        if key not in DATA_KEYS:
            raise ConfigError(f"unknown [data] key '{key}', expected one of {list(DATA_KEYS)}")
        data[key] = value
    model = dict(sections.get("model", {}))
    if "moe" in sections:
        model["moe"] = dict(sections["moe"])
    if model:
        data["model"] = model
    return data


def _text(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_text(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dict_to_sections(data: Dict[str, Any]) -> Sections:
    """Flatten a RunConfig.to_dict() mapping into config-file sections."""
    sections: Sections = {name: {} for name in SECTIONS}
    for key, value in data.items():
        if key == "model":
            for model_key, model_value in value.items():
                if model_key == "moe":
                    sections["moe"] = {k: _text(v) for k, v in model_value.items()}
                else:
                    sections["model"][model_key] = _text(model_value)
        elif key in DATA_KEYS:
            sections["data"][key] = _text(value)
        else:
            sections["run"][key] = _text(value)
    return sections


def write_sections(sections: Sections, path: Union[str, Path]) -> None:
    parser = _parser()
    for name in SECTIONS:
        if name in sections:
            parser[name] = sections[name]
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


def load_config_dict(path: Union[str, Path], overrides: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    """Read a config file, apply overrides and return the nested mapping."""
    return sections_to_dict(apply_overrides(read_sections(path), overrides))
