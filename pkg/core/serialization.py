from dataclasses import fields, is_dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Type, TypeVar, Union, get_args, get_origin, get_type_hints
import hashlib
import json

from .errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def to_plain(value: Any) -> Any:
    """Convert dataclasses/enums/tuples into JSON-ready builtins."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_plain(getattr(value, f.name)) for f in fields(value) if not f.name.startswith("_")}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    return value


def coerce(hint: Any, raw: Any, key: str = "") -> Any:
    """
    Coerce a raw value (often a config-file string) to a field's type hint.

    Supports int, float, bool, str, Enum subclasses, nested dataclasses,
    Optional[...] and List[...] (comma-separated in text form).
    """
    origin = get_origin(hint)
    if origin is Union:
        options = [a for a in get_args(hint) if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none", "null")):
            return None
        return coerce(options[0], raw, key)
    if origin in (list, List):
        (item,) = get_args(hint) or (str,)
        if isinstance(raw, str):
            raw = [part.strip() for part in raw.split(",") if part.strip()]
        return [coerce(item, v, key) for v in raw]
    try:
        if isinstance(hint, type) and issubclass(hint, Enum):
            return raw if isinstance(raw, hint) else hint(raw.strip() if isinstance(raw, str) else raw)
        if is_dataclass(hint):
            return raw if isinstance(raw, hint) else from_plain(hint, raw)
        if hint is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return str(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for '{key}': {e}") from e
    return raw


def from_plain(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a dataclass from a plain mapping; unknown keys are rejected."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {name: coerce(hints[name], value, name) for name, value in data.items()}
    return cls(**kwargs)


def stable_hash(value: Any, length: int = 12) -> str:
    """Short sha256 of the canonical JSON form of value."""
    text = json.dumps(to_plain(value), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]
