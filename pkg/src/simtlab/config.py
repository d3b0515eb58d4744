"""Flat ``key=value`` text files mapped onto dataclasses."""
import dataclasses
import typing


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    return str(value)


def dump_kv(mapping):
    return "".join(f"{k}={format_value(v)}\n" for k, v in mapping.items())


def _coerce(raw, annotation, key):
    origin = typing.get_origin(annotation)
    try:
        if origin is typing.Union:
            args = [a for a in typing.get_args(annotation) if a is not type(None)]
            if raw == "" or raw.lower() == "none":
                return None
            return _coerce(raw, args[0], key)
        if origin in (tuple, list):
            (inner, *_) = typing.get_args(annotation) or (str,)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(s, inner, key) for s in items)
        if annotation is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def _kwargs(cls, mapping, strict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if strict and unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return {k: _coerce(v, hints[k], k) if isinstance(v, str) else v for k, v in mapping.items() if k in names}


def from_kv(cls, mapping, strict=True):
    return cls(**_kwargs(cls, mapping, strict))


def replace_kv(obj, mapping, strict=True):
    """Copy of dataclass instance ``obj`` with fields replaced from string values."""
    return dataclasses.replace(obj, **_kwargs(type(obj), mapping, strict))


def to_kv(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
