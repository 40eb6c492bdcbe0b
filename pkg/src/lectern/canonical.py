"""Canonical text serialization shared by every pipeline artifact.

Artifacts are written as JSON documents with sorted keys, two-space
indentation, fixed float formatting (always six fractional digits) and a
trailing newline.  Equal values therefore always produce byte-identical
streams, which is what the replay-determinism and fixture-hashing
machinery relies on: byte equality of two documents implies structural
equality of the values they encode.

`CanonicalModel` is the reflective base for the frozen dataclasses in
:mod:`lectern.model`.  `to_dict`/`from_dict` walk the dataclass type
hints, so the domain types only declare fields and invariants.
"""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from enum import Enum

__all__ = [
    "CanonicalModel",
    "ParseError",
    "SchemaError",
    "canonical_dumps",
    "canonical_bytes",
    "canonical_loads",
    "quantize",
    "register",
    "serialize",
    "deserialize",
]

_INDENT = "  "


class ParseError(ValueError):
    """A canonical document could not be parsed.  Carries the location."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + loc)
        self.line = line
        self.column = column


class SchemaError(ValueError):
    """A parsed document does not match the shape of the target type."""


def _format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"canonical serialization requires finite numbers, got {value!r}")
    if value == 0.0:  # normalize -0.0
        value = 0.0
    return format(value, ".6f")


def quantize(value: float) -> float:
    """Round a float onto the six-fractional-digit grid used on the wire."""
    return float(_format_float(value))


def format_float(value: float) -> str:
    """The canonical textual form of a number (fixed six fractional digits)."""
    return _format_float(value)


def to_value(value):
    """Encode models/enums/containers into plain JSON-able values."""
    return _encode_value(value)


def from_value(hint, value):
    """Decode a plain value into `hint` (a model or typed container)."""
    return _decode_value(hint, value, hint.__name__ if hasattr(hint, "__name__") else str(hint))


def _write(value, indent: str, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        out.append(str(value))
    elif isinstance(value, float):
        out.append(_format_float(value))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, (list, tuple)):
        if not value:
            out.append("[]")
            return
        inner = indent + _INDENT
        out.append("[\n")
        for i, item in enumerate(value):
            out.append(inner)
            _write(item, inner, out)
            out.append(",\n" if i < len(value) - 1 else "\n")
        out.append(indent + "]")
    elif isinstance(value, dict):
        if not value:
            out.append("{}")
            return
        keys = sorted(value)
        inner = indent + _INDENT
        out.append("{\n")
        for i, key in enumerate(keys):
            if not isinstance(key, str):
                raise ValueError(f"canonical mapping keys must be strings, got {key!r}")
            out.append(inner + json.dumps(key, ensure_ascii=False) + ": ")
            _write(value[key], inner, out)
            out.append(",\n" if i < len(keys) - 1 else "\n")
        out.append(indent + "}")
    else:
        raise ValueError(f"value {value!r} is not canonically serializable")


def canonical_dumps(value) -> str:
    """Render a plain value (dict/list/scalar tree) in canonical form."""
    out: list[str] = []
    _write(value, "", out)
    out.append("\n")
    return "".join(out)


def canonical_bytes(value) -> bytes:
    return canonical_dumps(value).encode("utf-8")


def canonical_loads(data: bytes | str):
    """Parse a canonical document; malformed input raises ParseError with a location."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not valid UTF-8: {exc}") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from exc


# ---------------------------------------------------------------------------
# Reflective model base
# ---------------------------------------------------------------------------

def _encode_value(value):
    if isinstance(value, CanonicalModel):
        return value.to_dict()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_encode_value(v) for v in value]
    if isinstance(value, dict):
        return {k: _encode_value(v) for k, v in value.items()}
    return value


def _decode_value(hint, value, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None:
            if type(None) in args:
                return None
            raise SchemaError(f"{where}: null not allowed")
        last: Exception | None = None
        for arm in args:
            if arm is type(None):
                continue
            try:
                return _decode_value(arm, value, where)
            except SchemaError as exc:
                last = exc
        raise SchemaError(f"{where}: no union arm matched ({last})")
    if origin in (tuple, list):
        args = typing.get_args(hint)
        if not isinstance(value, list):
            raise SchemaError(f"{where}: expected a list, got {type(value).__name__}")
        item_hint = args[0] if args else typing.Any
        return tuple(_decode_value(item_hint, v, f"{where}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise SchemaError(f"{where}: expected an object, got {type(value).__name__}")
        _, val_hint = typing.get_args(hint) or (str, typing.Any)
        return {k: _decode_value(val_hint, v, f"{where}.{k}") for k, v in value.items()}
    if isinstance(hint, type):
        if issubclass(hint, CanonicalModel):
            return hint.from_dict(value)
        if issubclass(hint, Enum):
            try:
                return hint(value)
            except ValueError as exc:
                raise SchemaError(f"{where}: {exc}") from exc
        if hint is bool:
            if not isinstance(value, bool):
                raise SchemaError(f"{where}: expected a boolean")
            return value
        if hint is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise SchemaError(f"{where}: expected an integer")
            return value
        if hint is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(f"{where}: expected a number")
            return float(value)
        if hint is str:
            if not isinstance(value, str):
                raise SchemaError(f"{where}: expected a string")
            return value
    if hint is typing.Any:
        return value
    raise SchemaError(f"{where}: unsupported field type {hint!r}")


class CanonicalModel:
    """Mixin for frozen dataclasses giving reflective to_dict/from_dict."""

    def to_dict(self) -> dict:
        return {f.name: _encode_value(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise SchemaError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
        hints = typing.get_type_hints(cls)
        field_map = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(field_map))
        if unknown:
            raise SchemaError(f"{cls.__name__}: unknown fields {unknown}")
        kwargs = {}
        for name, field in field_map.items():
            if name in data:
                kwargs[name] = _decode_value(hints[name], data[name], f"{cls.__name__}.{name}")
            elif (field.default is dataclasses.MISSING
                    and field.default_factory is dataclasses.MISSING):
                raise SchemaError(f"{cls.__name__}: missing field {name!r}")
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{cls.__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# Kind registry: self-describing top-level documents
# ---------------------------------------------------------------------------

_KINDS: dict[str, type[CanonicalModel]] = {}


def register(cls):
    """Class decorator adding a model to the `$kind` registry."""
    name = cls.__name__
    if name in _KINDS:
        raise ValueError(f"kind {name!r} registered twice")
    _KINDS[name] = cls
    return cls


def serialize(value: CanonicalModel) -> bytes:
    """Serialize a registered model to a canonical, self-describing byte stream."""
    name = type(value).__name__
    if _KINDS.get(name) is not type(value):
        raise ValueError(f"{name} is not a registered canonical kind")
    doc = {"$kind": name}
    doc.update(value.to_dict())
    return canonical_bytes(doc)


def deserialize(data: bytes | str) -> CanonicalModel:
    """Inverse of :func:`serialize`; dispatches on the embedded `$kind` tag."""
    doc = canonical_loads(data)
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object")
    kind = doc.pop("$kind", None)
    if kind is None:
        raise ParseError("document lacks a $kind tag")
    cls = _KINDS.get(kind)
    if cls is None:
        raise ParseError(f"unknown document kind {kind!r}")
    return cls.from_dict(doc)
