"""Line protocol serialization for the time-series sink.

One record per line::

    measurement[,tag_key=tag_value...] field_key=field_value[,...] timestamp_ns

Commas and spaces in the measurement, and commas, spaces and equals signs in
tag/field keys and tag values, are backslash-escaped. Text field values are
double-quoted with inner quotes and backslashes escaped. Reals render via
repr() with a redundant trailing ".0" stripped, so 618.0 becomes ``618``;
flags render as ``true``/``false``. Timestamps are integer nanoseconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

from .model import FLAG, REAL, TEXT, Value


class NoFields(ValueError):
    """A record must carry at least one field."""


class BadIdentifier(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class LineRecord:
    measurement: str
    tags: Mapping[str, str]
    fields: Mapping[str, Value]
    timestamp: int


def _escape_measurement(s: str) -> str:
    return s.replace("\\", "\\\\").replace(",", "\\,").replace(" ", "\\ ")


def _escape_key(s: str) -> str:
    return (
        s.replace("\\", "\\\\").replace(",", "\\,").replace("=", "\\=").replace(" ", "\\ ")
    )


def _render_real(x: float) -> str:
    r = repr(float(x))
    if r.endswith(".0"):
        return r[:-2]
    return r


def _render_field(v: Value) -> str:
    if v.kind == REAL:
        return _render_real(v.raw)
    if v.kind == FLAG:
        return "true" if v.raw else "false"
    if v.kind == TEXT:
        return '"' + v.raw.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise ValueError(f"unknown value kind {v.kind!r}")


def to_line(rec: LineRecord) -> str:
    """Serialize one record. Tags keep the record's own ordering."""
    if not rec.measurement:
        raise BadIdentifier("measurement must be non-empty")
    if not rec.fields:
        raise NoFields(f"record {rec.measurement!r} has no fields")
    parts = [_escape_measurement(rec.measurement)]
    for k, v in rec.tags.items():
        if not k:
            raise BadIdentifier("tag keys must be non-empty")
        parts.append(f",{_escape_key(k)}={_escape_key(v)}")
    parts.append(" ")
    first = True
    for k, v in rec.fields.items():
        if not k:
            raise BadIdentifier("field keys must be non-empty")
        if not first:
            parts.append(",")
        parts.append(f"{_escape_key(k)}={_render_field(v)}")
        first = False
    parts.append(f" {int(rec.timestamp)}")
    line = "".join(parts)
    if "\n" in line or "\r" in line:
        raise BadIdentifier("records cannot contain line breaks")
    return line


def to_lines(records) -> str:
    """Serialize a batch, one record per line, trailing newline included."""
    return "".join(to_line(r) + "\n" for r in records)
