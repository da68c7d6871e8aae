"""BACnet/IP client: ReadPropertyMultiple over UDP with quiet fallbacks.

One request is in flight per endpoint at a time (UDP gives no ordering, so
responses are matched by invoke id and strays are ignored). Reads that the
device aborts for size are split in half recursively; an object list too
large to return whole is walked by array index instead.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence, Union

from ..model import DataPoint, Value
from . import encoding
from .encoding import (
    Aborted,
    BacnetError,
    Enumerated,
    MalformedTag,
    ObjectRef,
    PropertyQuery,
    PropResult,
    Rejected,
    ServiceError,
    TooLarge,
    object_type_id,
    property_id,
    property_name,
    unit_token,
)

ANALOG_TYPES = {0, 1, 2}
BINARY_TYPES = {3, 4, 5}


class Timeout(BacnetError):
    pass


class EmptyQuery(BacnetError, ValueError):
    pass


class UnknownName(BacnetError):
    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"no such object name(s): {', '.join(self.names)}")


class DiscoveryFailed(BacnetError):
    pass


@dataclass(frozen=True)
class BacnetEndpoint:
    host: str
    port: int = 0xBAC0
    device_instance: int = 0
    timeout_ms: int = 1000
    retries: int = 3
    max_apdu: int = encoding.MAX_APDU


@dataclass(frozen=True)
class DiscoveredObject:
    ref: ObjectRef
    name: str
    units: Optional[str] = None


class BacnetClient:
    def __init__(self, endpoint: BacnetEndpoint):
        self.endpoint = endpoint
        self.clock_ns = time.time_ns
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(("0.0.0.0", 0))
        self._invoke = 0
        self._lock = threading.Lock()
        self._name_cache: dict[str, DiscoveredObject] = {}

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "BacnetClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport ----------------------------------------------------------

    def _next_invoke(self) -> int:
        self._invoke = (self._invoke + 1) & 0xFF
        return self._invoke

    def _transact(self, apdu: bytes, invoke_id: int) -> bytes:
        """Send and await the reply for invoke_id, retrying lost datagrams."""
        dest = (self.endpoint.host, self.endpoint.port)
        datagram = encoding.wrap(apdu, expecting_reply=True)
        timeout_s = self.endpoint.timeout_ms / 1000
        for _ in range(self.endpoint.retries + 1):
            self._sock.sendto(datagram, dest)
            deadline = time.monotonic() + timeout_s
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._sock.settimeout(remaining)
                try:
                    data, _addr = self._sock.recvfrom(65535)
                except socket.timeout:
                    break
                try:
                    reply = encoding.unwrap(data)
                except MalformedTag:
                    continue
                if encoding.apdu_invoke_id(reply) != invoke_id:
                    continue  # stray or stale reply; keep waiting for ours
                return reply
        raise Timeout(
            f"no reply from {self.endpoint.host}:{self.endpoint.port} "
            f"after {self.endpoint.retries + 1} attempts"
        )

    # -- reads ----------------------------------------------------------------

    def read_properties(self, queries: Sequence[PropertyQuery]) -> list[PropResult]:
        """Read many properties in one exchange, splitting when size-bound.

        Results come back in query order. Devices that cannot fit the answer
        in one APDU abort; the query list is then halved recursively, so the
        result of a chunked read is identical to an unchunked one.
        """
        queries = list(queries)
        if not queries:
            raise EmptyQuery("query list is empty")
        with self._lock:
            return self._read_locked(queries)

    def _read_locked(self, queries: list[PropertyQuery]) -> list[PropResult]:
        try:
            invoke = self._next_invoke()
            apdu = encoding.encode_rpm_request(invoke, queries, self.endpoint.max_apdu)
            reply = self._transact(apdu, invoke)
            return encoding.decode_rpm_ack(reply, invoke)
        except (TooLarge, Aborted) as e:
            if isinstance(e, Aborted) and not e.response_too_big:
                raise
            if len(queries) == 1:
                raise
            mid = len(queries) // 2
            return self._read_locked(queries[:mid]) + self._read_locked(queries[mid:])

    def read_properties_json(self, queries: Sequence[PropertyQuery]) -> str:
        """One JSON document per exchange, stable key order, ready to log."""
        results = self.read_properties(queries)
        doc = {
            "device": {
                "host": self.endpoint.host,
                "port": self.endpoint.port,
                "instance": self.endpoint.device_instance,
            },
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            "results": [self._result_json(r) for r in results],
        }
        return json.dumps(doc, separators=(", ", ": "))

    @staticmethod
    def _json_value(v):
        if isinstance(v, Enumerated):
            return int(v)
        if isinstance(v, ObjectRef):
            return {"type": v.type_name, "instance": v.instance}
        if isinstance(v, bytes):
            return v.hex()
        return v

    @classmethod
    def _result_json(cls, r: PropResult) -> dict:
        out: dict = {
            "object_type": r.obj.type_name,
            "instance": r.obj.instance,
            "property": property_name(r.prop),
        }
        if r.array_index is not None:
            out["array_index"] = r.array_index
        if r.error is not None:
            out["error"] = {"class": r.error[0], "code": r.error[1]}
        else:
            vals = [cls._json_value(v) for v in (r.values or ())]
            out["value"] = vals[0] if len(vals) == 1 else vals
        return out

    # -- discovery -------------------------------------------------------------

    def discover_objects(self) -> list[DiscoveredObject]:
        """Walk the device's object list and name every object.

        Returns entries sorted by (type, instance), excluding the device
        object itself. Units are read for analog objects only; objects
        without a units property report None.
        """
        dev = ObjectRef(object_type_id("device"), self.endpoint.device_instance)
        refs = self._read_object_list(dev)
        objs = [r for r in refs if r != dev]
        if not all(isinstance(r, ObjectRef) for r in objs):
            raise DiscoveryFailed("object list contains non-object entries")
        discovered: list[DiscoveredObject] = []
        for chunk in _chunks(sorted(objs), 12):
            queries = []
            slots = []
            for ref in chunk:
                queries.append(PropertyQuery(ref, property_id("object-name")))
                slots.append((ref, "name"))
                if ref.type_id in ANALOG_TYPES:
                    queries.append(PropertyQuery(ref, property_id("units")))
                    slots.append((ref, "units"))
            results = self.read_properties(queries)
            by_ref: dict[ObjectRef, dict] = {}
            for (ref, what), res in zip(slots, results):
                if res.error is not None:
                    continue
                v = res.values[0] if res.values else None
                if what == "name" and isinstance(v, str):
                    by_ref.setdefault(ref, {})["name"] = v
                elif what == "units" and isinstance(v, int):
                    by_ref.setdefault(ref, {})["units"] = unit_token(int(v))
            for ref in chunk:
                info = by_ref.get(ref)
                if info is None or "name" not in info:
                    raise DiscoveryFailed(f"object {ref} has no readable name")
                discovered.append(DiscoveredObject(ref, info["name"], info.get("units")))
        self._name_cache = {d.name: d for d in discovered}
        return discovered

    def _read_object_list(self, dev: ObjectRef) -> list[ObjectRef]:
        olist = property_id("object-list")
        try:
            res = self.read_properties([PropertyQuery(dev, olist)])
            return [v for v in res[0].values or () if isinstance(v, ObjectRef)]
        except (Aborted, TooLarge) as e:
            if isinstance(e, Aborted) and not e.response_too_big:
                raise
        # too big in one shot: count, then walk by array index
        res = self.read_properties([PropertyQuery(dev, olist, array_index=0)])
        if res[0].error is not None or not res[0].values:
            raise DiscoveryFailed(f"cannot size object list: {res[0].error}")
        count = int(res[0].values[0])
        refs: list[ObjectRef] = []
        for chunk in _chunks(list(range(1, count + 1)), 24):
            queries = [PropertyQuery(dev, olist, array_index=i) for i in chunk]
            for r in self.read_properties(queries):
                if r.error is not None:
                    raise DiscoveryFailed(f"object-list[{r.array_index}]: {r.error}")
                refs.append(r.values[0])
        return refs

    # -- named reads ------------------------------------------------------------

    def read_by_name(self, names: Sequence[str]) -> list[PropResult]:
        """Resolve object names via discovery and read their present values."""
        if not names:
            raise EmptyQuery("no names given")
        if not self._name_cache:
            self.discover_objects()
        missing = [n for n in names if n not in self._name_cache]
        if missing:
            raise UnknownName(missing)
        queries = [
            PropertyQuery(self._name_cache[n].ref, property_id("present-value"))
            for n in names
        ]
        return self.read_properties(queries)

    def read_points(
        self,
        names: Sequence[str],
        entity_id: str,
        tags: Optional[dict[str, str]] = None,
    ) -> list[DataPoint]:
        """Poll named objects into data points (analog -> real, binary -> flag)."""
        results = self.read_by_name(names)
        stamp = self.clock_ns()
        points = []
        for name, res in zip(names, results):
            if res.error is not None or not res.values:
                continue
            disc = self._name_cache[name]
            raw = res.values[0]
            if res.obj.type_id in BINARY_TYPES:
                value = Value.flag(bool(int(raw))) if isinstance(raw, (int, bool)) else None
            elif isinstance(raw, bool):
                value = Value.flag(raw)
            elif isinstance(raw, (int, float)):
                value = Value.real(float(raw))
            elif isinstance(raw, str):
                value = Value.text(raw)
            else:
                value = None
            if value is None:
                continue
            points.append(
                DataPoint(
                    entity_id=entity_id,
                    parameter=name,
                    value=value,
                    unit=disc.units or "",
                    timestamp=stamp,
                    tags=dict(tags or {}),
                )
            )
        return points


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i : i + n]
