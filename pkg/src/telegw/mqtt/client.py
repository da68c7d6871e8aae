"""Blocking MQTT 3.1.1 client with a background reader thread.

Publishes at QoS 0/1 and subscribes with a message callback. QoS 1
publishes wait for the PUBACK; there is no in-flight retransmission, so
a timed-out publish surfaces to the caller, who may republish (duplicate
deliveries are expected to be absorbed downstream).
"""

from __future__ import annotations

import socket
import threading
from typing import Callable

from telegw.mqtt import protocol as mp


class AuthRejected(mp.MqttError):
    """Broker refused the CONNECT; terminal for these credentials."""

    def __init__(self, return_code: int):
        super().__init__(f"connection refused, return code {return_code}")
        self.return_code = return_code


class ConnectionLost(mp.MqttError):
    """Transport dropped while an operation was outstanding."""


class NotConnected(mp.MqttError):
    pass


class AckTimeout(mp.MqttError):
    """No PUBACK/SUBACK arrived within the io timeout."""


class SubscribeRefused(mp.MqttError):
    def __init__(self, codes: list[int]):
        super().__init__(f"broker refused subscription: {codes}")
        self.codes = codes


class MqttClient:
    def __init__(
        self,
        host: str,
        port: int = 1883,
        client_id: str = "telegw",
        username: str | None = None,
        password: str | None = None,
        keepalive: float = 60.0,
        connect_timeout: float = 5.0,
        io_timeout: float = 5.0,
        on_message: Callable[[str, bytes], None] | None = None,
        on_disconnect: Callable[[], None] | None = None,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.username = username
        self.password = password
        self.keepalive = keepalive
        self.connect_timeout = connect_timeout
        self.io_timeout = io_timeout
        self.on_message = on_message
        self.on_disconnect = on_disconnect
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._reader: threading.Thread | None = None
        self._pinger: threading.Thread | None = None
        self._stop = threading.Event()
        self._acks: dict[tuple[int, int], threading.Event] = {}
        self._ack_payload: dict[tuple[int, int], object] = {}
        self._ack_lock = threading.Lock()
        self._next_pid = 0
        self.callback_errors = 0

    # -- connection lifecycle ------------------------------------------

    def connect(self) -> None:
        sock = socket.create_connection((self.host, self.port), self.connect_timeout)
        sock.settimeout(self.connect_timeout)
        try:
            sock.sendall(
                mp.encode_connect(
                    self.client_id,
                    self.username,
                    self.password,
                    int(self.keepalive),
                )
            )
            ptype, _, body = mp.read_packet(sock)
            if ptype != mp.CONNACK:
                raise mp.ProtocolViolation(f"expected CONNACK, got type {ptype}")
            _, code = mp.decode_connack(body)
            if code != mp.CONNACK_ACCEPTED:
                raise AuthRejected(code)
        except BaseException:
            sock.close()
            raise
        sock.settimeout(None)
        self._sock = sock
        self._stop.clear()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        if self.keepalive > 0:
            self._pinger = threading.Thread(target=self._ping_loop, daemon=True)
            self._pinger.start()

    @property
    def connected(self) -> bool:
        return self._sock is not None and not self._stop.is_set()

    def close(self) -> None:
        sock = self._sock
        if sock is not None and not self._stop.is_set():
            try:
                with self._send_lock:
                    sock.sendall(mp.encode_disconnect())
            except OSError:
                pass
        self._teardown(notify=False)
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=5)
        self._reader = None

    def __enter__(self) -> "MqttClient":
        self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _teardown(self, notify: bool) -> None:
        already_down = self._stop.is_set()
        self._stop.set()
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        with self._ack_lock:
            # wake all waiters; they will see the missing payload as a loss
            for ev in self._acks.values():
                ev.set()
            self._acks.clear()
        if notify and not already_down and self.on_disconnect is not None:
            self.on_disconnect()

    # -- outbound -------------------------------------------------------

    def _send(self, data: bytes) -> None:
        sock = self._sock
        if sock is None or self._stop.is_set():
            raise NotConnected("client is not connected")
        try:
            with self._send_lock:
                sock.sendall(data)
        except OSError as e:
            self._teardown(notify=True)
            raise ConnectionLost(str(e)) from e

    def _alloc_pid(self) -> int:
        with self._ack_lock:
            self._next_pid = self._next_pid % 0xFFFF + 1
            return self._next_pid

    def _wait_ack(self, key: tuple[int, int]):
        ev = self._acks[key]
        if not ev.wait(self.io_timeout):
            with self._ack_lock:
                self._acks.pop(key, None)
            raise AckTimeout(f"no ack for packet {key[1]}")
        with self._ack_lock:
            payload = self._ack_payload.pop(key, None)
            self._acks.pop(key, None)
        if payload is None:
            raise ConnectionLost("connection dropped while awaiting ack")
        return payload

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> None:
        if qos == 0:
            self._send(mp.encode_publish(mp.PublishPacket(topic, payload, 0)))
            return
        pid = self._alloc_pid()
        key = (mp.PUBACK, pid)
        with self._ack_lock:
            self._acks[key] = threading.Event()
        self._send(mp.encode_publish(mp.PublishPacket(topic, payload, 1, pid)))
        self._wait_ack(key)

    def subscribe(self, filters: list[str], qos: int = 1) -> list[int]:
        pid = self._alloc_pid()
        key = (mp.SUBACK, pid)
        with self._ack_lock:
            self._acks[key] = threading.Event()
        self._send(mp.encode_subscribe(pid, [(f, qos) for f in filters]))
        codes = self._wait_ack(key)
        if any(c == mp.SUBACK_FAILURE for c in codes):
            raise SubscribeRefused(codes)
        return codes

    # -- background threads ----------------------------------------------

    def _read_loop(self) -> None:
        try:
            while not self._stop.is_set():
                sock = self._sock
                if sock is None:
                    return
                ptype, flags, body = mp.read_packet(sock)
                if ptype == mp.PUBLISH:
                    pkt = mp.decode_publish(flags, body)
                    if pkt.qos == 1:
                        self._send(mp.encode_puback(pkt.packet_id))
                    if self.on_message is not None:
                        try:
                            self.on_message(pkt.topic, pkt.payload)
                        except Exception:
                            self.callback_errors += 1
                elif ptype in (mp.PUBACK, mp.SUBACK):
                    if ptype == mp.PUBACK:
                        pid, payload = mp.decode_packet_id(body), True
                    else:
                        pid, payload = mp.decode_suback(body)
                    with self._ack_lock:
                        key = (ptype, pid)
                        if key in self._acks:
                            self._ack_payload[key] = payload
                            self._acks[key].set()
                elif ptype == mp.PINGRESP:
                    pass
                else:
                    raise mp.ProtocolViolation(f"unexpected packet type {ptype}")
        except (ConnectionError, OSError, mp.MqttError):
            pass
        finally:
            self._teardown(notify=True)

    def _ping_loop(self) -> None:
        interval = max(1.0, self.keepalive / 2)
        while not self._stop.wait(interval):
            try:
                self._send(mp.encode_pingreq())
            except mp.MqttError:
                return
