"""MQTT 3.1.1 transport: packet codec and a small blocking client."""

from telegw.mqtt.client import (
    AckTimeout,
    AuthRejected,
    ConnectionLost,
    MqttClient,
    NotConnected,
    SubscribeRefused,
)
from telegw.mqtt.protocol import MqttError, ProtocolViolation, topic_matches

__all__ = [
    "AckTimeout",
    "AuthRejected",
    "ConnectionLost",
    "MqttClient",
    "MqttError",
    "NotConnected",
    "ProtocolViolation",
    "SubscribeRefused",
    "topic_matches",
]
