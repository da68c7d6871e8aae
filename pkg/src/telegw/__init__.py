"""Multi-protocol building telemetry gateway.

Polls Modbus/TCP meters and BACnet/IP controllers, ingests MQTT and HTTP
device feeds, deduplicates readings on change, batches them into a
time-series store via line protocol, and evaluates alert rules. The
``telegw.sim`` subpackage carries device simulators so the whole system
runs and tests without hardware.
"""

__version__ = "0.1.0"

from .model import ChangeFilter, DataPoint, Value, validate_datapoint

__all__ = ["ChangeFilter", "DataPoint", "Value", "validate_datapoint", "__version__"]
