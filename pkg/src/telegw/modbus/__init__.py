from .protocol import (
    CountOutOfRange,
    ExceptionResponse,
    LengthMismatch,
    MalformedFrame,
    ModbusError,
    RegisterCodec,
    SpanMismatch,
    TransactionMismatch,
    decode_read_response,
    decode_registers,
    decode_write_response,
    encode_read,
    encode_write_multiple,
)
from .client import (
    ConnectionPolicy,
    ConnectionReset,
    ConnectTimeout,
    HistoricalReadConfig,
    IoTimeout,
    ModbusClient,
    ReadReport,
    ReadyTimeout,
    RegisterBinding,
    WriteRejected,
    encode_date_y2k,
)

__all__ = [
    "ConnectionPolicy",
    "ConnectionReset",
    "ConnectTimeout",
    "CountOutOfRange",
    "ExceptionResponse",
    "HistoricalReadConfig",
    "IoTimeout",
    "LengthMismatch",
    "MalformedFrame",
    "ModbusClient",
    "ModbusError",
    "ReadReport",
    "ReadyTimeout",
    "RegisterBinding",
    "RegisterCodec",
    "SpanMismatch",
    "TransactionMismatch",
    "WriteRejected",
    "decode_read_response",
    "decode_registers",
    "decode_write_response",
    "encode_date_y2k",
    "encode_read",
    "encode_write_multiple",
]
