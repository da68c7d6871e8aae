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
    unit_token,
)
from .client import (
    BacnetClient,
    BacnetEndpoint,
    DiscoveredObject,
    DiscoveryFailed,
    EmptyQuery,
    Timeout,
    UnknownName,
)

__all__ = [
    "Aborted",
    "BacnetClient",
    "BacnetEndpoint",
    "BacnetError",
    "DiscoveredObject",
    "DiscoveryFailed",
    "EmptyQuery",
    "Enumerated",
    "MalformedTag",
    "ObjectRef",
    "PropertyQuery",
    "PropResult",
    "Rejected",
    "ServiceError",
    "Timeout",
    "TooLarge",
    "UnknownName",
    "object_type_id",
    "property_id",
    "unit_token",
]
