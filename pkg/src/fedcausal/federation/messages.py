"""Wire messages of the coordinator/worker protocol.

Every message kind declares the exact set of fields it may carry. None of
them has a field able to hold record-level data: gradients, parameter
segments, per-source summaries and digests only.
"""

import json
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    pass


# kind -> allowed field names
REGISTRY = {
    "HELLO": {"source_id", "version"},
    "WELCOME": {"source_id", "version"},
    "REFUSE": {"reason"},
    "STATS_REQUEST": {"problem"},
    "STATS": {"source_id", "stats"},
    "SETUP": {"problem", "shared"},
    "READY": {"source_id"},
    "PARAMS": {"round", "seed", "segments"},
    "GRAD": {"round", "source_id", "segments", "objective"},
    "QUERY": {"problem", "query", "seed", "segments", "options"},
    "RESULT": {"source_id", "query", "values"},
    "DEDUP_REQUEST": {"salt"},
    "DEDUP_DIGESTS": {"source_id", "digests"},
    "DEDUP_DROPS": {"drops"},
    "ACK": {"source_id"},
    "ERROR": {"source_id", "reason", "numerical"},
    "STOP": set(),
}

# field names that would indicate record-level payloads; no kind may use them
RECORD_FIELDS = {"w", "y", "x", "u", "r", "pk", "record", "records", "rows", "keys"}


@dataclass
class Message:
    kind: str
    fields: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REGISTRY:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        extra = set(self.fields) - REGISTRY[self.kind]
        if extra:
            raise ProtocolError(f"{self.kind} does not carry fields {sorted(extra)}")

    def __getitem__(self, key):
        return self.fields[key]

    def get(self, key, default=None):
        return self.fields.get(key, default)


def encode(msg):
    body = {"kind": msg.kind, **msg.fields}
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def decode(buf):
    try:
        body = json.loads(buf.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(body, dict) or "kind" not in body:
        raise ProtocolError("frame without a kind")
    kind = body.pop("kind")
    return Message(kind, body)


def expect(msg, kind):
    if msg.kind == "ERROR":
        raise ProtocolError(f"source {msg.get('source_id')}: {msg.get('reason')}")
    if msg.kind != kind:
        raise ProtocolError(f"expected {kind}, got {msg.kind}")
    return msg
