"""Transaction trace records: parsing, DFS flattening and time-ordered splits."""
from __future__ import annotations

import enum
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import DepthError, EmptyDataset, SchemaError
from .hexnum import is_numeral, normalize_number

MAX_DEPTH = 64

_ADDRESS = re.compile(r"0x[0-9a-fA-F]+")
CALL_KINDS = ("CALL", "DELEGATECALL", "STATICCALL", "INVOKE")
OTHER_CALL = "[OTHER_CALL]"


class ValueKind(str, enum.Enum):
    ADDRESS = "address"
    NUMBER = "number"
    TEXT = "text"


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    UNKNOWN = "unknown"


class LexemeKind(str, enum.Enum):
    SPECIAL = "special"
    ADDRESS = "address"
    NUMBER = "number"
    TEXT = "text"


@dataclass(frozen=True)
class TraceValue:
    kind: ValueKind
    raw: str

    def __post_init__(self) -> None:
        if self.kind is ValueKind.ADDRESS and not _ADDRESS.fullmatch(self.raw):
            raise SchemaError(f"bad address {self.raw!r}")
        if self.kind is ValueKind.NUMBER and not is_numeral(self.raw):
            raise SchemaError(f"bad numeral {self.raw!r}")
        if self.kind is ValueKind.TEXT and not self.raw:
            raise SchemaError("empty text value")

    @classmethod
    def address(cls, raw: str) -> "TraceValue":
        return cls(ValueKind.ADDRESS, raw)

    @classmethod
    def number(cls, raw: str) -> "TraceValue":
        return cls(ValueKind.NUMBER, raw)


@dataclass(frozen=True)
class TraceNode:
    call_kind: str
    callee: TraceValue
    inputs: tuple[TraceValue, ...] = ()
    outputs: tuple[TraceValue, ...] = ()
    logs: tuple[str, ...] = ()
    children: tuple["TraceNode", ...] = ()

    def walk(self) -> Iterator["TraceNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    application: str
    order_key: int
    label: Label
    sender: TraceValue
    receiver: TraceValue
    value: TraceValue
    gas: TraceValue
    roots: tuple[TraceNode, ...] = ()

    def nodes(self) -> Iterator[TraceNode]:
        for root in self.roots:
            yield from root.walk()


@dataclass(frozen=True)
class Lexeme:
    kind: LexemeKind
    text: str

    @classmethod
    def special(cls, text: str) -> "Lexeme":
        return cls(LexemeKind.SPECIAL, text)


# ---------------------------------------------------------------------------
# parsing


def _require(doc: dict, key: str, typ: type | tuple[type, ...], where: str) -> Any:
    if key not in doc:
        raise SchemaError(f"{where}: missing required field {key!r}")
    value = doc[key]
    # bool is an int subclass; never accept it where an integer is expected
    if isinstance(value, bool) or not isinstance(value, typ):
        raise SchemaError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _optional_list(doc: dict, key: str, where: str) -> list:
    value = doc.get(key, [])
    if value is None:
        return []
    if not isinstance(value, list):
        raise SchemaError(f"{where}: field {key!r} must be a list")
    return value


def _parse_argument(arg: Any, where: str) -> TraceValue:
    if not isinstance(arg, dict):
        raise SchemaError(f"{where}: argument must be an object")
    kind = _require(arg, "kind", str, where)
    value = _require(arg, "value", (str, int), where)
    value = str(value)
    if kind == "address":
        if not _ADDRESS.fullmatch(value):
            raise SchemaError(f"{where}: bad address {value!r}")
        return TraceValue(ValueKind.ADDRESS, value.lower())
    if kind == "data":
        if is_numeral(value):
            return TraceValue(ValueKind.NUMBER, value)
        if not value:
            raise SchemaError(f"{where}: empty data value")
        return TraceValue(ValueKind.TEXT, value)
    raise SchemaError(f"{where}: unknown argument kind {kind!r}")


def _parse_call(doc: Any, depth: int, max_depth: int, where: str) -> TraceNode:
    if depth > max_depth:
        raise DepthError(f"call nesting exceeds {max_depth}")
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: call must be an object")
    kind = _require(doc, "type", str, where)
    address = _require(doc, "address", str, where)
    if not _ADDRESS.fullmatch(address):
        raise SchemaError(f"{where}: bad callee address {address!r}")
    logs = _optional_list(doc, "logs", where)
    if not all(isinstance(line, str) for line in logs):
        raise SchemaError(f"{where}: logs must be strings")
    children = tuple(
        _parse_call(c, depth + 1, max_depth, f"{where}.calls[{i}]")
        for i, c in enumerate(_optional_list(doc, "calls", where))
    )
    return TraceNode(
        call_kind=kind,
        callee=TraceValue(ValueKind.ADDRESS, address.lower()),
        inputs=tuple(_parse_argument(a, where) for a in _optional_list(doc, "input", where)),
        outputs=tuple(_parse_argument(a, where) for a in _optional_list(doc, "output", where)),
        logs=tuple(logs),
        children=children,
    )


def parse_transaction(record: dict | str, max_depth: int = MAX_DEPTH) -> Transaction:
    """Build a :class:`Transaction` from one trace-file record.

    ``record`` is either the decoded JSON object or its text. Unknown fields
    are ignored.
    """
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"record is not valid JSON: {exc}") from None
    if not isinstance(record, dict):
        raise SchemaError("record must be a JSON object")
    tx_id = _require(record, "tx_id", str, "tx")
    where = f"tx {tx_id}"
    order_key = _require(record, "order_key", int, where)
    if order_key < 0:
        raise SchemaError(f"{where}: order_key must be >= 0")
    label = _require(record, "label", str, where)
    try:
        label = Label(label)
    except ValueError:
        raise SchemaError(f"{where}: bad label {label!r}") from None
    sender = _require(record, "from", str, where)
    receiver = _require(record, "to", str, where)
    for addr in (sender, receiver):
        if not _ADDRESS.fullmatch(addr):
            raise SchemaError(f"{where}: bad address {addr!r}")
    value = str(_require(record, "value", (str, int), where))
    gas = str(_require(record, "gas", (str, int), where))
    for num in (value, gas):
        if not is_numeral(num):
            raise SchemaError(f"{where}: bad numeral {num!r}")
    calls = _optional_list(record, "calls", where)
    roots = tuple(_parse_call(c, 1, max_depth, f"{where}.calls[{i}]") for i, c in enumerate(calls))
    return Transaction(
        tx_id=tx_id,
        application=_require(record, "application", str, where),
        order_key=order_key,
        label=label,
        sender=TraceValue(ValueKind.ADDRESS, sender.lower()),
        receiver=TraceValue(ValueKind.ADDRESS, receiver.lower()),
        value=TraceValue(ValueKind.NUMBER, value),
        gas=TraceValue(ValueKind.NUMBER, gas),
        roots=roots,
    )


def _argument_record(value: TraceValue) -> dict:
    kind = "address" if value.kind is ValueKind.ADDRESS else "data"
    return {"kind": kind, "value": value.raw}


def _call_record(node: TraceNode) -> dict:
    return {
        "type": node.call_kind,
        "address": node.callee.raw,
        "input": [_argument_record(v) for v in node.inputs],
        "output": [_argument_record(v) for v in node.outputs],
        "logs": list(node.logs),
        "calls": [_call_record(c) for c in node.children],
    }


def to_record(tx: Transaction) -> dict:
    """Inverse of :func:`parse_transaction`."""
    return {
        "tx_id": tx.tx_id,
        "application": tx.application,
        "order_key": tx.order_key,
        "label": tx.label.value,
        "from": tx.sender.raw,
        "to": tx.receiver.raw,
        "value": tx.value.raw,
        "gas": tx.gas.raw,
        "calls": [_call_record(c) for c in tx.roots],
    }


def read_traces(path: str | Path, max_depth: int = MAX_DEPTH) -> list[Transaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse_transaction(line, max_depth))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return out


def write_traces(path: str | Path, txs: Iterable[Transaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tx in txs:
            fh.write(json.dumps(to_record(tx), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# flattening


def call_marker(call_kind: str) -> str:
    kind = call_kind.strip().upper()
    return f"[{kind}]" if kind in CALL_KINDS else OTHER_CALL


def _value_lexemes(value: TraceValue) -> list[Lexeme]:
    if value.kind is ValueKind.ADDRESS:
        return [Lexeme.special("address"), Lexeme(LexemeKind.ADDRESS, value.raw.lower())]
    if value.kind is ValueKind.NUMBER:
        return [Lexeme.special("data"), Lexeme(LexemeKind.NUMBER, normalize_number(value.raw))]
    return [Lexeme.special("data")] + _text_lexemes(value.raw)


def _text_lexemes(text: str) -> list[Lexeme]:
    # one lexeme per whitespace-separated word: the token stream carries no
    # line separator, so per-word lexemes are what decoding can reconstruct
    return [Lexeme(LexemeKind.TEXT, word) for word in text.split()]


def flatten(tx: Transaction) -> list[Lexeme]:
    """Serialize ``tx`` as a marker-delimited lexeme sequence.

    The header ``address <from> address <to> data <value> data <gas>`` comes
    first, then each root call tree in pre-order with ``[END]`` emitted after
    all descendants.
    """
    out: list[Lexeme] = []
    for field_value in (tx.sender, tx.receiver, tx.value, tx.gas):
        out.extend(_value_lexemes(field_value))

    # explicit stack keeps deep trees off the Python call stack
    stack: list[tuple[TraceNode, bool]] = [(r, False) for r in reversed(tx.roots)]
    while stack:
        node, closing = stack.pop()
        if closing:
            out.append(Lexeme.special("[END]"))
            continue
        out.append(Lexeme.special("[START]"))
        out.append(Lexeme.special(call_marker(node.call_kind)))
        out.append(Lexeme(LexemeKind.ADDRESS, node.callee.raw.lower()))
        out.append(Lexeme.special("[Ins]"))
        for v in node.inputs:
            out.extend(_value_lexemes(v))
        out.append(Lexeme.special("[OUTs]"))
        for v in node.outputs:
            out.extend(_value_lexemes(v))
        for line in node.logs:
            out.extend(_text_lexemes(line))
        stack.append((node, True))
        stack.extend((c, False) for c in reversed(node.children))
    return out


# ---------------------------------------------------------------------------
# splitting


def split_dataset(
    txs: list[Transaction], train_fraction: float = 0.8
) -> tuple[list[Transaction], list[Transaction]]:
    """Per-application chronological split; the earliest ``floor(f*n)`` train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if not txs:
        raise EmptyDataset("no transactions to split")
    by_app: dict[str, list[Transaction]] = defaultdict(list)
    for tx in txs:
        by_app[tx.application].append(tx)
    train: list[Transaction] = []
    test: list[Transaction] = []
    for app in sorted(by_app):
        group = sorted(by_app[app], key=lambda t: (t.order_key, t.tx_id))
        cut = math.floor(train_fraction * len(group))
        train.extend(group[:cut])
        test.extend(group[cut:])
    return train, test
