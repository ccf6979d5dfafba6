from __future__ import annotations

import json

import pytest

A1 = "0x" + "a1" * 20
A2 = "0x" + "b2" * 20
A3 = "0x" + "c3" * 20


def call(address=A1, kind="CALL", inputs=(), outputs=(), logs=(), calls=()):
    return {
        "type": kind,
        "address": address,
        "input": [dict(i) for i in inputs],
        "output": [dict(o) for o in outputs],
        "logs": list(logs),
        "calls": list(calls),
    }


def record(tx_id="0xtx", calls=(), application="app", order_key=0, label="benign", **extra):
    doc = {
        "tx_id": tx_id,
        "application": application,
        "order_key": order_key,
        "label": label,
        "from": A2,
        "to": A3,
        "value": "1000",
        "gas": "21000",
        "calls": list(calls),
    }
    doc.update(extra)
    return doc


@pytest.fixture
def record_factory():
    return record


@pytest.fixture
def call_factory():
    return call


def dumps(doc) -> str:
    return json.dumps(doc)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
