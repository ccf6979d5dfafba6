"""Seeded generator of benign call traces and structural/numeric anomaly injectors.

Each application owns a pool of contract addresses and a handful of call
templates (small call trees). A benign transaction instantiates one template,
chosen with app-specific Zipf frequencies, filling each amount slot with one of
a few typical values drawn log-uniformly for that slot, and log lines from
phrase templates. Senders come from a large, mildly skewed user population, so
most of them are rare.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import NotApplicable
from .trace import MAX_DEPTH, Label, TraceNode, TraceValue, Transaction, ValueKind


class AnomalyKind(str, enum.Enum):
    SHUFFLED_CALLS = "shuffled_calls"
    FOREIGN_ADDRESS_BURST = "foreign_address_burst"
    VALUE_OUTLIER = "value_outlier"
    TRUNCATED_STRUCTURE = "truncated_structure"


INVOKE_LINE = "{prog} invoke [{depth}]"
DEFAULT_LOG_VOCAB = (
    "{prog} consumed {units} units",
    "ix: {verb}",
    "transfer to {prog}",
    "fee {fee}",
)
_VERBS = ("swap", "deposit", "withdraw", "transfer", "approve", "mint", "burn", "claim", "stake", "route")
_NAMES = (
    "phoenix", "raydium", "orca", "serum", "jupiter", "marinade", "solend", "mango", "drift",
    "kamino", "meteora", "lifinity", "saber", "tulip", "port", "larix", "aldrin", "crema",
    "invariant", "openbook", "uniswap", "sushi", "curve", "balancer", "aave", "compound",
    "maker", "yearn", "lido", "convex", "frax", "gmx", "dydx", "synapse", "stargate", "hop",
    "across", "pendle", "euler", "morpho", "spark", "radiant", "venus", "pancake", "trader",
    "biswap", "bancor", "kyber", "dodo", "clipper", "hashflow", "odos", "paraswap", "zerox",
    "cowswap", "oneinch", "matcha", "velodrome", "aerodrome", "camelot",
)
# spread of an amount (or gas) slot around its template scale, and how many
# typical values each slot settles on
AMOUNT_SPREAD = 4.0
GAS_SPREAD = 1.5
TYPICAL_VALUES = 3
USER_ZIPF = 0.8
_CALL_KINDS = ("CALL", "CALL", "CALL", "STATICCALL", "DELEGATECALL", "INVOKE")


@dataclass(frozen=True)
class SynthConfig:
    n_apps: int = 5
    addresses_per_app: int = 8
    shared_contracts: int = 4
    user_pool: int = 2000
    call_templates_per_app: int = 4
    depth_max: int = 3
    max_children: int = 2
    value_range: tuple[float, float] = (1e3, 1e12)
    gas_range: tuple[float, float] = (2e4, 2e6)
    log_vocab: tuple[str, ...] = DEFAULT_LOG_VOCAB
    optional_call_prob: float = 0.10
    template_zipf: float = 0.5
    anomaly_kinds: tuple[AnomalyKind, ...] = tuple(AnomalyKind)
    seed: int = 0

    def __post_init__(self) -> None:
        counts = (self.n_apps, self.addresses_per_app, self.shared_contracts, self.user_pool,
                  self.call_templates_per_app, self.depth_max, self.max_children)
        if min(counts) < 1:
            raise ValueError("all SynthConfig counts must be >= 1")
        if self.depth_max > MAX_DEPTH:
            raise ValueError(f"depth_max must be <= {MAX_DEPTH}")
        if not self.log_vocab:
            raise ValueError("log_vocab must not be empty")
        if self.addresses_per_app + self.shared_contracts > len(_NAMES):
            raise ValueError(f"at most {len(_NAMES)} named contracts per application")


# ---------------------------------------------------------------------------
# world construction


@dataclass
class _ArgSpec:
    kind: str  # "const" | "amount" | "contract" | "user"
    const: int = 0
    ref: int = 0
    choices: tuple[int, ...] = ()  # typical values of an amount slot


@dataclass
class _NodeSpec:
    call_kind: str
    callee: int  # index into the app's contract list
    inputs: list[_ArgSpec]
    outputs: list[_ArgSpec]
    logs: list[str]
    optional: bool
    units: int = 1000
    gas: tuple[int, ...] = (21000,)
    value: tuple[int, ...] = (0,)
    children: list["_NodeSpec"] = field(default_factory=list)


@dataclass
class _App:
    name: str
    contracts: list[str]
    prog_names: list[str]
    templates: list[_NodeSpec]
    template_probs: np.ndarray


def _address(rng: np.random.Generator) -> str:
    return "0x" + rng.bytes(20).hex()


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def _round_amount(rng: np.random.Generator, lo: float, hi: float) -> int:
    """Log-uniform draw rounded to one significant hex digit."""
    raw = int(_log_uniform(rng, lo, hi))
    shift = max(0, raw.bit_length() - 4)
    return max(1, (raw >> shift) << shift)


def _typical(rng: np.random.Generator, lo: float, hi: float, spread: float) -> tuple[int, ...]:
    """A slot's typical values: a scale drawn from ``[lo, hi]``, then a few
    rounded draws from ``[scale, spread * scale]``."""
    scale = _log_uniform(rng, lo, hi)
    return tuple(_round_amount(rng, scale, spread * scale) for _ in range(TYPICAL_VALUES))


def _pick(rng: np.random.Generator, choices: tuple[int, ...]) -> int:
    return choices[int(rng.integers(0, len(choices)))]


class World:
    """Fixed address pools and call templates derived from a :class:`SynthConfig`."""

    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0xA11])
        self.shared = [_address(rng) for _ in range(cfg.shared_contracts)]
        self.users = [_address(rng) for _ in range(cfg.user_pool)]
        ranks = np.arange(1, cfg.user_pool + 1, dtype=float)
        self.user_probs = ranks**-USER_ZIPF / (ranks**-USER_ZIPF).sum()
        self.apps: list[_App] = []
        for a in range(cfg.n_apps):
            contracts = [_address(rng) for _ in range(cfg.addresses_per_app)] + self.shared
            progs = [_NAMES[int(i)] for i in rng.choice(len(_NAMES), size=len(contracts), replace=False)]
            templates = [self._template(rng, len(contracts), 1) for _ in range(cfg.call_templates_per_app)]
            for t in templates:
                t.optional = False
            ranks = np.arange(1, cfg.call_templates_per_app + 1, dtype=float)
            probs = rng.permutation(ranks**-cfg.template_zipf)
            self.apps.append(_App(f"app{a}", contracts, progs, templates, probs / probs.sum()))
        self.benign_addresses = set(self.shared) | set(self.users)
        for app in self.apps:
            self.benign_addresses.update(app.contracts)

    def _args(self, rng: np.random.Generator, n_contracts: int, lo: int, hi: int) -> list[_ArgSpec]:
        out = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            r = rng.random()
            if r < 0.35:
                out.append(_ArgSpec("amount", choices=_typical(rng, *self.cfg.value_range, AMOUNT_SPREAD)))
            elif r < 0.6:
                out.append(_ArgSpec("const", const=int(rng.integers(0, 16))))
            elif r < 0.85:
                out.append(_ArgSpec("contract", ref=int(rng.integers(0, n_contracts))))
            else:
                out.append(_ArgSpec("user"))
        return out

    def _template(self, rng: np.random.Generator, n_contracts: int, depth: int) -> _NodeSpec:
        cfg = self.cfg
        n_logs = int(rng.integers(0, 2))
        logs = [cfg.log_vocab[int(i)] for i in rng.integers(0, len(cfg.log_vocab), size=n_logs)]
        logs = [INVOKE_LINE] + logs
        node = _NodeSpec(
            call_kind=_CALL_KINDS[int(rng.integers(0, len(_CALL_KINDS)))],
            callee=int(rng.integers(0, n_contracts)),
            inputs=self._args(rng, n_contracts, 1, 2),
            outputs=self._args(rng, n_contracts, 0, 1),
            logs=logs,
            optional=bool(rng.random() < cfg.optional_call_prob),
            units=5000 * int(rng.integers(1, 5)),
            gas=_typical(rng, *cfg.gas_range, GAS_SPREAD),
            value=_typical(rng, *cfg.value_range, AMOUNT_SPREAD) if rng.random() < 0.5 else (0,),
        )
        if depth < cfg.depth_max:
            n_children = int(rng.integers(0 if depth > 1 else 1, cfg.max_children + 1))
            node.children = [self._template(rng, n_contracts, depth + 1) for _ in range(n_children)]
        return node

    # -- instantiation -----------------------------------------------------

    def _user(self, rng: np.random.Generator) -> str:
        return self.users[int(rng.choice(len(self.users), p=self.user_probs))]

    def _arg(self, rng, app: _App, spec: _ArgSpec) -> TraceValue:
        if spec.kind == "amount":
            return TraceValue(ValueKind.NUMBER, str(_pick(rng, spec.choices)))
        if spec.kind == "const":
            return TraceValue(ValueKind.NUMBER, str(spec.const))
        if spec.kind == "contract":
            return TraceValue(ValueKind.ADDRESS, app.contracts[spec.ref])
        return TraceValue(ValueKind.ADDRESS, self._user(rng))

    def _log(self, rng, app: _App, spec: _NodeSpec, line: str, depth: int) -> str:
        return line.format(
            prog=app.prog_names[spec.callee],
            depth=depth,
            units=spec.units * int(rng.integers(1, 3)),
            verb=_VERBS[spec.callee % len(_VERBS)],
            fee=int(rng.choice([5, 30, 100])),
        )

    def _instantiate(self, rng, app: _App, spec: _NodeSpec, depth: int) -> TraceNode:
        children = tuple(
            self._instantiate(rng, app, c, depth + 1)
            for c in spec.children
            if not (c.optional and rng.random() < 0.5)
        )
        return TraceNode(
            call_kind=spec.call_kind,
            callee=TraceValue(ValueKind.ADDRESS, app.contracts[spec.callee]),
            inputs=tuple(self._arg(rng, app, a) for a in spec.inputs),
            outputs=tuple(self._arg(rng, app, a) for a in spec.outputs),
            logs=tuple(self._log(rng, app, spec, line, depth) for line in spec.logs),
            children=children,
        )

    def transaction(self, rng: np.random.Generator, index: int, order_key: int) -> Transaction:
        app = self.apps[int(rng.integers(0, len(self.apps)))]
        t = int(rng.choice(len(app.templates), p=app.template_probs))
        spec = app.templates[t]
        root = self._instantiate(rng, app, spec, 1)
        gas = _pick(rng, spec.gas)
        value = _pick(rng, spec.value)
        return Transaction(
            tx_id=tx_hash(self.cfg.seed, "benign", index),
            application=app.name,
            order_key=order_key,
            label=Label.BENIGN,
            sender=TraceValue(ValueKind.ADDRESS, self._user(rng)),
            receiver=TraceValue(ValueKind.ADDRESS, app.contracts[app.templates[t].callee]),
            value=TraceValue(ValueKind.NUMBER, str(value)),
            gas=TraceValue(ValueKind.NUMBER, str(gas)),
            roots=(root,),
        )


def tx_hash(seed: int, kind: str, index: int) -> str:
    return "0x" + hashlib.sha256(f"{seed}:{kind}:{index}".encode()).hexdigest()


def gen_benign(cfg: SynthConfig, n: int, world: World | None = None) -> list[Transaction]:
    """``n`` benign transactions with strictly increasing ``order_key``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    world = world or World(cfg)
    rng = np.random.default_rng([cfg.seed, 0xBE9])
    ts = 1_600_000_000
    out = []
    for i in range(n):
        ts += int(rng.integers(1, 120))
        out.append(world.transaction(rng, i, ts))
    return out


# ---------------------------------------------------------------------------
# anomaly injection


def _map_nodes(node: TraceNode, fn) -> TraceNode:
    return fn(replace(node, children=tuple(_map_nodes(c, fn) for c in node.children)))


def _shuffle_calls(tx: Transaction, rng) -> Transaction:
    nodes = list(tx.nodes())
    if len(nodes) < 2:
        raise NotApplicable("shuffled_calls needs at least two calls")
    kinds = ["CALL", "DELEGATECALL", "STATICCALL", "INVOKE"]

    def shuffle(node: TraceNode) -> TraceNode:
        children = list(node.children)
        if len(children) > 1:
            children = [children[i] for i in rng.permutation(len(children))]
        others = [k for k in kinds if k != node.call_kind.upper()]
        return replace(node, call_kind=others[int(rng.integers(0, len(others)))], children=tuple(children))

    roots = [_map_nodes(r, shuffle) for r in tx.roots]
    if len(roots) > 1:
        roots = [roots[i] for i in rng.permutation(len(roots))]
    return replace(tx, roots=tuple(roots))


def _foreign_burst(tx: Transaction, rng, k: int | None) -> Transaction:
    nodes = list(tx.nodes())
    if not nodes:
        raise NotApplicable("foreign_address_burst needs at least one call")
    k = len(nodes) if k is None else max(1, min(k, len(nodes)))
    hit = set(int(i) for i in rng.choice(len(nodes), size=k, replace=False))
    fresh = {i: _address(rng) for i in hit}
    ids = {id(n): i for i, n in enumerate(nodes)}

    def rebuild(node: TraceNode) -> TraceNode:
        i = ids[id(node)]
        children = tuple(rebuild(c) for c in node.children)
        callee = TraceValue(ValueKind.ADDRESS, fresh[i]) if i in fresh else node.callee
        return replace(node, callee=callee, children=children)

    return replace(tx, roots=tuple(rebuild(r) for r in tx.roots))


def _value_outlier(tx: Transaction, rng) -> Transaction:
    factor = 10 ** int(rng.integers(6, 10))
    slots = [("value", None, None)] if int(tx.value.raw, 0) > 0 else []
    for ni, node in enumerate(tx.nodes()):
        for ai, arg in enumerate(node.inputs):
            if arg.kind is ValueKind.NUMBER and int(arg.raw, 0) > 0:
                slots.append(("input", ni, ai))
    if not slots:
        raise NotApplicable("value_outlier needs a positive numeric field")
    field_, ni, ai = slots[int(rng.integers(0, len(slots)))]
    if field_ == "value":
        v = int(tx.value.raw, 0)
        return replace(tx, value=TraceValue(ValueKind.NUMBER, str(v * factor)))
    ids = {id(n): i for i, n in enumerate(tx.nodes())}

    def rebuild(node: TraceNode) -> TraceNode:
        children = tuple(rebuild(c) for c in node.children)
        if ids[id(node)] != ni:
            return replace(node, children=children)
        inputs = list(node.inputs)
        v = int(inputs[ai].raw, 0)
        inputs[ai] = TraceValue(ValueKind.NUMBER, str(v * factor))
        return replace(node, inputs=tuple(inputs), children=children)

    return replace(tx, roots=tuple(rebuild(r) for r in tx.roots))


def _truncate(tx: Transaction, rng) -> Transaction:
    parents = [n for n in tx.nodes() if n.children]
    if not parents:
        raise NotApplicable("truncated_structure needs a call with children")
    ids = {id(n): i for i, n in enumerate(tx.nodes())}
    target = ids[id(parents[int(rng.integers(0, len(parents)))])]

    def rebuild(node: TraceNode) -> TraceNode:
        if ids[id(node)] == target:
            keep = int(rng.integers(0, len(node.children)))
            # drop every child subtree after ``keep`` and the grandchildren of the survivors
            kept = tuple(replace(c, children=()) for c in node.children[:keep])
            return replace(node, children=kept)
        return replace(node, children=tuple(rebuild(c) for c in node.children))

    return replace(tx, roots=tuple(rebuild(r) for r in tx.roots))


def inject_anomaly(tx: Transaction, kind: AnomalyKind | str, seed, k: int | None = None) -> Transaction:
    """Perturb a benign ``tx`` into a malicious one with a fresh ``tx_id``."""
    kind = AnomalyKind(kind)
    if tx.label is not Label.BENIGN:
        raise NotApplicable("only benign transactions can be perturbed")
    rng = np.random.default_rng(seed)
    if kind is AnomalyKind.SHUFFLED_CALLS:
        out = _shuffle_calls(tx, rng)
    elif kind is AnomalyKind.FOREIGN_ADDRESS_BURST:
        out = _foreign_burst(tx, rng, k)
    elif kind is AnomalyKind.VALUE_OUTLIER:
        out = _value_outlier(tx, rng)
    else:
        out = _truncate(tx, rng)
    new_id = "0x" + hashlib.sha256(f"{tx.tx_id}:{kind.value}".encode()).hexdigest()
    return replace(out, tx_id=new_id, label=Label.MALICIOUS)


def gen_anomalies(
    cfg: SynthConfig,
    base: Sequence[Transaction],
    n: int,
    kinds: Sequence[AnomalyKind] | None = None,
    order_key_start: int | None = None,
) -> list[Transaction]:
    """Inject ``n`` anomalies into copies of ``base``, cycling through ``kinds``.

    Injected transactions are stamped after every base transaction so they
    always fall on the evaluation side of a chronological split.
    """
    kinds = list(kinds or cfg.anomaly_kinds)
    rng = np.random.default_rng([cfg.seed, 0xBAD])
    ts = order_key_start if order_key_start is not None else max(t.order_key for t in base) + 1
    out: list[Transaction] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * max(n, 1):
            raise NotApplicable("could not find base transactions for the requested kinds")
        kind = kinds[len(out) % len(kinds)]
        src = base[int(rng.integers(0, len(base)))]
        try:
            bad = inject_anomaly(src, kind, [cfg.seed, attempts])
        except NotApplicable:
            continue
        if any(b.tx_id == bad.tx_id for b in out):
            continue
        out.append(replace(bad, order_key=ts + len(out)))
    return out
