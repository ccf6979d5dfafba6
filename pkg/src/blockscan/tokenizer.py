"""Three-zone vocabulary: special markers, retained addresses, WordPiece subwords."""
from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CapacityError, UnknownId
from .hexnum import normalize_number  # noqa: F401  (re-exported)
from .trace import Lexeme, LexemeKind

SPECIALS: tuple[str, ...] = (
    "[PAD]", "[MASK]", "[OOV]", "[CLS]", "[START]", "[END]",
    "[CALL]", "[DELEGATECALL]", "[STATICCALL]", "[INVOKE]", "[OTHER_CALL]",
    "[Ins]", "[OUTs]", "data", "address",
)
SPECIALS_VERSION = 1
DEFAULT_SIZE_CAP = 30_000
DEFAULT_TOP_N = 7_000
CONT = "##"


class AddressFrequencyTable(Counter):
    """Occurrence counts of Address lexemes."""

    def merge(self, other: "AddressFrequencyTable") -> "AddressFrequencyTable":
        out = AddressFrequencyTable(self)
        out.update(other)
        return out


def count_addresses(corpus: Iterable[Sequence[Lexeme]]) -> AddressFrequencyTable:
    table = AddressFrequencyTable()
    for lexemes in corpus:
        table.update(lx.text for lx in lexemes if lx.kind is LexemeKind.ADDRESS)
    return table


def build_address_vocab(freqs: AddressFrequencyTable, top_n: int = DEFAULT_TOP_N) -> list[str]:
    """Top ``top_n`` addresses by count, ties by ascending address."""
    if top_n < 0:
        raise ValueError("top_n must be >= 0")
    ranked = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    return [addr for addr, _ in ranked[:top_n]]


def wordpiece_fragments(corpus: Iterable[Sequence[Lexeme]]) -> Iterable[str]:
    """Training fragments: normalized numbers and log words."""
    for lexemes in corpus:
        for lx in lexemes:
            if lx.kind is LexemeKind.NUMBER:
                yield lx.text
            elif lx.kind is LexemeKind.TEXT:
                yield from lx.text.split()


def _split_word(word: str) -> list[str]:
    return [word[0]] + [CONT + ch for ch in word[1:]]


ZERO_RUN_LENGTHS = (1, 2, 4, 8, 16, 32)


def seed_pieces(policy: str, words: Iterable[str]) -> list[str]:
    """Multi-character pieces placed in the starting inventory.

    ``"chars"`` seeds nothing beyond single characters. ``"hex_zero_runs"``
    adds ``0x``-prefixed and ``##`` zero runs of power-of-two lengths, keeping
    only runs that occur in ``words``; zero padding then costs a few tokens
    even when the merge budget is small.
    """
    if policy == "chars":
        return []
    if policy != "hex_zero_runs":
        raise ValueError(f"unknown seed alphabet policy {policy!r}")
    words = [w for w in words if w.startswith("0x")]
    seeds = []
    if words:
        seeds.append("0x")
    for n in ZERO_RUN_LENGTHS:
        run = "0" * n
        if any(w.startswith("0x" + run) for w in words):
            seeds.append("0x" + run)
        if any(run in w[1:] for w in words):
            seeds.append(CONT + run)
    return seeds


def _initial_split(word: str, seeds: dict[bool, list[str]]) -> list[str]:
    """Greedy longest match over seed pieces, single characters otherwise."""
    out, i = [], 0
    while i < len(word):
        for piece in seeds[i > 0]:
            body = piece[len(CONT):] if i else piece
            if word.startswith(body, i):
                out.append(piece)
                i += len(body)
                break
        else:
            out.append(word[i] if i == 0 else CONT + word[i])
            i += 1
    return out


def _join(left: str, right: str) -> str:
    return left + right[len(CONT):]


def train_wordpiece(
    fragments: Iterable[str],
    target_pieces: int,
    seed_alphabet_policy: str = "chars",
    min_pair_count: int = 2,
) -> list[str]:
    """Learn a WordPiece table by likelihood-ratio pair merging.

    The returned list holds the base alphabet (sorted), then any seed pieces
    from ``seed_alphabet_policy``, then merged pieces in merge order. Merging picks the pair maximizing
    ``count(pair) / (count(left) * count(right))``, ties by ascending
    ``left + " " + right``, and stops at ``target_pieces`` or once no pair
    occurs ``min_pair_count`` times.
    """
    word_freq = Counter(w for w in fragments if w)
    types = sorted(word_freq)
    alphabet = sorted({sym for w in types for sym in _split_word(w)})
    if target_pieces < len(alphabet):
        raise CapacityError(
            f"target_pieces={target_pieces} is below the alphabet size {len(alphabet)}"
        )
    seeds = seed_pieces(seed_alphabet_policy, types)[: target_pieces - len(alphabet)]
    by_len = sorted(seeds, key=lambda p: -len(p))
    split_seeds = {
        False: [p for p in by_len if not p.startswith(CONT)],
        True: [p for p in by_len if p.startswith(CONT)],
    }
    words = [_initial_split(w, split_seeds) for w in types]
    freqs = [word_freq[w] for w in types]
    table = alphabet + [p for p in seeds if p not in alphabet]
    known = set(table)

    sym_count: Counter = Counter()
    pair_count: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for idx, (w, f) in enumerate(zip(words, freqs)):
        for sym in w:
            sym_count[sym] += f
        for pair in zip(w, w[1:]):
            pair_count[pair] += f
            where.setdefault(pair, set()).add(idx)

    def score(pair: tuple[str, str]) -> float:
        return pair_count[pair] / (sym_count[pair[0]] * sym_count[pair[1]])

    # lazy max-heap keyed on (score, pair); stale entries are re-validated
    heap = [(-score(p), p[0] + " " + p[1], p) for p, c in pair_count.items() if c >= min_pair_count]
    heapq.heapify(heap)

    while len(table) < target_pieces and heap:
        neg, _, pair = heapq.heappop(heap)
        c = pair_count.get(pair, 0)
        if c < min_pair_count:
            continue
        current = score(pair)
        if current != -neg:
            heapq.heappush(heap, (-current, pair[0] + " " + pair[1], pair))
            continue
        merged = _join(*pair)
        touched: set[tuple[str, str]] = set()
        for idx in sorted(where.pop(pair, ())):
            w, f = words[idx], freqs[idx]
            for p in zip(w, w[1:]):
                pair_count[p] -= f
                touched.add(p)
            for sym in w:
                sym_count[sym] -= f
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[idx] = out
            for sym in out:
                sym_count[sym] += f
            for p in zip(out, out[1:]):
                pair_count[p] += f
                where.setdefault(p, set()).add(idx)
                touched.add(p)
        pair_count.pop(pair, None)
        if merged not in known:
            known.add(merged)
            table.append(merged)
        # symbol counts changed for every pair sharing a symbol with a touched
        # pair; refreshing the touched set plus pairs of the merged symbols
        # keeps the heap exact because stale scores are re-checked on pop
        refresh = set(touched)
        for p in list(where):
            if p[0] in (pair[0], pair[1], merged) or p[1] in (pair[0], pair[1], merged):
                refresh.add(p)
        for p in refresh:
            if pair_count.get(p, 0) >= min_pair_count:
                heapq.heappush(heap, (-score(p), p[0] + " " + p[1], p))
    return table


@dataclass(frozen=True)
class EncodedSequence:
    ids: tuple[int, ...]
    source_tx_id: str = ""

    @property
    def n_tokens(self) -> int:
        return len(self.ids)


@dataclass
class Vocabulary:
    specials: list[str]
    addresses: dict[str, int]
    subwords: dict[str, int]
    size_cap: int = DEFAULT_SIZE_CAP
    top_n_addresses: int = DEFAULT_TOP_N
    _tokens: list[str] = field(default_factory=list, repr=False)
    _zones: list[str] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self._special_ids = {tok: i for i, tok in enumerate(self.specials)}
        self._tokens = list(self.specials) + [""] * (len(self.addresses) + len(self.subwords))
        self._zones = ["special"] * len(self.specials) + [""] * (len(self.addresses) + len(self.subwords))
        for tok, i in self.addresses.items():
            self._tokens[i] = tok
            self._zones[i] = "address"
        for tok, i in self.subwords.items():
            self._tokens[i] = tok
            self._zones[i] = "subword"
        self._max_piece = max((len(p) for p in self.subwords), default=0)

    def __len__(self) -> int:
        return len(self._tokens)

    def special_id(self, token: str) -> int:
        return self._special_ids[token]

    @property
    def pad_id(self) -> int:
        return self._special_ids["[PAD]"]

    @property
    def mask_id(self) -> int:
        return self._special_ids["[MASK]"]

    @property
    def oov_id(self) -> int:
        return self._special_ids["[OOV]"]

    @property
    def cls_id(self) -> int:
        return self._special_ids["[CLS]"]

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise UnknownId(f"id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def zone(self, idx: int) -> str:
        self.token(idx)
        return self._zones[idx]

    # -- encoding ----------------------------------------------------------

    def segment(self, word: str) -> list[int]:
        """Greedy longest-match WordPiece segmentation of one word."""
        ids: list[int] = []
        i = 0
        while i < len(word):
            prefix = CONT if i else ""
            for j in range(min(len(word), i + self._max_piece), i, -1):
                piece = self.subwords.get(prefix + word[i:j])
                if piece is not None:
                    ids.append(piece)
                    i = j
                    break
            else:
                ids.append(self.oov_id)
                i += 1
        return ids

    def lexeme_ids(self, lx: Lexeme) -> list[int]:
        if lx.kind is LexemeKind.SPECIAL:
            return [self._special_ids[lx.text]]
        if lx.kind is LexemeKind.ADDRESS:
            return [self.addresses.get(lx.text.lower(), self.oov_id)]
        out: list[int] = []
        for word in lx.text.split():
            out.extend(self.segment(word))
        return out

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "size_cap": self.size_cap,
                "top_n_addresses": self.top_n_addresses,
                "specials_version": SPECIALS_VERSION,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i, (tok, zone) in enumerate(zip(self._tokens, self._zones)):
                fh.write(json.dumps({"token": tok, "id": i, "zone": zone}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("specials_version") != SPECIALS_VERSION:
                raise ValueError(f"unsupported specials_version {header.get('specials_version')}")
            specials: list[str] = []
            addresses: dict[str, int] = {}
            subwords: dict[str, int] = {}
            for expected, line in enumerate(fh):
                rec = json.loads(line)
                if rec["id"] != expected:
                    raise ValueError(f"vocabulary ids not contiguous at {rec['id']}")
                zone = rec["zone"]
                if zone == "special":
                    specials.append(rec["token"])
                elif zone == "address":
                    addresses[rec["token"]] = rec["id"]
                elif zone == "subword":
                    subwords[rec["token"]] = rec["id"]
                else:
                    raise ValueError(f"unknown zone {zone!r}")
        return cls(specials, addresses, subwords, header["size_cap"], header["top_n_addresses"])


def assemble_vocabulary(
    specials: Sequence[str],
    addresses: Sequence[str],
    subwords: Sequence[str],
    size_cap: int = DEFAULT_SIZE_CAP,
    top_n_addresses: int | None = None,
) -> Vocabulary:
    """Lay out ids specials -> addresses -> subwords, truncating subwords to the cap."""
    if len(specials) + len(addresses) >= size_cap:
        raise CapacityError(
            f"{len(specials)} specials + {len(addresses)} addresses leave no room under cap {size_cap}"
        )
    for required in ("[OOV]", "[MASK]", "[PAD]"):
        if required not in specials:
            raise ValueError(f"special token {required} is required")
    n_special = len(specials)
    addr_ids = {a: n_special + i for i, a in enumerate(addresses)}
    room = size_cap - n_special - len(addresses)
    base = n_special + len(addresses)
    sub_ids: dict[str, int] = {}
    for piece in subwords:
        if len(sub_ids) >= room:
            break
        if piece not in sub_ids:
            sub_ids[piece] = base + len(sub_ids)
    return Vocabulary(
        list(specials), addr_ids, sub_ids, size_cap,
        len(addresses) if top_n_addresses is None else top_n_addresses,
    )


def build_vocabulary(
    corpus: Sequence[Sequence[Lexeme]],
    size_cap: int = DEFAULT_SIZE_CAP,
    top_n: int = DEFAULT_TOP_N,
    seed_alphabet_policy: str = "hex_zero_runs",
) -> Vocabulary:
    """count -> retain top addresses -> train WordPiece on the remaining room."""
    addresses = build_address_vocab(count_addresses(corpus), top_n)
    room = size_cap - len(SPECIALS) - len(addresses)
    if room <= 0:
        raise CapacityError("no room for subwords")
    fragments = list(wordpiece_fragments(corpus))
    alphabet = {sym for w in set(fragments) for sym in _split_word(w)}
    pieces = train_wordpiece(fragments, max(room, len(alphabet)), seed_alphabet_policy)
    return assemble_vocabulary(SPECIALS, addresses, pieces, size_cap, top_n)


def encode(
    lexemes: Sequence[Lexeme],
    vocab: Vocabulary,
    max_len: int,
    source_tx_id: str = "",
    add_cls: bool = True,
) -> EncodedSequence:
    """Map lexemes to ids, keeping the first ``max_len`` ids."""
    ids: list[int] = [vocab.cls_id] if add_cls else []
    for lx in lexemes:
        if len(ids) >= max_len:
            break
        ids.extend(vocab.lexeme_ids(lx))
    return EncodedSequence(tuple(ids[:max_len]), source_tx_id)


def _word_lexeme(word: str) -> Lexeme:
    if word.startswith("0x") and len(word) >= 42 and all(c in "0123456789abcdef" for c in word[2:]):
        return Lexeme(LexemeKind.NUMBER, word)
    return Lexeme(LexemeKind.TEXT, word)


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[Lexeme]:
    """Best-effort inverse of :func:`encode`.

    A leading ``[CLS]`` is dropped, ``##`` pieces are re-joined to the word
    before them, and each word becomes one lexeme (``Number`` when it has the
    normalized ``0x`` + 40-digit form, else ``Text``).
    """
    ids = list(ids)
    for i in ids:
        vocab.token(i)
    if ids and ids[0] == vocab.cls_id:
        ids = ids[1:]
    out: list[Lexeme] = []
    word: str | None = None

    def flush() -> None:
        nonlocal word
        if word is not None:
            out.append(_word_lexeme(word))
            word = None

    for i in ids:
        zone, tok = vocab.zone(i), vocab.token(i)
        if zone == "subword":
            if tok.startswith(CONT) and word is not None:
                word += tok[len(CONT):]
            else:
                flush()
                word = tok[len(CONT):] if tok.startswith(CONT) else tok
            continue
        flush()
        if zone == "address":
            out.append(Lexeme(LexemeKind.ADDRESS, tok))
        else:
            out.append(Lexeme.special(tok))
    flush()
    return out
