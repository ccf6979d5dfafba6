from __future__ import annotations

import itertools
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from blockscan.errors import CapacityError, ParseError, UnknownId
from blockscan.hexnum import normalize_number, overflow_counter, parse_numeral
from blockscan.synth import SynthConfig, gen_benign
from blockscan.tokenizer import (
    DEFAULT_SIZE_CAP,
    DEFAULT_TOP_N,
    SPECIALS,
    AddressFrequencyTable,
    Vocabulary,
    assemble_vocabulary,
    build_address_vocab,
    build_vocabulary,
    count_addresses,
    decode,
    encode,
    seed_pieces,
    train_wordpiece,
)
from blockscan.trace import Lexeme, LexemeKind, flatten

ADDR = lambda s: Lexeme(LexemeKind.ADDRESS, s)  # noqa: E731
TEXT = lambda s: Lexeme(LexemeKind.TEXT, s)  # noqa: E731


# ---------------------------------------------------------------------------
# address counting


def test_count_addresses():
    t = count_addresses([[ADDR("a"), ADDR("a")], [ADDR("b"), TEXT("a")]])
    assert dict(t) == {"a": 2, "b": 1}
    assert dict(count_addresses([])) == {}


@given(st.lists(st.lists(st.sampled_from("abcde"), max_size=6), max_size=6),
       st.lists(st.lists(st.sampled_from("abcde"), max_size=6), max_size=6))
def test_count_merge_is_additive(c1, c2):
    mk = lambda c: [[ADDR(x) for x in seq] for seq in c]  # noqa: E731
    merged = AddressFrequencyTable(count_addresses(mk(c1))).merge(count_addresses(mk(c2)))
    assert dict(merged) == dict(count_addresses(mk(c1) + mk(c2)))


def test_build_address_vocab_ranking_and_ties():
    assert build_address_vocab(AddressFrequencyTable({"a": 5, "b": 2, "c": 1}), 2) == ["a", "b"]
    assert build_address_vocab(AddressFrequencyTable({"b": 3, "a": 3}), 1) == ["a"]
    assert DEFAULT_TOP_N == 7000
    assert DEFAULT_SIZE_CAP == 30000
    with pytest.raises(ValueError):
        build_address_vocab(AddressFrequencyTable(), -1)


def test_non_retained_address_encodes_to_oov():
    addrs = build_address_vocab(AddressFrequencyTable({"0xa": 5, "0xb": 2, "0xc": 1}), 2)
    v = assemble_vocabulary(SPECIALS, addrs, ["a"], 100)
    seq = encode([ADDR("0xc"), ADDR("0xa")], v, 10, add_cls=False)
    assert seq.ids == (v.oov_id, v.addresses["0xa"])


# ---------------------------------------------------------------------------
# number normalization


def test_normalize_examples():
    assert normalize_number("255") == "0x" + "0" * 38 + "ff"
    assert normalize_number("0xFF") == normalize_number("255")
    assert normalize_number("0") == "0x" + "0" * 40


@pytest.mark.parametrize("bad", ["-1", "abc", "", "0x", "1.5", "0xg1"])
def test_normalize_rejects(bad):
    with pytest.raises(ParseError):
        normalize_number(bad)


def test_overflow_falls_back_and_counts():
    overflow_counter.reset()
    assert normalize_number(str(2**160 - 1)) == "0x" + "f" * 40
    assert overflow_counter.value == 0
    assert normalize_number(str(2**160)) == "0x1" + "0" * 40
    assert overflow_counter.value == 1


@given(st.integers(0, 2**160 - 1), st.booleans())
def test_normalize_idempotent_and_value_preserving(x, as_hex):
    raw = hex(x).upper().replace("0X", "0x") if as_hex else str(x)
    n = normalize_number(raw)
    assert len(n) == 42 and n == n.lower()
    assert parse_numeral(n) == x
    assert normalize_number(n) == n


# ---------------------------------------------------------------------------
# WordPiece


def hand_pair_scores(words):
    """Score every adjacent pair of a character split, written out independently."""
    syms, pairs = Counter(), Counter()
    for w in words:
        parts = [w[0]] + ["##" + c for c in w[1:]]
        syms.update(parts)
        pairs.update(zip(parts, parts[1:]))
    return {p: (c, c / (syms[p[0]] * syms[p[1]])) for p, c in pairs.items()}


def test_wordpiece_toy_first_merge():
    scores = hand_pair_scores(["abab", "ab"])
    eligible = {p: s for p, (c, s) in scores.items() if c >= 2}
    best = max(eligible, key=lambda p: (eligible[p], [-ord(ch) for ch in " ".join(p)]))
    assert best == ("a", "##b")
    table = train_wordpiece(["abab", "ab"], 100)
    assert table[:3] == ["##a", "##b", "a"]  # alphabet
    assert table[3] == "ab"


def test_wordpiece_tie_break_by_pair_string():
    # "xy" and "zy" each occur twice with identical scores; "x ##y" < "z ##y"
    table = train_wordpiece(["xy", "xy", "zy", "zy"], 4)
    assert table[-1] == "xy"


def test_wordpiece_no_pairs_and_capacity():
    assert train_wordpiece(["a"], 10) == ["a"]
    with pytest.raises(CapacityError):
        train_wordpiece(["ab"], 1)


def test_wordpiece_stops_at_target():
    frags = ["hello", "help", "hello", "helm", "yellow"] * 3
    table = train_wordpiece(frags, 11)
    assert len(table) == 11 and len(set(table)) == 11
    assert train_wordpiece(frags, 11 + 5)[:11] == table


def test_seed_pieces_hex_zero_runs():
    words = ["0x" + "0" * 38 + "ff"]
    seeds = seed_pieces("hex_zero_runs", words)
    assert "0x" in seeds and "0x" + "0" * 32 in seeds and "##" + "0" * 32 in seeds
    assert seed_pieces("chars", words) == []
    assert seed_pieces("hex_zero_runs", ["hello"]) == []
    with pytest.raises(ValueError):
        seed_pieces("nope", words)


def test_zero_run_seeding_shortens_numbers():
    nums = [normalize_number(str(v)) for v in (1, 255, 4096, 10**6, 123)]
    v = assemble_vocabulary(SPECIALS, [], train_wordpiece(nums, 40, "hex_zero_runs"), 200)
    ids = encode([Lexeme(LexemeKind.NUMBER, nums[1])], v, 100, add_cls=False).ids
    assert len(ids) <= 5


# ---------------------------------------------------------------------------
# assembly


def specials(n):
    base = ["[PAD]", "[MASK]", "[OOV]"]
    return base + [f"[S{i}]" for i in range(n - 3)]


def test_assemble_default_budget_arithmetic():
    addrs = [f"0x{i:040x}" for i in range(7000)]
    pieces = [f"p{i}" for i in range(30000)]
    v = assemble_vocabulary(specials(12), addrs, pieces, 30000)
    assert len(v.subwords) == 22988
    assert len(v) == 30000


def test_assemble_small_and_under_cap():
    v = assemble_vocabulary(specials(3), ["0xa"], ["x"], 10)
    assert len(v) == 5


def test_assemble_capacity_error():
    with pytest.raises(CapacityError):
        assemble_vocabulary(specials(3), ["0xa", "0xb"], ["x"], 5)


def test_zones_disjoint_contiguous():
    v = assemble_vocabulary(SPECIALS, ["0xa", "0xb"], ["x", "##y", "x"], 30)
    zones = [v.zone(i) for i in range(len(v))]
    assert zones == ["special"] * len(SPECIALS) + ["address"] * 2 + ["subword"] * 2
    assert len(v) <= v.size_cap
    with pytest.raises(UnknownId):
        v.token(len(v))


# ---------------------------------------------------------------------------
# encode / decode


@pytest.fixture
def toy_vocab():
    return assemble_vocabulary(SPECIALS, ["0xaa"], ["a", "b", "ab", "##a", "##b", "##ab"], 100)


def all_segmentations(word, pieces):
    if not word:
        yield []
        return
    for j in range(1, len(word) + 1):
        head = word[:j]
        if head in pieces:
            for rest in all_segmentations_cont(word[j:], pieces):
                yield [head] + rest


def all_segmentations_cont(word, pieces):
    if not word:
        yield []
        return
    for j in range(1, len(word) + 1):
        head = "##" + word[:j]
        if head in pieces:
            for rest in all_segmentations_cont(word[j:], pieces):
                yield [head] + rest


def test_greedy_segmentation_toy(toy_vocab):
    pieces = set(toy_vocab.subwords)
    segs = list(all_segmentations("abab", pieces))
    assert ["ab", "##ab"] in segs and min(len(s) for s in segs) == 2
    ids = encode([TEXT("abab")], toy_vocab, 10, add_cls=False).ids
    assert [toy_vocab.token(i) for i in ids] == ["ab", "##ab"]


def test_unsegmentable_char_is_oov(toy_vocab):
    ids = encode([TEXT("azb")], toy_vocab, 10, add_cls=False).ids
    assert [toy_vocab.token(i) for i in ids] == ["a", "[OOV]", "##b"]


def test_truncation_keeps_head(toy_vocab):
    lx = [Lexeme.special(s) for s in ("[START]", "[CALL]", "[Ins]", "[OUTs]", "[END]")]
    full = encode(lx, toy_vocab, 100, add_cls=False).ids
    assert encode(lx, toy_vocab, 3, add_cls=False).ids == full[:3]
    seq = encode(lx, toy_vocab, 3)
    assert seq.ids[0] == toy_vocab.cls_id and seq.n_tokens == 3


def test_decode_examples(toy_vocab):
    assert decode([toy_vocab.oov_id], toy_vocab) == [Lexeme.special("[OOV]")]
    with pytest.raises(UnknownId):
        decode([len(toy_vocab)], toy_vocab)


@given(st.text(alphabet="ab", min_size=1, max_size=12))
def test_greedy_never_longer_than_chars(word):
    v = assemble_vocabulary(SPECIALS, [], ["a", "b", "ab", "##a", "##b", "##ab", "##bab"], 100)
    assert len(v.segment(word)) <= len(word)


@pytest.fixture(scope="module")
def synth_vocab():
    txs = gen_benign(SynthConfig(seed=3), 400)
    lex = [flatten(t) for t in txs]
    return build_vocabulary(lex, size_cap=300, top_n=48), lex


def test_built_vocab_respects_cap(synth_vocab):
    v, _ = synth_vocab
    assert len(v) <= 300
    assert len(v.addresses) == 48


def test_round_trip_in_vocab(synth_vocab):
    v, lex = synth_vocab
    checked = 0
    for seq in lex:
        if any(lx.kind is LexemeKind.ADDRESS and lx.text not in v.addresses for lx in seq):
            continue
        ids = encode(seq, v, 10**6).ids
        if v.oov_id in ids:
            continue
        assert decode(ids, v) == seq
        checked += 1
    assert checked > 20


def test_save_load_byte_exact(synth_vocab, tmp_path):
    v, lex = synth_vocab
    p = tmp_path / "v.jsonl"
    v.save(p)
    w = Vocabulary.load(p)
    assert [encode(s, w, 512).ids for s in lex[:30]] == [encode(s, v, 512).ids for s in lex[:30]]
    w.save(tmp_path / "w.jsonl")
    assert (tmp_path / "w.jsonl").read_bytes() == p.read_bytes()


def test_encode_deterministic(synth_vocab):
    v, lex = synth_vocab
    assert encode(lex[0], v, 256) == encode(lex[0], v, 256)
    assert v.pad_id not in encode(lex[0], v, 256).ids
