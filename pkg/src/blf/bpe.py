"""Byte-level byte-pair-encoding tokenizer: training, encode/decode, persistence.

Bytes map bijectively to printable surrogate characters, so every byte string
is representable and decode(encode(s)) == s for any text. Training greedily
merges the globally most frequent adjacent symbol pair (ties broken by
lexicographic pair order) until the vocabulary budget is reached or no pair
occurs twice.
"""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from typing import Iterable, Iterator

from .errors import FormatError, RangeError, UsageError

SPECIAL_TOKENS = ("<s>", "</s>", "<pad>", "<unk>", "<mask>")

# splits into letter runs, digit runs, punctuation runs, and whitespace, with
# a single leading space attached to the following run (byte-level BPE
# whitespace-prefix convention)
_PRETOKEN_RE = re.compile(r" ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+(?!\S)|\s+")


def byte_to_symbol_map() -> dict[int, str]:
    """Bijection from the 256 byte values to printable characters."""
    keep = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    mapping = {}
    shifted = 0
    for b in range(256):
        if b in keep:
            mapping[b] = chr(b)
        else:
            mapping[b] = chr(256 + shifted)
            shifted += 1
    return mapping


_BYTE_TO_SYM = byte_to_symbol_map()
_SYM_TO_BYTE = {s: b for b, s in _BYTE_TO_SYM.items()}


def pretokenize(text: str) -> list[str]:
    return _PRETOKEN_RE.findall(text)


def _word_symbols(pretoken: str) -> tuple[str, ...]:
    return tuple(_BYTE_TO_SYM[b] for b in pretoken.encode("utf-8"))


class ByteBpeModel:
    """Trained vocabulary: 5 special ids, 256 byte ids, then one id per merge output."""

    def __init__(self, merges: list[tuple[str, str]], special_tokens=SPECIAL_TOKENS):
        if len(set(special_tokens)) != len(special_tokens):
            raise UsageError("special tokens must be distinct")
        self.special_tokens = tuple(special_tokens)
        self.merges = list(merges)
        self.id_to_token: list[str] = list(special_tokens)
        self.special_ids = {tok: i for i, tok in enumerate(special_tokens)}
        self.token_to_id: dict[str, int] = {}
        for b in range(256):
            sym = _BYTE_TO_SYM[b]
            self.token_to_id[sym] = len(self.id_to_token)
            self.id_to_token.append(sym)
        self.merge_ranks: dict[tuple[str, str], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            if a not in self.token_to_id or b not in self.token_to_id:
                raise FormatError(f"merge {rank} references unknown symbol: {a!r} {b!r}")
            self.merge_ranks[(a, b)] = rank
            out = a + b
            if out not in self.token_to_id:
                self.token_to_id[out] = len(self.id_to_token)
                self.id_to_token.append(out)
        self._encode_cache: dict[str, tuple[int, ...]] = {}

    # special-token accessors used throughout the pipeline
    @property
    def begin_id(self) -> int:
        return self.special_ids[self.special_tokens[0]]

    @property
    def end_id(self) -> int:
        return self.special_ids[self.special_tokens[1]]

    @property
    def pad_id(self) -> int:
        return self.special_ids[self.special_tokens[2]]

    @property
    def unk_id(self) -> int:
        return self.special_ids[self.special_tokens[3]]

    @property
    def mask_id(self) -> int:
        return self.special_ids[self.special_tokens[4]]

    @property
    def special_id_set(self) -> set[int]:
        return set(self.special_ids.values())

    def __len__(self) -> int:
        return len(self.id_to_token)

    def _bpe(self, symbols: tuple[str, ...]) -> tuple[str, ...]:
        """Apply merges in training order (lowest rank first) until none apply."""
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                rank = self.merge_ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = pair, rank
            if best is None:
                break
            a, b = best
            merged = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = tuple(merged)
        return symbols

    def encode(self, text: str) -> list[int]:
        """Text -> ids. Never fails: unknown bytes fall back to byte tokens."""
        ids: list[int] = []
        for pre in pretokenize(text):
            cached = self._encode_cache.get(pre)
            if cached is None:
                cached = tuple(self.token_to_id[s] for s in self._bpe(_word_symbols(pre)))
                if len(self._encode_cache) < 1_000_000:
                    self._encode_cache[pre] = cached
            ids.extend(cached)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Exact inverse of encode; special ids render as their marker strings."""
        out: list[bytes] = []
        n = len(self.id_to_token)
        n_special = len(self.special_tokens)
        for i in ids:
            i = int(i)
            if i < 0 or i >= n:
                raise RangeError(f"token id {i} outside [0, {n})")
            tok = self.id_to_token[i]
            if i < n_special:
                out.append(tok.encode("utf-8"))
            else:
                out.append(bytes(_SYM_TO_BYTE[c] for c in tok))
        return b"".join(out).decode("utf-8", errors="replace")

    def save(self, vocab_path, merges_path) -> None:
        with open(vocab_path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.id_to_token):
                row = {"id": i, "token": tok}
                if i < len(self.special_tokens):
                    row["special"] = True
                f.write(json.dumps(row, ensure_ascii=False) + "\n")
        with open(merges_path, "w", encoding="utf-8") as f:
            for a, b in self.merges:
                f.write(f"{a} {b}\n")


def load(vocab_path, merges_path) -> ByteBpeModel:
    """Rebuild a model from its two files, cross-checking them for consistency."""
    merges: list[tuple[str, str]] = []
    with open(merges_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise FormatError(f"{merges_path}:{lineno}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))

    specials: list[str] = []
    rows: list[tuple[int, str]] = []
    with open(vocab_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{vocab_path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(row, dict) or "id" not in row or "token" not in row:
                raise FormatError(f"{vocab_path}:{lineno}: missing 'id' or 'token'")
            rows.append((int(row["id"]), str(row["token"])))
            if row.get("special"):
                specials.append(str(row["token"]))

    if len(specials) != len(SPECIAL_TOKENS):
        raise FormatError(f"{vocab_path}: expected {len(SPECIAL_TOKENS)} special tokens, found {len(specials)}")
    try:
        model = ByteBpeModel(merges, special_tokens=tuple(specials))
    except FormatError as e:
        raise FormatError(f"{merges_path}: {e}") from e
    expected = {i: t for i, t in enumerate(model.id_to_token)}
    for lineno, (i, tok) in enumerate(rows, start=1):
        if expected.get(i) != tok:
            raise FormatError(
                f"{vocab_path}:{lineno}: id {i} maps to {tok!r} but merges imply {expected.get(i)!r}"
            )
    if len(rows) != len(model.id_to_token):
        raise FormatError(f"{vocab_path}: {len(rows)} rows but merges imply {len(model.id_to_token)} tokens")
    return model


def train_tokenizer(
    corpus: Iterable[str],
    vocab_size: int = 64000,
    special_tokens=SPECIAL_TOKENS,
) -> ByteBpeModel:
    """Greedy pair-merge training over a text stream.

    Stops at `vocab_size` total tokens or when no adjacent pair occurs twice.
    """
    base = 256 + len(special_tokens)
    if vocab_size <= base:
        raise UsageError(f"vocab_size must exceed {base} (bytes + specials), got {vocab_size}")

    word_freq: Counter[tuple[str, ...]] = Counter()
    empty = True
    for text in corpus:
        if text:
            empty = False
        for pre in pretokenize(text):
            word_freq[_word_symbols(pre)] += 1
    if empty:
        raise UsageError("cannot train a tokenizer on an empty corpus")

    words: list[list[str]] = []
    freqs: list[int] = []
    for w, c in word_freq.items():
        words.append(list(w))
        freqs.append(c)

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, w in enumerate(words):
        f = freqs[idx]
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            pair_words[pair].add(idx)

    heap: list[tuple[int, tuple[str, str]]] = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    produced: set[str] = set()
    n_tokens = base

    while n_tokens < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale heap entry
        if -neg < 2:
            break
        a, b = pair
        merged_sym = a + b
        merges.append(pair)
        if merged_sym not in produced:
            produced.add(merged_sym)
            n_tokens += 1

        touched: set[tuple[str, str]] = set()
        for idx in sorted(pair_words[pair]):
            w = words[idx]
            f = freqs[idx]
            for old_pair in zip(w, w[1:]):
                pair_counts[old_pair] -= f
                touched.add(old_pair)
            new_w = []
            i = 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    new_w.append(merged_sym)
                    i += 2
                else:
                    new_w.append(w[i])
                    i += 1
            words[idx] = new_w
            for new_pair in zip(new_w, new_w[1:]):
                pair_counts[new_pair] += f
                touched.add(new_pair)
                pair_words[new_pair].add(idx)
        del pair_words[pair]
        for t in touched:
            c = pair_counts.get(t, 0)
            if c <= 0:
                pair_counts.pop(t, None)
            else:
                heapq.heappush(heap, (-c, t))

    return ByteBpeModel(merges, special_tokens=tuple(special_tokens))


def corpus_stats(model: ByteBpeModel, texts: Iterator[str]) -> dict:
    """Character and token totals plus mean characters per token."""
    chars = 0
    tokens = 0
    for t in texts:
        chars += len(t)
        tokens += len(model.encode(t))
    return {
        "chars": chars,
        "tokens": tokens,
        "chars_per_token": chars / tokens if tokens else 0.0,
    }
