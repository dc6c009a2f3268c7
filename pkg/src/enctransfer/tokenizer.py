"""Word-boundary-aware BPE used for both the teacher and the student side.

Merges never cross whitespace.  Every symbol string ``s`` owns two ids: the
word-initial form ``" " + s`` and the continuation form ``s``, so a plain id
sequence decodes back to whitespace-separated text by concatenation.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
WORD_START = " "
NO_WORD = -1  # word_index sentinel for special tokens

FORMAT_TAG = "BPEv1"


@dataclass(frozen=True)
class Vocabulary:
    base_symbols: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    token_to_id: dict[str, int]
    special_ids: dict[str, int]
    id_to_token: tuple[str, ...] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        inverse = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            inverse[i] = tok
        object.__setattr__(self, "id_to_token", tuple(inverse))
        ranks = {}
        for r, pair in enumerate(self.merges):
            ranks.setdefault(pair, r)
        object.__setattr__(self, "_ranks", ranks)
        object.__setattr__(self, "_cache", {})

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.special_ids[PAD]

    @property
    def bos_id(self) -> int:
        return self.special_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.special_ids[EOS]

    @property
    def unk_id(self) -> int:
        return self.special_ids[UNK]

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    def _segment(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = list(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
        ids = []
        for pos, sym in enumerate(symbols):
            key = WORD_START + sym if pos == 0 else sym
            ids.append(self.token_to_id.get(key, self.unk_id))
        out = tuple(ids)
        self._cache[word] = out
        return out


@dataclass(frozen=True)
class TokenizedSentence:
    token_ids: tuple[int, ...]
    word_index: tuple[int, ...]
    surface: str

    def __post_init__(self):
        if len(self.token_ids) != len(self.word_index):
            raise ValueError("token_ids and word_index differ in length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_words(self) -> int:
        return len(self.surface.split())

    def subwords_of(self, word: int) -> list[int]:
        return [i for i, w in enumerate(self.word_index) if w == word]


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def _build_token_map(base_symbols: Sequence[str], merges: Sequence[tuple[str, str]]) -> dict[str, int]:
    token_to_id = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}

    def add(sym: str) -> None:
        if WORD_START + sym in token_to_id:
            return
        token_to_id[WORD_START + sym] = len(token_to_id)
        token_to_id[sym] = len(token_to_id)

    for ch in base_symbols:
        add(ch)
    for a, b in merges:
        add(a + b)
    return token_to_id


def _make_vocab(base_symbols: Sequence[str], merges: Sequence[tuple[str, str]]) -> Vocabulary:
    return Vocabulary(
        base_symbols=tuple(base_symbols),
        merges=tuple(tuple(m) for m in merges),
        token_to_id=_build_token_map(base_symbols, merges),
        special_ids={tok: i for i, tok in enumerate(SPECIAL_TOKENS)},
    )


def min_vocab_size(num_chars: int) -> int:
    """Smallest admissible target: specials plus both forms of every character."""
    return len(SPECIAL_TOKENS) + 2 * num_chars


def train_bpe(corpus: Iterable[str], target_vocab_size: int) -> Vocabulary:
    """Learn merges until the vocabulary would exceed ``target_vocab_size``.

    The most frequent adjacent pair is merged at each step; ties go to the
    lexicographically smallest pair.
    """
    word_freq: Counter[str] = Counter()
    for line in corpus:
        word_freq.update(line.split())
    if not word_freq:
        raise ValueError("empty corpus")
    chars = sorted({ch for w in word_freq for ch in w})
    if target_vocab_size < min_vocab_size(len(chars)):
        raise ValueError("vocab too small")

    words = [list(w) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    pair_where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            pair_where[pair].add(idx)

    merges: list[tuple[str, str]] = []
    known = set(chars)
    size = min_vocab_size(len(chars))
    while pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = best[0] + best[1]
        if merged not in known and size + 2 > target_vocab_size:
            break
        merges.append(best)
        if merged not in known:
            known.add(merged)
            size += 2
        for idx in sorted(pair_where.pop(best, ())):
            old = words[idx]
            new = _merge_pair(old, best)
            if len(new) == len(old):
                continue
            f = freqs[idx]
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= f
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
            for pair in zip(new, new[1:]):
                pair_counts[pair] += f
                pair_where[pair].add(idx)
            words[idx] = new
        pair_counts.pop(best, None)
    return _make_vocab(chars, merges)


def encode(vocab: Vocabulary, text: str) -> TokenizedSentence:
    ids = [vocab.bos_id]
    word_index = [NO_WORD]
    for w_idx, word in enumerate(text.split()):
        pieces = vocab._segment(word)
        ids.extend(pieces)
        word_index.extend([w_idx] * len(pieces))
    ids.append(vocab.eos_id)
    word_index.append(NO_WORD)
    return TokenizedSentence(tuple(ids), tuple(word_index), text)


def decode(vocab: Vocabulary, token_ids: Iterable[int]) -> str:
    skip = {vocab.pad_id, vocab.bos_id, vocab.eos_id}
    parts = []
    for i in token_ids:
        if not 0 <= i < len(vocab):
            raise ValueError("id out of range")
        if i in skip:
            continue
        parts.append(vocab.id_to_token[i])
    return "".join(parts).strip()


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    lines = [f"{FORMAT_TAG} {len(vocab.merges)}"]
    lines += [f"{a} {b}" for a, b in vocab.merges]
    lines.append(f"#alphabet {len(vocab.base_symbols)}")
    lines += list(vocab.base_symbols)
    lines.append(f"#specials {len(SPECIAL_TOKENS)}")
    lines += [f"{tok} {vocab.special_ids[tok]}" for tok in SPECIAL_TOKENS]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    tag, n = lines[0].split(" ")
    if tag != FORMAT_TAG:
        raise ValueError(f"not a {FORMAT_TAG} file: {path}")
    n = int(n)
    merges = [tuple(line.split(" ")) for line in lines[1:1 + n]]
    pos = 1 + n
    head, n_chars = lines[pos].split(" ")
    if head != "#alphabet":
        raise ValueError(f"missing alphabet section in {path}")
    chars = lines[pos + 1:pos + 1 + int(n_chars)]
    pos += 1 + int(n_chars)
    head, n_spec = lines[pos].split(" ")
    if head != "#specials":
        raise ValueError(f"missing specials section in {path}")
    specials = dict(line.split(" ") for line in lines[pos + 1:pos + 1 + int(n_spec)])
    if {k: int(v) for k, v in specials.items()} != {t: i for i, t in enumerate(SPECIAL_TOKENS)}:
        raise ValueError("unsupported special-token layout")
    return _make_vocab(chars, merges)


def read_corpus(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]
