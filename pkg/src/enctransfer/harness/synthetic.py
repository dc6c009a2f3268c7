"""Synthetic English with three registers and cipher languages derived from it.

* task     -- statements about image pairs (the downstream-task register)
* caption  -- short scene descriptions
* generic  -- administrative / news-like prose, occasionally mentioning objects

A cipher language substitutes every English word with a word spelled in a
private alphabet and reorders words by a fixed rule, so gold word
alignments are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..alignment import AlignmentLinkSet

NOUNS = (
    "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird", "car", "bus",
    "truck", "bike", "boat", "ball", "kite", "table", "chair", "cup", "plate", "bowl",
    "tree", "flower", "train", "plane", "cow", "elephant", "giraffe", "zebra", "bear", "clock",
    "umbrella", "bench", "pizza", "cake", "laptop", "phone", "book", "bottle", "sheep", "duck",
)
IRREGULAR_PLURALS = {"man": "men", "woman": "women", "bus": "buses", "bench": "benches", "policy": "policies",
                     "economy": "economies", "strategy": "strategies"}
COLORS = ("red", "blue", "green", "white", "black", "yellow", "brown", "orange", "gray", "pink")
SIZES = ("small", "large", "big", "little", "tall", "old", "young")
VERBS = ("sits", "stands", "runs", "walks", "plays", "jumps", "eats", "rides", "sleeps", "rests", "waits")
VERBS_PL = ("sit", "stand", "run", "walk", "play", "jump", "eat", "ride", "sleep", "rest", "wait")
PREPS = ("on", "near", "under", "beside", "behind", "in", "above", "below")
PLACES = ("street", "field", "beach", "road", "grass", "room", "kitchen", "park", "water", "snow", "sand", "floor")
NUMBERS = ("two", "three", "four", "five")

ORGS = ("committee", "government", "council", "company", "commission", "parliament", "court", "bank",
        "ministry", "union")
GNOUNS = ("budget", "policy", "report", "law", "agreement", "decision", "proposal", "market", "economy",
          "program", "strategy", "question", "problem", "system", "price")
GADJS = ("annual", "public", "national", "economic", "important", "new", "financial", "european", "social",
         "political")
GVERBS = ("approved", "discussed", "announced", "rejected", "reviewed", "adopted", "presented", "supported",
          "increased", "reduced")
GVERBS_BASE = ("approve", "discuss", "announce", "reject", "review", "adopt", "present", "support",
               "increase", "reduce")
MODALS = ("must", "should", "will", "can")
TIME_WHEN = ("this", "last", "next")
TIME_UNIT = ("year", "week", "month")
QUALITIES = ("difficult", "necessary", "clear", "possible", "urgent", "important")
PRONOUNS = ("i", "we", "they")
THINK = ("think", "believe", "know")
DETS = ("a", "the", "one", "this", "that", "each")
SIDES = ("left", "right")
SHOW_SG = ("shows", "contains", "has")
SHOW_PL = ("show", "contain", "have")

FUNCTION_WORDS = ("and", "of", "to", "was", "by", "is", "very", "please", "before", "for", "with", "image",
                  "images", "there", "are", "exactly", "both", "in", "at", "today", "new", "only", "also",
                  "some", "not", "all", "our", "their")

PERMUTATIONS = ("identity", "reverse", "swap")

REGISTERS = ("task", "caption", "generic")


def plural(noun: str) -> str:
    return IRREGULAR_PLURALS.get(noun, noun + "s")


def english_vocabulary() -> list[str]:
    words = set(FUNCTION_WORDS) | set(NOUNS) | {plural(n) for n in NOUNS + GNOUNS}
    for group in (COLORS, SIZES, VERBS, VERBS_PL, PREPS, PLACES, NUMBERS, ORGS, GNOUNS, GADJS, GVERBS,
                  GVERBS_BASE, MODALS, TIME_WHEN, TIME_UNIT, QUALITIES, PRONOUNS, THINK, DETS, SIDES,
                  SHOW_SG, SHOW_PL):
        words |= set(group)
    return sorted(words)


class EnglishGenerator:
    """Seeded compositional sampler.

    Optional constituents keep any two function words from always
    co-occurring, which a lexical aligner could not tell apart.
    """

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def _pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def _maybe(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def _np(self, color_prob: float = 0.4, plural_ok: bool = True) -> tuple[list[str], bool]:
        """Noun phrase and whether it is plural."""
        if plural_ok and self._maybe(0.3):
            words = [self._pick(NUMBERS + ("some",))]
            is_plural = True
        else:
            words = [self._pick(DETS)]
            is_plural = False
        if self._maybe(0.3):
            words.append(self._pick(SIZES))
        if self._maybe(color_prob):
            words.append(self._pick(COLORS))
        noun = self._pick(NOUNS)
        words.append(plural(noun) if is_plural else noun)
        return words, is_plural

    def _place(self) -> list[str]:
        return [self._pick(PREPS), self._pick(("the", "a", "this")), self._pick(PLACES)]

    def _time(self) -> list[str]:
        if self._maybe(0.25):
            return ["today"]
        return [self._pick(TIME_WHEN), self._pick(TIME_UNIT)]

    def caption(self) -> str:
        if self._maybe(0.2):
            obj, pl = self._np(0.6)
            return " ".join(["there", "are" if pl else "is"] + obj + self._place())
        subj, pl = self._np(0.6)
        if self._maybe(0.3):
            other, _ = self._np(0.3, plural_ok=False)
            subj = (["both"] if self._maybe(0.3) else []) + subj + ["and"] + other
            pl = True
        s = subj + [self._pick(VERBS_PL if pl else VERBS)]
        if self._maybe(0.25):
            obj, _ = self._np(0.3)
            s += ["with"] + obj
        if self._maybe(0.8):
            s += self._place()
        return " ".join(s)

    def task(self) -> str:
        r = int(self.rng.integers(4))
        where = ["in", "the", self._pick(SIDES), "image"] if self._maybe(0.5) else ["in", self._pick(("both", "the", "two", "all")), "images"]
        obj, pl = self._np(0.5)
        if self._maybe(0.3):
            obj = ["exactly"] + obj if pl else obj
        if r == 0:
            s = ["there", "are" if pl else "is"] + obj + where
        elif r == 1:
            subj = ["the", self._pick(SIDES), "image"] if self._maybe(0.6) else ["one", "image"]
            s = subj + [self._pick(SHOW_SG)] + obj
        elif r == 2:
            s = [self._pick(("both", "the", "two", "all")), "images", self._pick(SHOW_PL)] + obj
        else:
            s = where + obj + [self._pick(VERBS_PL if pl else VERBS)]
        if self._maybe(0.3):
            s += self._place()
        return " ".join(s)

    def generic(self) -> str:
        r = int(self.rng.integers(7))
        org = [self._pick(("the", "our", "their", "this")), self._pick(ORGS)]
        thing = [self._pick(("the", "a", "our", "their", "that"))] + ([self._pick(GADJS)] if self._maybe(0.5) else []) + [self._pick(GNOUNS)]
        if r == 0:
            s = org + [self._pick(GVERBS)] + thing
        elif r == 1:
            s = [self._pick(PRONOUNS), self._pick(MODALS)] + (["not"] if self._maybe(0.2) else []) + [
                self._pick(GVERBS_BASE)] + thing
            if self._maybe(0.5):
                s += ["of"] + org
        elif r == 2:
            s = thing + ["was"] + (["also"] if self._maybe(0.2) else []) + [self._pick(GVERBS)]
            if self._maybe(0.6):
                s += ["by"] + org
        elif r == 3:
            s = [self._pick(PRONOUNS), self._pick(THINK)] + (["that"] if self._maybe(0.5) else []) + thing + [
                self._pick(("is", "was"))] + (
                ["very"] if self._maybe(0.5) else []) + [self._pick(QUALITIES)]
        elif r == 4:
            s = (["please"] if self._maybe(0.5) else []) + [self._pick(GVERBS_BASE)] + thing
            if self._maybe(0.4):
                s += ["for"] + org
            if self._maybe(0.4):
                s += ["before"] + self._time()
                return " ".join(s)
        elif r == 5:
            if self._maybe(0.5):
                s = ["there", "are", self._pick(NUMBERS + ("some",)), plural(self._pick(GNOUNS))]
            else:
                s = ["there", "is"] + thing
            if self._maybe(0.5):
                s += ["for"] + org
        else:
            if self._maybe(0.5):
                s = org + ["has"] + thing
            else:
                s = [self._pick(PRONOUNS), "have"] + (["all"] if self._maybe(0.3) else []) + [
                    self._pick(("the", "our", "their")), plural(self._pick(GNOUNS))]
        if self._maybe(0.3):
            s += (["with"] + self._np(0.2)[0]) if self._maybe(0.3) else self._time()
        return " ".join(s)

    def sample(self, register: str, n: int, unique: bool = False, exclude: Iterable[str] = ()) -> list[str]:
        make = {"task": self.task, "caption": self.caption, "generic": self.generic}[register]
        out: list[str] = []
        seen = set(exclude)
        attempts = 0
        while len(out) < n:
            s = make()
            attempts += 1
            if unique or seen:
                if s in seen:
                    if attempts > 50 * n + 1000:
                        raise RuntimeError(f"cannot draw {n} distinct {register} sentences")
                    continue
                if unique:
                    seen.add(s)
            out.append(s)
        return out


def has_color(sentence: str) -> bool:
    """The binary sentence property used by the proxy task."""
    colors = set(COLORS)
    return any(w in colors for w in sentence.split())


# ----------------------------------------------------------------- ciphers

ALPHABET_SIZE = 12
ALPHABET_BASE = 0x4E00  # consecutive CJK ideographs, a disjoint block per language


def cipher_alphabet(index: int) -> list[str]:
    start = ALPHABET_BASE + ALPHABET_SIZE * index
    return [chr(start + c) for c in range(ALPHABET_SIZE)]


@dataclass(frozen=True)
class CipherSpec:
    lang: str
    index: int
    mapping: dict[str, str]
    permutation: str
    seed: int

    def __post_init__(self):
        if len(set(self.mapping.values())) != len(self.mapping):
            raise ValueError(f"{self.lang}: substitution is not a bijection")
        if self.permutation not in PERMUTATIONS:
            raise ValueError(f"unknown permutation rule {self.permutation!r}")

    @property
    def target_vocab(self) -> set[str]:
        return set(self.mapping.values())

    def inverse(self) -> dict[str, str]:
        return {v: k for k, v in self.mapping.items()}


def make_cipher_spec(index: int, vocabulary: Sequence[str], permutation: str | None = None,
                     seed: int = 0) -> CipherSpec:
    """Bijective substitution into alphabet block ``index``."""
    rng = np.random.default_rng([seed, index, 17])
    alphabet = cipher_alphabet(index)
    mapping: dict[str, str] = {}
    used: set[str] = set()
    for word in sorted(vocabulary):
        while True:
            length = int(rng.integers(2, 4))
            form = "".join(alphabet[int(c)] for c in rng.integers(ALPHABET_SIZE, size=length))
            if form not in used:
                break
        used.add(form)
        mapping[word] = form
    perm = permutation or PERMUTATIONS[index % len(PERMUTATIONS)]
    return CipherSpec(f"x{index:02d}", index, mapping, perm, seed)


def permutation_order(n: int, rule: str) -> list[int]:
    """order[i] = target position of source word i."""
    if rule == "identity":
        return list(range(n))
    if rule == "reverse":
        return [n - 1 - i for i in range(n)]
    if rule == "swap":
        return [i ^ 1 if (i ^ 1) < n else i for i in range(n)]
    raise ValueError(f"unknown permutation rule {rule!r}")


@dataclass(frozen=True)
class CipherPair:
    source: str
    target: str
    lang: str
    gold: AlignmentLinkSet | None  # None for deliberately mismatched pairs


def encipher(sentence: str, spec: CipherSpec) -> tuple[str, AlignmentLinkSet]:
    words = sentence.split()
    try:
        mapped = [spec.mapping[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"{spec.lang}: no substitution for word {exc.args[0]!r}") from None
    order = permutation_order(len(words), spec.permutation)
    out = [""] * len(words)
    for i, pos in enumerate(order):
        out[pos] = mapped[i]
    gold = AlignmentLinkSet(((i, order[i]) for i in range(len(words))), len(words), len(words))
    return " ".join(out), gold


def decipher(sentence: str, spec: CipherSpec) -> str:
    inv = spec.inverse()
    words = sentence.split()
    order = permutation_order(len(words), spec.permutation)
    return " ".join(inv[words[order[i]]] for i in range(len(words)))


def check_disjoint(specs: Sequence[CipherSpec], english: Iterable[str] = ()) -> None:
    seen: dict[str, str] = {w: "en" for w in english}
    for spec in specs:
        for form in spec.mapping.values():
            if form in seen:
                raise ValueError(f"vocabulary collision: {form!r} used by {seen[form]} and {spec.lang}")
            seen[form] = spec.lang


def make_cipher_language(english_corpus: Sequence[str], spec: CipherSpec,
                         existing: Sequence[CipherSpec] = ()) -> list[CipherPair]:
    """Encipher every sentence; the gold word alignment comes for free."""
    if not english_corpus:
        raise ValueError("empty corpus")
    check_disjoint(list(existing) + [spec], english_vocabulary())
    out = []
    for s in english_corpus:
        tgt, gold = encipher(s, spec)
        out.append(CipherPair(s, tgt, spec.lang, gold))
    return out


def make_pool(spec: CipherSpec, size: int, caption_fraction: float, noise: float, seed: int) -> list[CipherPair]:
    """Authentic-parallel-data stand-in: mostly generic prose, some captions,
    and a ``noise`` fraction of pairs whose target translates another sentence."""
    gen = EnglishGenerator(seed)
    rng = np.random.default_rng([seed, 99])
    english = [gen.caption() if rng.random() < caption_fraction else gen.generic() for _ in range(size)]
    pairs = []
    for i, s in enumerate(english):
        if rng.random() < noise:
            other = english[int(rng.integers(size))]
            if other != s:
                tgt, _ = encipher(other, spec)
                pairs.append(CipherPair(s, tgt, spec.lang, None))
                continue
        tgt, gold = encipher(s, spec)
        pairs.append(CipherPair(s, tgt, spec.lang, gold))
    return pairs


def word_embedding_table(vocabulary: Sequence[str], dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 4242])
    return {w: rng.normal(size=dim) for w in sorted(vocabulary)}


class CipherEmbedder:
    """Token embeddings that know the cipher map: a cipher word shares the
    vector of its English source word."""

    def __init__(self, specs: Sequence[CipherSpec], dim: int = 32, seed: int = 0):
        self.table = word_embedding_table(english_vocabulary(), dim, seed)
        self.inverse = {s.lang: s.inverse() for s in specs}

    def __call__(self, sentence: str, lang: str) -> np.ndarray:
        words = sentence.split()
        if lang != "en":
            inv = self.inverse[lang]
            words = [inv[w] for w in words]
        return np.stack([self.table[w] for w in words])
