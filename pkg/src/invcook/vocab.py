"""Ingredient canonicalization and instruction tokenization."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

DEFAULT_HEAD_WORDS = frozenset({"cheese", "pepper"})

# irregular plurals and words that only look plural
_SINGULAR_EXCEPTIONS = {
    "leaves": "leaf", "loaves": "loaf", "halves": "half", "knives": "knife",
    "cookies": "cookie", "brownies": "brownie", "calories": "calorie",
    "molasses": "molasses", "asparagus": "asparagus", "couscous": "couscous",
    "hummus": "hummus", "swiss": "swiss", "citrus": "citrus", "anise": "anise",
    "lemongrass": "lemongrass", "grits": "grits", "oats": "oat", "greens": "greens",
    "bitters": "bitters", "series": "series", "chives": "chive",
}


class VocabularyError(ValueError):
    pass


def clean_name(raw: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return " ".join(raw.lower().split())


def singularize(word: str) -> str:
    if word in _SINGULAR_EXCEPTIONS:
        return _SINGULAR_EXCEPTIONS[word]
    if len(word) <= 3:
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith("oes"):
        return word[:-2]
    if word.endswith(("sses", "ches", "shes", "xes", "zes")):
        return word[:-2]
    if word.endswith(("ss", "us", "is")):
        return word
    if word.endswith("s"):
        return word[:-1]
    return word


def normalize_name(raw: str) -> str:
    name = clean_name(raw)
    if not name:
        raise VocabularyError(f"ingredient name {raw!r} is empty after normalization")
    words = name.split(" ")
    words[-1] = singularize(words[-1])
    return " ".join(words)


def _better(a: str, b: str, counts: Mapping[str, int]) -> bool:
    """True if ``a`` should survive over ``b``: fewer words, shorter, more frequent, then lexicographic."""
    ka = (len(a.split()), len(a), -counts.get(a, 0), a)
    kb = (len(b.split()), len(b), -counts.get(b, 0), b)
    return ka < kb


def _apply(mapping: dict[str, str], counts: Mapping[str, int]) -> Counter:
    out: Counter = Counter()
    for name, c in counts.items():
        out[mapping.get(name, name)] += c
    return out


def merge_shared_bigrams(names: Iterable[str], counts: Mapping[str, int]) -> tuple[Counter, dict[str, str]]:
    """Merge names sharing their first two or last two words.

    Sharing is transitive: each connected group collapses onto its best
    survivor. Returns merged counts and a name -> survivor log.
    """
    names = sorted(set(names))
    parent = {n: n for n in names}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    by_key: dict[tuple, str] = {}
    for n in names:
        w = n.split()
        if len(w) < 2:
            continue
        for key in (("first", tuple(w[:2])), ("last", tuple(w[-2:]))):
            if key in by_key:
                ra, rb = find(by_key[key]), find(n)
                if ra != rb:
                    parent[rb] = ra
            else:
                by_key[key] = n
    groups: dict[str, list[str]] = {}
    for n in names:
        groups.setdefault(find(n), []).append(n)
    log: dict[str, str] = {}
    for members in groups.values():
        best = members[0]
        for m in members[1:]:
            if _better(m, best, counts):
                best = m
        for m in members:
            if m != best:
                log[m] = best
    return _apply(log, {n: counts.get(n, 0) for n in names}), log


def cluster_head_words(names: Iterable[str], counts: Mapping[str, int],
                       head_words: Iterable[str] = DEFAULT_HEAD_WORDS,
                       use_corpus_words: bool = True) -> tuple[Counter, dict[str, str]]:
    """Cluster multi-word names onto a shared first or last word.

    A word qualifies as a cluster head when it is a standalone ingredient in
    ``names`` (if ``use_corpus_words``) or appears in ``head_words``. The last
    word is tried before the first.
    """
    names = sorted(set(names))
    standalone = {n for n in names if " " not in n} if use_corpus_words else set()
    heads = set(head_words) | standalone
    edge_count: Counter = Counter()
    for n in names:
        w = n.split()
        if len(w) >= 2:
            edge_count[w[0]] += 1
            if w[-1] != w[0]:
                edge_count[w[-1]] += 1
    for s in standalone:
        edge_count[s] += 1
    log: dict[str, str] = {}
    for n in names:
        w = n.split()
        if len(w) < 2:
            continue
        for cand in (w[-1], w[0]):
            if cand in heads and edge_count[cand] >= 2:
                log[n] = cand
                break
    return _apply(log, {n: counts.get(n, 0) for n in names}), log


def remove_plurals(counts: Mapping[str, int]) -> tuple[Counter, dict[str, str]]:
    log = {}
    for n in counts:
        s = normalize_name(n)
        if s != n:
            log[n] = s
    return _apply(log, counts), log


def filter_by_frequency(counts: Mapping[str, int], min_count: int = 10) -> Counter:
    kept = Counter({n: c for n, c in counts.items() if c >= min_count})
    if not kept:
        raise VocabularyError(f"no ingredient appears at least {min_count} times")
    return kept


@dataclass
class IngredientVocabulary:
    names: list[str]
    counts: list[int]
    merge_log: dict[str, str] = field(default_factory=dict)  # raw -> canonical (possibly dropped)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise VocabularyError("duplicate canonical names")
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def id_of(self, name: str) -> int:
        return self._index[name]

    def lookup(self, raw: str) -> int | None:
        """Canonical id of a raw name, or None if its canonical form was filtered out."""
        if raw in self.merge_log:
            canon = self.merge_log[raw]
        else:
            try:
                canon = self.canonicalize(raw)
            except VocabularyError:
                return None
        return self._index.get(canon)

    def canonicalize(self, raw: str) -> str:
        name = normalize_name(raw)
        if name in self._index:
            return name
        cleaned = clean_name(raw)
        return self.merge_log.get(cleaned, name)

    def ids_for(self, raw_names: Iterable[str]) -> list[int]:
        ids: list[int] = []
        for raw in raw_names:
            i = self.lookup(raw)
            if i is not None and i not in ids:
                ids.append(i)
        return ids

    def save(self, vocab_path, log_path=None) -> None:
        lines = [f"{i}\t{n}\t{c}\n" for i, (n, c) in enumerate(zip(self.names, self.counts))]
        Path(vocab_path).write_text("".join(lines), encoding="utf-8")
        if log_path is not None:
            log = "".join(f"{raw}\t{canon}\n" for raw, canon in sorted(self.merge_log.items()))
            Path(log_path).write_text(log, encoding="utf-8")

    @classmethod
    def load(cls, vocab_path, log_path=None) -> "IngredientVocabulary":
        names, counts = _read_table(vocab_path)
        log = {}
        if log_path is not None and Path(log_path).exists():
            for line in Path(log_path).read_text(encoding="utf-8").splitlines():
                raw, canon = line.split("\t")
                log[raw] = canon
        return cls(names, counts, log)


def _read_table(path) -> tuple[list[str], list[int]]:
    names, counts = [], []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        i, name, c = line.split("\t")
        if int(i) != k:
            raise VocabularyError(f"{path}: ids must be dense and sorted (line {k})")
        names.append(name)
        counts.append(int(c))
    return names, counts


def _corpus_counts(corpus) -> Counter:
    if isinstance(corpus, Mapping):
        return Counter(dict(corpus))
    counts: Counter = Counter()
    for item in corpus:
        if isinstance(item, str):
            counts[item] += 1
        elif isinstance(item, Mapping):
            for name in item.get("ingredients", []):
                counts[name] += 1
        else:
            name, c = item
            counts[name] += int(c)
    return counts


def build_ingredient_vocab(corpus, min_count: int = 10,
                           head_words: Iterable[str] = DEFAULT_HEAD_WORDS,
                           use_corpus_words: bool = True) -> IngredientVocabulary:
    """Merge shared bigrams, cluster head words, remove plurals, drop rare names.

    ``corpus`` is a mapping raw -> count, an iterable of (raw, count) pairs,
    raw names, or recipe records with an ``ingredients`` list. The three
    rewriting steps repeat until nothing changes, so the result is a fixed point.
    """
    raw_counts = _corpus_counts(corpus)
    if not raw_counts:
        raise VocabularyError("empty corpus")
    head_words = frozenset(head_words)
    current: Counter = Counter()
    to_current: dict[str, str] = {}
    for raw, c in raw_counts.items():
        cleaned = clean_name(raw)
        if not cleaned:
            raise VocabularyError(f"ingredient name {raw!r} is empty after normalization")
        to_current[raw] = cleaned
        current[cleaned] += c
    while True:
        merged, log_m = merge_shared_bigrams(current, current)
        clustered, log_c = cluster_head_words(merged, merged, head_words, use_corpus_words)
        singular, log_s = remove_plurals(clustered)
        step = {}
        for name in current:
            final = log_m.get(name, name)
            final = log_c.get(final, final)
            final = log_s.get(final, final)
            step[name] = final
        to_current = {raw: step[c] for raw, c in to_current.items()}
        if singular == current:
            break
        current = singular
    kept = filter_by_frequency(current, min_count)
    names = sorted(kept)
    return IngredientVocabulary(names, [kept[n] for n in names], dict(sorted(to_current.items())))


# -- instruction words --------------------------------------------------------

PAD, SOR, EOR, EOI, UNK = "<pad>", "<sor>", "<eor>", "<eoi>", "<unk>"
SPECIAL_TOKENS = (PAD, SOR, EOR, EOI, UNK)
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class WordVocabulary:
    words: list[str]
    counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if tuple(self.words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError("word vocabulary must start with the special tokens")
        if len(set(self.words)) != len(self.words):
            raise VocabularyError("duplicate words")
        if not self.counts:
            self.counts = [0] * len(self.words)
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    pad_id = property(lambda self: 0)
    sor_id = property(lambda self: 1)
    eor_id = property(lambda self: 2)
    eoi_id = property(lambda self: 3)
    unk_id = property(lambda self: 4)

    def id_of(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text(
            "".join(f"{i}\t{w}\t{c}\n" for i, (w, c) in enumerate(zip(self.words, self.counts))),
            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WordVocabulary":
        words, counts = _read_table(path)
        return cls(words, counts)


def build_word_vocab(recipes: Iterable[Sequence[str]], min_count: int = 10) -> WordVocabulary:
    """``recipes`` yields text segments (title first); rare words map to <unk>."""
    counts: Counter = Counter()
    for segments in recipes:
        for seg in segments:
            counts.update(tokenize(seg))
    kept = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS)
    words = list(SPECIAL_TOKENS) + kept
    return WordVocabulary(words, [0] * len(SPECIAL_TOKENS) + [counts[w] for w in kept])


def tokenize_instructions(segments: Sequence[str], vocab: WordVocabulary,
                          max_len: int | None = None) -> list[int]:
    """[sor, seg tokens..., eoi, ..., eor]; truncated to ``max_len`` keeping eor last."""
    ids = [vocab.sor_id]
    for seg in segments:
        ids.extend(vocab.id_of(w) for w in tokenize(seg))
        ids.append(vocab.eoi_id)
    if max_len is not None and len(ids) + 1 > max_len:
        ids = ids[: max_len - 1]
    ids.append(vocab.eor_id)
    return ids


def split_segments(ids: Sequence[int], vocab: WordVocabulary) -> list[list[int]]:
    """Cut a token stream into segments at eoi, ignoring sor/pad and stopping at eor."""
    segments: list[list[int]] = []
    cur: list[int] = []
    for i in ids:
        if i == vocab.eor_id:
            break
        if i in (vocab.sor_id, vocab.pad_id):
            continue
        if i == vocab.eoi_id:
            segments.append(cur)
            cur = []
        else:
            cur.append(int(i))
    if cur:
        segments.append(cur)
    return segments


def detokenize(ids: Sequence[int], vocab: WordVocabulary) -> list[str]:
    return [" ".join(vocab.words[i] for i in seg) for seg in split_segments(ids, vocab)]
