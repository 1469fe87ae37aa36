"""k-mer and byte-pair-encoding tokenizers over biological alphabets."""
from __future__ import annotations

import itertools
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .data import Alphabet, Sequence

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]")


class Vocab:
    """Token <-> id bijection with the four specials pinned to ids 0-3."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(SPECIALS)
        for tok in tokens:
            if tok in SPECIALS:
                raise ValueError(f"{tok!r} collides with a special token")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok: str):
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def to_json(self) -> dict[str, int]:
        return dict(self.stoi)


def _residues(seq: Sequence | str) -> str:
    return seq.residues if isinstance(seq, Sequence) else seq


@dataclass
class KmerTokenizer:
    k: int
    overlapping: bool = True
    alphabet: Alphabet = Alphabet.DNA
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.alphabet = Alphabet(self.alphabet)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        # wildcards are in-vocab only as 1-mers; longer k-mers containing one map to UNK
        base = self.alphabet.chars if self.k == 1 else self.alphabet.core
        self.vocab = Vocab("".join(p) for p in itertools.product(base, repeat=self.k))

    @property
    def id(self) -> str:
        return f"kmer{self.k}" + ("" if self.overlapping else "-nov")

    def pieces(self, seq: Sequence | str) -> list[str]:
        s = _residues(seq)
        if len(s) < self.k:
            raise ValueError(f"sequence of length {len(s)} shorter than k={self.k}")
        stride = 1 if self.overlapping else self.k
        return [s[i:i + self.k] for i in range(0, len(s) - self.k + 1, stride)]

    def encode(self, seq: Sequence | str) -> list[int]:
        return [self.vocab.id(p) for p in self.pieces(seq)]

    def decode(self, ids: list[int]) -> str:
        toks = [self.vocab.token(i) for i in ids]
        if not self.overlapping or not toks:
            return "".join(toks)
        return toks[0] + "".join(t[-1] for t in toks[1:])

    def to_json(self) -> dict:
        return {"type": "kmer", "k": self.k, "overlapping": self.overlapping,
                "alphabet": self.alphabet.value, "vocab": self.vocab.to_json()}


@dataclass
class BpeTokenizer:
    merges: list[tuple[str, str]]
    alphabet: Alphabet = Alphabet.DNA
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.alphabet = Alphabet(self.alphabet)
        self.merges = [tuple(m) for m in self.merges]
        known = set(self.alphabet.chars)
        tokens = list(self.alphabet.chars)
        for left, right in self.merges:
            if left not in known or right not in known:
                raise ValueError(f"merge ({left!r}, {right!r}) uses a token not yet derived")
            merged = left + right
            if merged not in known:
                known.add(merged)
                tokens.append(merged)
        self.vocab = Vocab(tokens)
        self._rank = {m: i for i, m in enumerate(self.merges)}

    @property
    def id(self) -> str:
        return f"bpe{len(self.vocab)}"

    def pieces(self, seq: Sequence | str) -> list[str]:
        toks = list(_residues(seq))
        # apply merges in training order, each one left to right
        for left, right in self.merges:
            if len(toks) < 2:
                break
            toks = _apply_merge(toks, left, right)
        return toks

    def encode(self, seq: Sequence | str) -> list[int]:
        return [self.vocab.id(p) for p in self.pieces(seq)]

    def decode(self, ids: list[int]) -> str:
        return "".join(self.vocab.token(i) for i in ids)

    def to_json(self) -> dict:
        return {"type": "bpe", "alphabet": self.alphabet.value,
                "merges": [list(m) for m in self.merges], "vocab": self.vocab.to_json()}


def _apply_merge(toks: list[str], left: str, right: str) -> list[str]:
    out = []
    i = 0
    n = len(toks)
    while i < n:
        if i + 1 < n and toks[i] == left and toks[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(toks[i])
            i += 1
    return out


def bpe_train(corpus: list[Sequence | str], vocab_size: int = 512,
              alphabet: Alphabet | str = Alphabet.DNA) -> BpeTokenizer:
    """Learn merges by repeatedly fusing the most frequent adjacent pair.

    Each whole sequence is one word.  Equal counts go to the lexicographically
    smallest (left, right) pair; training stops early once no pair occurs
    at least twice.
    """
    alphabet = Alphabet(alphabet)
    if not corpus:
        raise ValueError("cannot train BPE on an empty corpus")
    base = len(alphabet.chars) + len(SPECIALS)
    if vocab_size <= base:
        raise ValueError(f"vocab_size must exceed {base} (alphabet + specials), got {vocab_size}")
    words = [list(_residues(s)) for s in corpus]
    counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        for pair in zip(w, w[1:]):
            counts[pair] += 1
            where[pair].add(wi)

    merges: list[tuple[str, str]] = []
    while len(merges) < vocab_size - base and counts:
        top = max(counts.values())
        if top < 2:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        for wi in sorted(where.pop(pair, ())):
            old = words[wi]
            for p in zip(old, old[1:]):
                counts[p] -= 1
                if counts[p] == 0:
                    del counts[p]
            new = _apply_merge(old, *pair)
            words[wi] = new
            for p in zip(new, new[1:]):
                counts[p] += 1
                where[p].add(wi)
    return BpeTokenizer(merges, alphabet)


Tokenizer = KmerTokenizer | BpeTokenizer


def tokenizer_from_json(d: dict) -> Tokenizer:
    if d["type"] == "kmer":
        return KmerTokenizer(d["k"], d.get("overlapping", True), Alphabet(d.get("alphabet", "DNA")))
    if d["type"] == "bpe":
        return BpeTokenizer([tuple(m) for m in d["merges"]], Alphabet(d.get("alphabet", "DNA")))
    raise ValueError(f"unknown tokenizer type {d['type']!r}")


def save_tokenizer(tok: Tokenizer, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tok.to_json(), indent=1))


def load_tokenizer(path: str | Path) -> Tokenizer:
    return tokenizer_from_json(json.loads(Path(path).read_text()))
