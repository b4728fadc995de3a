"""Deterministic subword tokenizer.

Text is lowercased, split on whitespace, punctuation is detached into
single-character tokens, and each word is split greedily into the longest
vocabulary pieces (continuations carry a ``##`` prefix). A word that cannot
be covered completely becomes ``[UNK]``. Every piece remembers its surface
text and character offsets so that spans can be decoded back to the
original string even when the piece itself is ``[UNK]``.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, NamedTuple, Sequence

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)

_SPECIAL_RE = re.compile(r"\[(?:PAD|UNK|CLS|SEP)\]")
_MAX_WORD_CHARS = 100


class Piece(NamedTuple):
    token: str
    surface: str
    joined: bool  # attaches to the previous piece without whitespace
    start: int
    end: int


def _is_punct(ch: str) -> bool:
    return not (ch.isalnum() or ch.isspace())


def _basic_pieces(text: str) -> list[Piece]:
    out: list[Piece] = []
    pos = 0
    chunks: list[tuple[int, int, bool]] = []
    for m in _SPECIAL_RE.finditer(text):
        if m.start() > pos:
            chunks.append((pos, m.start(), False))
        chunks.append((m.start(), m.end(), True))
        pos = m.end()
    if pos < len(text):
        chunks.append((pos, len(text), False))

    prev_end = None
    for start, end, special in chunks:
        if special:
            tok = text[start:end]
            out.append(Piece(tok, tok, prev_end == start, start, end))
            prev_end = end
            continue
        i = start
        while i < end:
            ch = text[i]
            if ch.isspace():
                i += 1
                continue
            if _is_punct(ch):
                out.append(Piece(ch.lower(), ch.lower(), prev_end == i, i, i + 1))
                prev_end = i + 1
                i += 1
                continue
            j = i
            while j < end and not text[j].isspace() and not _is_punct(text[j]):
                j += 1
            word = text[i:j].lower()
            out.append(Piece(word, word, prev_end == i, i, j))
            prev_end = j
            i = j
    return out


class Tokenizer:
    """Greedy longest-match subword tokenizer.

    With ``vocab=None`` only the basic split is applied and nothing maps to
    ``[UNK]``.
    """

    def __init__(self, vocab: Iterable[str] | None = None):
        self.vocab = None if vocab is None else frozenset(vocab) | set(SPECIAL_TOKENS)
        # utterances recur in every later turn's history
        self._memo: dict[str, tuple[Piece, ...]] = {}

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    def tokenize(self, text: str) -> list[str]:
        return [p.token for p in self.tokenize_aligned(text)]

    def tokenize_aligned(self, text: str) -> list[Piece]:
        hit = self._memo.get(text)
        if hit is not None:
            return list(hit)
        pieces = _basic_pieces(text)
        if self.vocab is not None:
            out: list[Piece] = []
            for p in pieces:
                if p.token in SPECIAL_TOKENS or p.token in self.vocab:
                    out.append(p)
                else:
                    out.extend(self._split_word(p))
            pieces = out
        if len(self._memo) < 200_000:
            self._memo[text] = tuple(pieces)
        return pieces

    def _split_word(self, p: Piece) -> list[Piece]:
        word = p.token
        if len(word) > _MAX_WORD_CHARS:
            return [Piece(UNK, p.surface, p.joined, p.start, p.end)]
        sub: list[Piece] = []
        i = 0
        while i < len(word):
            j = len(word)
            found = None
            while j > i:
                cand = word[i:j] if i == 0 else "##" + word[i:j]
                if cand in self.vocab:
                    found = cand
                    break
                j -= 1
            if found is None:
                return [Piece(UNK, p.surface, p.joined, p.start, p.end)]
            sub.append(Piece(found, word[i:j], p.joined if i == 0 else True, p.start + i, p.start + j))
            i = j
        return sub

    def to_list(self) -> list[str] | None:
        return None if self.vocab is None else sorted(self.vocab)


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens with single spaces, merging ``##`` continuation pieces."""
    out: list[str] = []
    for t in tokens:
        if t.startswith("##") and out:
            out[-1] += t[2:]
        else:
            out.append(t)
    return " ".join(out)


def join_pieces(surfaces: Sequence[str], joined: Sequence[bool]) -> str:
    """Rebuild text from piece surfaces, restoring original adjacency."""
    buf = []
    for k, (s, j) in enumerate(zip(surfaces, joined)):
        if k and not j:
            buf.append(" ")
        buf.append(s)
    return "".join(buf)


def build_vocab(
    texts: Iterable[str],
    min_count: int = 1,
    suffix_lengths: Sequence[int] = (2, 3),
    suffix_min_words: int = 20,
) -> list[str]:
    """Whole words seen ``min_count`` times plus frequent ``##`` suffix pieces.

    A suffix becomes a continuation piece when at least ``suffix_min_words``
    distinct training words end with it.
    """
    counts: Counter[str] = Counter()
    for text in texts:
        for p in _basic_pieces(text):
            if p.token not in SPECIAL_TOKENS:
                counts[p.token] += 1
    vocab = {w for w, c in counts.items() if c >= min_count}
    for n in suffix_lengths:
        ends = Counter(w[-n:] for w in counts if len(w) > n + 1 and w[-n:].isalnum())
        vocab.update("##" + s for s, c in ends.items() if c >= suffix_min_words)
    return sorted(vocab | set(SPECIAL_TOKENS))
