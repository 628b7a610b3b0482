"""Domain-adapted WordPiece tokenization: training, vocabulary merging, encoding.

The vocabulary convention is BERT-style: word-initial pieces are stored bare,
word-internal pieces carry a continuation prefix (default ``##``). Training
scores candidate merges by pair frequency divided by the product of the part
frequencies; segmentation is greedy longest-match-first. Both are
deterministic for fixed inputs.
"""

from __future__ import annotations

import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
CONTINUATION_PREFIX = "##"

PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN = SPECIAL_TOKENS


def pretokenize(text: str, lowercase: bool = True) -> list[str]:
    """Split on Unicode whitespace, then split punctuation off as separate words."""
    if lowercase:
        text = text.lower()
    words: list[str] = []
    for chunk in text.split():
        buf: list[str] = []
        for ch in chunk:
            if unicodedata.category(ch).startswith("P"):
                if buf:
                    words.append("".join(buf))
                    buf.clear()
                words.append(ch)
            else:
                buf.append(ch)
        if buf:
            words.append("".join(buf))
    return words


class Vocabulary:
    """Ordered token inventory with contiguous ids and a continuation-prefix convention."""

    def __init__(
        self,
        tokens: Iterable[str],
        continuation_prefix: str = CONTINUATION_PREFIX,
        special_tokens: Sequence[str] = SPECIAL_TOKENS,
    ):
        self.tokens = list(tokens)
        self.continuation_prefix = continuation_prefix
        self.special_tokens = tuple(special_tokens)
        self.id_of: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if not tok:
                raise ValueError("empty token string")
            if tok == continuation_prefix:
                raise ValueError("bare continuation prefix is not a valid token")
            if tok in self.id_of:
                raise ValueError(f"duplicate token {tok!r}")
            self.id_of[tok] = i
        for sp in self.special_tokens:
            if sp not in self.id_of:
                raise ValueError(f"special token {sp!r} missing from vocabulary")
            if sp.startswith(continuation_prefix):
                raise ValueError(f"special token {sp!r} collides with continuation prefix")
        self._special_ids = frozenset(self.id_of[sp] for sp in self.special_tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and self.continuation_prefix == other.continuation_prefix
            and self.special_tokens == other.special_tokens
        )

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"unknown token id {token_id}")
        return self.tokens[token_id]

    def is_special_id(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def is_continuation(self, token: str) -> bool:
        return token.startswith(self.continuation_prefix)

    @property
    def special_ids(self) -> frozenset[int]:
        return self._special_ids

    def save(self, path: str | Path) -> None:
        """Write one token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(
        cls,
        path: str | Path,
        continuation_prefix: str = CONTINUATION_PREFIX,
        special_tokens: Sequence[str] = SPECIAL_TOKENS,
    ) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = [ln for ln in lines if ln]
        return cls(tokens, continuation_prefix, special_tokens)


@dataclass
class EncodedSequence:
    """Token ids plus the word-boundary structure needed for whole-word masking.

    ``word_groups`` are half-open ``(start, end)`` spans over ``ids``, one per
    source word; they partition the non-special positions.
    """

    ids: list[int]
    word_groups: list[tuple[int, int]]
    attention_mask: list[int]
    special_positions: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask length mismatch")
        covered: set[int] = set(self.special_positions)
        prev_end = None
        for start, end in self.word_groups:
            if not 0 <= start < end <= len(self.ids):
                raise ValueError(f"bad word group span ({start}, {end})")
            if prev_end is not None and start < prev_end:
                raise ValueError("word groups overlap or are unordered")
            prev_end = end
            span = set(range(start, end))
            if span & set(self.special_positions):
                raise ValueError("word group overlaps a special position")
            covered |= span
        if covered != set(range(len(self.ids))):
            raise ValueError("word groups and specials do not partition the sequence")

    def non_special_length(self) -> int:
        return len(self.ids) - len(self.special_positions)


@dataclass
class TokenizerReport:
    """Sub-token counts and fertility for two tokenizers over one corpus."""

    corpus_id: str
    tokens_base: int
    tokens_merged: int
    reduction_pct: float
    fertility_base: float
    fertility_merged: float

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "tokens_base": self.tokens_base,
            "tokens_merged": self.tokens_merged,
            "reduction_pct": self.reduction_pct,
            "fertility_base": self.fertility_base,
            "fertility_merged": self.fertility_merged,
        }


class TokenizerModel:
    """Greedy longest-match WordPiece segmenter over a fixed vocabulary."""

    def __init__(
        self,
        vocab: Vocabulary,
        max_chars_per_word: int = 100,
        unk_token: str = UNK_TOKEN,
        lowercase: bool = True,
    ):
        if unk_token not in vocab:
            raise ValueError(f"unk token {unk_token!r} not in vocabulary")
        self.vocab = vocab
        self.max_chars_per_word = max_chars_per_word
        self.unk_token = unk_token
        self.lowercase = lowercase

    def segment_word(self, word: str) -> list[str]:
        """Greedy longest-match segmentation of one word; [UNK] if it fails."""
        if len(word) > self.max_chars_per_word:
            return [self.unk_token]
        prefix = self.vocab.continuation_prefix
        pieces: list[str] = []
        i = 0
        while i < len(word):
            end = len(word)
            match = None
            while end > i:
                sub = word[i:end]
                cand = sub if i == 0 else prefix + sub
                if cand in self.vocab:
                    match = cand
                    break
                end -= 1
            if match is None:
                return [self.unk_token]
            pieces.append(match)
            i = end
        return pieces

    def encode(self, text: str) -> EncodedSequence:
        ids: list[int] = []
        groups: list[tuple[int, int]] = []
        for word in pretokenize(text, self.lowercase):
            pieces = self.segment_word(word)
            start = len(ids)
            ids.extend(self.vocab.id_of[p] for p in pieces)
            groups.append((start, len(ids)))
        return EncodedSequence(ids, groups, [1] * len(ids))

    def tokens(self, text: str) -> list[str]:
        """Token strings for ``text``; convenience over :meth:`encode`."""
        return [self.vocab.token(i) for i in self.encode(text).ids]

    def decode(self, ids: Sequence[int]) -> str:
        prefix = self.vocab.continuation_prefix
        words: list[str] = []
        for token_id in ids:
            tok = self.vocab.token(token_id)
            if self.vocab.is_special_id(token_id):
                continue
            if tok.startswith(prefix) and words:
                words[-1] += tok[len(prefix):]
            elif tok.startswith(prefix):
                words.append(tok[len(prefix):])
            else:
                words.append(tok)
        return " ".join(words)


def sequence_from_ids(vocab: Vocabulary, ids: Sequence[int]) -> EncodedSequence:
    """Reconstruct word groups for a raw id sequence (e.g. a packed chunk).

    Continuation tokens extend the preceding group; special tokens break
    groups and land in ``special_positions``.
    """
    groups: list[tuple[int, int]] = []
    specials: set[int] = set()
    start = None
    for pos, token_id in enumerate(ids):
        tok = vocab.token(token_id)
        if vocab.is_special_id(token_id):
            if start is not None:
                groups.append((start, pos))
                start = None
            specials.add(pos)
        elif vocab.is_continuation(tok) and start is not None:
            continue
        else:
            if start is not None:
                groups.append((start, pos))
            start = pos
    if start is not None:
        groups.append((start, len(ids)))
    return EncodedSequence(list(ids), groups, [1] * len(ids), frozenset(specials))


def _strip_prefix(symbol: str, prefix: str) -> str:
    return symbol[len(prefix):] if symbol.startswith(prefix) else symbol


def train_wordpiece(
    corpus: Iterable[str],
    target_size: int,
    min_frequency: int = 2,
    lowercase: bool = True,
    continuation_prefix: str = CONTINUATION_PREFIX,
    special_tokens: Sequence[str] = SPECIAL_TOKENS,
) -> Vocabulary:
    """Learn a WordPiece vocabulary of at most ``target_size`` tokens.

    Merges maximize pair frequency divided by the product of part frequencies,
    computed in exact integer arithmetic. Equal scores are broken by
    lexicographic order of the merged token (prefix-stripped text first), so
    training is reproducible.
    """
    word_counts: Counter[str] = Counter()
    for doc in corpus:
        word_counts.update(pretokenize(doc, lowercase))
    if not word_counts:
        raise ValueError("empty corpus")

    reps = {
        w: [w[0]] + [continuation_prefix + ch for ch in w[1:]] for w in word_counts
    }
    alphabet = sorted({s for rep in reps.values() for s in rep})
    base = list(special_tokens) + [s for s in alphabet if s not in special_tokens]
    if target_size < len(base):
        raise ValueError(
            f"target_size {target_size} below specials + alphabet ({len(base)})"
        )

    vocab: dict[str, None] = dict.fromkeys(base)
    sym_counts: Counter[str] = Counter()
    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: defaultdict[tuple[str, str], set[str]] = defaultdict(set)

    def add_word(word: str, count: int) -> None:
        rep = reps[word]
        for s in rep:
            sym_counts[s] += count
        for pair in zip(rep, rep[1:]):
            pair_counts[pair] += count
            pair_words[pair].add(word)

    def remove_word(word: str, count: int) -> None:
        rep = reps[word]
        for s in rep:
            sym_counts[s] -= count
        for pair in zip(rep, rep[1:]):
            pair_counts[pair] -= count
            if pair_counts[pair] <= 0:
                del pair_counts[pair]
                pair_words.pop(pair, None)
            else:
                pair_words[pair].discard(word)

    for w, c in word_counts.items():
        add_word(w, c)

    def merge_rep(rep: list[str], pair: tuple[str, str], merged: str) -> list[str]:
        out: list[str] = []
        i = 0
        while i < len(rep):
            if i + 1 < len(rep) and (rep[i], rep[i + 1]) == pair:
                out.append(merged)
                i += 2
            else:
                out.append(rep[i])
                i += 1
        return out

    while len(vocab) < target_size:
        best_pair = None
        best_merged = None
        best_num = best_den = 0
        best_key: tuple[str, str] | None = None
        for pair, pc in pair_counts.items():
            if pc < min_frequency:
                continue
            num = pc
            den = sym_counts[pair[0]] * sym_counts[pair[1]]
            merged = pair[0] + _strip_prefix(pair[1], continuation_prefix)
            key = (_strip_prefix(merged, continuation_prefix), merged)
            # compare num/den > best_num/best_den without floats
            if best_pair is None or num * best_den > best_num * den or (
                num * best_den == best_num * den and key < best_key
            ):
                best_pair, best_merged = pair, merged
                best_num, best_den, best_key = num, den, key
        if best_pair is None:
            break
        for w in sorted(pair_words.get(best_pair, ())):
            c = word_counts[w]
            remove_word(w, c)
            reps[w] = merge_rep(reps[w], best_pair, best_merged)
            add_word(w, c)
        if best_merged not in vocab:
            vocab[best_merged] = None

    return Vocabulary(list(vocab), continuation_prefix, special_tokens)


def merge_vocabularies(base: Vocabulary, domain: Vocabulary) -> Vocabulary:
    """Append domain tokens not already in ``base``; base ids are preserved."""
    if base.continuation_prefix != domain.continuation_prefix:
        raise ValueError("continuation prefixes differ")
    if set(base.special_tokens) != set(domain.special_tokens):
        raise ValueError("special-token sets differ")
    tokens = list(base.tokens)
    seen = set(tokens)
    for tok in domain.tokens:
        if tok not in seen:
            tokens.append(tok)
            seen.add(tok)
    return Vocabulary(tokens, base.continuation_prefix, base.special_tokens)


def filter_domain_terms(terms: Iterable[str], base: TokenizerModel) -> list[str]:
    """Keep only terms the base tokenizer splits into two or more sub-tokens."""
    kept = []
    for term in terms:
        n_pieces = sum(len(base.segment_word(w)) for w in pretokenize(term, base.lowercase))
        if n_pieces >= 2:
            kept.append(term)
    return kept


def count_subtokens(model: TokenizerModel, texts: Iterable[str]) -> tuple[int, int]:
    """(sub-token count excluding specials, word count) over ``texts``."""
    tokens = 0
    words = 0
    for text in texts:
        seq = model.encode(text)
        tokens += sum(1 for i in seq.ids if not model.vocab.is_special_id(i))
        words += len(seq.word_groups)
    return tokens, words


def tokenizer_compare(
    tok_a: TokenizerModel,
    tok_b: TokenizerModel,
    corpus: Sequence[str],
    corpus_id: str = "corpus",
) -> TokenizerReport:
    """Compare sub-token efficiency of two tokenizers over the same corpus."""
    if not corpus:
        raise ValueError("empty corpus")
    tokens_a, words_a = count_subtokens(tok_a, corpus)
    tokens_b, words_b = count_subtokens(tok_b, corpus)
    if tokens_a == 0:
        raise ValueError("base tokenizer produced no countable tokens")
    return TokenizerReport(
        corpus_id=corpus_id,
        tokens_base=tokens_a,
        tokens_merged=tokens_b,
        reduction_pct=100.0 * (tokens_a - tokens_b) / tokens_a,
        fertility_base=tokens_a / max(words_a, 1),
        fertility_merged=tokens_b / max(words_b, 1),
    )
