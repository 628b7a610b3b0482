"""Corpus preparation: cleaning, dedup, chunk packing, pair filtering, and
hard-negative mining.

All dataset files are UTF-8 JSON-lines. Documents carry {"id", "text"} and
optionally "source"; pairs carry {"query", "positive", "source_id"}; hard
negatives add a "negatives" list. Cleaning is regex-grade on purpose (the
inputs are abstracts, not arbitrary web pages).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tokenizer import SEP_TOKEN, TokenizerModel

Embedder = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class CorpusDocument:
    id: str
    text: str
    source: str = ""


@dataclass(frozen=True)
class SentencePair:
    query: str
    positive: str
    source_id: str = ""
    similarity: float | None = None

    def __post_init__(self):
        if not self.query or not self.positive:
            raise ValueError("pair texts must be non-empty")


@dataclass(frozen=True)
class HardNegativeRecord:
    query: str
    positive: str
    negatives: tuple[str, ...]
    source_id: str = ""
    flagged: bool = False

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if self.positive in self.negatives:
            raise ValueError("positive must not appear among negatives")
        if not self.negatives and not self.flagged:
            raise ValueError("empty negatives are only allowed on flagged records")


# ---------------------------------------------------------------------------
# cleaning

_TAG_RE = re.compile(r"<[^>]+>")
_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)


def clean_document(text: str) -> str:
    """Strip HTML tags, drop URLs, collapse repeated paragraphs, tidy spaces."""
    text = _TAG_RE.sub(" ", text)
    text = _URL_RE.sub(" ", text)
    paragraphs = []
    for raw in text.split("\n"):
        para = " ".join(raw.split())
        if not para:
            continue
        if paragraphs and paragraphs[-1] == para:
            continue
        paragraphs.append(para)
    return "\n".join(paragraphs)


def _normalized_hash(text: str) -> str:
    return hashlib.sha256(" ".join(text.split()).encode("utf-8")).hexdigest()


def dedup_corpus(docs: Iterable[CorpusDocument]) -> list[CorpusDocument]:
    """Drop exact duplicates (normalized text hash); first occurrence wins."""
    seen: set[str] = set()
    kept = []
    for doc in docs:
        digest = _normalized_hash(doc.text)
        if digest in seen:
            continue
        seen.add(digest)
        kept.append(doc)
    return kept


# ---------------------------------------------------------------------------
# chunk packing

def pack_chunks(docs: Sequence[CorpusDocument], tokenizer: TokenizerModel,
                chunk_len: int = 512, min_tail: int = 16) -> list[list[int]]:
    """Concatenate document tokens with [SEP] between docs and slice into
    chunks of exactly chunk_len ids; the final remainder is kept only when
    it reaches min_tail."""
    if chunk_len < min_tail:
        raise ValueError("chunk_len must be >= min_tail")
    sep_id = tokenizer.vocab.id_of[SEP_TOKEN]
    chunks: list[list[int]] = []
    buffer: list[int] = []
    for doc in docs:
        ids = tokenizer.encode(doc.text).ids
        if not ids:
            continue
        if buffer:
            buffer.append(sep_id)
        buffer.extend(ids)
        while len(buffer) >= chunk_len:
            chunks.append(buffer[:chunk_len])
            buffer = buffer[chunk_len:]
    if len(buffer) >= min_tail:
        chunks.append(buffer)
    return chunks


# ---------------------------------------------------------------------------
# pair filtering

def _pair_similarity(pair: SentencePair, embedder: Embedder) -> float:
    q = np.asarray(embedder(pair.query))
    p = np.asarray(embedder(pair.positive))
    return float(q @ p)


def filter_pairs_by_similarity(pairs: Sequence[SentencePair], embedder: Embedder,
                               threshold: float | None = None,
                               drop_fraction: float | None = None) -> list[SentencePair]:
    """Keep pairs by cosine similarity of their two embeddings.

    Exactly one of threshold / drop_fraction selects the mode. Threshold
    keeps pairs with similarity >= threshold. drop_fraction removes the
    floor(f*N) lowest-similarity pairs (ties broken by input order), which
    makes f=0.10 a by-construction 10% reduction.
    """
    if (threshold is None) == (drop_fraction is None):
        raise ValueError("exactly one of threshold or drop_fraction is required")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty pair list")
    scored = [dataclasses.replace(p, similarity=_pair_similarity(p, embedder))
              for p in pairs]
    if threshold is not None:
        return [p for p in scored if p.similarity >= threshold]
    if not 0.0 <= drop_fraction <= 1.0:
        raise ValueError("drop_fraction must be in [0, 1]")
    n_drop = int(np.floor(drop_fraction * len(scored)))
    if n_drop == 0:
        return scored
    order = sorted(range(len(scored)), key=lambda i: (scored[i].similarity, i))
    dropped = set(order[:n_drop])
    return [p for i, p in enumerate(scored) if i not in dropped]


# ---------------------------------------------------------------------------
# hard-negative mining

def mine_hard_negatives(pairs: Sequence[SentencePair],
                        corpus: Sequence[str], embedder: Embedder,
                        per_query: int = 5,
                        band: tuple[float, float] = (0.3, 0.9)) -> list[HardNegativeRecord]:
    """For each pair, the per_query highest-cosine corpus texts (to the
    query) inside the similarity band, excluding the positive itself.

    Queries with fewer than per_query in-band candidates yield a shorter,
    flagged record.
    """
    if per_query < 1:
        raise ValueError("per_query must be >= 1")
    lo, hi = band
    if lo > hi:
        raise ValueError(f"empty similarity band {band}")
    corpus = list(corpus)
    corpus_embs = np.stack([np.asarray(embedder(t)) for t in corpus]) \
        if corpus else np.zeros((0, 1))
    records = []
    for pair in pairs:
        q = np.asarray(embedder(pair.query))
        sims = corpus_embs @ q if corpus else np.zeros(0)
        candidates = [(float(sims[i]), i) for i in range(len(corpus))
                      if corpus[i] != pair.positive and lo <= sims[i] <= hi]
        candidates.sort(key=lambda item: (-item[0], item[1]))
        chosen = tuple(corpus[i] for _, i in candidates[:per_query])
        records.append(HardNegativeRecord(
            query=pair.query, positive=pair.positive, negatives=chosen,
            source_id=pair.source_id, flagged=len(chosen) < per_query))
    return records


# ---------------------------------------------------------------------------
# JSONL I/O

def read_documents(path: Path) -> list[CorpusDocument]:
    docs = []
    ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            blob = json.loads(line)
            doc = CorpusDocument(id=str(blob["id"]), text=blob["text"],
                                 source=blob.get("source", ""))
            if doc.id in ids:
                raise ValueError(f"duplicate document id {doc.id!r} "
                                 f"at {path}:{line_no}")
            ids.add(doc.id)
            docs.append(doc)
    return docs


def write_documents(path: Path, docs: Iterable[CorpusDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            blob = {"id": doc.id, "text": doc.text}
            if doc.source:
                blob["source"] = doc.source
            fh.write(json.dumps(blob, ensure_ascii=False) + "\n")


def read_pairs(path: Path) -> list[SentencePair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            blob = json.loads(line)
            pairs.append(SentencePair(query=blob["query"],
                                      positive=blob["positive"],
                                      source_id=blob.get("source_id", ""),
                                      similarity=blob.get("similarity")))
    return pairs


def write_pairs(path: Path, pairs: Iterable[SentencePair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            blob = {"query": pair.query, "positive": pair.positive,
                    "source_id": pair.source_id}
            if pair.similarity is not None:
                blob["similarity"] = pair.similarity
            fh.write(json.dumps(blob, ensure_ascii=False) + "\n")


def read_hard_negatives(path: Path) -> list[HardNegativeRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            blob = json.loads(line)
            records.append(HardNegativeRecord(
                query=blob["query"], positive=blob["positive"],
                negatives=tuple(blob["negatives"]),
                source_id=blob.get("source_id", ""),
                flagged=blob.get("flagged", False)))
    return records


def write_hard_negatives(path: Path, records: Iterable[HardNegativeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            blob = {"query": rec.query, "positive": rec.positive,
                    "negatives": list(rec.negatives), "source_id": rec.source_id}
            if rec.flagged:
                blob["flagged"] = True
            fh.write(json.dumps(blob, ensure_ascii=False) + "\n")
