"""Corpus preparation: ingestion, gazetteer entity recognition, entity and
document clustering, document importance, and pseudo-document assembly.

A pseudo-document is an extractive document built from a cluster of
entity-related source documents: entity-free sentences are dropped, sentence
order within a source document is preserved, and source documents are laid
out in order of decreasing importance (mean pairwise cosine similarity to the
rest of the cluster).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .embedder import HashEmbedder
from .text import tokenize


class CorpusError(ValueError):
    """Malformed corpus, gazetteer, or clustering input."""


@dataclass(frozen=True)
class EntityMention:
    canonical_id: str
    surface: str
    start: int
    end: int  # exclusive token index

    def __post_init__(self):
        if not self.start < self.end:
            raise CorpusError(f"empty mention span [{self.start}, {self.end})")


@dataclass(frozen=True)
class Sentence:
    index: int
    tokens: tuple[str, ...]
    mentions: tuple[EntityMention, ...] = ()


@dataclass(frozen=True)
class Document:
    id: str
    sentences: tuple[Sentence, ...]
    summary: tuple[tuple[str, ...], ...] | None = None  # tokenized reference, if any
    meta: dict[str, str] = field(default_factory=dict)

    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s.tokens]

    def summary_tokens(self) -> list[str] | None:
        if self.summary is None:
            return None
        return [t for s in self.summary for t in s]

    def mention_ids(self) -> list[str]:
        """Canonical ids in first-mention order, duplicates removed."""
        seen: dict[str, None] = {}
        for sent in self.sentences:
            for m in sorted(sent.mentions, key=lambda m: m.start):
                seen.setdefault(m.canonical_id, None)
        return list(seen)


@dataclass(frozen=True)
class EntityCluster:
    cluster_id: int
    members: frozenset[str]
    centroid: np.ndarray


@dataclass(frozen=True)
class DocCluster:
    cluster_id: int
    doc_ids: tuple[str, ...]
    importance: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class PseudoDocument:
    cluster_id: int
    # (source_doc_id, original_sentence_index, sentence)
    sentences: tuple[tuple[str, int, Sentence], ...]

    @property
    def id(self) -> str:
        return f"cluster{self.cluster_id}"

    def tokens(self) -> list[str]:
        return [t for _, _, s in self.sentences for t in s.tokens]

    def mention_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, _, sent in self.sentences:
            for m in sorted(sent.mentions, key=lambda m: m.start):
                seen.setdefault(m.canonical_id, None)
        return list(seen)


# ---------------------------------------------------------------------------
# Ingestion


def _tokenized_sentences(texts: Iterable[str]) -> list[tuple[str, ...]]:
    out = []
    for text in texts:
        toks = tokenize(text)
        if toks:
            out.append(tuple(toks))
    return out


def ingest_corpus(path: str | Path) -> list[Document]:
    """Read a JSONL corpus: one {"id", "sentences", "summary"?} object per line."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    docs: list[Document] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "id" not in rec:
                raise CorpusError(f'line {lineno}: missing "id" field')
            if "sentences" not in rec or not isinstance(rec["sentences"], list):
                raise CorpusError(f'line {lineno}: missing "sentences" list')
            doc_id = str(rec["id"])
            if doc_id in seen_ids:
                raise CorpusError(f"line {lineno}: duplicate id {doc_id!r}")
            seen_ids.add(doc_id)
            sent_tokens = _tokenized_sentences(rec["sentences"])
            if not sent_tokens:
                raise CorpusError(f"line {lineno}: document {doc_id!r} has no non-empty sentences")
            sentences = tuple(Sentence(i, toks) for i, toks in enumerate(sent_tokens))
            summary = None
            if rec.get("summary") is not None:
                if not isinstance(rec["summary"], list):
                    raise CorpusError(f'line {lineno}: "summary" must be a list of strings')
                summary = tuple(_tokenized_sentences(rec["summary"]))
            meta = {str(k): str(v) for k, v in rec.get("meta", {}).items()}
            docs.append(Document(doc_id, sentences, summary, meta))
    if not docs:
        raise CorpusError("empty corpus")
    return docs


# ---------------------------------------------------------------------------
# Gazetteer NER


class Gazetteer:
    """Alias table mapping canonical entity ids to lowercase alias phrases.

    Serves as the entity recognizer: longest-match, left-to-right,
    non-overlapping alias matching, all aliases collapsing to the canonical
    id (which also stands in for coreference between alias variants).
    """

    def __init__(self, entries: dict[str, list[str]]):
        if not all(entries.values()) and entries:
            bad = [k for k, v in entries.items() if not v]
            raise CorpusError(f"gazetteer entries with no aliases: {bad}")
        self.entries = entries
        self._alias_to_id: dict[tuple[str, ...], str] = {}
        self.max_alias_len = 0
        for cid, aliases in entries.items():
            for alias in aliases:
                toks = tuple(tokenize(alias))
                if not toks:
                    raise CorpusError(f"gazetteer alias {alias!r} for {cid!r} tokenizes to nothing")
                owner = self._alias_to_id.get(toks)
                if owner is not None and owner != cid:
                    raise CorpusError(
                        f"ambiguous alias {' '.join(toks)!r} maps to both {owner!r} and {cid!r}"
                    )
                self._alias_to_id[toks] = cid
                self.max_alias_len = max(self.max_alias_len, len(toks))

    @classmethod
    def load(cls, path: str | Path) -> "Gazetteer":
        """Read a JSONL gazetteer: one {"canonical_id", "aliases"} object per line."""
        path = Path(path)
        if not path.exists():
            raise CorpusError(f"gazetteer file not found: {path}")
        entries: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"gazetteer line {lineno}: invalid JSON ({exc.msg})") from exc
                if "canonical_id" not in rec or "aliases" not in rec:
                    raise CorpusError(f'gazetteer line {lineno}: need "canonical_id" and "aliases"')
                cid = str(rec["canonical_id"])
                aliases = [str(a).lower() for a in rec["aliases"]]
                if not aliases:
                    raise CorpusError(f"gazetteer line {lineno}: {cid!r} has no aliases")
                entries.setdefault(cid, []).extend(aliases)
        return cls(entries)

    def canonical_ids(self) -> list[str]:
        return sorted(self.entries)

    def match(self, tokens: tuple[str, ...] | list[str]) -> list[EntityMention]:
        """Longest-match, left-to-right, non-overlapping alias matching."""
        mentions = []
        i = 0
        n = len(tokens)
        while i < n:
            hit = None
            for length in range(min(self.max_alias_len, n - i), 0, -1):
                cid = self._alias_to_id.get(tuple(tokens[i : i + length]))
                if cid is not None:
                    hit = (cid, length)
                    break
            if hit is None:
                i += 1
            else:
                cid, length = hit
                mentions.append(EntityMention(cid, " ".join(tokens[i : i + length]), i, i + length))
                i += length
        return mentions

    def entity_ids_in(self, tokens: list[str]) -> set[str]:
        """Unique canonical ids mentioned in a token sequence."""
        return {m.canonical_id for m in self.match(tokens)}


def recognize_entities(doc: Document, gaz: Gazetteer) -> Document:
    """Return a copy of `doc` with mentions populated from the gazetteer."""
    sentences = tuple(
        Sentence(s.index, s.tokens, tuple(gaz.match(s.tokens))) for s in doc.sentences
    )
    return Document(doc.id, sentences, doc.summary, doc.meta)


# ---------------------------------------------------------------------------
# Entity embedding and clustering

EmbedFn = Callable[[str], np.ndarray]


def entity_vector(canonical_id: str, gaz: Gazetteer, embedder: HashEmbedder) -> np.ndarray:
    """Entity representation: normalized mean over all alias tokens.

    Entities sharing alias vocabulary land near each other, which is what the
    downstream cosine clustering needs from the pretrained encoder it replaces.
    """
    tokens = [t for alias in gaz.entries[canonical_id] for t in tokenize(alias)]
    return embedder.embed_sequence(tokens)


def cluster_entities(
    entities: set[str] | Iterable[str], embed: EmbedFn, tau: float
) -> list[EntityCluster]:
    """Bottom-up average-linkage agglomeration under cosine similarity.

    Merging continues while the most similar pair of clusters has mean
    pairwise similarity >= tau; ties break toward the pair with the smallest
    member ids. Cluster ids are assigned by smallest member id.
    """
    if not 0.0 <= tau <= 1.0:
        raise CorpusError(f"tau must be in [0, 1], got {tau}")
    ids = sorted(set(entities))
    if not ids:
        return []
    vecs = {e: np.asarray(embed(e), dtype=float) for e in ids}
    # For unit vectors the mean pairwise cosine between clusters A and B is
    # dot(sum_A, sum_B) / (|A| * |B|).
    clusters: list[list[str]] = [[e] for e in ids]
    sums: list[np.ndarray] = [vecs[e].copy() for e in ids]

    def linkage(i: int, j: int) -> float:
        return float(np.dot(sums[i], sums[j])) / (len(clusters[i]) * len(clusters[j]))

    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                sim = linkage(i, j)
                key = (-sim, clusters[i][0], clusters[j][0])
                if best is None or key < best[0]:
                    best = (key, i, j, sim)
        _, i, j, sim = best
        if sim < tau:
            break
        clusters[i] = sorted(clusters[i] + clusters[j])
        sums[i] = sums[i] + sums[j]
        del clusters[j], sums[j]
        clusters_and_sums = sorted(zip(clusters, sums), key=lambda cs: cs[0][0])
        clusters = [c for c, _ in clusters_and_sums]
        sums = [s for _, s in clusters_and_sums]

    clusters.sort(key=lambda c: c[0])
    out = []
    for k, members in enumerate(clusters):
        mean = np.mean([vecs[e] for e in members], axis=0)
        centroid = mean / np.linalg.norm(mean)
        out.append(EntityCluster(k, frozenset(members), centroid))
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def assign_documents(
    docs: list[Document], clusters: list[EntityCluster], embed: EmbedFn
) -> tuple[list[DocCluster], list[str]]:
    """Assign each document to the entity cluster with the most similar centroid.

    The document representation is the mean of its unique entity vectors.
    Documents with no mentions are skipped and returned as the second element.
    Ties break toward the lowest cluster id.
    """
    if not clusters:
        raise CorpusError("cannot assign documents: no entity clusters")
    assignment: dict[int, list[str]] = {c.cluster_id: [] for c in clusters}
    skipped: list[str] = []
    for doc in docs:
        ents = doc.mention_ids()
        if not ents:
            skipped.append(doc.id)
            continue
        dvec = np.mean([embed(e) for e in ents], axis=0)
        best = max(clusters, key=lambda c: (_cosine(dvec, c.centroid), -c.cluster_id))
        assignment[best.cluster_id].append(doc.id)
    doc_clusters = [
        DocCluster(cid, tuple(ids)) for cid, ids in sorted(assignment.items()) if ids
    ]
    return doc_clusters, skipped


# ---------------------------------------------------------------------------
# Document importance and pseudo-documents


def document_importance(target: str, cluster: DocCluster, embed_doc: EmbedFn) -> float:
    """Mean cosine similarity of `target` to the other cluster members."""
    if len(cluster.doc_ids) < 2:
        raise CorpusError(f"importance undefined for singleton cluster {cluster.cluster_id}")
    if target not in cluster.doc_ids:
        raise CorpusError(f"doc {target!r} not in cluster {cluster.cluster_id}")
    tvec = embed_doc(target)
    total = sum(_cosine(tvec, embed_doc(d)) for d in cluster.doc_ids if d != target)
    return total / (len(cluster.doc_ids) - 1)


def score_cluster_importance(
    cluster: DocCluster, corpus: dict[str, Document], embedder: HashEmbedder
) -> DocCluster:
    """Fill the importance map; a singleton's only member scores 1.0 by convention."""
    if len(cluster.doc_ids) == 1:
        return DocCluster(cluster.cluster_id, cluster.doc_ids, {cluster.doc_ids[0]: 1.0})
    vecs = {d: embedder.embed_sequence(corpus[d].tokens()) for d in cluster.doc_ids}
    importance = {
        d: document_importance(d, cluster, lambda x: vecs[x]) for d in cluster.doc_ids
    }
    return DocCluster(cluster.cluster_id, cluster.doc_ids, importance)


def build_pseudo_document(cluster: DocCluster, corpus: dict[str, Document]) -> PseudoDocument:
    """Assemble the extractive pseudo-document for one document cluster.

    Sentences without entity mentions are dropped; within a source document
    sentence order is preserved; source documents are concatenated in order
    of descending importance (ties by ascending doc id).
    """
    missing = [d for d in cluster.doc_ids if d not in cluster.importance]
    if missing:
        raise CorpusError(f"importance missing for docs {missing} in cluster {cluster.cluster_id}")
    ordered = sorted(cluster.doc_ids, key=lambda d: (-cluster.importance[d], d))
    rows: list[tuple[str, int, Sentence]] = []
    for doc_id in ordered:
        for sent in corpus[doc_id].sentences:
            if sent.mentions:
                rows.append((doc_id, sent.index, sent))
    if not rows:
        raise CorpusError(f"empty pseudo-document: cluster {cluster.cluster_id} has no entity-bearing sentences")
    return PseudoDocument(cluster.cluster_id, tuple(rows))


def pseudo_document_record(pdoc: PseudoDocument) -> dict:
    """JSON-serializable record in the corpus schema plus provenance."""
    return {
        "id": pdoc.id,
        "sentences": [" ".join(s.tokens) for _, _, s in pdoc.sentences],
        "provenance": [[doc_id, sent_idx] for doc_id, sent_idx, _ in pdoc.sentences],
    }
