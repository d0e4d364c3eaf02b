"""Entity-pair fact mining over a flat-file fact store, plus exact top-k
retrieval by maximum inner product against the document vector.

Candidate facts for an entity pair are those whose text contains an alias of
both entities as contiguous token runs. Candidates pooled over all pairs are
ranked by inner product between the fact vector and the whole-document
vector; vectors are unit-norm, so inner product equals cosine similarity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .corpus import Document, Gazetteer, PseudoDocument
from .embedder import HashEmbedder
from .text import tokenize


class KnowledgeError(ValueError):
    """Malformed fact store or retrieval misuse."""


@dataclass(frozen=True)
class Fact:
    fact_id: str
    text: tuple[str, ...]


@dataclass(frozen=True)
class EntityChain:
    """Unique canonical entity ids in first-mention order."""

    entities: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.entities)) != len(self.entities):
            raise KnowledgeError(f"duplicate entities in chain: {self.entities}")


@dataclass(frozen=True)
class GuidanceBundle:
    doc_id: str
    chain: EntityChain
    facts: tuple[tuple[Fact, float], ...] = ()

    def __post_init__(self):
        scores = [s for _, s in self.facts]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise KnowledgeError("guidance facts must be sorted by descending score")
        ids = [f.fact_id for f, _ in self.facts]
        if len(set(ids)) != len(ids):
            raise KnowledgeError(f"duplicate fact ids in bundle: {ids}")

    def fact_texts(self) -> list[list[str]]:
        return [list(f.text) for f, _ in self.facts]


class FactStore:
    """Facts plus an inverted token index for full-text candidate search."""

    def __init__(self, facts: list[Fact]):
        ids = [f.fact_id for f in facts]
        if len(set(ids)) != len(ids):
            raise KnowledgeError("duplicate fact_id in store")
        if any(not f.text for f in facts):
            raise KnowledgeError("facts must have non-empty text")
        self.facts = list(facts)
        self.by_id = {f.fact_id: f for f in facts}
        self._token_index: dict[str, set[str]] = {}
        for f in facts:
            for tok in set(f.text):
                self._token_index.setdefault(tok, set()).add(f.fact_id)

    def __len__(self) -> int:
        return len(self.facts)

    @classmethod
    def load(cls, path: str | Path) -> "FactStore":
        """Read a JSONL fact store: one {"fact_id", "text"} object per line."""
        path = Path(path)
        if not path.exists():
            raise KnowledgeError(f"fact store not found: {path}")
        facts = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise KnowledgeError(f"fact store line {lineno}: invalid JSON ({exc.msg})") from exc
                if "fact_id" not in rec or "text" not in rec:
                    raise KnowledgeError(f'fact store line {lineno}: need "fact_id" and "text"')
                toks = tokenize(str(rec["text"]))
                if not toks:
                    raise KnowledgeError(f"fact store line {lineno}: text tokenizes to nothing")
                facts.append(Fact(str(rec["fact_id"]), tuple(toks)))
        return cls(facts)

    def _ids_with_phrase(self, phrase: tuple[str, ...]) -> set[str]:
        candidates = self._token_index.get(phrase[0], set())
        for tok in phrase[1:]:
            candidates = candidates & self._token_index.get(tok, set())
            if not candidates:
                return set()
        if len(phrase) == 1:
            return set(candidates)
        return {fid for fid in candidates if _contains_run(self.by_id[fid].text, phrase)}

    def ids_mentioning(self, canonical_id: str, gaz: Gazetteer) -> set[str]:
        """Fact ids containing any alias of the entity as a contiguous token run."""
        hits: set[str] = set()
        for alias in gaz.entries.get(canonical_id, []):
            phrase = tuple(tokenize(alias))
            if phrase:
                hits |= self._ids_with_phrase(phrase)
        return hits


def _contains_run(text: tuple[str, ...], phrase: tuple[str, ...]) -> bool:
    n, m = len(text), len(phrase)
    return any(text[i : i + m] == phrase for i in range(n - m + 1))


# ---------------------------------------------------------------------------
# Operations


def entity_pairs(chain: EntityChain) -> list[tuple[str, str]]:
    """All (e_i, e_j) with i < j in chain order; m entities give m(m-1)/2 pairs."""
    return list(combinations(chain.entities, 2))


def candidate_facts(store: FactStore, pair: tuple[str, str], gaz: Gazetteer) -> list[Fact]:
    """Facts mentioning an alias of both entities, sorted by fact_id."""
    e_i, e_j = pair
    hits = store.ids_mentioning(e_i, gaz) & store.ids_mentioning(e_j, gaz)
    return [store.by_id[fid] for fid in sorted(hits)]


class FactIndex:
    """Dense matrix of fact vectors for exhaustive inner-product scans."""

    def __init__(self, store: FactStore, embedder: HashEmbedder):
        if len(store) == 0:
            raise KnowledgeError("cannot index an empty fact store")
        self.store = store
        self.fact_ids = [f.fact_id for f in store.facts]
        self.row_of = {fid: i for i, fid in enumerate(self.fact_ids)}
        self.matrix = np.stack([embedder.embed_sequence(list(f.text)) for f in store.facts])


def build_index(store: FactStore, embedder: HashEmbedder) -> FactIndex:
    return FactIndex(store, embedder)


def top_k(
    index: FactIndex, candidates: set[str], query: np.ndarray, k: int
) -> list[tuple[Fact, float]]:
    """Exhaustive inner-product scan over the candidate facts.

    Returns min(k, |candidates|) facts by descending score, ties broken by
    ascending fact_id.
    """
    if k < 1:
        raise KnowledgeError(f"k must be >= 1, got {k}")
    if not candidates:
        return []
    fids = sorted(candidates)
    rows = [index.row_of[f] for f in fids]
    scores = index.matrix[rows] @ np.asarray(query, dtype=float)
    ranked = sorted(zip(fids, scores), key=lambda fs: (-fs[1], fs[0]))[:k]
    return [(index.store.by_id[fid], float(score)) for fid, score in ranked]


def retrieve_guidance(
    doc: Document | PseudoDocument,
    store: FactStore,
    gaz: Gazetteer,
    index: FactIndex,
    embedder: HashEmbedder,
    k: int = 3,
) -> GuidanceBundle:
    """End-to-end retrieval for one document.

    Chain from first-mention order; candidates pooled (deduplicated) over all
    entity pairs; top-k scored against the whole-document vector. Fewer than
    two entities, or zero candidates, yields a bundle with an empty fact list.
    """
    doc_id = doc.id
    chain = EntityChain(tuple(doc.mention_ids()))
    pooled: set[str] = set()
    for pair in entity_pairs(chain):
        pooled.update(f.fact_id for f in candidate_facts(store, pair, gaz))
    if not pooled:
        return GuidanceBundle(doc_id, chain)
    query = embedder.embed_sequence(doc.tokens())
    return GuidanceBundle(doc_id, chain, tuple(top_k(index, pooled, query, k)))


def guidance_record(bundle: GuidanceBundle) -> dict:
    """JSON-serializable guidance record."""
    return {
        "doc_id": bundle.doc_id,
        "chain": list(bundle.chain.entities),
        "facts": [{"fact_id": f.fact_id, "score": s} for f, s in bundle.facts],
    }


def load_guidance(path: str | Path, store: FactStore) -> dict[str, GuidanceBundle]:
    """Read guidance records back, resolving fact texts from the store."""
    path = Path(path)
    if not path.exists():
        raise KnowledgeError(f"guidance file not found: {path}")
    bundles: dict[str, GuidanceBundle] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            facts = tuple(
                (store.by_id[f["fact_id"]], float(f["score"])) for f in rec["facts"]
            )
            bundles[rec["doc_id"]] = GuidanceBundle(
                rec["doc_id"], EntityChain(tuple(rec["chain"])), facts
            )
    return bundles
