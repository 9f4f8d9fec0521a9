"""Item universe, category hierarchy and the deterministic semantic-ID codebook.

Item semantic IDs are derived from the category hierarchy: the first token is
the root category, the second the sub-category, and the remaining ``T - 2``
tokens spell the residual index in base ``C``.  Items that share a root (or a
root and a sub-category) therefore share SID prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityExceeded, DuplicateTriple, FormatError, InvalidSid

CATALOG_HEADER = "# gensemrec catalog v1"
CODEBOOK_HEADER = "# gensemrec codebook v1"

SemanticId = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Item:
    item_id: int
    root_category: int
    sub_category: int
    residual_index: int
    feature_vector: np.ndarray

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.root_category, self.sub_category, self.residual_index)


class Catalog:
    """An immutable, id-ordered collection of items with array views.

    Rows are sorted by ``item_id``; ``row(item_id)`` maps ids to row indices
    into the ``roots``/``subs``/``features`` arrays.
    """

    def __init__(self, items: Iterable[Item]):
        items = sorted(items, key=lambda it: it.item_id)
        if not items:
            raise ValueError("catalog must contain at least one item")
        ids = [it.item_id for it in items]
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        dims = {np.asarray(it.feature_vector).shape for it in items}
        if len(dims) != 1:
            raise ValueError(f"feature vectors have inconsistent shapes: {sorted(dims)}")
        self.items: tuple[Item, ...] = tuple(items)
        self.ids = np.array(ids, dtype=np.int64)
        self.roots = np.array([it.root_category for it in items], dtype=np.int64)
        self.subs = np.array([it.sub_category for it in items], dtype=np.int64)
        self.residuals = np.array([it.residual_index for it in items], dtype=np.int64)
        self.features = np.stack([np.asarray(it.feature_vector, dtype=float) for it in items])
        self.features.setflags(write=False)
        for arr in (self.ids, self.roots, self.subs, self.residuals):
            arr.setflags(write=False)
        self._row = {iid: r for r, iid in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._row

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_roots(self) -> int:
        return int(self.roots.max()) + 1

    def row(self, item_id: int) -> int:
        try:
            return self._row[int(item_id)]
        except KeyError:
            raise KeyError(f"item {item_id} not in catalog") from None

    def rows(self, item_ids) -> np.ndarray:
        return np.array([self._row[int(i)] for i in np.ravel(item_ids)], dtype=np.int64).reshape(
            np.shape(item_ids)
        )

    def get(self, item_id: int) -> Item:
        return self.items[self.row(item_id)]

    # -- text schema -------------------------------------------------------

    def dump(self, path) -> None:
        """Write ``item_id,c1,c2,residual,f_1..f_F`` lines after a header."""
        lines = [f"{CATALOG_HEADER} F={self.feature_dim}"]
        for it in self.items:
            feats = ",".join(repr(float(v)) for v in it.feature_vector)
            lines.append(f"{it.item_id},{it.root_category},{it.sub_category},{it.residual_index},{feats}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Catalog":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith(CATALOG_HEADER):
            raise FormatError(f"{path}: missing catalog header")
        dim = int(text[0].split("F=")[1])
        items = []
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 4 + dim:
                raise FormatError(f"{path}:{lineno}: expected {4 + dim} fields, got {len(parts)}")
            iid, c1, c2, res = (int(x) for x in parts[:4])
            items.append(Item(iid, c1, c2, res, np.array([float(x) for x in parts[4:]])))
        return cls(items)


def assign_residuals(triples: Sequence[tuple[int, int, int]]) -> list[int]:
    """Residual indices by ascending item_id inside each (c1, c2) bucket.

    ``triples`` holds ``(item_id, c1, c2)``; returns residuals aligned with it.
    """
    order = sorted(range(len(triples)), key=lambda i: triples[i][0])
    counters: dict[tuple[int, int], int] = {}
    out = [0] * len(triples)
    for i in order:
        key = (triples[i][1], triples[i][2])
        out[i] = counters.get(key, 0)
        counters[key] = out[i] + 1
    return out


class SidTrie:
    """Prefix tree over all valid SIDs."""

    __slots__ = ("children", "item_id")

    def __init__(self):
        self.children: dict[int, SidTrie] = {}
        self.item_id: int | None = None

    def insert(self, sid: SemanticId, item_id: int) -> None:
        node = self
        for tok in sid:
            node = node.children.setdefault(tok, SidTrie())
        node.item_id = item_id

    def find(self, prefix: Sequence[int]) -> "SidTrie | None":
        node = self
        for tok in prefix:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node


class Codebook:
    """Bijective item <-> SID mapping plus the validity trie."""

    def __init__(self, levels: int, codebook_size: int, forward: dict[int, SemanticId]):
        self.levels = levels
        self.codebook_size = codebook_size
        self.forward: dict[int, SemanticId] = dict(forward)
        self.backward: dict[SemanticId, int] = {}
        self.trie = SidTrie()
        for iid in sorted(self.forward):
            sid = self.forward[iid]
            if sid in self.backward:
                raise DuplicateTriple(f"items {self.backward[sid]} and {iid} share SID {sid}")
            self.backward[sid] = iid
            self.trie.insert(sid, iid)
        self._masks: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.forward)

    def is_valid(self, sid: Sequence[int]) -> bool:
        return tuple(int(t) for t in sid) in self.backward

    def sid_array(self, item_ids: Sequence[int]) -> np.ndarray:
        """Stack the SIDs of ``item_ids`` into an ``(n, T)`` int array."""
        return np.array([self.forward[int(i)] for i in item_ids], dtype=np.int64).reshape(-1, self.levels)

    def prefix_code(self, prefixes: np.ndarray) -> np.ndarray:
        """Base-C integer code of each row of ``prefixes`` (shape ``(n, t)``)."""
        code = np.zeros(prefixes.shape[0], dtype=np.int64)
        for j in range(prefixes.shape[1]):
            code = code * self.codebook_size + prefixes[:, j]
        return code

    def level_masks(self) -> list[np.ndarray]:
        """Dense validity masks: entry ``t`` has shape ``(C**t, C)``.

        ``masks[t][prefix_code(p), k]`` is True iff ``p + (k,)`` prefixes a valid SID.
        """
        if self._masks is None:
            C = self.codebook_size
            sids = np.array(sorted(self.backward), dtype=np.int64).reshape(-1, self.levels)
            masks = []
            for t in range(self.levels):
                m = np.zeros((C**t, C), dtype=bool)
                m[self.prefix_code(sids[:, :t]), sids[:, t]] = True
                m.setflags(write=False)
                masks.append(m)
            self._masks = masks
        return self._masks

    # -- text schema -------------------------------------------------------

    def dump(self, path) -> None:
        lines = [CODEBOOK_HEADER, f"T={self.levels} C={self.codebook_size}"]
        for iid in sorted(self.forward):
            lines.append(f"{iid} -> {' '.join(str(t) for t in self.forward[iid])}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Codebook":
        lines = Path(path).read_text().splitlines()
        if len(lines) < 2 or lines[0] != CODEBOOK_HEADER:
            raise FormatError(f"{path}: missing codebook header")
        fields = dict(kv.split("=") for kv in lines[1].split())
        forward = {}
        for line in lines[2:]:
            if not line.strip():
                continue
            iid, toks = line.split("->")
            forward[int(iid)] = tuple(int(t) for t in toks.split())
        return cls(int(fields["T"]), int(fields["C"]), forward)


def encode_triple(c1: int, c2: int, residual: int, T: int, C: int) -> SemanticId:
    digits = []
    for _ in range(T - 2):
        digits.append(residual % C)
        residual //= C
    return (c1, c2, *reversed(digits))


def assign_sids(items: Iterable[Item], T: int, C: int) -> Codebook:
    """Build the codebook for ``items``: (c1, c2, residual in base C)."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if C < 1:
        raise ValueError("C must be positive")
    seen: dict[tuple[int, int, int], int] = {}
    forward = {}
    residual_cap = C ** (T - 2)
    for it in sorted(items, key=lambda it: it.item_id):
        if it.triple in seen:
            raise DuplicateTriple(f"items {seen[it.triple]} and {it.item_id} share {it.triple}")
        seen[it.triple] = it.item_id
        c1, c2, res = it.triple
        if not (0 <= c1 < C and 0 <= c2 < C and 0 <= res < residual_cap):
            raise CapacityExceeded(
                f"item {it.item_id} {it.triple} does not fit T={T}, C={C} "
                f"(categories < {C}, residual < {residual_cap})"
            )
        forward[it.item_id] = encode_triple(c1, c2, res, T, C)
    return Codebook(T, C, forward)


def check_sid(codebook: Codebook, sid: Sequence[int]) -> SemanticId:
    sid = tuple(int(t) for t in sid)
    if len(sid) != codebook.levels:
        raise InvalidSid(f"SID {sid} has length {len(sid)}, expected {codebook.levels}")
    return sid


def map_sid(codebook: Codebook, sid: Sequence[int], catalog: Catalog | None = None):
    """Item id (or the ``Item`` when ``catalog`` is given) for a valid SID."""
    sid = check_sid(codebook, sid)
    try:
        iid = codebook.backward[sid]
    except KeyError:
        raise InvalidSid(f"SID {sid} is not in the codebook") from None
    return catalog.get(iid) if catalog is not None else iid


def valid_next_tokens(codebook: Codebook, prefix: Sequence[int]) -> frozenset[int]:
    if len(prefix) >= codebook.levels:
        raise ValueError(f"prefix length {len(prefix)} must be < T={codebook.levels}")
    node = codebook.trie.find(prefix)
    return frozenset() if node is None else frozenset(node.children)
