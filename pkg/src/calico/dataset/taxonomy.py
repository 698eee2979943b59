"""Object/part taxonomies, category remapping, shared-part pair tables and curation."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping

from calico.errors import CurationError, MappingError

log = logging.getLogger(__name__)


def normalize_name(name: str) -> str:
    return " ".join(name.split()).lower()


@dataclass
class PartTaxonomy:
    objects: dict[str, set[str]] = field(default_factory=dict)
    sources: dict[str, set[str]] = field(default_factory=dict)

    def add_category(self, category: str, source: str | None = None) -> None:
        self.objects.setdefault(category, set())
        if source is not None:
            self.sources.setdefault(category, set()).add(source)

    def add(self, category: str, part: str, source: str | None = None) -> None:
        if not category or not part:
            raise ValueError("category and part names must be nonempty")
        self.add_category(category, source)
        self.objects[category].add(part)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, Iterable[str]]]) -> "PartTaxonomy":
        """Rows of (source, category, parts)."""
        tax = cls()
        for source, category, parts in rows:
            category = normalize_name(category)
            tax.add_category(category, source)
            for p in parts:
                tax.add(category, normalize_name(p), source)
        return tax

    def __len__(self) -> int:
        return len(self.objects)

    def pairs(self) -> set[tuple[str, str]]:
        return {(c, p) for c, parts in self.objects.items() for p in parts}


def load_mapping(path: str | os.PathLike) -> dict[str, str]:
    """"from<TAB>to" per line, '#' comments."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].rstrip("\n")
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise MappingError(f"mapping line {lineno}: expected 'from<TAB>to'")
        src, dst = normalize_name(cols[0]), normalize_name(cols[1])
        if src in out and out[src] != dst:
            raise MappingError(f"mapping line {lineno}: {src!r} mapped twice")
        out[src] = dst
    return out


def resolve_mapping(mapping: Mapping[str, str]) -> dict[str, str]:
    """Follow chains to their fixed point; a cycle is an error."""
    resolved: dict[str, str] = {}
    for start in mapping:
        path = [start]
        cur = start
        while cur in mapping and mapping[cur] != cur:
            cur = mapping[cur]
            if cur in path:
                raise MappingError(f"cyclic category mapping: {' -> '.join(path + [cur])}")
            path.append(cur)
        resolved[start] = cur
    return resolved


def remap_categories(taxonomy: PartTaxonomy, mapping: Mapping[str, str]) -> PartTaxonomy:
    """Rename categories; collisions merge part sets (and sources) by union."""
    resolved = resolve_mapping(mapping)
    out = PartTaxonomy()
    for category in sorted(taxonomy.objects):
        target = resolved.get(category, category)
        out.objects.setdefault(target, set()).update(taxonomy.objects[category])
        out.sources.setdefault(target, set()).update(taxonomy.sources.get(category, set()))
    return out


@dataclass(frozen=True)
class PairRow:
    a: str
    b: str
    shared: frozenset[str]
    curated: bool = False


@dataclass
class CategoryPairTable:
    rows: list[PairRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def curated_rows(self) -> list[PairRow]:
        return [r for r in self.rows if r.curated]

    def find(self, a: str, b: str) -> PairRow | None:
        a, b = sorted((a, b))
        for r in self.rows:
            if (r.a, r.b) == (a, b):
                return r
        return None

    def to_tsv(self) -> str:
        lines = ["category_a\tcategory_b\tshared_parts\tcurated"]
        for r in self.rows:
            lines.append(f"{r.a}\t{r.b}\t{','.join(sorted(r.shared))}\t{int(r.curated)}")
        return "\n".join(lines) + "\n"


def derive_shared_part_pairs(taxonomy: PartTaxonomy) -> CategoryPairTable:
    """All unordered category pairs with at least one common part, in lexicographic order."""
    rows = []
    for a, b in combinations(sorted(taxonomy.objects), 2):
        shared = taxonomy.objects[a] & taxonomy.objects[b]
        if shared:
            rows.append(PairRow(a, b, frozenset(shared)))
    return CategoryPairTable(rows)


def load_allowlist(path: str | os.PathLike) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise CurationError(f"allowlist line {lineno}: expected 'categoryA<TAB>categoryB'")
        out.append((normalize_name(cols[0]), normalize_name(cols[1])))
    return out


@dataclass
class CurationSummary:
    candidates: int
    curated: int


def apply_curation(candidates: CategoryPairTable, allowlist: Iterable[tuple[str, str]]
                   ) -> tuple[CategoryPairTable, CurationSummary]:
    index = {(r.a, r.b): r for r in candidates.rows}
    chosen: set[tuple[str, str]] = set()
    for a, b in allowlist:
        key = tuple(sorted((a, b)))
        if key not in index:
            raise CurationError(f"allowlisted pair {a!r} / {b!r} is not a shared-part candidate")
        chosen.add(key)
    rows = [PairRow(r.a, r.b, r.shared, (r.a, r.b) in chosen) for r in candidates.rows]
    table = CategoryPairTable(rows)
    summary = CurationSummary(len(rows), len(chosen))
    log.info("curation kept %d of %d candidate pairs", summary.curated, summary.candidates)
    return table, summary
