"""Three-layer goal taxonomy: loading, validation, closure and negative sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

ROOT, CATEGORY, LEAF = 0, 1, 2


class TaxonomyError(ValueError):
    pass


class EmptyNegativePoolError(ValueError):
    pass


@dataclass(frozen=True)
class GoalNode:
    id: int
    name: str
    layer: int


@dataclass(frozen=True)
class GoalTaxonomy:
    nodes: tuple[GoalNode, ...]
    parent_edges: frozenset[tuple[int, int]]

    @cached_property
    def by_id(self) -> dict[int, GoalNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def parent(self) -> dict[int, int]:
        return {c: p for p, c in self.parent_edges}

    @property
    def ids(self) -> list[int]:
        return sorted(n.id for n in self.nodes)

    @property
    def root(self) -> int:
        return next(n.id for n in self.nodes if n.layer == ROOT)

    def layer_ids(self, layer: int) -> list[int]:
        return sorted(n.id for n in self.nodes if n.layer == layer)

    @property
    def leaves(self) -> list[int]:
        return self.layer_ids(LEAF)

    @property
    def categories(self) -> list[int]:
        return self.layer_ids(CATEGORY)

    def children(self, gid: int) -> list[int]:
        return sorted(c for p, c in self.parent_edges if p == gid)

    def category_of(self, gid: int) -> int:
        """Layer-1 ancestor of a goal; the root maps to itself."""
        node = self.by_id[gid]
        if node.layer == LEAF:
            return self.parent[gid]
        return gid

    def name(self, gid: int) -> str:
        return self.by_id[gid].name


def build_taxonomy(nodes, edges) -> GoalTaxonomy:
    """Validate raw node/edge lists and freeze them into a GoalTaxonomy."""
    parsed = []
    for raw in nodes:
        try:
            parsed.append(GoalNode(int(raw["id"]), str(raw["name"]), int(raw["layer"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise TaxonomyError(f"malformed node record {raw!r}") from exc
    seen: set[int] = set()
    for n in parsed:
        if n.id in seen:
            raise TaxonomyError(f"duplicate id {n.id}")
        if n.layer not in (ROOT, CATEGORY, LEAF):
            raise TaxonomyError(f"layer violation: node {n.id} has layer {n.layer}")
        seen.add(n.id)
    roots = [n.id for n in parsed if n.layer == ROOT]
    if len(roots) > 1:
        raise TaxonomyError(f"multiple roots: {roots}")
    if not roots:
        raise TaxonomyError("no root: exactly one layer-0 node is required")

    layer = {n.id: n.layer for n in parsed}
    edge_set = set()
    parent: dict[int, int] = {}
    for e in edges:
        try:
            p, c = int(e[0]), int(e[1])
        except (IndexError, TypeError, ValueError) as exc:
            raise TaxonomyError(f"malformed edge {e!r}") from exc
        if p not in layer or c not in layer:
            raise TaxonomyError(f"edge ({p}, {c}) references an unknown id")
        if c in parent and parent[c] != p:
            raise TaxonomyError(f"node {c} has multiple parents ({parent[c]}, {p})")
        parent[c] = p
        edge_set.add((p, c))

    for start in layer:
        trail = {start}
        node = start
        while node in parent:
            node = parent[node]
            if node in trail:
                raise TaxonomyError(f"cycle through node {start}")
            trail.add(node)
    for p, c in sorted(edge_set):
        if layer[c] != layer[p] + 1:
            raise TaxonomyError(
                f"layer violation: edge ({p}, {c}) joins layer {layer[p]} to layer {layer[c]}"
            )
    for n in parsed:
        if n.layer != ROOT and n.id not in parent:
            raise TaxonomyError(f"orphan node {n.id} at layer {n.layer} has no parent")

    return GoalTaxonomy(tuple(sorted(parsed, key=lambda n: n.id)), frozenset(edge_set))


def load_taxonomy(path) -> GoalTaxonomy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise TaxonomyError('taxonomy document needs "nodes" and "edges"')
    return build_taxonomy(doc["nodes"], doc["edges"])


def dump_taxonomy(t: GoalTaxonomy, path) -> None:
    doc = {
        "nodes": [{"id": n.id, "name": n.name, "layer": n.layer} for n in t.nodes],
        "edges": sorted([p, c] for p, c in t.parent_edges),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def example_taxonomy_path() -> Path:
    return Path(str(resources.files("goweb") / "data" / "example_taxonomy.json"))


def example_taxonomy() -> GoalTaxonomy:
    """The shipped 21-node fixture (1 root, 4 categories, 16 leaves)."""
    return load_taxonomy(example_taxonomy_path())


def make_taxonomy(n_categories: int, leaves_per_category: int) -> GoalTaxonomy:
    nodes = [{"id": 0, "name": "non-goal", "layer": ROOT}]
    edges = []
    next_id = 1
    for c in range(n_categories):
        cid = next_id
        next_id += 1
        nodes.append({"id": cid, "name": f"category-{c}", "layer": CATEGORY})
        edges.append((0, cid))
        for j in range(leaves_per_category):
            nodes.append({"id": next_id, "name": f"goal-{c}.{j}", "layer": LEAF})
            edges.append((cid, next_id))
            next_id += 1
    return build_taxonomy(nodes, edges)


@dataclass(frozen=True)
class ClosureRelation:
    """Unordered ancestor-descendant pairs, stored as (smaller id, larger id)."""

    pairs: frozenset[tuple[int, int]]
    goals: tuple[int, ...] = field(default=())

    def related(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.pairs

    @cached_property
    def neighbours(self) -> dict[int, frozenset[int]]:
        out: dict[int, set[int]] = {g: set() for g in self.goals}
        for a, b in self.pairs:
            out.setdefault(a, set()).add(b)
            out.setdefault(b, set()).add(a)
        return {g: frozenset(s) for g, s in out.items()}

    def negative_pool(self, g: int) -> list[int]:
        rel = self.neighbours.get(g, frozenset())
        return [x for x in self.goals if x != g and x not in rel]

    def ordered_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs | {(b, a) for a, b in self.pairs})


def closure_pairs(t: GoalTaxonomy) -> ClosureRelation:
    pairs = set()
    parent = t.parent
    for n in t.nodes:
        anc = parent.get(n.id)
        while anc is not None:
            pairs.add((min(anc, n.id), max(anc, n.id)))
            anc = parent.get(anc)
    return ClosureRelation(frozenset(pairs), tuple(t.ids))


def sample_negatives(g_u: int, m: int, relation: ClosureRelation, rng: np.random.Generator) -> list[int]:
    """Draw ``m`` goals unrelated to ``g_u`` uniformly, with replacement."""
    if m < 1:
        raise ValueError("m must be >= 1")
    pool = relation.negative_pool(g_u)
    if not pool:
        raise EmptyNegativePoolError(f"goal {g_u} has no unrelated goals to sample")
    idx = rng.integers(0, len(pool), size=m)
    return [pool[i] for i in idx]
