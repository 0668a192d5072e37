"""Agent graphs, neighbourhoods and partitions.

Agents are indexed ``0..n-1``.  Graphs are undirected, unweighted and stored
as adjacency sets; both :class:`AgentGraph` and :class:`Partition` are
immutable once built.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class AgentGraph:
    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"agent count must be >= 1, got {self.n}")
        clean = set()
        for e in self.edges:
            e = tuple(e)
            if len(e) != 2:
                raise ValueError(f"edge {e!r} must have two distinct endpoints")
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop on agent {i}")
            for k in (i, j):
                if not 0 <= k < self.n:
                    raise ValueError(f"edge endpoint {k} outside 0..{self.n - 1}")
            clean.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(clean))
        adj = [set() for _ in range(self.n)]
        for i, j in clean:
            adj[i].add(j)
            adj[j].add(i)
        object.__setattr__(self, "_adj", tuple(frozenset(a) for a in adj))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "AgentGraph":
        return cls(n, frozenset(tuple(e) for e in edges))

    @classmethod
    def line(cls, n: int) -> "AgentGraph":
        return cls.from_edges(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def edgeless(cls, n: int) -> "AgentGraph":
        return cls(n)

    @classmethod
    def complete(cls, n: int) -> "AgentGraph":
        return cls.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])

    def neighbors(self, i: int) -> frozenset:
        self._check(i)
        return self._adj[i]

    def _check(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise ValueError(f"agent index {i} outside 0..{self.n - 1}")


@dataclass(frozen=True)
class Partition:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(frozenset(int(i) for i in b) for b in self.blocks)
        if any(len(b) == 0 for b in blocks):
            raise ValueError("partition blocks must be non-empty")
        seen: set = set()
        for b in blocks:
            if seen & b:
                raise ValueError(f"blocks overlap on {sorted(seen & b)}")
            seen |= b
        n = len(seen)
        if seen != set(range(n)):
            raise ValueError(f"blocks must cover 0..{n - 1} exactly, got {sorted(seen)}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(tuple(frozenset([i]) for i in range(n)))

    @classmethod
    def joint(cls, n: int) -> "Partition":
        return cls((frozenset(range(n)),))

    def block_of(self, i: int) -> frozenset:
        for b in self.blocks:
            if i in b:
                return b
        raise ValueError(f"agent {i} not covered by partition")

    def sorted_blocks(self) -> list[list[int]]:
        return [sorted(b) for b in self.blocks]


def closed_neighborhood(g: AgentGraph, i: int) -> frozenset:
    """Neighbours of ``i`` together with ``i`` itself."""
    return g.neighbors(i) | {i}


def k_hop(g: AgentGraph, i: int, kappa: int) -> frozenset:
    """All agents within ``kappa`` edges of ``i`` (breadth-first ball)."""
    g._check(i)
    if kappa < 0:
        raise ValueError(f"hop radius must be >= 0, got {kappa}")
    dist = {i: 0}
    queue = deque([i])
    while queue:
        u = queue.popleft()
        if dist[u] == kappa:
            continue
        for v in g._adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return frozenset(dist)


def block_input_set(g: AgentGraph, block: Iterable[int], kappa: int) -> frozenset:
    """Union of the ``kappa``-hop balls of the block's members.

    This is the set of agents whose utilities feed the block's mixer.
    """
    block = list(block)
    if not block:
        raise ValueError("block must be non-empty")
    out: frozenset = frozenset()
    for j in block:
        out = out | k_hop(g, j, kappa)
    return out


def is_refinement(fine: Partition, coarse: Partition) -> bool:
    """True iff every block of ``fine`` lies inside some block of ``coarse``."""
    if fine.n != coarse.n:
        raise ValueError(f"partitions cover different agent counts ({fine.n} vs {coarse.n})")
    return all(any(b <= c for c in coarse.blocks) for b in fine.blocks)


def coarsen(p: Partition, merges: Sequence[tuple[int, int]]) -> Partition:
    """Merge pairs of blocks (by block index, applied in order)."""
    blocks = [set(b) for b in p.blocks]
    for a, b in merges:
        if a == b:
            continue
        blocks[a] |= blocks[b]
        blocks[b] = set()
    return Partition(tuple(frozenset(b) for b in blocks if b))


# --- file formats -----------------------------------------------------------

def save_graph(g: AgentGraph, path) -> None:
    lines = [str(g.n)] + [f"{i} {j}" for i, j in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> AgentGraph:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: empty graph file")
    n = int(rows[0][0])
    edges = []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{path}:{k}: expected 'i j', got {' '.join(row)!r}")
        edges.append((int(row[0]), int(row[1])))
    return AgentGraph.from_edges(n, edges)


def save_partition(p: Partition, path) -> None:
    Path(path).write_text("\n".join(" ".join(map(str, b)) for b in p.sorted_blocks()) + "\n")


def load_partition(path) -> Partition:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return Partition(tuple(frozenset(int(x) for x in row) for row in rows))


def resolve_partition(spec: str, n: int) -> Partition:
    """``"singletons"``, ``"joint"`` or a path to a partition file."""
    if spec == "singletons":
        return Partition.singletons(n)
    if spec == "joint":
        return Partition.joint(n)
    p = load_partition(spec)
    if p.n != n:
        raise ValueError(f"partition file {spec} covers {p.n} agents, expected {n}")
    return p
