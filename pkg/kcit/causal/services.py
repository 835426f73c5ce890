"""
PC algorithm with a pluggable conditional independence oracle.

The skeleton phase is PC-stable: adjacency sets are frozen at the start of
each conditioning level, so the result does not depend on the order edges
are visited in. Orientation finds v-structures from the separating sets and
closes the pattern under Meek's rules 1-4.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from scipy import stats

from kcit.config import KciConfig
from kcit.exceptions import KcitError, NumericalError
from kernels.services import DataMatrix

logger = logging.getLogger(__name__)

ORACLE_KCI = "kci"
ORACLE_PARTIAL_CORRELATION = "partial_correlation"
ORACLE_KINDS = (ORACLE_KCI, ORACLE_PARTIAL_CORRELATION)

UNDIRECTED = "undirected"
DIRECTED = "directed"

# diagonal jitter for a singular correlation matrix, applied once
CORRELATION_JITTER = 1e-10

Pair = FrozenSet[str]


class CausalDiscoveryError(KcitError):
    """Base Exception for structure learning"""

    exit_code = 1


class OracleQueryError(CausalDiscoveryError):
    """Raised when a CI query fails during the skeleton search"""

    exit_code = 8


class NodeMismatchError(CausalDiscoveryError):
    """Raised when graphs over different node sets are compared"""

    pass


class InsufficientDegreesOfFreedomError(CausalDiscoveryError):
    """Raised when n is too small for the Fisher z-transform"""

    exit_code = 5


class SingularCorrelationError(CausalDiscoveryError, NumericalError):
    """Raised when the correlation matrix stays singular after jitter"""

    exit_code = 7


class InvalidGraphError(CausalDiscoveryError):
    """Raised when a graph breaks the CPDAG invariants"""

    pass


def pair(a: str, b: str) -> Pair:
    return frozenset((a, b))


# ----------------------------------------------------------------------------
# Graph types
# ----------------------------------------------------------------------------


@dataclass
class Skeleton:
    nodes: Tuple[str, ...]
    adjacency: Dict[str, Set[str]]
    sepsets: Dict[Pair, Tuple[str, ...]] = field(default_factory=dict)

    def edges(self) -> Set[Pair]:
        return {pair(a, b) for a in self.nodes for b in self.adjacency[a]}


@dataclass
class Cpdag:
    """
    Partially directed graph of a Markov equivalence class.

    ``directed`` holds (tail, head) pairs, ``undirected`` unordered pairs.
    """

    nodes: Tuple[str, ...]
    directed: Set[Tuple[str, str]] = field(default_factory=set)
    undirected: Set[Pair] = field(default_factory=set)
    sepsets: Dict[Pair, Tuple[str, ...]] = field(default_factory=dict)
    conflicts: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        known = set(self.nodes)
        seen: Set[Pair] = set()
        for tail, head in self.directed:
            self._check_edge(pair(tail, head), known, seen)
        for edge in self.undirected:
            self._check_edge(edge, known, seen)
        if not nx.is_directed_acyclic_graph(self.directed_graph()):
            raise InvalidGraphError("directed part of the graph has a cycle")

    @staticmethod
    def _check_edge(edge: Pair, known: Set[str], seen: Set[Pair]) -> None:
        if len(edge) != 2:
            raise InvalidGraphError(f"self-loop on {set(edge)}")
        if not edge <= known:
            raise InvalidGraphError(f"edge {sorted(edge)} uses unknown nodes")
        if edge in seen:
            raise InvalidGraphError(f"more than one edge between {sorted(edge)}")
        seen.add(edge)

    @property
    def edges(self) -> Set[Tuple[str, str, str]]:
        """(i, j, mark) triples; undirected pairs are listed in node order."""
        order = {name: i for i, name in enumerate(self.nodes)}
        triples = {(tail, head, DIRECTED) for tail, head in self.directed}
        for edge in self.undirected:
            a, b = sorted(edge, key=order.get)
            triples.add((a, b, UNDIRECTED))
        return triples

    def skeleton(self) -> Set[Pair]:
        return {pair(a, b) for a, b in self.directed} | set(self.undirected)

    def adjacent(self, a: str, b: str) -> bool:
        return pair(a, b) in self.skeleton()

    def v_structures(self) -> Set[Tuple[str, str, str]]:
        """Unshielded colliders (a, c, b): a → c ← b with a, b nonadjacent, a before b."""
        order = {name: i for i, name in enumerate(self.nodes)}
        skeleton = self.skeleton()
        parents: Dict[str, List[str]] = {}
        for tail, head in self.directed:
            parents.setdefault(head, []).append(tail)
        found = set()
        for child, tails in parents.items():
            for a, b in combinations(sorted(tails, key=order.get), 2):
                if pair(a, b) not in skeleton:
                    found.add((a, child, b))
        return found

    def directed_graph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from(self.directed)
        return graph

    def to_dict(self) -> Dict:
        order = {name: i for i, name in enumerate(self.nodes)}

        def ordered(names: Iterable[str]) -> List[str]:
            return sorted(names, key=order.get)

        return {
            "nodes": list(self.nodes),
            "directed": sorted(
                ([t, h] for t, h in self.directed), key=lambda e: (order[e[0]], order[e[1]])
            ),
            "undirected": sorted(
                (ordered(e) for e in self.undirected), key=lambda e: (order[e[0]], order[e[1]])
            ),
            "sepsets": sorted(
                ({"pair": ordered(p), "set": ordered(s)} for p, s in self.sepsets.items()),
                key=lambda item: (order[item["pair"][0]], order[item["pair"][1]]),
            ),
            "conflicts": list(self.conflicts),
        }

    def to_dot(self) -> str:
        lines = ["digraph cpdag {"]
        lines += [f'  "{name}";' for name in self.nodes]
        as_dict = self.to_dict()
        lines += [f'  "{t}" -> "{h}";' for t, h in as_dict["directed"]]
        lines += [f'  "{a}" -> "{b}" [dir=none];' for a, b in as_dict["undirected"]]
        lines.append("}")
        return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Oracles
# ----------------------------------------------------------------------------


def partial_correlation_test(
    data: DataMatrix, x, y, z_set: Sequence = ()
) -> float:
    """
    Fisher z test of zero partial correlation of x and y given z_set:
    p = 2 (1 - Φ(sqrt(n - |Z| - 3) |atanh ρ̂|)).
    """
    indices = data.column_indices([x, y, *z_set])
    if len(set(indices)) != len(indices):
        raise CausalDiscoveryError("x, y and the conditioning set must be distinct columns")
    n, k = data.n, len(z_set)
    if n <= k + 3:
        raise InsufficientDegreesOfFreedomError(
            f"n = {n} too small for a conditioning set of size {k}"
        )

    values = data.values[:, list(indices)]
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(values, rowvar=False)
    # a constant column is uncorrelated with everything
    corr = np.where(np.isfinite(corr), corr, 0.0)
    np.fill_diagonal(corr, 1.0)

    precision = _invert_correlation(corr)
    rho = -precision[0, 1] / np.sqrt(precision[0, 0] * precision[1, 1])
    rho = float(np.clip(rho, -1.0, 1.0))
    with np.errstate(divide="ignore"):
        statistic = np.sqrt(n - k - 3) * abs(np.arctanh(rho))
    return float(min(1.0, 2.0 * stats.norm.sf(statistic)))


def _invert_correlation(corr: np.ndarray) -> np.ndarray:
    try:
        precision = np.linalg.inv(corr)
        if np.all(np.isfinite(precision)):
            return precision
    except np.linalg.LinAlgError:
        pass
    logger.debug("singular correlation matrix, retrying with jitter")
    try:
        precision = np.linalg.inv(corr + CORRELATION_JITTER * np.eye(corr.shape[0]))
    except np.linalg.LinAlgError as e:
        raise SingularCorrelationError(f"correlation matrix is singular: {e}") from e
    if not np.all(np.isfinite(precision)):
        raise SingularCorrelationError("correlation matrix inverse is not finite")
    return precision


@dataclass(frozen=True)
class CiOracle:
    """Answers "x independent of y given z?" with a p-value."""

    kind: str = ORACLE_KCI
    alpha: float = 0.05
    config: KciConfig = field(default_factory=KciConfig)

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise CausalDiscoveryError(f"unknown oracle {self.kind!r}, expected {ORACLE_KINDS}")
        if not 0 < self.alpha < 1:
            raise CausalDiscoveryError(f"alpha must lie in (0, 1), got {self.alpha}")

    def p_value(self, data: DataMatrix, x: str, y: str, z: Sequence[str]) -> float:
        if self.kind == ORACLE_PARTIAL_CORRELATION:
            return partial_correlation_test(data, x, y, z)
        from citest.services import ci_test

        return ci_test(data, [x], [y], list(z), self.config).p_value


@dataclass(frozen=True)
class DSeparationOracle:
    """Perfect oracle reading independences off a known DAG by d-separation."""

    dag: nx.DiGraph
    alpha: float = 0.05
    kind: str = "d_separation"

    def p_value(self, data: Optional[DataMatrix], x: str, y: str, z: Sequence[str]) -> float:
        return 1.0 if nx.is_d_separator(self.dag, {x}, {y}, set(z)) else 0.0


# ----------------------------------------------------------------------------
# Skeleton
# ----------------------------------------------------------------------------


def _query(oracle, data, x: str, y: str, cond: Tuple[str, ...]) -> float:
    try:
        return oracle.p_value(data, x, y, cond)
    except Exception as e:
        logger.error(f"CI query {x} _||_ {y} | {list(cond)} failed: {e}")
        raise OracleQueryError(f"CI query {x} _||_ {y} | {list(cond)} failed: {e}") from e


def pc_skeleton(
    data: DataMatrix,
    oracle,
    max_cond: Optional[int] = None,
    workers: int = 1,
    nodes: Optional[Sequence[str]] = None,
) -> Skeleton:
    """
    PC-stable skeleton search.

    For ℓ = 0 … max_cond, every ordered adjacent pair (i, j) is tested given
    each size-ℓ subset of the level-start adjacency of i minus j, in
    lexicographic order; the edge is dropped on the first p-value above α
    and that subset recorded as the separating set. With ``workers`` > 1
    all queries of a level are evaluated first, then applied in the same
    order, which gives identical output.
    """
    nodes = tuple(nodes or data.column_names)
    if len(nodes) < 2:
        raise CausalDiscoveryError("structure learning needs at least 2 variables")
    max_cond = len(nodes) - 2 if max_cond is None else max_cond
    order = {name: i for i, name in enumerate(nodes)}
    adjacency = {v: {u for u in nodes if u != v} for v in nodes}
    sepsets: Dict[Pair, Tuple[str, ...]] = {}

    level = 0
    while level <= max_cond:
        frozen = {v: sorted(adjacency[v], key=order.get) for v in nodes}
        if all(len(frozen[v]) - 1 < level for v in nodes):
            break

        candidates = []
        for i in nodes:
            for j in frozen[i]:
                others = [k for k in frozen[i] if k != j]
                if len(others) >= level:
                    candidates.append((i, j, list(combinations(others, level))))

        precomputed: Dict[Tuple[str, str, Tuple[str, ...]], float] = {}
        if workers > 1:
            queries = [(i, j, s) for i, j, subsets in candidates for s in subsets]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = pool.map(lambda q: _query(oracle, data, *q), queries)
                precomputed = dict(zip(queries, results))

        removed: Dict[Pair, Tuple[str, ...]] = {}
        for i, j, subsets in candidates:
            if pair(i, j) in removed:
                continue
            for cond in subsets:
                p = precomputed[(i, j, cond)] if precomputed else _query(oracle, data, i, j, cond)
                if p > oracle.alpha:
                    removed[pair(i, j)] = cond
                    logger.debug(f"removed {i} - {j} given {list(cond)} (p={p:.4g})")
                    break

        for edge, cond in removed.items():
            a, b = tuple(edge)
            adjacency[a].discard(b)
            adjacency[b].discard(a)
            sepsets[edge] = cond
        level += 1

    return Skeleton(nodes=nodes, adjacency=adjacency, sepsets=sepsets)


# ----------------------------------------------------------------------------
# Orientation
# ----------------------------------------------------------------------------


class _Pattern:
    """Mutable partially directed graph used while orienting."""

    def __init__(self, nodes: Sequence[str], adjacency: Dict[str, Set[str]]):
        self.nodes = tuple(nodes)
        self.order = {name: i for i, name in enumerate(self.nodes)}
        self.adjacency = {v: set(adjacency.get(v, ())) for v in self.nodes}
        self.directed: Set[Tuple[str, str]] = set()
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(self.nodes)
        self.conflicts: List[str] = []
        # pairs with contradicting v-structure evidence stay undirected
        self.locked: Set[Pair] = set()

    def sorted(self, names: Iterable[str]) -> List[str]:
        return sorted(names, key=self.order.get)

    def adjacent(self, a: str, b: str) -> bool:
        return b in self.adjacency[a]

    def is_directed(self, a: str, b: str) -> bool:
        return (a, b) in self.directed

    def is_undirected(self, a: str, b: str) -> bool:
        return self.adjacent(a, b) and (a, b) not in self.directed and (b, a) not in self.directed

    def orient(self, a: str, b: str, reason: str) -> bool:
        """Orient a → b unless that closes a directed cycle."""
        if nx.has_path(self.graph, b, a):
            message = f"{reason}: orienting {a} -> {b} would create a cycle; left undirected"
            logger.warning(message)
            self.conflicts.append(message)
            return False
        self.directed.add((a, b))
        self.graph.add_edge(a, b)
        return True

    def undirected_pairs(self) -> List[Tuple[str, str]]:
        pairs = []
        for a in self.nodes:
            for b in self.sorted(self.adjacency[a]):
                if self.order[a] < self.order[b] and self.is_undirected(a, b):
                    pairs.append((a, b))
        return pairs

    def to_cpdag(self, sepsets: Dict[Pair, Tuple[str, ...]]) -> Cpdag:
        undirected = {pair(a, b) for a, b in self.undirected_pairs()}
        return Cpdag(
            nodes=self.nodes,
            directed=set(self.directed),
            undirected=undirected,
            sepsets=dict(sepsets),
            conflicts=list(self.conflicts),
        )


def _orient_colliders(pattern: _Pattern, arrowheads: List[Tuple[str, str]]) -> None:
    """Apply proposed arrowheads; pairs proposed both ways stay undirected."""
    proposed = set(arrowheads)
    for a, b in arrowheads:
        if (b, a) in proposed:
            pattern.locked.add(pair(a, b))
            if pattern.order[a] < pattern.order[b]:
                message = f"conflicting v-structure orientations on {a} - {b}; left undirected"
                logger.warning(message)
                pattern.conflicts.append(message)
            continue
        if not pattern.is_directed(a, b):
            pattern.orient(a, b, "v-structure")


def _meek_rule_applies(pattern: _Pattern, a: str, b: str) -> Optional[str]:
    """Name of the first Meek rule that orients the undirected edge a - b as a → b."""
    nbrs = pattern.sorted(pattern.adjacency[a])
    # R1: c → a - b, c and b nonadjacent
    for c in pattern.sorted(pattern.adjacency[a]):
        if pattern.is_directed(c, a) and c != b and not pattern.adjacent(c, b):
            return "rule 1"
    # R2: a → c → b
    for c in nbrs:
        if pattern.is_directed(a, c) and pattern.is_directed(c, b):
            return "rule 2"
    # R3: a - c → b, a - d → b, c and d nonadjacent
    feeders = [c for c in nbrs if c != b and pattern.is_undirected(a, c) and pattern.is_directed(c, b)]
    for c, d in combinations(feeders, 2):
        if not pattern.adjacent(c, d):
            return "rule 3"
    # R4: a - c → d → b, a adjacent d, c and b nonadjacent
    for c in nbrs:
        if c == b or not pattern.is_undirected(a, c) or pattern.adjacent(c, b):
            continue
        for d in pattern.sorted(pattern.adjacency[c]):
            if d not in (a, b) and pattern.is_directed(c, d) and pattern.is_directed(d, b) and pattern.adjacent(a, d):
                return "rule 4"
    return None


def _apply_meek_rules(pattern: _Pattern) -> None:
    blocked: Set[Tuple[str, str]] = set()
    changed = True
    while changed:
        changed = False
        for a, b in pattern.undirected_pairs():
            if pair(a, b) in pattern.locked:
                continue
            for tail, head in ((a, b), (b, a)):
                if (tail, head) in blocked:
                    continue
                rule = _meek_rule_applies(pattern, tail, head)
                if rule is None:
                    continue
                if pattern.orient(tail, head, f"Meek {rule}"):
                    changed = True
                else:
                    blocked.add((tail, head))
                break
            if changed:
                break


def orient_cpdag(
    adjacency: Dict[str, Set[str]],
    sepsets: Dict[Pair, Tuple[str, ...]],
    nodes: Optional[Sequence[str]] = None,
) -> Cpdag:
    """
    Orient v-structures i → k ← j for nonadjacent i, j with k outside
    sepset(i, j), then close under Meek rules 1-4. Conflicts leave edges
    undirected and are listed in ``Cpdag.conflicts``.
    """
    pattern = _Pattern(nodes or list(adjacency), adjacency)
    arrowheads: List[Tuple[str, str]] = []
    for k in pattern.nodes:
        for i, j in combinations(pattern.sorted(pattern.adjacency[k]), 2):
            if pattern.adjacent(i, j):
                continue
            if k not in sepsets.get(pair(i, j), ()):
                arrowheads += [(i, k), (j, k)]
    _orient_colliders(pattern, arrowheads)
    _apply_meek_rules(pattern)
    return pattern.to_cpdag(sepsets)


def dag_to_cpdag(dag: nx.DiGraph, nodes: Optional[Sequence[str]] = None) -> Cpdag:
    """The CPDAG of a DAG's Markov equivalence class."""
    nodes = list(nodes or dag.nodes)
    adjacency = {v: set(dag.predecessors(v)) | set(dag.successors(v)) for v in nodes}
    pattern = _Pattern(nodes, adjacency)
    arrowheads = []
    for child in pattern.nodes:
        for a, b in combinations(pattern.sorted(dag.predecessors(child)), 2):
            if not pattern.adjacent(a, b):
                arrowheads += [(a, child), (b, child)]
    _orient_colliders(pattern, arrowheads)
    _apply_meek_rules(pattern)
    return pattern.to_cpdag({})


def markov_equivalent(g1: Cpdag, g2: Cpdag) -> bool:
    """Same skeleton and same v-structures."""
    if set(g1.nodes) != set(g2.nodes):
        raise NodeMismatchError(f"node sets differ: {sorted(g1.nodes)} vs {sorted(g2.nodes)}")
    return g1.skeleton() == g2.skeleton() and _canonical_v(g1) == _canonical_v(g2)


def _canonical_v(graph: Cpdag) -> Set[Tuple[FrozenSet[str], str]]:
    return {(pair(a, b), c) for a, c, b in graph.v_structures()}


def run_pc(
    data: DataMatrix,
    oracle,
    max_cond: Optional[int] = None,
    workers: int = 1,
    nodes: Optional[Sequence[str]] = None,
) -> Cpdag:
    """Skeleton search followed by orientation."""
    skeleton = pc_skeleton(data, oracle, max_cond=max_cond, workers=workers, nodes=nodes)
    logger.info(
        f"PC skeleton over {len(skeleton.nodes)} variables kept {len(skeleton.edges())} edges"
    )
    return orient_cpdag(skeleton.adjacency, skeleton.sepsets, nodes=skeleton.nodes)
