"""Cell encodings: genotypes, DAG decoding, validity penalty and isomorphism.

A cell lives on ``v`` ordered nodes (node 1 = input, node ``v`` = output,
the rest intermediate).  Its genotype is a flat gene string: one binary
gene per node pair (i, j), i < j, in lexicographic order, then one
ternary operation gene per intermediate node, then one binary batch-size
gene.  The production space uses v = 7: 21 + 5 + 1 = 27 genes, i.e.
2^21 * 3^5 * 2 = 1,019,215,872 models.  Smaller ``v`` gives the reduced
spaces used for exhaustive checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

NUM_NODES = 7
OP_NAMES = ("conv3x3", "maxpool3x3", "avgpool3x3")
BATCH_SIZES = (1, 32)
MAX_EDGES = 9

# penalty floor when no input->output path exists: all five intermediates
# plus one unit, so the penalty strictly dominates any dangling-node case
NO_PATH_KAPPA = 6


class GenotypeError(ValueError):
    """Malformed gene string or alphabet violation."""


def _num_edge_genes(v):
    return v * (v - 1) // 2


def edge_pairs(v=NUM_NODES):
    """Node pairs (i, j), 1 <= i < j <= v, in gene order."""
    return [(i, j) for i in range(1, v + 1) for j in range(i + 1, v + 1)]


@dataclass(frozen=True)
class Genotype:
    """Gene-string form of a cell architecture."""

    edge_bits: tuple
    op_codes: tuple
    batch_code: int
    num_nodes: int = NUM_NODES

    def __post_init__(self):
        v = self.num_nodes
        if not 3 <= v <= NUM_NODES:
            raise GenotypeError(f"node count must be in [3, {NUM_NODES}], got {v}")
        if len(self.edge_bits) != _num_edge_genes(v):
            raise GenotypeError(
                f"expected {_num_edge_genes(v)} edge genes, got {len(self.edge_bits)}")
        if len(self.op_codes) != v - 2:
            raise GenotypeError(
                f"expected {v - 2} op genes, got {len(self.op_codes)}")
        if any(g not in (0, 1) for g in self.edge_bits):
            raise GenotypeError("edge genes must be 0/1")
        if any(g not in (0, 1, 2) for g in self.op_codes):
            raise GenotypeError("op genes must be 0/1/2")
        if self.batch_code not in (0, 1):
            raise GenotypeError("batch gene must be 0/1")

    @property
    def batch_size(self):
        return BATCH_SIZES[self.batch_code]

    def to_text(self):
        """Bit-exact text form ``E:<edges>|O:<ops>|B:<batch>``."""
        e = "".join(str(g) for g in self.edge_bits)
        o = "".join(str(g) for g in self.op_codes)
        return f"E:{e}|O:{o}|B:{self.batch_code}"

    @staticmethod
    def from_text(text):
        parts = text.strip().split("|")
        if len(parts) != 3 or not (parts[0].startswith("E:")
                                   and parts[1].startswith("O:")
                                   and parts[2].startswith("B:")):
            raise GenotypeError(f"bad genotype text {text!r}")
        try:
            edge_bits = tuple(int(c) for c in parts[0][2:])
            op_codes = tuple(int(c) for c in parts[1][2:])
            batch_code = int(parts[2][2:])
        except ValueError as exc:
            raise GenotypeError(f"non-numeric gene in {text!r}") from exc
        # recover the node count from the op-gene count
        v = len(op_codes) + 2
        return Genotype(edge_bits, op_codes, batch_code, num_nodes=v)


@dataclass
class CellGraph:
    """Decoded DAG over nodes 1..v with per-intermediate operations."""

    adjacency: np.ndarray        # v x v upper-triangular 0/1, 0-indexed
    op_codes: tuple              # ops for intermediate nodes 2..v-1
    num_nodes: int

    edge_count: int = field(init=False)
    on_path: frozenset = field(init=False)     # intermediates on an i/o path
    has_io_path: bool = field(init=False)

    def __post_init__(self):
        a = self.adjacency
        v = self.num_nodes
        assert a.shape == (v, v)
        self.edge_count = int(a.sum())
        self.edge_list = [(int(i), int(j)) for i, j in np.argwhere(a)]
        reach_fwd = _reachable(a, 0)
        reach_bwd = _reachable(a.T, v - 1)
        self.has_io_path = (v - 1) in reach_fwd and 0 in reach_bwd
        # 1-indexed ids of intermediates lying on some input->output path
        self.on_path = frozenset(
            n + 1 for n in range(1, v - 1) if n in reach_fwd and n in reach_bwd)

    def node_op(self, node):
        """Operation name of an intermediate node (1-indexed node id)."""
        return OP_NAMES[self.op_codes[node - 2]]

    def predecessors(self, node):
        """1-indexed ids of nodes feeding the given 1-indexed node."""
        col = self.adjacency[:, node - 1]
        return [i + 1 for i in range(self.num_nodes) if col[i]]


def _reachable(adj, start):
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for w in np.flatnonzero(adj[u]):
            if w not in seen:
                seen.add(int(w))
                stack.append(int(w))
    return seen


def decode(genotype):
    """Deterministic bijection from genotype to :class:`CellGraph`."""
    v = genotype.num_nodes
    adj = np.zeros((v, v), dtype=np.int8)
    for bit, (i, j) in zip(genotype.edge_bits, edge_pairs(v)):
        if bit:
            adj[i - 1, j - 1] = 1
    return CellGraph(adj, genotype.op_codes, v)


def encode(graph, batch_code=0):
    """Inverse of :func:`decode` (batch gene supplied separately)."""
    v = graph.num_nodes
    bits = tuple(int(graph.adjacency[i - 1, j - 1]) for i, j in edge_pairs(v))
    return Genotype(bits, tuple(graph.op_codes), batch_code, num_nodes=v)


@dataclass(frozen=True)
class PenaltyConfig:
    """Coefficients of the two validity-penalty branches."""

    eta1: float = 1e6
    eta2: float = 1e6

    def __post_init__(self):
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("penalty coefficients must be positive")


@dataclass(frozen=True)
class ValidityReport:
    edge_count: int
    has_io_path: bool
    kappa: int
    penalty: float

    @property
    def is_valid(self):
        return self.penalty == 0.0


def validate(graph, cfg=PenaltyConfig()):
    """Edge-budget / connectivity penalty of a decoded cell.

    Over-budget graphs pay per excess edge.  Otherwise every intermediate
    node off all input->output paths counts toward kappa; a graph with no
    input->output path at all gets the kappa floor so it is never free.
    """
    theta = graph.edge_count
    if theta > MAX_EDGES:
        return ValidityReport(theta, graph.has_io_path,
                              kappa=0, penalty=(theta - MAX_EDGES) * cfg.eta1)
    if not graph.has_io_path:
        kappa = NO_PATH_KAPPA
    else:
        kappa = (graph.num_nodes - 2) - len(graph.on_path)
    return ValidityReport(theta, graph.has_io_path, kappa, kappa * cfg.eta2)


def sample_uniform(rng, num_nodes=NUM_NODES):
    """One genotype with every gene uniform over its alphabet."""
    v = num_nodes
    bits = tuple(int(b) for b in rng.integers(0, 2, size=_num_edge_genes(v)))
    ops = tuple(int(o) for o in rng.integers(0, 3, size=v - 2))
    return Genotype(bits, ops, int(rng.integers(0, 2)), num_nodes=v)


def space_size(num_nodes=NUM_NODES, batch_choices=len(BATCH_SIZES)):
    """Exact model count: per-gene alphabet sizes multiplied out."""
    v = num_nodes
    return (2 ** _num_edge_genes(v)) * (3 ** (v - 2)) * batch_choices


def enumerate_reduced(max_nodes, batch_code=0):
    """Every genotype of a reduced space (the batch gene held fixed).

    Capped at 5 nodes: the full 6/7-node spaces are too large to walk.
    """
    if max_nodes > 5:
        raise GenotypeError(f"refusing to enumerate {max_nodes}-node space")
    v = max_nodes
    ne = _num_edge_genes(v)
    for bits in itertools.product((0, 1), repeat=ne):
        for ops in itertools.product((0, 1, 2), repeat=v - 2):
            yield Genotype(bits, ops, batch_code, num_nodes=v)


# ---------------------------------------------------------------------------
# isomorphism canonicalization
# ---------------------------------------------------------------------------

_PERM_CACHE = {}


def _perms(k):
    if k not in _PERM_CACHE:
        _PERM_CACHE[k] = list(itertools.permutations(range(k)))
    return _PERM_CACHE[k]


def canonical_form(graph):
    """Stable key shared by all intermediate-node relabelings of a cell.

    Relabelings fix input/output and permute intermediates; the full
    (possibly non-triangular) edge set is serialized under each
    relabeling and the lexicographic minimum taken.  With at most five
    intermediates the exhaustive sweep is cheap and exact.
    """
    v = graph.num_nodes
    edges = graph.edge_list
    ops = graph.op_codes
    best = None
    for perm in _perms(v - 2):
        # pos[old node index] = relabeled index
        pos = list(range(v))
        for t in range(v - 2):
            pos[1 + t] = 1 + perm[t]
        bits = sorted(pos[i] * v + pos[j] for i, j in edges)
        new_ops = [0] * (v - 2)
        for t in range(v - 2):
            new_ops[perm[t]] = ops[t]
        key = (bits, new_ops)
        if best is None or key < best:
            best = key
    bits, new_ops = best
    return f"v{v}:" + ",".join(map(str, bits)) + ":" + "".join(map(str, new_ops))
