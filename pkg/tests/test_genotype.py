"""Encoding, validity penalty, sampling statistics and canonicalization."""

import itertools

import numpy as np
import pytest

from nasopt import genotype as gt

from conftest import chain_genotype


class TestEncoding:
    def test_gene_counts(self):
        g = chain_genotype()
        assert len(g.edge_bits) == 21
        assert len(g.op_codes) == 5
        assert g.batch_code in (0, 1)

    def test_alphabet_enforced(self):
        with pytest.raises(gt.GenotypeError):
            gt.Genotype((2,) * 21, (0,) * 5, 0)
        with pytest.raises(gt.GenotypeError):
            gt.Genotype((0,) * 21, (3,) * 5, 0)
        with pytest.raises(gt.GenotypeError):
            gt.Genotype((0,) * 21, (0,) * 5, 2)
        with pytest.raises(gt.GenotypeError):
            gt.Genotype((0,) * 20, (0,) * 5, 0)

    def test_batch_size_mapping(self):
        assert chain_genotype(batch_code=0).batch_size == 1
        assert chain_genotype(batch_code=1).batch_size == 32

    def test_text_format(self):
        g = gt.Genotype((1,) + (0,) * 5 + (1,) + (0,) * 13 + (1,),
                        (0, 0, 1, 2, 0), 1)
        assert g.to_text() == "E:100000100000000000001|O:00120|B:1"
        assert gt.Genotype.from_text(g.to_text()) == g

    def test_text_rejects_garbage(self):
        for bad in ("", "E:01|O:0", "E:xyz|O:00120|B:1",
                    "O:00120|E:100000100000000000001|B:1"):
            with pytest.raises(gt.GenotypeError):
                gt.Genotype.from_text(bad)


class TestDecode:
    def test_all_zero_edges(self):
        g = gt.Genotype((0,) * 21, (0,) * 5, 0)
        graph = gt.decode(g)
        assert graph.edge_count == 0
        assert not graph.has_io_path

    def test_forced_ordering_convention(self):
        # genes for (1,2) and (2,7) sit at positions 0 and 11
        pairs = gt.edge_pairs(7)
        assert pairs[0] == (1, 2)
        assert pairs.index((2, 7)) == 10
        bits = [0] * 21
        bits[0] = bits[10] = 1
        graph = gt.decode(gt.Genotype(tuple(bits), (0,) * 5, 0))
        assert graph.has_io_path
        assert graph.on_path == frozenset({2})
        assert graph.predecessors(2) == [1]
        assert graph.predecessors(7) == [2]

    def test_roundtrip_is_identity(self, rng):
        for _ in range(1000):
            g = gt.sample_uniform(rng)
            assert gt.encode(gt.decode(g), g.batch_code) == g

    def test_reduced_space_roundtrip(self, rng):
        for v in (3, 4, 5):
            for _ in range(100):
                g = gt.sample_uniform(rng, num_nodes=v)
                assert gt.encode(gt.decode(g), g.batch_code) == g


class TestValidate:
    def test_edge_budget_branch(self):
        pairs = gt.edge_pairs(7)
        for extra in (1, 2, 5):
            bits = tuple(1 if i < 9 + extra else 0 for i in range(len(pairs)))
            rep = gt.validate(gt.decode(gt.Genotype(bits, (0,) * 5, 0)),
                              gt.PenaltyConfig(eta1=2.0, eta2=9.0))
            assert rep.penalty == extra * 2.0

    def test_edgeless_pays_kappa_floor(self):
        rep = gt.validate(gt.decode(gt.Genotype((0,) * 21, (0,) * 5, 0)),
                          gt.PenaltyConfig(eta1=1.0, eta2=4.0))
        assert rep.kappa == 6
        assert rep.penalty == 24.0
        assert not rep.has_io_path

    def test_full_chain_is_free(self):
        rep = gt.validate(gt.decode(chain_genotype()))
        assert rep.penalty == 0.0
        assert rep.is_valid

    def test_dangling_node_counts(self):
        # chain plus an edge into node order that reaches no output
        pairs = gt.edge_pairs(7)
        chain = {(1, 2), (2, 7)}
        bits = [1 if p in chain else 0 for p in pairs]
        rep = gt.validate(gt.decode(gt.Genotype(tuple(bits), (0,) * 5, 0)),
                          gt.PenaltyConfig(eta2=3.0))
        # intermediates 3..6 never touch a path
        assert rep.kappa == 4
        assert rep.penalty == 12.0

    def test_validity_iff_zero_penalty(self, rng):
        for _ in range(300):
            g = gt.sample_uniform(rng)
            graph = gt.decode(g)
            rep = gt.validate(graph)
            expect_valid = (graph.edge_count <= gt.MAX_EDGES
                            and graph.has_io_path
                            and len(graph.on_path) == 5)
            assert rep.is_valid == expect_valid

    def test_penalty_monotone_in_edge_excess(self):
        pairs = gt.edge_pairs(7)
        last = 0.0
        for total in range(10, 22):
            bits = tuple(1 if i < total else 0 for i in range(len(pairs)))
            rep = gt.validate(gt.decode(gt.Genotype(bits, (0,) * 5, 0)))
            assert rep.penalty > last
            last = rep.penalty


class TestSampling:
    def test_seed_reproducibility(self):
        a = gt.sample_uniform(np.random.default_rng(9))
        b = gt.sample_uniform(np.random.default_rng(9))
        assert a == b

    def test_edge_bit_mean(self):
        rng = np.random.default_rng(1)
        n = 100_000
        mean = np.mean([np.mean(gt.sample_uniform(rng).edge_bits)
                        for _ in range(n // 100)])
        # 1000 genotypes x 21 bits; 3 sigma of a fair coin at that count
        assert abs(mean - 0.5) < 0.011

    def test_op_code_distribution(self):
        rng = np.random.default_rng(2)
        counts = np.zeros(3)
        draws = 20_000
        for _ in range(draws):
            for c in gt.sample_uniform(rng).op_codes:
                counts[c] += 1
        freqs = counts / counts.sum()
        assert np.all(np.abs(freqs - 1 / 3) < 0.01)


class TestSpaceSize:
    def test_exact_value(self):
        assert gt.space_size() == 1_019_215_872
        assert gt.space_size() == 2 ** 21 * 3 ** 5 * 2

    def test_rounds_to_paper_magnitude(self):
        assert gt.space_size() == pytest.approx(1.0e9, rel=0.02)

    def test_reduced_space_matches_enumeration(self):
        count = sum(1 for _ in gt.enumerate_reduced(4))
        assert count == 576
        assert count == gt.space_size(num_nodes=4, batch_choices=1)


class TestEnumerateReduced:
    def test_no_duplicates(self):
        seen = {g.to_text() for g in gt.enumerate_reduced(4)}
        assert len(seen) == 576

    def test_all_decode(self):
        for g in gt.enumerate_reduced(3):
            gt.decode(g)

    def test_capacity_guard(self):
        with pytest.raises(gt.GenotypeError):
            next(gt.enumerate_reduced(6))


class TestCanonicalForm:
    def test_swapping_symmetric_nodes_same_key(self):
        # two parallel identical branches 1->2->7 / 1->3->7 with equal ops:
        # exchanging nodes 2 and 3 leaves the computation unchanged
        pairs = gt.edge_pairs(7)

        def bits_for(edges):
            return tuple(1 if p in edges else 0 for p in pairs)

        a = gt.decode(gt.Genotype(
            bits_for({(1, 2), (1, 3), (2, 7), (3, 7)}), (0, 1, 0, 0, 0), 0))
        b = gt.decode(gt.Genotype(
            bits_for({(1, 2), (1, 3), (2, 7), (3, 7)}), (1, 0, 0, 0, 0), 0))
        assert gt.canonical_form(a) == gt.canonical_form(b)

    def test_changing_path_op_changes_key(self):
        a = gt.canonical_form(gt.decode(chain_genotype(ops=(0, 0, 0, 0, 0))))
        b = gt.canonical_form(gt.decode(chain_genotype(ops=(1, 0, 0, 0, 0))))
        assert a != b

    def test_reduced_space_matches_permutation_oracle(self):
        """Equivalence-class counts of the 4-node space agree exactly."""
        prod_keys = set()
        oracle_keys = set()
        for g in gt.enumerate_reduced(4):
            graph = gt.decode(g)
            prod_keys.add(gt.canonical_form(graph))
            oracle_keys.add(_orbit_key(graph))
        assert len(prod_keys) == len(oracle_keys)

    def test_key_invariant_under_every_permutation(self, rng):
        for _ in range(50):
            g = gt.sample_uniform(rng, num_nodes=5)
            graph = gt.decode(g)
            key = gt.canonical_form(graph)
            v = 5
            for perm in itertools.permutations(range(1, v - 1)):
                order = np.array([0, *perm, v - 1])
                adj = graph.adjacency[np.ix_(order, order)]
                ops = tuple(graph.op_codes[i - 1] for i in perm)
                permuted = gt.CellGraph(adj, ops, v)
                assert gt.canonical_form(permuted) == key


def _orbit_key(graph):
    """Independent oracle: minimize over adjacency-matrix relabelings."""
    v = graph.num_nodes
    best = None
    for perm in itertools.permutations(range(1, v - 1)):
        order = np.array([0, *perm, v - 1])
        sub = graph.adjacency[np.ix_(order, order)]
        ops = tuple(graph.op_codes[i - 1] for i in perm)
        key = (sub.tobytes(), ops)
        if best is None or key < best:
            best = key
    return best
