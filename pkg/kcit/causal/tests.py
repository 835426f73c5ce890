from itertools import combinations, product

import networkx as nx
import numpy as np
from django.test import SimpleTestCase, tag

from kernels.services import DataMatrix

from .serializers import CpdagSerializer
from .services import (
    CiOracle,
    Cpdag,
    CausalDiscoveryError,
    DSeparationOracle,
    InsufficientDegreesOfFreedomError,
    InvalidGraphError,
    NodeMismatchError,
    OracleQueryError,
    dag_to_cpdag,
    markov_equivalent,
    orient_cpdag,
    pair,
    partial_correlation_test,
    pc_skeleton,
    run_pc,
)


def all_dags(nodes):
    """Every DAG over ``nodes``: each pair is absent, forward or backward."""
    pairs = list(combinations(nodes, 2))
    for choice in product((0, 1, 2), repeat=len(pairs)):
        dag = nx.DiGraph()
        dag.add_nodes_from(nodes)
        for (a, b), mark in zip(pairs, choice):
            if mark == 1:
                dag.add_edge(a, b)
            elif mark == 2:
                dag.add_edge(b, a)
        if nx.is_directed_acyclic_graph(dag):
            yield dag


def dag_from_edges(nodes, edges):
    dag = nx.DiGraph()
    dag.add_nodes_from(nodes)
    dag.add_edges_from(edges)
    return dag


def adjacency_of(nodes, edges):
    adjacency = {v: set() for v in nodes}
    for a, b in edges:
        adjacency[a].add(b)
        adjacency[b].add(a)
    return adjacency


def chain_data(seed, n=500):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    z = 0.8 * x + rng.standard_normal(n)
    y = 0.8 * z + rng.standard_normal(n)
    return DataMatrix(values=np.column_stack([x, z, y]), column_names=("X", "Z", "Y"))


PCORR = CiOracle(kind="partial_correlation", alpha=0.05)


class CpdagInvariantTest(SimpleTestCase):
    def test_self_loop_rejected(self):
        with self.assertRaises(InvalidGraphError):
            Cpdag(nodes=("A", "B"), directed={("A", "A")})

    def test_two_edges_on_one_pair_rejected(self):
        with self.assertRaises(InvalidGraphError):
            Cpdag(nodes=("A", "B"), directed={("A", "B")}, undirected={pair("A", "B")})
        with self.assertRaises(InvalidGraphError):
            Cpdag(nodes=("A", "B"), directed={("A", "B"), ("B", "A")})

    def test_directed_cycle_rejected(self):
        with self.assertRaises(InvalidGraphError):
            Cpdag(nodes=("A", "B", "C"), directed={("A", "B"), ("B", "C"), ("C", "A")})

    def test_edges_listing(self):
        graph = Cpdag(nodes=("A", "B", "C"), directed={("A", "B")}, undirected={pair("C", "B")})
        self.assertEqual(graph.edges, {("A", "B", "directed"), ("B", "C", "undirected")})

    def test_to_dot(self):
        graph = Cpdag(nodes=("A", "B", "C"), directed={("A", "B")}, undirected={pair("B", "C")})
        dot = graph.to_dot()
        self.assertTrue(dot.startswith("digraph cpdag {"))
        self.assertIn('"A" -> "B";', dot)
        self.assertIn('"B" -> "C" [dir=none];', dot)

    def test_serializer_rebuilds_graph(self):
        graph = dag_to_cpdag(dag_from_edges("ABC", [("A", "C"), ("B", "C")]))
        serializer = CpdagSerializer(data=graph.to_dict())
        self.assertTrue(serializer.is_valid(), serializer.errors)
        rebuilt = serializer.save()
        self.assertEqual(rebuilt.directed, graph.directed)
        self.assertEqual(CpdagSerializer(graph.to_dict()).data["directed"], [["A", "C"], ["B", "C"]])

    def test_serializer_rejects_unknown_node(self):
        serializer = CpdagSerializer(data={"nodes": ["A"], "directed": [["A", "Q"]], "undirected": []})
        self.assertFalse(serializer.is_valid())


class PartialCorrelationTest(SimpleTestCase):
    def test_identical_columns(self):
        x = np.random.default_rng(0).standard_normal(100)
        data = DataMatrix(values=np.column_stack([x, x]))
        self.assertLess(partial_correlation_test(data, 0, 1), 1e-300)

    def test_zero_correlation(self):
        data = DataMatrix(values=np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]))
        self.assertEqual(partial_correlation_test(data, 0, 1), 1.0)

    def test_too_few_rows(self):
        data = DataMatrix(values=np.random.default_rng(1).standard_normal((4, 3)))
        with self.assertRaises(InsufficientDegreesOfFreedomError):
            partial_correlation_test(data, 0, 1, [2])

    def test_repeated_column_rejected(self):
        data = DataMatrix(values=np.random.default_rng(2).standard_normal((20, 3)))
        with self.assertRaises(CausalDiscoveryError):
            partial_correlation_test(data, 0, 1, [0])

    def test_conditioning_removes_chain_dependence(self):
        data = chain_data(3)
        self.assertLess(partial_correlation_test(data, "X", "Y"), 1e-6)
        self.assertGreater(partial_correlation_test(data, "X", "Y", ["Z"]), 1e-3)


@tag("slow")
class PartialCorrelationCalibrationTest(SimpleTestCase):
    def test_type_one_rate(self):
        rejections = 0
        for seed in range(300):
            rng = np.random.default_rng(seed)
            z = rng.standard_normal(500)
            x = z + rng.standard_normal(500)
            y = -0.5 * z + rng.standard_normal(500)
            data = DataMatrix(values=np.column_stack([x, y, z]))
            rejections += partial_correlation_test(data, 0, 1, [2]) < 0.05
        self.assertGreaterEqual(rejections / 300, 0.02)
        self.assertLessEqual(rejections / 300, 0.09)


class OracleTest(SimpleTestCase):
    def test_alpha_and_kind_validated(self):
        with self.assertRaises(CausalDiscoveryError):
            CiOracle(alpha=1.0)
        with self.assertRaises(CausalDiscoveryError):
            CiOracle(kind="chi_square")

    def test_d_separation(self):
        oracle = DSeparationOracle(dag_from_edges("XZY", [("X", "Z"), ("Z", "Y")]))
        self.assertEqual(oracle.p_value(None, "X", "Y", ["Z"]), 1.0)
        self.assertEqual(oracle.p_value(None, "X", "Y", []), 0.0)

    def test_kci_oracle(self):
        data = chain_data(4, n=200)
        self.assertLess(CiOracle().p_value(data, "X", "Y", []), 0.01)


class PCSkeletonTest(SimpleTestCase):
    def test_independent_pair(self):
        oracle = DSeparationOracle(dag_from_edges("AB", []))
        skeleton = pc_skeleton(None, oracle, nodes=("A", "B"))
        self.assertEqual(skeleton.edges(), set())
        self.assertEqual(skeleton.sepsets[pair("A", "B")], ())

    def test_single_node_rejected(self):
        with self.assertRaises(CausalDiscoveryError):
            pc_skeleton(None, DSeparationOracle(nx.DiGraph()), nodes=("A",))

    def test_chain_recovered(self):
        hits = 0
        for seed in range(100):
            skeleton = pc_skeleton(chain_data(seed), PCORR)
            hits += (
                skeleton.edges() == {pair("X", "Z"), pair("Z", "Y")}
                and skeleton.sepsets.get(pair("X", "Y")) == ("Z",)
            )
        self.assertGreaterEqual(hits, 90)

    def test_clique_kept(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(500)
            y = x + rng.standard_normal(500)
            z = x + y + rng.standard_normal(500)
            skeleton = pc_skeleton(DataMatrix(values=np.column_stack([x, y, z])), PCORR)
            hits += len(skeleton.edges()) == 3
        self.assertGreaterEqual(hits, 90)

    def test_column_order_invariance(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal(400), rng.standard_normal(400)
        c = a + b + rng.standard_normal(400)
        d = c + rng.standard_normal(400)
        values = np.column_stack([a, b, c, d])
        original = pc_skeleton(DataMatrix(values=values, column_names=tuple("ABCD")), PCORR)
        permuted = pc_skeleton(
            DataMatrix(values=values[:, [3, 1, 0, 2]], column_names=tuple("DBAC")), PCORR
        )
        self.assertEqual(original.edges(), permuted.edges())
        self.assertEqual(set(original.sepsets), set(permuted.sepsets))

    def test_threaded_levels_match_sequential(self):
        data = chain_data(6)
        sequential = pc_skeleton(data, PCORR)
        threaded = pc_skeleton(data, PCORR, workers=4)
        self.assertEqual(sequential.edges(), threaded.edges())
        self.assertEqual(sequential.sepsets, threaded.sepsets)

    def test_oracle_failure_names_query(self):
        class BrokenOracle:
            alpha = 0.05

            def p_value(self, data, x, y, z):
                raise ValueError("boom")

        with self.assertRaises(OracleQueryError) as ctx:
            pc_skeleton(None, BrokenOracle(), nodes=("A", "B"))
        self.assertIn("A _||_ B", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 8)


class OrientTest(SimpleTestCase):
    def test_chain_sepset_leaves_undirected(self):
        adjacency = adjacency_of("XZY", [("X", "Z"), ("Z", "Y")])
        graph = orient_cpdag(adjacency, {pair("X", "Y"): ("Z",)}, nodes=tuple("XZY"))
        self.assertEqual(graph.directed, set())
        self.assertEqual(len(graph.undirected), 2)

    def test_empty_sepset_makes_collider(self):
        adjacency = adjacency_of("XZY", [("X", "Z"), ("Z", "Y")])
        graph = orient_cpdag(adjacency, {pair("X", "Y"): ()}, nodes=tuple("XZY"))
        self.assertEqual(graph.directed, {("X", "Z"), ("Y", "Z")})

    def test_rule_one_propagates(self):
        edges = [("X", "Z"), ("Y", "Z"), ("Z", "W")]
        adjacency = adjacency_of("XYZW", edges)
        sepsets = {pair("X", "Y"): (), pair("X", "W"): ("Z",), pair("Y", "W"): ("Z",)}
        graph = orient_cpdag(adjacency, sepsets, nodes=tuple("XYZW"))
        self.assertEqual(graph.directed, {("X", "Z"), ("Y", "Z"), ("Z", "W")})
        self.assertEqual(graph.undirected, set())

    def test_rule_one_matches_brute_force_class(self):
        # orientations shared by every DAG in the class are exactly the directed edges
        nodes = tuple("XYZW")
        target = dag_from_edges(nodes, [("X", "Z"), ("Y", "Z"), ("Z", "W"), ("X", "W")])
        truth = dag_to_cpdag(target)
        members = [dag for dag in all_dags(nodes) if markov_equivalent(dag_to_cpdag(dag), truth)]
        compelled = set.intersection(*(set(dag.edges) for dag in members))
        self.assertEqual(truth.directed, compelled)

    def test_rule_three(self):
        dag = dag_from_edges("abcd", [("a", "c"), ("a", "d"), ("c", "b"), ("d", "b"), ("a", "b")])
        graph = dag_to_cpdag(dag)
        self.assertEqual(graph.directed, {("c", "b"), ("d", "b"), ("a", "b")})
        self.assertEqual(graph.undirected, {pair("a", "c"), pair("a", "d")})

    def test_conflicting_colliders_stay_undirected(self):
        adjacency = adjacency_of("ABCD", [("A", "B"), ("B", "C"), ("C", "D")])
        sepsets = {pair("A", "C"): (), pair("B", "D"): (), pair("A", "D"): ()}
        graph = orient_cpdag(adjacency, sepsets, nodes=tuple("ABCD"))
        self.assertIn(pair("B", "C"), graph.undirected)
        self.assertEqual(graph.directed, {("A", "B"), ("D", "C")})
        self.assertEqual(len(graph.conflicts), 1)

    def test_never_creates_cycles(self):
        rng = np.random.default_rng(7)
        nodes = tuple("ABCDE")
        for _ in range(200):
            edges = [e for e in combinations(nodes, 2) if rng.random() < 0.5]
            adjacency = adjacency_of(nodes, edges)
            sepsets = {
                pair(a, b): tuple(v for v in nodes if v not in (a, b) and rng.random() < 0.5)
                for a, b in combinations(nodes, 2)
                if b not in adjacency[a]
            }
            graph = orient_cpdag(adjacency, sepsets, nodes=nodes)
            self.assertTrue(nx.is_directed_acyclic_graph(graph.directed_graph()))


class MarkovEquivalenceTest(SimpleTestCase):
    def test_identical(self):
        graph = dag_to_cpdag(dag_from_edges("ABC", [("A", "B"), ("B", "C")]))
        self.assertTrue(markov_equivalent(graph, graph))

    def test_chain_versus_collider(self):
        chain = dag_to_cpdag(dag_from_edges("ABC", [("A", "B"), ("B", "C")]))
        collider = dag_to_cpdag(dag_from_edges("ABC", [("A", "B"), ("C", "B")]))
        self.assertFalse(markov_equivalent(chain, collider))

    def test_node_mismatch(self):
        with self.assertRaises(NodeMismatchError):
            markov_equivalent(Cpdag(nodes=("A", "B")), Cpdag(nodes=("A", "C")))

    def test_three_node_classes(self):
        dags = list(all_dags("ABC"))
        self.assertEqual(len(dags), 25)
        classes = []
        for dag in dags:
            graph = dag_to_cpdag(dag)
            for members in classes:
                if markov_equivalent(graph, members[0]):
                    members.append(graph)
                    break
            else:
                classes.append([graph])
        self.assertEqual(len(classes), 11)
        self.assertEqual(sorted(len(m) for m in classes), [1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 6])


class PerfectOracleTest(SimpleTestCase):
    def test_recovers_every_small_dag(self):
        for num_nodes in (2, 3, 4):
            nodes = tuple(f"X{i + 1}" for i in range(num_nodes))
            for dag in all_dags(nodes):
                truth = dag_to_cpdag(dag)
                learned = run_pc(None, DSeparationOracle(dag), nodes=nodes)
                self.assertEqual(learned.skeleton(), truth.skeleton())
                self.assertEqual(learned.v_structures(), truth.v_structures())
                self.assertEqual(learned.directed, truth.directed)


class RunPCTest(SimpleTestCase):
    def test_collider_oriented_from_data(self):
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal(500), rng.standard_normal(500)
        x -= x.mean()
        # exactly uncorrelated parents
        y -= (y @ x) / (x @ x) * x
        z = x + y + 0.5 * rng.standard_normal(500)
        data = DataMatrix(values=np.column_stack([x, y, z]), column_names=("X", "Y", "Z"))
        graph = run_pc(data, PCORR)
        self.assertEqual(graph.directed, {("X", "Z"), ("Y", "Z")})
