import json
import random

import pytest

from flip import dsl
from flip.dsl import OpKind, parse_request
from flip.errors import CompileError, PlacementError, RejectedByDelay
from flip.harness import demo_topology
from flip.planner import ActionKind, compile_baseline, place_operations, plan, steiner_tree
from flip.topology import Link, NodeKind, Topology, load_topology

from _oracles import placement_transcription, random_connected_graph, steiner_optimum

EQ1 = (
    "datapath_a(max(avg(bs1:bs10),avg(bs11:bs100),"
    "max(min(bs101:bs200),min(bs201:bs300))),destination<-user)"
)

EXPECTED_EQ1_PLACEMENT = {
    "min1": "sw3",
    "min2": "sw4",
    "max2": "sw5",
    "avg1": "sw1",
    "avg2": "sw2",
    "max1": "sw3",
}


@pytest.fixture(scope="module")
def demo():
    return demo_topology()


@pytest.fixture(scope="module")
def eq1_plan(demo):
    return plan(parse_request(EQ1), demo)


def random_switch_topology(rng, n_switches, n_bs):
    """Switch mesh with engines and base stations hung off random switches."""
    adj = random_connected_graph(rng, n_switches, extra_edges=rng.randint(1, 4))
    nodes = {}
    links = []
    rename = {old: f"sw{i + 1}" for i, old in enumerate(sorted(adj))}
    for old, nbs in adj.items():
        nodes[rename[old]] = NodeKind.SWITCH
        for other, w in nbs.items():
            if rename[old] < rename[other]:
                links.append(Link(rename[old], rename[other], w))
    switches = sorted(nodes)
    for sw in switches:
        nodes[f"e-{sw}"] = NodeKind.ENGINE
        links.append(Link(f"e-{sw}", sw, 0.0))
    for i in range(1, n_bs + 1):
        sw = rng.choice(switches)
        nodes[f"bs{i}"] = NodeKind.BASE_STATION
        links.append(Link(f"bs{i}", sw, 1.0))
    nodes["user"] = NodeKind.DESTINATION
    links.append(Link("user", rng.choice(switches), 1.0))
    return Topology(nodes, links)


def random_two_level_request(rng, n_bs):
    ops = [k.value for k in (OpKind.MIN, OpKind.MAX, OpKind.SUM, OpKind.AVG)]
    ids = list(range(1, n_bs + 1))
    rng.shuffle(ids)
    groups = []
    while ids:
        size = min(len(ids), rng.randint(1, 4))
        chunk, ids = ids[:size], ids[size:]
        leaves = ",".join(f"bs{i}" for i in chunk)
        groups.append(f"{rng.choice(ops)}({leaves})")
    return f"datapath_a({rng.choice(ops)}({','.join(groups)}),destination<-user)"


# -- placement -----------------------------------------------------------------


def test_eq1_placement_matches_manual_decomposition(demo):
    tg = dsl.expand_sources(parse_request(EQ1), demo)
    placements = place_operations(tg, demo)
    assert {p.op_node: p.switch for p in placements} == EXPECTED_EQ1_PLACEMENT
    for p in placements:
        assert p.engine == demo.engine_of(p.switch)


def test_single_op_lands_on_source_switch():
    doc = {
        "nodes": [
            {"id": "bs1", "kind": "basestation"},
            {"id": "sw1", "kind": "switch"},
            {"id": "e-sw1", "kind": "engine"},
            {"id": "user", "kind": "destination"},
        ],
        "links": [
            {"a": "bs1", "b": "sw1"},
            {"a": "e-sw1", "b": "sw1"},
            {"a": "user", "b": "sw1"},
        ],
    }
    t = load_topology(doc)
    tg = dsl.expand_sources(parse_request("datapath_a(max(bs1),destination<-user)"), t)
    placements = place_operations(tg, t)
    assert [(p.op_node, p.switch) for p in placements] == [("max1", "sw1")]


def test_placement_matches_pseudocode_transcription():
    rng = random.Random(42)
    checked = 0
    for _ in range(40):
        t = random_switch_topology(rng, rng.randint(3, 6), rng.randint(4, 10))
        req = parse_request(random_two_level_request(rng, len(t.nodes_of_kind(NodeKind.BASE_STATION))))
        tg = dsl.expand_sources(req, t)
        try:
            expected = placement_transcription(tg, t)
        except ValueError:
            with pytest.raises(PlacementError):
                place_operations(tg, t)
            continue
        placements = place_operations(tg, t)
        assert {p.op_node: p.switch for p in placements} == expected
        checked += 1
    assert checked >= 20


def test_placement_covers_every_op_once(demo):
    tg = dsl.expand_sources(parse_request(EQ1), demo)
    placements = place_operations(tg, demo)
    assert sorted(p.op_node for p in placements) == sorted(o.node_id for o in tg.ops())


# -- steiner tree ----------------------------------------------------------------


def test_two_terminals_is_shortest_path(demo):
    tree = steiner_tree(demo, {"bs1", "user"})
    path, delay = demo.shortest_path("bs1", "user")
    assert tree.weight == delay
    edges = {l.key() for l in tree.edges}
    assert edges == {tuple(sorted(p)) for p in zip(path, path[1:])}


def test_all_nodes_is_spanning_tree():
    rng = random.Random(5)
    adj = random_connected_graph(rng, 7, extra_edges=4)
    from test_topology import adj_topology

    t = adj_topology(adj)
    tree = steiner_tree(t, set(adj))
    from _oracles import prim_mst_weight

    assert tree.weight == prim_mst_weight(adj, set(adj))
    assert len(tree.edges) == len(adj) - 1


def test_steiner_is_tree_and_spans(demo, eq1_plan):
    tree = eq1_plan.tree
    nodes = tree.nodes()
    assert len(tree.edges) == len(nodes) - 1
    for term in tree.terminals:
        assert term in nodes


def test_steiner_quality_random_graphs():
    rng = random.Random(2024)
    from test_topology import adj_topology

    for _ in range(60):
        n = rng.randint(5, 9)
        adj = random_connected_graph(rng, n, extra_edges=rng.randint(1, 5))
        t = adj_topology(adj)
        k = rng.randint(3, min(5, n))
        terminals = set(rng.sample(sorted(adj), k))
        tree = steiner_tree(t, terminals)
        opt = steiner_optimum(adj, terminals)
        bound = (2 - 2 / len(terminals)) * opt
        assert opt - 1e-9 <= tree.weight <= bound + 1e-9
        # tree-ness
        assert len(tree.edges) == len(tree.nodes()) - 1


# -- delay admission ----------------------------------------------------------------


def test_no_delay_requirement_is_vacuous(demo, eq1_plan):
    assert eq1_plan.admitted
    assert eq1_plan.worst_path_delay_ms == 4.0


def test_forced_delay_arithmetic():
    doc = {
        "nodes": [
            {"id": "bs1", "kind": "basestation"},
            {"id": "sw1", "kind": "switch"},
            {"id": "e-sw1", "kind": "engine"},
            {"id": "user", "kind": "destination"},
        ],
        "links": [
            {"a": "bs1", "b": "sw1", "delay_ms": 1},
            {"a": "e-sw1", "b": "sw1"},
            {"a": "user", "b": "sw1", "delay_ms": 1},
        ],
    }
    t = load_topology(doc)
    req = parse_request("datapath_a(max(bs1),destination<-user,requirement<-{delay=10ms})")
    result = plan(req, t)
    assert result.admitted and result.worst_path_delay_ms == 2.0


def test_tight_delay_rejected(demo):
    req = parse_request(EQ1[:-1] + ",requirement<-{delay=3ms})")
    with pytest.raises(RejectedByDelay) as err:
        plan(req, demo)
    assert err.value.worst_path_delay_ms == 4.0
    # an absurd bound is unsatisfiable no matter the topology
    with pytest.raises(RejectedByDelay):
        plan(parse_request(EQ1[:-1] + ",requirement<-{delay=0.001ms})"), demo)


def test_relaxed_delay_admitted(demo):
    req = parse_request(EQ1[:-1] + ",requirement<-{delay=5ms})")
    assert plan(req, demo).admitted


# -- rule compilation ----------------------------------------------------------------


def test_manual_compile_example():
    doc = {
        "nodes": [
            {"id": "bs1", "kind": "basestation"},
            {"id": "bs2", "kind": "basestation"},
            {"id": "sw", "kind": "switch"},
            {"id": "e-sw", "kind": "engine"},
            {"id": "dest", "kind": "destination"},
        ],
        "links": [
            {"a": "bs1", "b": "sw"},
            {"a": "bs2", "b": "sw"},
            {"a": "e-sw", "b": "sw"},
            {"a": "dest", "b": "sw"},
        ],
    }
    t = load_topology(doc)
    req = parse_request("datapath_m(bs1,bs2,switch<-sw,computation<-sum,destination<-dest)")
    result = plan(req, t)
    (cfg,) = result.engine_configs
    assert cfg.compute is OpKind.SUM
    assert cfg.sources == ("bs1", "bs2")
    assert cfg.destination == "dest"
    redirects = [r for r in result.rules if r.action is ActionKind.REDIRECT]
    assert len(redirects) == 1
    assert redirects[0].sources == ("bs1", "bs2")
    assert redirects[0].target == "e-sw"
    delivers = [r for r in result.rules if r.action is ActionKind.DELIVER]
    assert len(delivers) == 1


def test_single_source_plan_has_one_redirect(demo):
    result = plan(parse_request("datapath_a(max(bs1),destination<-user)"), demo)
    redirects = [r for r in result.rules if r.action is ActionKind.REDIRECT]
    assert len(redirects) == 1


def test_eq1_engine_config_chain(eq1_plan):
    by_op = dict(zip([p.op_node for p in eq1_plan.placements], eq1_plan.engine_configs))
    # compile emits configs in pre-order: max1, avg1, avg2, max2, min1, min2
    chain = {c.engine + "/" + c.compute.value: c.destination for c in eq1_plan.engine_configs}
    assert chain == {
        "e-sw3/max": "user",
        "e-sw1/avg": "e-sw3",
        "e-sw2/avg": "e-sw3",
        "e-sw5/max": "e-sw3",
        "e-sw3/min": "e-sw5",
        "e-sw4/min": "e-sw5",
    }
    assert len(eq1_plan.engine_configs) == 6


def test_forwarding_is_loop_free(eq1_plan, demo):
    rules_by_switch = {}
    for rule in eq1_plan.rules:
        rules_by_switch.setdefault(rule.switch, []).append(rule)

    def follow(source, fd, start):
        node = start
        hops = 0
        while True:
            hops += 1
            assert hops <= demo.node_count(), "loop detected"
            rules = rules_by_switch.get(node, [])
            match = next(
                (r for r in rules if r.final_destination == fd and source in r.sources), None
            )
            if match is None or match.action is not ActionKind.FORWARD:
                return
            node = match.target

    for rule in eq1_plan.rules:
        for source in rule.sources:
            follow(source, rule.final_destination, rule.switch)


def test_plan_bytes_deterministic(demo):
    a = plan(parse_request(EQ1), demo).to_json()
    b = plan(parse_request(EQ1), demo).to_json()
    assert a == b
    assert json.loads(a)["admitted"] is True


def test_plan_counts(eq1_plan):
    assert len(eq1_plan.placements) == 6
    assert eq1_plan.mode is dsl.RequestMode.AUTOMATED
    # raw sources all stamp the request destination
    assert set(eq1_plan.source_ingress.values()) == {"user"}
    assert len(eq1_plan.source_ingress) == 300


def test_baseline_rules_deliver_everywhere(demo):
    rules = compile_baseline(demo, [f"bs{i}" for i in range(1, 11)], "user")
    assert all(r.final_destination == "user" for r in rules)
    assert any(r.action is ActionKind.DELIVER for r in rules)
    assert not any(r.action is ActionKind.REDIRECT for r in rules)


def test_manual_chain_covers_manual_decomposition(demo):
    commands = [
        "datapath_m({bs201:bs300},switch<-sw4,compute<-min,destination<-sw5[engine])",
        "datapath_m({bs101:bs200},switch<-sw3,compute<-min,destination<-sw5[engine])",
        "datapath_m(sw4[engine],sw3[engine],switch<-sw5,compute<-max,destination<-sw3[engine])",
        "datapath_m({bs11:bs100},switch<-sw2,compute<-avg,destination<-sw3[engine])",
        "datapath_m({bs1:bs10},switch<-sw1,compute<-avg,destination<-sw3[engine])",
        "datapath_m(sw1[engine],sw2[engine],sw5[engine],switch<-sw3,compute<-max,destination<-user)",
    ]
    plans = [plan(parse_request(c), demo) for c in commands]
    assert [p.engine_configs[0].engine for p in plans] == [
        "e-sw4",
        "e-sw3",
        "e-sw5",
        "e-sw2",
        "e-sw1",
        "e-sw3",
    ]
    # the union of per-command rules reaches the user host
    delivers = [r for p in plans for r in p.rules if r.action is ActionKind.DELIVER]
    assert delivers and all(r.final_destination == "user" for r in delivers)


def test_colocated_sibling_ops_rejected():
    doc = {
        "nodes": [
            {"range": "bs1:bs4", "kind": "basestation", "switch": "sw1"},
            {"id": "sw1", "kind": "switch"},
            {"id": "sw2", "kind": "switch"},
            {"id": "e-sw1", "kind": "engine"},
            {"id": "e-sw2", "kind": "engine"},
            {"id": "user", "kind": "destination"},
        ],
        "links": [
            {"a": "e-sw1", "b": "sw1"},
            {"a": "e-sw2", "b": "sw2"},
            {"a": "sw1", "b": "sw2"},
            {"a": "user", "b": "sw2"},
        ],
    }
    t = load_topology(doc)
    req = parse_request("datapath_a(max(min(bs1,bs2),min(bs3,bs4)),destination<-user)")
    with pytest.raises(CompileError):
        plan(req, t)
