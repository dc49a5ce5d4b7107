import numpy as np
import pytest

import glyphgraph.tensor as T
from glyphgraph import gradcheck, graphs, vision
from glyphgraph.errors import ContractError
from glyphgraph.reasoning import Reasoner, ReasonerConfig

import oracles


@pytest.fixture
def rng():
    return np.random.default_rng(400)


def make_reasoner(rng, d=8, edge_dim=4, heads=2, steps=2, dynamic=True):
    cfg = ReasonerConfig(steps=steps, heads=heads, dynamic_edges=dynamic)
    return Reasoner(d, edge_dim, cfg, rng)


def make_graph(rng, d=8, edge_dim=4, k=2, vocab=5):
    builder = graphs.GraphBuilder(d, edge_dim, vocab, rng)
    x = T.const(rng.uniform(-1, 1, (64, d)))
    pyr = vision.build_pyramid(x, 3)
    spots = [(0, 0, 1, 1), (5, 5, 7, 7), (0, 5, 2, 7), (4, 0, 5, 2)]
    regions = [vision.Region(bbox=spots[i], score=float(4 - i)) for i in range(k)]
    fused = T.const(rng.uniform(-1, 1, (k, d)))
    return builder, builder.build(pyr, fused, regions)


class TestMessage:
    def test_zero_inputs_zero_biases_give_zero(self, rng):
        r = make_reasoner(rng)
        out = r.message(T.zeros((1, 8)), T.zeros((1, 8)), T.zeros((1, 4)), "cc")
        assert np.allclose(out.data, 0.0)

    def test_output_width(self, rng):
        r = make_reasoner(rng)
        out = r.message(T.const(rng.uniform(-1, 1, (1, 8))), T.const(rng.uniform(-1, 1, (1, 8))),
                        T.const(rng.uniform(-1, 1, (1, 4))), "vc")
        assert out.data.shape == (1, 8)

    def test_matches_scripted_mlp(self, rng):
        r = make_reasoner(rng)
        h_i = rng.uniform(-1, 1, 8)
        h_j = rng.uniform(-1, 1, 8)
        e = rng.uniform(-1, 1, 4)
        out = r.message(T.const([h_i]), T.const([h_j]), T.const([e]), "cs")
        mlp = r.msg["cs"]
        expect = oracles.message_mlp(
            h_i.tolist(), h_j.tolist(), e.tolist(),
            mlp.lin1.w.data.tolist(), mlp.lin1.b.data.tolist(),
            mlp.lin2.w.data.tolist(), mlp.lin2.b.data.tolist(),
        )
        assert np.abs(out.data[0] - expect).max() < 1e-9

    def test_gradcheck(self, rng):
        r = make_reasoner(rng)

        def fn(ts):
            return T.frobenius_sq(r.message(ts[0], ts[1], ts[2], "cc"))

        err = gradcheck.check_function(
            fn, [rng.uniform(-1, 1, (1, 8)), rng.uniform(-1, 1, (1, 8)), rng.uniform(-1, 1, (1, 4))]
        )
        assert err < 1e-4


class TestAttentionCoeffs:
    def test_single_neighbor_is_one(self, rng):
        r = make_reasoner(rng)
        alpha = r.attention_coeffs(T.const(rng.uniform(-1, 1, (1, 8))), T.const(rng.uniform(-1, 1, (1, 8))))
        assert alpha.data.shape == (1, 1)
        assert alpha.data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_identical_neighbors_uniform(self, rng):
        r = make_reasoner(rng)
        one = rng.uniform(-1, 1, 8)
        neighbors = T.const(np.stack([one, one, one]))
        alpha = r.attention_coeffs(T.const(rng.uniform(-1, 1, (1, 8))), neighbors)
        assert np.abs(alpha.data - 1.0 / 3.0).max() < 1e-12

    def test_empty_neighbor_set_rejected(self, rng):
        r = make_reasoner(rng)
        with pytest.raises(ContractError):
            r.attention_coeffs(T.const(rng.uniform(-1, 1, (1, 8))), T.zeros((0, 8)))

    def test_three_neighbors_match_direct_formula(self, rng):
        r = make_reasoner(rng)
        h_i = rng.uniform(-1, 1, 8)
        neigh = rng.uniform(-1, 1, (3, 8))
        alpha = r.attention_coeffs(T.const([h_i]), T.const(neigh), head=1)
        expect = oracles.gat_attention_coeffs(
            h_i.tolist(), neigh.tolist(), r.att_w[1].data.tolist(), r.att_a[1].data.tolist(), 0.2
        )
        assert np.abs(alpha.data[0] - expect).max() < 1e-9


class TestStep:
    def test_no_edges_leaves_features(self, rng):
        r = make_reasoner(rng)
        feats = T.const(rng.uniform(-1, 1, (5, 8)))
        empty = graphs.EdgeSet(np.array([], dtype=np.int64), np.array([], dtype=np.int64), T.zeros((0, 4)))
        g = graphs.HeteroGraph(
            features=feats, n_visual=2, n_component=2, n_semantic=1,
            edges={"cc": empty, "vc": empty, "cs": empty},
        )
        out = r.step(g)
        assert np.array_equal(out.features.data, feats.data)
        assert out.step == 1

    def test_single_edge_alpha_one_and_gru_matches_oracle(self, rng):
        r = make_reasoner(rng, d=4, edge_dim=2, heads=1, steps=1)
        feats = rng.uniform(-1, 1, (3, 4))
        efeat = rng.uniform(-1, 1, (1, 2))
        empty = graphs.EdgeSet(np.array([], dtype=np.int64), np.array([], dtype=np.int64), T.zeros((0, 2)))
        cc = graphs.EdgeSet(np.array([1]), np.array([2]), T.const(efeat))
        g = graphs.HeteroGraph(
            features=T.const(feats), n_visual=1, n_component=2, n_semantic=0,
            edges={"cc": cc, "vc": empty, "cs": empty},
        )
        out = r.step(g)
        assert out.last_alphas[("cc", 1, 2)] == pytest.approx(1.0, abs=1e-15)
        # untouched nodes keep features
        assert np.array_equal(out.features.data[0], feats[0])
        assert np.array_equal(out.features.data[1], feats[1])
        # updated node equals a scripted GRU over the scripted message
        mlp = r.msg["cc"]
        msg = oracles.message_mlp(
            feats[1].tolist(), feats[2].tolist(), efeat[0].tolist(),
            mlp.lin1.w.data.tolist(), mlp.lin1.b.data.tolist(),
            mlp.lin2.w.data.tolist(), mlp.lin2.b.data.tolist(),
        )
        p = {k: getattr(r.gru, k).data.tolist() for k in
             ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")}
        expect = oracles.gru_cell(feats[2].tolist(), msg, p)
        assert np.abs(out.features.data[2] - expect).max() < 1e-9

    def test_two_node_weighted_aggregate_matches_oracle(self, rng):
        # two incoming edges to one node: alpha-weighted messages, then GRU
        r = make_reasoner(rng, d=4, edge_dim=2, heads=2, steps=1)
        feats = rng.uniform(-1, 1, (3, 4))
        ef = rng.uniform(-1, 1, (2, 2))
        empty = graphs.EdgeSet(np.array([], dtype=np.int64), np.array([], dtype=np.int64), T.zeros((0, 2)))
        cc = graphs.EdgeSet(np.array([1, 2]), np.array([2, 2]), T.const(ef))
        g = graphs.HeteroGraph(
            features=T.const(feats), n_visual=1, n_component=2, n_semantic=0,
            edges={"cc": cc, "vc": empty, "cs": empty},
        )
        out = r.step(g)
        mlp = r.msg["cc"]
        msgs = [
            oracles.message_mlp(
                feats[s].tolist(), feats[2].tolist(), ef[row].tolist(),
                mlp.lin1.w.data.tolist(), mlp.lin1.b.data.tolist(),
                mlp.lin2.w.data.tolist(), mlp.lin2.b.data.tolist(),
            )
            for row, s in enumerate((1, 2))
        ]
        alpha_rows = []
        for head in range(2):
            alpha_rows.append(
                oracles.gat_attention_coeffs(
                    feats[2].tolist(), [feats[1].tolist(), feats[2].tolist()],
                    r.att_w[head].data.tolist(), r.att_a[head].data.tolist(), 0.2,
                )
            )
        mean_alpha = [(alpha_rows[0][j] + alpha_rows[1][j]) / 2.0 for j in range(2)]
        agg = [sum(mean_alpha[j] * msgs[j][c] for j in range(2)) for c in range(4)]
        p = {k: getattr(r.gru, k).data.tolist() for k in
             ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")}
        expect = oracles.gru_cell(feats[2].tolist(), agg, p)
        assert np.abs(out.features.data[2] - expect).max() < 1e-9


class TestDynamicUpdate:
    def _graph_with_features(self, rng, builder, comps, sems):
        d = comps.shape[1]
        k, s = comps.shape[0], sems.shape[0]
        feats = np.concatenate([rng.uniform(-1, 1, (1, d)), comps, sems], axis=0)
        empty = graphs.EdgeSet(np.array([], dtype=np.int64), np.array([], dtype=np.int64), T.zeros((0, 4)))
        cs_pairs = [(1 + cj, 1 + k + sk) for cj in range(k) for sk in range(min(2, s))]
        cs = graphs.EdgeSet(
            np.array([p[0] for p in cs_pairs], dtype=np.int64),
            np.array([p[1] for p in cs_pairs], dtype=np.int64),
            builder.edge_features("cs", np.zeros((len(cs_pairs), 2))),
        )
        return graphs.HeteroGraph(
            features=T.const(feats), n_visual=1, n_component=k, n_semantic=s,
            edges={"cc": empty, "vc": empty, "cs": cs},
        )

    def test_band_leaves_edges_untouched(self, rng):
        r = make_reasoner(rng, d=4, edge_dim=4)
        builder = graphs.GraphBuilder(4, 4, 3, rng)
        base = np.array([1.0, 1.0, 0.0, 0.0])
        # cosine with base around 0.4: inside the (0.3, 0.5) band
        mix = np.array([1.0, 0.0, 1.55, 0.0])
        comps = np.stack([base])
        sems = np.stack([mix, mix + np.array([0.0, 0.0, 0.0, 0.001])])
        g = self._graph_with_features(rng, builder, comps, sems)
        before = set(g.edges["cs"].pairs())
        out = r.dynamic_update(g, builder)
        assert set(out.edges["cs"].pairs()) == before

    def test_orthogonal_features_prune_to_protected(self, rng):
        r = make_reasoner(rng, d=4, edge_dim=4)
        builder = graphs.GraphBuilder(4, 4, 3, rng)
        comps = np.array([[1.0, 0.0, 0.0, 0.0]])
        sems = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        g = self._graph_with_features(rng, builder, comps, sems)
        assert g.edges["cs"].count() == 2
        out = r.dynamic_update(g, builder)
        assert out.edges["cs"].count() == 1  # protection keeps exactly one

    def test_matches_exhaustive_threshold_scan(self, rng):
        r = make_reasoner(rng, d=6, edge_dim=4)
        builder = graphs.GraphBuilder(6, 4, 5, rng)
        comps = rng.uniform(-1, 1, (3, 6))
        sems = rng.uniform(-1, 1, (5, 6))
        g = self._graph_with_features(rng, builder, comps, sems)
        existing = set(g.edges["cs"].pairs())
        out = r.dynamic_update(g, builder)

        expect = set()
        for cj in range(3):
            src = 1 + cj
            sims = [oracles.cosine(comps[cj].tolist(), sems[sk].tolist()) for sk in range(5)]
            mine = [d_ - 4 for s, d_ in existing if s == src]
            protected = max(mine, key=lambda sk: (sims[sk], -sk)) if mine else None
            for sk in range(5):
                dst = 4 + sk
                if (src, dst) in existing:
                    if sims[sk] < 0.3 and sk != protected:
                        continue
                    expect.add((src, dst))
                elif sims[sk] > 0.5:
                    expect.add((src, dst))
        assert set(out.edges["cs"].pairs()) == expect

    def test_idempotent_without_feature_changes(self, rng):
        r = make_reasoner(rng, d=6, edge_dim=4)
        builder = graphs.GraphBuilder(6, 4, 5, rng)
        comps = rng.uniform(-1, 1, (3, 6))
        sems = rng.uniform(-1, 1, (5, 6))
        g = self._graph_with_features(rng, builder, comps, sems)
        once = r.dynamic_update(g, builder)
        twice = r.dynamic_update(once, builder)
        assert once.edges["cs"].pairs() == twice.edges["cs"].pairs()

    def test_cc_and_vc_never_change(self, rng):
        r = make_reasoner(rng)
        builder, g = make_graph(rng)
        out = r.dynamic_update(g, builder)
        assert out.edges["cc"].pairs() == g.edges["cc"].pairs()
        assert out.edges["vc"].pairs() == g.edges["vc"].pairs()


class TestReason:
    def test_step_count_advances_to_t(self, rng):
        r = make_reasoner(rng, steps=3)
        builder, g = make_graph(rng)
        out = r.reason(g, builder)
        assert out.step == 3

    def test_dynamic_flag_off_is_pure_steps(self, rng):
        r_off = make_reasoner(rng, steps=2, dynamic=False)
        builder, g = make_graph(np.random.default_rng(41))
        out = r_off.reason(g, builder)
        assert out.edges["cs"].pairs() == g.edges["cs"].pairs()

    def test_trajectory_bit_reproducible(self):
        def run():
            rng = np.random.default_rng(77)
            r = make_reasoner(rng, steps=3)
            builder, g = make_graph(np.random.default_rng(78))
            return r.reason(g, builder).features.data

        assert np.array_equal(run(), run())

    def test_consistency_snapshot_recomputes_exactly(self, rng):
        r = make_reasoner(rng, steps=2)
        builder, g = make_graph(rng)
        out = r.reason(g, builder)
        prev_feats, prev_edges, next_feats = out.consistency
        recomputed = r.step_features(prev_feats, prev_edges, out)
        assert np.array_equal(recomputed.data, next_feats.data)

    def test_gradient_reaches_semantic_embedding(self, rng):
        # character-head input is [mean components || mean semantics]; with
        # three steps its gradient must reach the embedding table and the
        # component-semantic message weights
        r = make_reasoner(rng, steps=3)
        builder, g0 = make_graph(rng)
        builder.assign_names("builder.")
        params = list(builder.parameters()) + [p for _, p in r.named_parameters()]
        with T.tape() as tp:
            tp.watch_trainable(params)
            x = T.const(np.random.default_rng(55).uniform(-1, 1, (64, 8)))
            pyr = vision.build_pyramid(x, 3)
            regions = [vision.Region(bbox=(0, 0, 3, 3), score=1.0)]
            fused = T.const(np.random.default_rng(56).uniform(-1, 1, (1, 8)))
            g = builder.build(pyr, fused, regions)
            out = r.reason(g, builder)
            head_in = T.concat(
                [T.mean(out.component_features(), axis=0, keepdims=True),
                 T.mean(out.semantic_features(), axis=0, keepdims=True)],
                axis=1,
            )
            tp.backward(T.frobenius_sq(head_in))
        assert np.abs(builder.sem_embed.grad).max() > 0
        assert np.abs(r.msg["cs"].lin1.w.grad).max() > 0
