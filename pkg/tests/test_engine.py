"""Propagation engine: message functions, updates, towers, master node."""

import numpy as np
import pytest

from mpnnkit import tensor as T
from mpnnkit.engine import (
    ModelConfig,
    aggregate,
    init_params,
    message_dtnn,
    message_edge_network,
    message_matmul,
    message_pair,
    param_shapes,
    propagate,
)
from mpnnkit.tensor import ContractError, MultiplyCounter, Tensor

from conftest import (
    check_grad_against_fd,
    jitter_biases,
    permute_encoded,
    random_encoded,
)
from reference_mpnn import naive_propagate


def cfg_for(message_fn, **kw):
    defaults = dict(message_fn=message_fn, update_fn="gru", readout="dtnn_sum",
                    T=2, d=6, edge_repr="chemical", n_targets=2)
    defaults.update(kw)
    return ModelConfig(**defaults)


def zero_message_params(params):
    for name, p in params.items():
        if name.startswith("msg_"):
            p.data[...] = 0.0


class TestConfigValidation:
    def test_towers_must_divide(self):
        with pytest.raises(ContractError):
            cfg_for("matmul", d=6, towers_k=4)

    def test_matmul_rejects_raw_distance(self):
        with pytest.raises(ContractError):
            cfg_for("matmul", edge_repr="raw_distance")

    def test_master_with_towers_rejected(self):
        with pytest.raises(ContractError):
            cfg_for("matmul", d=8, towers_k=2, d_master=4)

    def test_t_must_be_positive(self):
        with pytest.raises(ContractError):
            cfg_for("matmul", T=0)

    def test_unknown_names_rejected(self):
        with pytest.raises(ContractError):
            cfg_for("fourier")
        with pytest.raises(ContractError):
            cfg_for("matmul", readout="mean")
        with pytest.raises(ContractError):
            cfg_for("matmul", update_fn="adam")


class TestSingleEdgeMessages:
    def test_matmul_identity_bank(self, rng):
        h = Tensor(rng.normal(size=4))
        bank = [Tensor(np.eye(4)), Tensor(np.zeros((4, 4)))]
        np.testing.assert_allclose(message_matmul(h, 0, bank).data, h.data)

    def test_matmul_zero_bank(self, rng):
        h = Tensor(rng.normal(size=4))
        bank = [Tensor(np.zeros((4, 4)))]
        np.testing.assert_array_equal(message_matmul(h, 0, bank).data, np.zeros(4))

    def test_matmul_matches_dense_oracle(self, rng):
        h = rng.normal(size=5)
        mats = [rng.normal(size=(5, 5)) for _ in range(3)]
        bank = [Tensor(m) for m in mats]
        for label in range(3):
            got = message_matmul(Tensor(h), label, bank).data
            np.testing.assert_allclose(got, h @ mats[label], atol=1e-12)

    def test_matmul_label_out_of_range(self, rng):
        with pytest.raises(ContractError):
            message_matmul(Tensor(np.ones(3)), 2, [Tensor(np.eye(3))])

    def test_edge_network_zero_weights(self, rng):
        cfg = cfg_for("edge_network")
        params = init_params(cfg, seed=1)
        zero_message_params(params)
        out = message_edge_network(Tensor(rng.normal(size=6)),
                                   Tensor(np.ones(4)), params, "msg_in_t0")
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_edge_network_identity_output(self, rng):
        cfg = cfg_for("edge_network")
        params = init_params(cfg, seed=1)
        zero_message_params(params)
        params["msg_in_t0_en_b2"].data[...] = np.eye(6).ravel()
        h = rng.normal(size=6)
        out = message_edge_network(Tensor(h), Tensor(np.ones(4)), params, "msg_in_t0")
        np.testing.assert_allclose(out.data, h, atol=1e-12)

    def test_pair_zero_network(self, rng):
        cfg = cfg_for("pair_message")
        params = init_params(cfg, seed=2)
        zero_message_params(params)
        out = message_pair(Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6)),
                           Tensor(np.ones(4)), params, "msg_in_t0")
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_pair_order_matters(self, rng):
        cfg = cfg_for("pair_message")
        params = init_params(cfg, seed=3)
        a, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        e = Tensor(np.eye(4)[1])
        fwd = message_pair(a, b, e, params, "msg_in_t0").data
        rev = message_pair(b, a, e, params, "msg_in_t0").data
        assert np.abs(fwd - rev).max() > 1e-6

    def test_dtnn_zero_inner_weights(self, rng):
        cfg = cfg_for("dtnn")
        params = init_params(cfg, seed=4)
        for suffix in ("wcf", "b1", "wdf", "b2"):
            params[f"msg_in_t0_dtnn_{suffix}"].data[...] = 0.0
        out = message_dtnn(Tensor(rng.normal(size=6)), Tensor(np.ones(4)),
                           params, "msg_in_t0")
        np.testing.assert_array_equal(out.data, np.zeros(6))

    def test_dtnn_zero_outer_weight(self, rng):
        cfg = cfg_for("dtnn")
        params = init_params(cfg, seed=5)
        params["msg_in_t0_dtnn_wfc"].data[...] = 0.0
        out = message_dtnn(Tensor(rng.normal(size=6)), Tensor(np.ones(4)),
                           params, "msg_in_t0")
        np.testing.assert_array_equal(out.data, np.zeros(6))


class TestAggregate:
    def test_single_edge_concat(self, rng):
        m_in = Tensor(rng.normal(size=3))
        m_out = Tensor(rng.normal(size=3))
        got = aggregate([m_in], [m_out], d=3)
        np.testing.assert_array_equal(got.data,
                                      np.concatenate([m_in.data, m_out.data]))

    def test_isolated_node_zero(self):
        got = aggregate([], [], d=4)
        np.testing.assert_array_equal(got.data, np.zeros(8))

    def test_sum_order_invariance(self, rng):
        msgs = [Tensor(rng.normal(size=5)) for _ in range(6)]
        a = aggregate(msgs, [], d=5).data
        b = aggregate(msgs[::-1], [], d=5).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestPropagate:
    def test_zero_steps_returns_padded_input(self, rng):
        cfg = cfg_for("matmul")
        params = init_params(cfg, seed=0)
        eg = random_encoded(rng, n=4, d_in=4)
        states = propagate(eg, params, cfg, steps=0)
        assert states.h is states.h0
        np.testing.assert_array_equal(states.h.data[:, :4], eg.node_features)
        np.testing.assert_array_equal(states.h.data[:, 4:], 0.0)

    def test_zero_messages_reduce_to_gru_of_zero(self, rng):
        cfg = cfg_for("matmul", T=3)
        params = init_params(cfg, seed=6)
        zero_message_params(params)
        eg = random_encoded(rng, n=4, d_in=4)
        states = propagate(eg, params, cfg)
        from mpnnkit.engine import _gru_params
        h = states.h0
        for _ in range(cfg.T):
            h = T.gru_cell(Tensor(np.zeros((4, 2 * cfg.d))), h,
                           _gru_params(params, "gru_t0"))
        np.testing.assert_allclose(states.h.data, h.data, atol=1e-14)

    @pytest.mark.parametrize("message_fn,representation", [
        ("matmul", "chemical"),
        ("matmul", "distance_bins"),
        ("edge_network", "raw_distance"),
        ("edge_network", "chemical"),
        ("pair_message", "raw_distance"),
        ("dtnn", "distance_bins"),
    ])
    def test_matches_naive_reference(self, rng, message_fn, representation):
        alphabet = 14 if representation == "distance_bins" else 4
        cfg = cfg_for(message_fn, edge_repr=representation, T=3)
        params = init_params(cfg, seed=7)
        eg = random_encoded(rng, n=6, d_in=5, representation=representation,
                            alphabet=alphabet)
        states = propagate(eg, params, cfg)
        want_h, want_h0, _, _ = naive_propagate(eg, params, cfg)
        np.testing.assert_allclose(states.h.data, want_h, atol=1e-12)
        np.testing.assert_allclose(states.h0.data, want_h0, atol=1e-12)

    def test_matches_naive_with_residual_update(self, rng):
        cfg = cfg_for("dtnn", update_fn="dtnn_residual", T=3)
        params = init_params(cfg, seed=8)
        eg = random_encoded(rng, n=5, d_in=5)
        states = propagate(eg, params, cfg)
        want_h, _, _, _ = naive_propagate(eg, params, cfg)
        np.testing.assert_allclose(states.h.data, want_h, atol=1e-12)

    def test_matches_naive_with_towers(self, rng):
        cfg = cfg_for("matmul", d=8, towers_k=2, T=3)
        params = init_params(cfg, seed=9)
        eg = random_encoded(rng, n=5, d_in=5)
        states = propagate(eg, params, cfg)
        want_h, _, _, _ = naive_propagate(eg, params, cfg)
        np.testing.assert_allclose(states.h.data, want_h, atol=1e-12)

    def test_matches_naive_with_master(self, rng):
        cfg = cfg_for("edge_network", d_master=3, T=3)
        params = init_params(cfg, seed=10)
        eg = random_encoded(rng, n=5, d_in=5, master_dim=3)
        states = propagate(eg, params, cfg)
        want_h, _, want_master, _ = naive_propagate(eg, params, cfg)
        np.testing.assert_allclose(states.h.data, want_h, atol=1e-12)
        np.testing.assert_allclose(states.master.data.ravel(), want_master.ravel(),
                                   atol=1e-12)

    def test_permutation_equivariance(self, rng):
        cfg = cfg_for("pair_message", edge_repr="raw_distance", T=3)
        params = init_params(cfg, seed=11)
        for _ in range(5):
            eg = random_encoded(rng, n=5, d_in=4, representation="raw_distance")
            perm = rng.permutation(5)
            original = propagate(eg, params, cfg).h.data
            permuted = propagate(permute_encoded(eg, perm), params, cfg).h.data
            np.testing.assert_allclose(permuted[perm], original, atol=1e-9)

    def test_isolated_nodes_keep_updating(self, rng):
        # A graph with no edges still runs the update with zero messages.
        cfg = cfg_for("matmul", T=2)
        params = init_params(cfg, seed=12)
        eg = random_encoded(rng, n=3, d_in=4, edge_prob=0.0)
        assert eg.n_edges == 0
        states = propagate(eg, params, cfg)
        assert np.all(np.isfinite(states.h.data))
        assert np.abs(states.h.data - states.h0.data).max() > 0

    def test_master_config_graph_mismatch(self, rng):
        cfg = cfg_for("matmul", d_master=3)
        params = init_params(cfg, seed=13)
        eg = random_encoded(rng, n=4, d_in=4)  # no master on the graph
        with pytest.raises(ContractError):
            propagate(eg, params, cfg)


class TestTowers:
    def test_identity_mixing_keeps_towers_independent(self, rng):
        full = cfg_for("matmul", d=8, towers_k=2, T=3)
        params = init_params(full, seed=14)
        params["mix_w"].data[...] = np.eye(8)
        params["mix_b"].data[...] = 0.0
        eg = random_encoded(rng, n=5, d_in=4)
        h_full = propagate(eg, params, full).h.data

        half = cfg_for("matmul", d=4, towers_k=1, T=3)
        for tower, sl in ((0, slice(0, 4)), (1, slice(4, 8))):
            sub = {}
            for ch in ("in", "out"):
                for l in range(4):
                    sub[f"msg_{ch}_t0_A{l}"] = params[f"msg_{ch}_t{tower}_A{l}"]
            for n_ in ("wz", "uz", "wr", "ur", "wh", "uh"):
                sub[f"gru_t0_{n_}"] = params[f"gru_t{tower}_{n_}"]
            # Same topology and labels, features taken from the tower's slice
            # of the padded full-width input.
            pad8 = np.zeros((5, 8))
            pad8[:, :4] = eg.node_features
            eg_slice = type(eg)(node_features=pad8[:, sl],
                                edge_src=eg.edge_src, edge_dst=eg.edge_dst,
                                edge_features=eg.edge_features,
                                representation=eg.representation)
            h_half = propagate(eg_slice, sub, half).h.data
            np.testing.assert_allclose(h_full[:, sl], h_half, atol=1e-12)

    def test_k1_has_no_mixing_weights(self):
        names = [n for n, _ in param_shapes(cfg_for("matmul", d=8, towers_k=1))]
        assert "mix_w" not in names
        names = [n for n, _ in param_shapes(cfg_for("matmul", d=8, towers_k=2))]
        assert "mix_w" in names and "mix_b" in names

    def test_message_multiplies_scale_inversely_with_k(self, rng):
        # Fully connected graph; matmul messages cost m * (d/k)^2 per tower.
        d = 16
        eg = random_encoded(rng, n=6, d_in=4, edge_prob=1.1)
        counts = {}
        for k in (1, 4):
            cfg = cfg_for("matmul", d=d, towers_k=k, T=2)
            params = init_params(cfg, seed=15)
            counter = MultiplyCounter()
            propagate(eg, params, cfg, message_counter=counter)
            counts[k] = counter.total
        assert counts[4] == counts[1] // 4

    def test_permutation_invariance_with_towers(self, rng):
        cfg = cfg_for("matmul", d=8, towers_k=4, T=3)
        params = init_params(cfg, seed=16)
        eg = random_encoded(rng, n=6, d_in=4)
        perm = rng.permutation(6)
        original = propagate(eg, params, cfg).h.data
        permuted = propagate(permute_encoded(eg, perm), params, cfg).h.data
        np.testing.assert_allclose(permuted[perm], original, atol=1e-9)


class TestParams:
    def test_weight_tying_param_set_independent_of_t(self):
        a = [n for n, _ in param_shapes(cfg_for("matmul", T=3))]
        b = [n for n, _ in param_shapes(cfg_for("matmul", T=8))]
        assert a == b
        assert sum(1 for n in a if n.startswith("gru_t0_")) == 6

    def test_init_is_deterministic(self):
        cfg = cfg_for("edge_network")
        p1 = init_params(cfg, seed=42)
        p2 = init_params(cfg, seed=42)
        assert set(p1) == set(p2)
        for k in p1:
            np.testing.assert_array_equal(p1[k].data, p2[k].data)

    def test_biases_start_at_zero(self):
        params = init_params(cfg_for("edge_network"), seed=1)
        assert np.all(params["msg_in_t0_en_b1"].data == 0)
        assert np.all(params["msg_in_t0_en_b2"].data == 0)

    def test_checkpoint_roundtrip_through_engine(self, rng, tmp_path):
        cfg = cfg_for("matmul")
        params = init_params(cfg, seed=17)
        eg = random_encoded(rng, n=4, d_in=4)
        want = propagate(eg, params, cfg).h.data
        path = tmp_path / "params.json"
        T.save_params(params, str(path))
        got = propagate(eg, T.load_params(str(path)), cfg).h.data
        np.testing.assert_array_equal(got, want)


class TestEndToEndGradients:
    @pytest.mark.parametrize("message_fn,representation", [
        ("matmul", "chemical"),
        ("edge_network", "raw_distance"),
        ("pair_message", "chemical"),
        ("dtnn", "raw_distance"),
    ])
    def test_fd_gradients_per_message_fn(self, rng, message_fn, representation):
        cfg = cfg_for(message_fn, edge_repr=representation, T=2, d=4, n_targets=1)
        params = init_params(cfg, seed=18)
        jitter_biases(params, rng)
        eg = random_encoded(rng, n=3, d_in=3, representation=representation)

        def loss(p):
            out = propagate(eg, p, cfg).h
            return T.reduce_sum(T.mul(out, out))

        check_grad_against_fd(loss, params, label=message_fn)

    def test_fd_gradients_with_master(self, rng):
        cfg = cfg_for("matmul", T=2, d=4, d_master=3, n_targets=1)
        params = init_params(cfg, seed=19)
        eg = random_encoded(rng, n=3, d_in=3, master_dim=3)

        def loss(p):
            states = propagate(eg, p, cfg)
            return T.add(T.reduce_sum(T.mul(states.h, states.h)),
                         T.reduce_sum(T.mul(states.master, states.master)))

        check_grad_against_fd(loss, params, label="master")
