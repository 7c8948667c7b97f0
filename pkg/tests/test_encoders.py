import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphode import autodiff as ad
from graphode.autodiff import Tensor, gradcheck
from graphode.encoders import (GraphEncoderParams, GruCellParams, LatentState, TemporalEncoderParams,
                               aggregate_graph, build_initial_state, edge_index_from_adjacency, encode_edge_sequences,
                               encode_graph, encode_node_sequences, encode_temporal_stochastic, gru_cell, pool_channels,
                               run_gru)
from oracles import gru_step


def _lists(p: GruCellParams):
    return p.w_x.data.tolist(), p.w_h.data.tolist(), p.b_x.data.tolist(), p.b_h.data.tolist()


def _random_cell(rng, d_in, hidden):
    p = GruCellParams.init(d_in, hidden, rng)
    p.b_x.data[:] = rng.uniform(-0.5, 0.5, p.b_x.shape)
    p.b_h.data[:] = rng.uniform(-0.5, 0.5, p.b_h.shape)
    return p


def test_zero_input_zero_params_gives_zero_state():
    layers = [GruCellParams.zeros(5, 4), GruCellParams.zeros(4, 4)]
    h = encode_node_sequences(np.zeros((1, 6, 3, 5)), layers)
    assert np.array_equal(h.data, np.zeros((3, 4)))


def test_length_one_is_single_cell():
    rng = np.random.default_rng(0)
    p = _random_cell(rng, 3, 4)
    x = rng.standard_normal((2, 1, 3))
    out = run_gru(Tensor(x), [p])
    cell = gru_cell(Tensor(x[:, 0]), Tensor(np.zeros((2, 4))), p)
    assert np.array_equal(out.data, cell.data)


@pytest.mark.parametrize("seed", range(5))
def test_three_step_matches_hand_unrolled_oracle(seed):
    rng = np.random.default_rng(seed)
    p = _random_cell(rng, 3, 4)
    x = rng.standard_normal((3, 3))
    out = run_gru(Tensor(x[None]), [p]).data[0]
    h = [0.0] * 4
    for t in range(3):
        h = gru_step(x[t].tolist(), h, *_lists(p))
    assert np.max(np.abs(out - np.array(h))) <= 1e-12


def test_two_layer_stack_matches_oracle():
    rng = np.random.default_rng(7)
    layers = [_random_cell(rng, 3, 4), _random_cell(rng, 4, 4)]
    x = rng.standard_normal((5, 3))
    out = run_gru(Tensor(x[None]), layers).data[0]
    h1, h2 = [0.0] * 4, [0.0] * 4
    for t in range(5):
        h1 = gru_step(x[t].tolist(), h1, *_lists(layers[0]))
        h2 = gru_step(h1, h2, *_lists(layers[1]))
    assert np.max(np.abs(out - np.array(h2))) <= 1e-12


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        encode_node_sequences(np.zeros((1, 0, 3, 5)), [GruCellParams.zeros(5, 2)])
    with pytest.raises(ValueError):
        encode_edge_sequences(np.zeros((1, 0, 3, 3)), [GruCellParams.zeros(1, 2)])


def test_edge_skip_and_constant_sequence():
    rng = np.random.default_rng(1)
    p = _random_cell(rng, 1, 3)
    adj = np.zeros((1, 4, 3, 3))
    adj[0, :, 0, 1] = adj[0, :, 1, 0] = 0.6
    h, edges = encode_edge_sequences(adj, [p])
    assert sorted(zip(edges.src.tolist(), edges.dst.tolist())) == [(0, 1), (1, 0)]
    state = [0.0] * 3
    for _ in range(4):
        state = gru_step([0.6], state, *_lists(p))
    assert np.max(np.abs(h.data[0] - np.array(state))) <= 1e-12
    # a structurally present edge with an all-zero sequence equals a zero-sequence run
    listed = type(edges)(np.array([0]), np.array([0]), np.array([2]))
    h_zero, _ = encode_edge_sequences(adj, [p], listed)
    direct = run_gru(Tensor(np.zeros((1, 4, 1))), [p])
    assert np.array_equal(h_zero.data, direct.data)


def _graph_params(rng, d, hidden, m, layers=1):
    params = GraphEncoderParams.init(d, hidden, layers, m, rng)
    for r in params.rounds:
        r.bias.data[:] = rng.uniform(-0.3, 0.3, r.bias.shape)
    params.b_out.data[:] = rng.uniform(-0.3, 0.3, params.b_out.shape)
    return params


def test_empty_adjacency_has_no_messages():
    rng = np.random.default_rng(2)
    params = _graph_params(rng, 4, 5, 3)
    h = Tensor(rng.standard_normal((3, 5)))
    z = aggregate_graph(h, None, edge_index_from_adjacency(np.zeros((1, 1, 3, 3))), np.zeros((1, 3, 3)), params)
    r = params.rounds[0]
    expect = np.maximum(h.data @ r.w_self.data + r.bias.data, 0).mean(axis=0) @ params.w_out.data + params.b_out.data
    assert np.allclose(z.data[0], expect, atol=1e-12)


def test_single_node_has_no_neighbor_term():
    rng = np.random.default_rng(3)
    params = _graph_params(rng, 4, 5, 3)
    h = Tensor(rng.standard_normal((1, 5)))
    z = aggregate_graph(h, None, edge_index_from_adjacency(np.zeros((1, 1, 1, 1))), np.zeros((1, 1, 1)), params)
    r = params.rounds[0]
    expect = np.maximum(h.data @ r.w_self.data + r.bias.data, 0)[0] @ params.w_out.data + params.b_out.data
    assert np.allclose(z.data[0], expect, atol=1e-12)


def test_triangle_matches_brute_force_summation():
    rng = np.random.default_rng(4)
    hidden = 4
    params = _graph_params(rng, 3, hidden, 2)
    r = params.rounds[0]
    adj_seq = rng.uniform(0.1, 1.0, (1, 2, 3, 3))
    adj_seq[..., [0, 1, 2], [0, 1, 2]] = 0
    a = adj_seq[0, -1]
    h_nodes = rng.standard_normal((3, hidden))
    edges = edge_index_from_adjacency(adj_seq)
    h_edges = rng.standard_normal((len(edges), hidden))
    z = aggregate_graph(Tensor(h_nodes), Tensor(h_edges), edges, adj_seq[:, -1], params)
    edge_state = {(int(i), int(j)): h_edges[k] for k, (i, j) in enumerate(zip(edges.src, edges.dst))}
    updated = []
    for i in range(3):
        msg = np.zeros(hidden)
        for j in range(3):
            if j != i and a[i, j] != 0:
                msg += a[i, j] * (h_nodes[j] @ r.w_nbr.data + edge_state[(i, j)] @ r.w_edge.data)
        updated.append(np.maximum(h_nodes[i] @ r.w_self.data + msg + r.bias.data, 0))
    expect = np.mean(updated, axis=0) @ params.w_out.data + params.b_out.data
    assert np.allclose(z.data[0], expect, atol=1e-12)


def _random_graph_batch(rng, t=4, n=5, d=6):
    feats = rng.standard_normal((1, t, n, d))
    adj = rng.uniform(0, 1, (1, t, n, n)) * (rng.uniform(size=(1, t, n, n)) < 0.5)
    adj = np.maximum(adj, adj.transpose(0, 1, 3, 2))
    adj[..., np.arange(n), np.arange(n)] = 0
    return feats, adj


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31))
def test_node_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    params = _graph_params(rng, 6, 5, 3, layers=2)
    feats, adj = _random_graph_batch(rng)
    perm = rng.permutation(5)
    z = encode_graph(feats, adj, params).data
    zp = encode_graph(feats[:, :, perm], adj[:, :, perm][:, :, :, perm], params).data
    assert np.allclose(z, zp, atol=1e-10)
    h = encode_node_sequences(feats, params.node_gru).data
    hp = encode_node_sequences(feats[:, :, perm], params.node_gru).data
    assert np.allclose(h[perm], hp, atol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31))
def test_epoch_order_matters(seed):
    rng = np.random.default_rng(seed)
    params = _graph_params(rng, 6, 5, 3)
    feats, adj = _random_graph_batch(rng)
    rev = encode_graph(feats[:, ::-1].copy(), adj, params).data
    assert not np.allclose(encode_graph(feats, adj, params).data, rev)


def test_graph_encoder_has_no_dead_parameters():
    rng = np.random.default_rng(5)
    params = _graph_params(rng, 4, 3, 2, layers=2)
    feats, adj = _random_graph_batch(rng, t=3, n=4, d=4)
    w = Tensor(rng.standard_normal((1, 2)))
    named = params.named()
    report = gradcheck(lambda: ad.sum(ad.mul(encode_graph(feats, adj, params), w)), named, tolerance=1e-5)
    assert report.passed, report.errors
    for name, p in named.items():
        p.requires_grad = True
    with ad.Tape() as tape:
        loss = ad.sum(ad.mul(encode_graph(feats, adj, params), w))
    ad.backward(tape, loss)
    for name, p in named.items():
        assert np.any(p.grad != 0), name


def _psi(rng, channels=3, c=2, noise=0.0):
    return TemporalEncoderParams.init(channels, c, rng, noise)


def test_temporal_noise_off_is_deterministic():
    rng = np.random.default_rng(6)
    params = _psi(rng)
    x = rng.standard_normal((2, 40))
    a = encode_temporal_stochastic(x, params, train=False).data
    b = encode_temporal_stochastic(x, params, train=False).data
    assert np.array_equal(a, b)


def test_temporal_noise_is_seeded():
    rng = np.random.default_rng(7)
    params = _psi(rng, noise=0.1)
    x = rng.standard_normal((3, 40))
    run = lambda s: encode_temporal_stochastic(x, params, train=True, rng=np.random.default_rng(s)).data  # noqa: E731
    assert np.array_equal(run(1), run(1))
    assert not np.array_equal(run(1), run(2))


def test_zero_input_zero_weights_gives_noise_only():
    params = _psi(np.random.default_rng(8), noise=0.1)
    for name, p in params.named().items():
        if "gamma" not in name:
            p.data[:] = 0
    z = encode_temporal_stochastic(np.zeros((2, 40)), params, train=True, rng=np.random.default_rng(3)).data
    noise = 0.1 * np.random.default_rng(3).standard_normal((2, 2))
    assert np.array_equal(z, noise)


def test_short_window_rejected():
    params = _psi(np.random.default_rng(9))
    with pytest.raises(ValueError, match="receptive field"):
        encode_temporal_stochastic(np.zeros((1, params.min_length - 1)), params)


def test_temporal_encoder_gradcheck_and_no_dead_parameters():
    rng = np.random.default_rng(10)
    params = _psi(rng, noise=0.1)
    x = rng.standard_normal((3, 30))
    w = Tensor(rng.standard_normal((3, 2)))

    def fn():
        return ad.sum(ad.mul(encode_temporal_stochastic(x, params, train=True, rng=np.random.default_rng(0)), w))

    named = params.named()
    report = gradcheck(fn, named, tolerance=1e-5)
    assert report.passed, report.errors
    for p in named.values():
        p.requires_grad = True
    with ad.Tape() as tape:
        loss = fn()
    ad.backward(tape, loss)
    for name, p in named.items():
        assert np.any(p.grad != 0), name


def test_pool_channels_standardizes():
    x = np.random.default_rng(11).standard_normal((2, 4, 50)) * 3 + 1
    s = pool_channels(x)
    assert s.shape == (2, 50)
    assert np.allclose(s.mean(axis=-1), 0) and np.allclose(s.std(axis=-1), 1)


def test_initial_state_layout():
    z_s, z_g = Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0, 5.0]]))
    z0 = build_initial_state(z_s, z_g, 2, 3)
    assert z0.data.tolist() == [[1.0, 2.0, 3.0, 4.0, 5.0]]
    zero = build_initial_state(Tensor(np.zeros((1, 2))), z_g)
    assert np.array_equal(zero.data[:, 2:], z_g.data)
    back = LatentState.split(z0.data, 2)
    assert np.array_equal(back.z_s, z_s.data) and np.array_equal(back.z_g, z_g.data)
    with pytest.raises(ValueError):
        build_initial_state(z_s, z_g, 3, 3)
