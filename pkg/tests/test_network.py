import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ngflow.network import (
    ORDERING_TAG,
    Architecture,
    BlockParams,
    NetworkParams,
    add_layer,
    add_width,
    eval_bundle,
    features_with_dx,
    forward,
    forward_batch,
    init_params,
    jacobians,
    load_checkpoint,
    save_checkpoint,
)
from conftest import random_params
from oracles import fd_gradient, forward_tangent, naive_forward


def _zero_net(d0=1, widths=(1,), zeta=None):
    arch = Architecture(d0, widths)
    dims = arch.dims
    blocks = [BlockParams(np.zeros((dims[j + 1], dims[j])), np.zeros(dims[j + 1]))
              for j in range(arch.depth)]
    closing = np.ones(dims[-1]) if zeta is None else np.asarray(zeta, float)
    return NetworkParams(arch, blocks, closing)


def test_identity_block():
    assert forward(_zero_net(), [0.7]) == 0.7


def test_zero_closing():
    p = _zero_net(zeta=[0.0])
    p.blocks[0].W[:] = 3.0
    assert forward(p, [0.4]) == 0.0


def test_hand_composition_two_neurons():
    arch = Architecture(1, (2,))
    p = NetworkParams(arch, [BlockParams(np.array([[1.0], [-1.0]]), np.zeros(2))], np.ones(2))
    # (0.3 + tanh(0.3)) + (0 + tanh(-0.3)) = 0.3
    assert forward(p, [0.3]) == pytest.approx(0.3, abs=1e-15)


def test_param_count_and_flat_roundtrip(rng):
    arch = Architecture(3, (4, 5, 2))
    assert arch.n_params == 4 * 4 + 5 * 5 + 2 * 6 + 2
    p = init_params(arch, rng)
    theta = p.flatten()
    q = NetworkParams.from_flat(arch, theta)
    assert np.array_equal(q.flatten(), theta)
    assert q.closing_slice() == slice(arch.n_params - 2, arch.n_params)


def test_flat_order_is_blocks_then_closing():
    arch = Architecture(1, (2,))
    theta = np.arange(arch.n_params, dtype=float)
    p = NetworkParams.from_flat(arch, theta)
    np.testing.assert_array_equal(p.blocks[0].W.ravel(), [0, 1])
    np.testing.assert_array_equal(p.blocks[0].b, [2, 3])
    np.testing.assert_array_equal(p.closing, [4, 5])


def test_forward_matches_naive(rng):
    p = random_params(rng, 2, (3, 5, 2))
    X = rng.uniform(-1, 1, size=(20, 2))
    ref = [naive_forward(p.arch.dims, p.flatten(), x) for x in X]
    np.testing.assert_allclose(forward_batch(p, X), ref, rtol=1e-14, atol=1e-15)


def test_closing_partials_are_features(rng):
    p = random_params(rng, 1, (3, 3))
    X = rng.uniform(0, 1, size=(7, 1))
    bj = jacobians(p, X)
    z, _ = features_with_dx(p, X)
    assert np.array_equal(bj.jac[:, p.closing_slice()], z)


def test_zero_closing_zero_bias_partial():
    p = _zero_net(zeta=[0.0])
    b = eval_bundle(p, [0.3])
    assert b.jac_theta[1] == 0.0  # d/db = zeta * tanh'(0) = 0


def test_jacobian_and_mixed_vs_finite_differences(rng):
    p = random_params(rng, 1, (3, 3))
    theta = p.flatten()
    dims = p.arch.dims
    for x in rng.uniform(0, 1, size=(5, 1)):
        b = eval_bundle(p, x, want_dx=0)
        fd = fd_gradient(lambda t: naive_forward(dims, t, x), theta, h=1e-5)
        np.testing.assert_allclose(b.jac_theta, fd, rtol=1e-6, atol=1e-9)
        h = 1e-5
        jp = eval_bundle(p, x + h).jac_theta
        jm = eval_bundle(p, x - h).jac_theta
        np.testing.assert_allclose(b.jac_mixed, (jp - jm) / (2 * h), rtol=1e-6, atol=1e-8)
        dx = (naive_forward(dims, theta, x + h) - naive_forward(dims, theta, x - h)) / (2 * h)
        assert b.dvalue_dx == pytest.approx(dx, rel=1e-7)


def test_mixed_derivative_symmetry(rng):
    # d/dx of each parameter partial equals the parameter partial of dN/dx (forward mode)
    p = random_params(rng, 2, (4, 3, 3))
    theta = p.flatten()
    x = np.array([0.3, -0.2])
    b = eval_bundle(p, x, want_dx=1)
    for i in range(theta.size):
        v = np.zeros_like(theta)
        v[i] = 1.0
        _, t, _, tx = forward_tangent(p.arch.dims, theta, v, x, coord=1)
        assert b.jac_theta[i] == pytest.approx(t, rel=1e-9, abs=1e-13)
        assert b.jac_mixed[i] == pytest.approx(tx, rel=1e-9, abs=1e-13)


def test_active_mask_columns(rng):
    p = random_params(rng, 1, (3, 3))
    idx = p.last_layers_indices(1)
    q = p.with_active(idx)
    X = rng.uniform(0, 1, size=(4, 1))
    full = jacobians(p, X, dx=0)
    part = jacobians(q, X, dx=0)
    assert part.jac.shape == (4, idx.size)
    np.testing.assert_allclose(part.jac, full.jac[:, idx], rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(part.jac_mixed, full.jac_mixed[:, idx], rtol=1e-14, atol=1e-15)


@given(seed=st.integers(0, 2**31), depth=st.integers(1, 4), width=st.integers(1, 6),
       d0=st.integers(1, 3))
def test_add_layer_embedding_property(seed, depth, width, d0):
    rng = np.random.default_rng(seed)
    p = random_params(rng, d0, (width,) * depth)
    q, new_idx = add_layer(p)
    X = rng.uniform(-1, 1, size=(50, d0))
    assert np.max(np.abs(forward_batch(q, X) - forward_batch(p, X))) <= 1e-15
    assert q.n_params - p.n_params == width * (width + 1)
    assert new_idx.size == width * (width + 1)


def test_add_layer_requires_same_width(rng):
    with pytest.raises(ValueError):
        add_layer(random_params(rng, 1, (3,)), 4)


def test_add_layer_small_bias_hand_formula():
    arch = Architecture(1, (1,))
    p = NetworkParams(arch, [BlockParams(np.array([[0.8]]), np.array([0.1]))], np.array([1.7]))
    q, _ = add_layer(p)
    eps = 1e-3
    q.blocks[-1].b[:] = eps
    x = 0.4
    old = forward(p, [x])
    assert forward(q, [x]) == pytest.approx(old + 1.7 * np.tanh(eps), abs=1e-15)


@given(seed=st.integers(0, 2**31), d_e=st.integers(1, 3), depth=st.integers(1, 3))
def test_add_width_embedding_property(seed, d_e, depth):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 1, (3,) * depth)
    q, new_idx = add_width(p, d_e)
    X = rng.uniform(-1, 1, size=(50, 1))
    assert np.max(np.abs(forward_batch(q, X) - forward_batch(p, X))) <= 1e-15
    d_prev = p.arch.dims[-2]
    assert q.n_params - p.n_params == d_e * (d_prev + 1) + d_e
    assert new_idx.size == d_e * (d_prev + 1) + d_e


def test_add_width_seeded_hand_formula():
    # width-1 net: T_new = T_old + xi * tanh(W z^{L-1} + b)
    arch = Architecture(1, (1,))
    p = NetworkParams(arch, [BlockParams(np.array([[0.5]]), np.array([0.2]))], np.array([1.3]))
    W, b, xi = np.array([[0.7]]), np.array([-0.1]), np.array([0.9])
    q, _ = add_width(p, 1, {"W": W, "b": b, "xi": xi})
    for x in (0.0, 0.3, 0.9):
        expected = forward(p, [x]) + 0.9 * np.tanh(0.7 * x - 0.1)
        assert forward(q, [x]) == pytest.approx(expected, abs=1e-15)


def test_checkpoint_roundtrip(tmp_path, rng):
    p = random_params(rng, 2, (3, 4)).with_active([0, 5, 7])
    save_checkpoint(p, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["ordering"] == ORDERING_TAG
    q = load_checkpoint(tmp_path / "c.json")
    assert q.arch == p.arch
    assert np.array_equal(q.flatten(), p.flatten())
    assert np.array_equal(q.active_mask, p.active_mask)


def test_checkpoint_rejects_other_ordering(tmp_path, rng):
    p = random_params(rng)
    save_checkpoint(p, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["ordering"] = "something else"
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.json")


def test_bad_shapes_rejected():
    arch = Architecture(1, (2,))
    with pytest.raises(ValueError):
        NetworkParams(arch, [BlockParams(np.zeros((2, 2)), np.zeros(2))], np.zeros(2))
    with pytest.raises(ValueError):
        Architecture(0, (2,))
    with pytest.raises(ValueError):
        Architecture(1, ())
