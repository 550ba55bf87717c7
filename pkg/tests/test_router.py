import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backlink.errors import ConfigError, ShapeError
from backlink.gradcheck import (
    alpha_one_error,
    bp_equivalence_error,
    check_router_against_fd,
    full_span_monolithic_error,
    gll_invariance_holds,
    linearity_error,
    max_abs_diff,
    random_case,
    relative_error,
    with_config,
)
from backlink.layers import AuxClassifierSpec, Dense, tiny_mlp, tiny_resnet
from backlink.router import (
    BackLinkConfig,
    BackLinkNet,
    ErrorPacket,
    PartitionPlan,
    build_surrogate_objective,
    component_gradients,
    compute_gradients,
    forward_backlink,
    inject_boundary_error,
    monolithic_gradients,
    packet_route_module,
    partition,
    predict,
    propagate_in_range,
    route_backward,
)


def mlp_net(K=2, l=1, alpha=0.5, seed=0, literal=False, classifier="linear"):
    spec = tiny_mlp(dims=(6, 5, 5, 5, 4), num_classes=3)
    cfg = BackLinkConfig(l, alpha, AuxClassifierSpec(classifier, 3, hidden=6), literal)
    return BackLinkNet(spec, partition(len(spec), K), cfg, seed=seed)


def batch(seed=0, B=6, shape=(6,), classes=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, *shape)), rng.integers(0, classes, B)


# --- partition ---------------------------------------------------------------

def test_partition_55_16():
    plan = partition(55, 16)
    assert plan.sizes == (4,) * 7 + (3,) * 9


def test_partition_single_module():
    assert partition(13, 1).sizes == (13,)


def test_partition_10_4():
    assert partition(10, 4).sizes == (3, 3, 2, 2)


def test_partition_too_many_modules():
    with pytest.raises(ConfigError):
        partition(8, 16)


@given(st.integers(1, 200), st.data())
def test_partition_properties(total, data):
    K = data.draw(st.integers(1, total))
    plan = partition(total, K)
    assert plan.total == total and plan.K == K
    assert all(0 <= a - b <= 1 for a, b in zip(plan.sizes, plan.sizes[1:]))
    assert max(plan.sizes) - min(plan.sizes) <= 1
    assert [plan.module_of(u) for u in range(total)] == sorted(plan.module_of(u) for u in range(total))


def test_plan_rejects_empty_module():
    with pytest.raises(ConfigError):
        PartitionPlan((3, 0))


# --- config ------------------------------------------------------------------

def test_config_clamps_and_effective_alpha():
    plan = PartitionPlan((4, 3, 3))
    cfg = BackLinkConfig(l=9, alpha=0.25)
    assert [cfg.span(plan, n) for n in range(3)] == [4, 3, 0]
    assert cfg.effective_alpha(plan, 0) == 0.25 and cfg.effective_alpha(plan, 2) == 1.0
    assert BackLinkConfig(l=0, alpha=0.25).effective_alpha(plan, 0) == 1.0


@pytest.mark.parametrize("kw", [{"l": -1}, {"alpha": 1.5}, {"alpha": -0.1}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BackLinkConfig(**kw)


def test_off_grid_detection():
    assert BackLinkConfig(alpha=0.3).off_grid()
    assert not BackLinkConfig(alpha=0.75).off_grid()


# --- error packets -----------------------------------------------------------

def test_inject_alpha_one_is_pure_local():
    p = inject_boundary_error(np.array([0.2, -0.2]), np.array([0.4, 0.0]), 1.0, 2)
    np.testing.assert_array_equal(p.combined(), [0.2, -0.2])


def test_inject_alpha_zero_is_pure_global():
    p = inject_boundary_error(np.array([0.2, -0.2]), np.array([0.4, 0.0]), 0.0, 2)
    np.testing.assert_array_equal(p.combined(), [0.4, 0.0])


def test_inject_half():
    p = inject_boundary_error(np.array([0.2, -0.2]), np.array([0.4, 0.0]), 0.5, 1)
    np.testing.assert_allclose(p.combined(), [0.3, -0.1], atol=1e-15)
    assert p.depth_remaining == 1


def test_inject_final_module_unscaled():
    p = inject_boundary_error(np.array([0.2, -0.2]), None, 0.5, 3)
    np.testing.assert_array_equal(p.local, [0.2, -0.2])
    assert p.global_ is None and p.depth_remaining == 0


def test_inject_global_with_l0():
    with pytest.raises(ConfigError):
        inject_boundary_error(np.ones(2), np.ones(2), 0.5, 0)


def test_packet_invariants():
    with pytest.raises(ConfigError):
        ErrorPacket(np.ones(2), None, 1)
    with pytest.raises(ShapeError):
        ErrorPacket(np.ones(2), np.ones(3), 1)


def test_propagate_identity_unit():
    p = propagate_in_range(ErrorPacket(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 2), lambda e: e @ np.eye(2).T)
    np.testing.assert_array_equal(p.local, [1.0, 2.0])
    np.testing.assert_array_equal(p.global_, [3.0, 4.0])
    assert p.depth_remaining == 1


def test_propagate_truncates_at_depth_one():
    p = propagate_in_range(ErrorPacket(np.ones(2), np.ones(2), 1), lambda e: e)
    assert p.global_ is None and p.depth_remaining == 0


def test_propagate_dense_unit():
    W = np.array([[2.0, 0.0], [0.0, 3.0]])
    p = propagate_in_range(ErrorPacket(np.array([1.0, 1.0]), np.array([1.0, 0.0]), 2), lambda e: W.T @ e)
    np.testing.assert_array_equal(p.local, [2.0, 3.0])
    np.testing.assert_array_equal(p.global_, [2.0, 0.0])


def test_propagate_at_zero_depth():
    with pytest.raises(ConfigError):
        propagate_in_range(ErrorPacket(np.ones(2), None, 0), lambda e: e)


# --- net ---------------------------------------------------------------------

def test_net_rejects_mismatched_plan():
    with pytest.raises(ConfigError):
        BackLinkNet(tiny_mlp(), PartitionPlan((1, 1)), BackLinkConfig())


def test_route_backward_missing_error():
    net = mlp_net(K=2)
    x, y = batch()
    rec = forward_backlink(net, x, net_ctx())
    with pytest.raises(ConfigError):
        route_backward(net, rec, [None, np.zeros((6, 3))])


def net_ctx():
    from backlink.layers import ForwardContext
    return ForwardContext()


def test_final_module_error_optional():
    net = mlp_net(K=2)
    x, y = batch()
    rec = forward_backlink(net, x, net_ctx())
    g = route_backward(net, rec, [np.ones((6, 3)) / 6, None])
    assert all(np.all(g[p] == 0) for p in net.head_parameters(1))


def test_classifier_grads_are_unweighted_local():
    net = mlp_net(K=2, l=1, alpha=0.25)
    x, y = batch()
    g, _, _ = compute_gradients(net, x, y)
    gl, _ = component_gradients(net, 0, x, y)
    for p in net.head_parameters(0):
        np.testing.assert_allclose(g[p], gl[p], atol=1e-12)


def test_predict_shapes():
    net = mlp_net(K=2)
    out = predict(net, batch()[0])
    assert [o.shape for o in out] == [(6, 3), (6, 3)]


# --- limit equivalences --------------------------------------------------------

def test_k1_equals_bp():
    net = BackLinkNet(tiny_mlp(dims=(6, 5, 4), num_classes=3), partition(2, 1), BackLinkConfig(l=2, alpha=0.5))
    x, y = batch()
    assert bp_equivalence_error(net, x, y) <= 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_gll_invariance(seed):
    net, x, y = random_case(seed)
    net = with_config(net, l=0, alpha=0.5)
    assert gll_invariance_holds(net, x, y, seed)


def test_gll_equals_independent_modules():
    net = mlp_net(K=2, l=0, alpha=0.5)
    x, y = batch()
    g, _, _ = compute_gradients(net, x, y)
    for n in range(2):
        gl, _ = component_gradients(net, n, x, y)
        for p in net.module_parameters(n):
            np.testing.assert_array_equal(g[p], gl[p])


@pytest.mark.parametrize("seed", range(4))
def test_alpha_one_equals_l0(seed):
    net, x, y = random_case(seed)
    assert alpha_one_error(net, x, y) <= 1e-10


def test_full_span_matches_monolithic():
    net = mlp_net(K=2, l=2, alpha=0.5)
    x, y = batch()
    assert full_span_monolithic_error(net, x, y) <= 1e-6


def test_full_span_resnet_matches_monolithic():
    spec = tiny_resnet(width=2, input_shape=(2, 4, 4), num_classes=3)
    net = BackLinkNet(spec, partition(8, 2), BackLinkConfig(l=4, alpha=0.5), seed=3)
    x, y = batch(B=4, shape=(2, 4, 4))
    assert full_span_monolithic_error(net, x, y) <= 1e-6


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_linearity_decomposition(seed):
    net, x, y = random_case(seed)
    assert linearity_error(net, x, y) <= 1e-10


def test_alpha_zero_trains_only_for_successor():
    net = mlp_net(K=2, l=2, alpha=0.0)
    x, y = batch()
    g, _, _ = compute_gradients(net, x, y)
    _, gg = component_gradients(net, 0, x, y)
    for p in net.backbone_parameters(0):
        np.testing.assert_allclose(g[p], gg[p], atol=1e-12)


def test_below_range_gets_scaled_local_only():
    net = mlp_net(K=2, l=1, alpha=0.25)
    x, y = batch()
    g, _, _ = compute_gradients(net, x, y)
    gl, gg = component_gradients(net, 0, x, y)
    below = net.module_units(0)[0].parameters()
    for p in below:
        assert np.all(gg[p] == 0)
        np.testing.assert_allclose(g[p], 0.25 * gl[p], atol=1e-12)


def test_truncation_locality():
    net = mlp_net(K=2, l=1, alpha=0.5)
    x, y = batch()
    below = net.module_units(0)[0].parameters()
    _, before = component_gradients(net, 0, x, y)
    rng = np.random.default_rng(1)
    for p in below:
        p.data = p.data + rng.standard_normal(p.shape)
    _, after = component_gradients(net, 0, x, y)
    for p in below:
        assert np.all(before[p] == 0) and np.all(after[p] == 0)


def test_surrogate_alpha_one_is_local_loss():
    net = mlp_net(K=2, l=1, alpha=1.0)
    x, y = batch()
    obj = build_surrogate_objective(net, 0, x, y)
    assert obj.backbone_value() == obj.local_loss()


def test_surrogate_clamped_span_stops_at_module_input():
    net = mlp_net(K=2, l=9, alpha=0.5)
    x, y = batch()
    obj = build_surrogate_objective(net, 0, x, y)
    assert obj.span == 2
    np.testing.assert_array_equal(obj.range_entry.data, obj.module_input.data)


def test_surrogate_targets_match_full_value():
    net = BackLinkNet(tiny_mlp(dims=(6, 5, 5, 5, 4), num_classes=3), partition(4, 2), BackLinkConfig(1, 0.25))
    x, y = batch()
    obj = build_surrogate_objective(net, 0, x, y)
    for p, f in obj.targets():
        expected = obj.head_value() if p.name.startswith("head") else obj.backbone_value()
        assert abs(f() - expected) <= 1e-12


def test_surrogate_module_index_checked():
    net = mlp_net(K=2)
    with pytest.raises(ConfigError):
        build_surrogate_objective(net, 2, *batch())


@pytest.mark.parametrize("seed", range(3))
def test_router_matches_fd(seed):
    net, x, y = random_case(100 + seed)
    reports = check_router_against_fd(net, x, y)
    assert max(r.max_rel_error for r in reports) <= 1e-4


def test_fd_detects_corruption():
    net = mlp_net(K=2, l=1, alpha=0.5)
    x, y = batch()
    target = net.range_parameters(0)[0]

    def tamper(g):
        g[target] = g[target] * 1.01

    reports = check_router_against_fd(net, x, y, tamper=tamper)
    assert reports[0].max_rel_error > 1e-4


def test_fd_leaves_state_untouched():
    net = mlp_net(K=2)
    before = net.state()
    check_router_against_fd(net, *batch())
    after = net.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


# --- packet routing cross-check ---------------------------------------------------

@pytest.mark.parametrize("l,alpha,literal", [(1, 0.5, False), (2, 0.25, False), (2, 0.25, True), (1, 0.75, True), (0, 0.5, False)])
def test_packet_routing_matches_unfolded_graph(l, alpha, literal):
    net = mlp_net(K=2, l=l, alpha=alpha, literal=literal)
    x, y = batch()
    g, _, _ = compute_gradients(net, x, y)
    gp = packet_route_module(net, 0, x, y)
    for p in net.backbone_parameters(0):
        np.testing.assert_allclose(gp[p], g[p], atol=1e-12)


def test_literal_equals_single_weighting_at_l1():
    net = mlp_net(K=2, l=1, alpha=0.25)
    lit = with_config(net, literal_reweighting=True)
    x, y = batch()
    a, _, _ = compute_gradients(net, x, y)
    b, _, _ = compute_gradients(lit, x, y)
    assert max(float(np.max(np.abs(a[p] - b[q]))) for p, q in zip(net.parameters(), lit.parameters())) <= 1e-12


def test_literal_differs_beyond_l1():
    net = mlp_net(K=2, l=2, alpha=0.25)
    lit = with_config(net, literal_reweighting=True)
    x, y = batch()
    a, _, _ = compute_gradients(net, x, y)
    b, _, _ = compute_gradients(lit, x, y)
    p, q = net.backbone_parameters(0)[0], lit.backbone_parameters(0)[0]
    assert relative_error(a[p], b[q]) > 1e-3


def test_conv_classifier_routing_fd():
    spec = tiny_resnet(width=2, input_shape=(2, 4, 4), num_classes=3)
    net = BackLinkNet(spec, partition(8, 3), BackLinkConfig(2, 0.5, AuxClassifierSpec("conv", 3, hidden=4)), seed=1)
    x, y = batch(B=4, shape=(2, 4, 4))
    reports = check_router_against_fd(net, x, y)
    assert max(r.max_rel_error for r in reports) <= 1e-4


def test_duplicate_pass_leaves_running_stats_to_owner():
    net = mlp_net(K=2, l=2, alpha=0.5)
    ref = with_config(net, l=0)
    x, y = batch()
    compute_gradients(net, x, y)
    compute_gradients(ref, x, y)
    sa, sb = net.state(), ref.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa if k.startswith("buffer"))


def test_monolithic_weights_zero_head_ignored():
    net = mlp_net(K=2)
    x, y = batch()
    g = monolithic_gradients(net, x, y, [1.0, 0.0])
    assert all(np.all(g[p] == 0) for p in net.head_parameters(1))
    assert max_abs_diff({p: g[p] for p in net.module_parameters(0)},
                        {p: component_gradients(net, 0, x, y)[0][p] for p in net.module_parameters(0)}) <= 1e-12
