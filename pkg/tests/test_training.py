import numpy as np
import pytest

from gradcheck import check
from lacoot import autodiff as ad
from lacoot import ot
from lacoot.datasets import DatasetSpec, make_splits
from lacoot.net import BlockState, build_residual_mlp
from lacoot.ot import DistanceConfig, MaxMode
from lacoot.training import (BlockDistanceVector, DirectionSource, Distance, TrainConfig,
                             TrainingDiverged, fit_adapter, heal, objective, regularizer,
                             tape_distance, train, value_distance)


def small_net(seed=0, width=6, blocks=3, classes=3):
    return build_residual_mlp(width, [width] * blocks, classes, np.random.default_rng(seed))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(resample="never")
    cfg = TrainConfig(learning_rate=1.0, milestones=(0.5, 0.75), lr_drop=0.1)
    assert [cfg.lr_at(e, 8) for e in (0, 3, 4, 6)] == pytest.approx([1.0, 1.0, 0.1, 0.01])


def test_block_distance_vector():
    vec = BlockDistanceVector({3: 0.5, 1: 0.2, 2: 0.2})
    assert vec.argmin() == 1
    assert vec.ranked() == [1, 2, 3]
    assert vec.mean == pytest.approx(0.3)
    assert BlockDistanceVector.from_dict(vec.to_dict()).values == vec.values


def test_zero_branches_give_zero_regularizer():
    net = small_net()
    for b in net.blocks:
        for name in ("W1", "b1", "W2", "b2"):
            getattr(b, name)[...] = 0.0
    X = np.random.default_rng(1).standard_normal((8, 6))
    for kind in Distance:
        R, vec = regularizer(net, X, TrainConfig(distance=kind, distance_cfg=DistanceConfig(seed=0)))
        assert R.value == 0.0
        assert set(vec.values) == {0, 1, 2}


def test_one_block_mean_l2_unfolds():
    rng = np.random.default_rng(2)
    net = small_net(blocks=1)
    X = rng.standard_normal((9, 6))
    b = net.blocks[0]
    f = np.maximum(X @ b.W1 + b.b1, 0) @ b.W2 + b.b2
    R, _ = regularizer(net, X, TrainConfig(distance=Distance.MEAN_L2))
    assert R.value == pytest.approx(np.mean(np.linalg.norm(f, axis=1)), abs=1e-12)


def test_regularizer_mean_matches_ot_core():
    rng = np.random.default_rng(3)
    net = small_net(seed=3)
    X = rng.standard_normal((16, 6))
    dirs = ot.sample_unit_directions(6, 24, rng)
    R, vec = regularizer(net, X, TrainConfig(), directions=dirs)
    _, pairs = net.forward_collect(X)
    independent = [ot.max_sliced_wasserstein(a.value, b.value, directions=dirs)[0] for a, b in pairs.values()]
    assert abs(R.value - np.mean(independent)) < 1e-9
    assert abs(vec.mean - np.mean(independent)) < 1e-9


@pytest.mark.parametrize("kind", list(Distance))
def test_tape_distances_match_numpy_values(kind):
    rng = np.random.default_rng(4)
    mu, nu = rng.standard_normal((10, 3)), rng.standard_normal((10, 3)) + 0.3
    dirs = ot.sample_unit_directions(3, 12, rng)
    dcfg = DistanceConfig()
    tape = tape_distance(kind, ad.constant(mu), ad.constant(nu), dcfg, dirs).value
    assert tape == pytest.approx(value_distance(kind, mu, nu, dcfg, dirs), abs=1e-10)


@pytest.mark.parametrize("kind", list(Distance))
def test_tape_distance_gradients(kind):
    rng = np.random.default_rng(5)
    mu0, nu = rng.standard_normal((10, 3)), rng.standard_normal((10, 3)) + 0.3
    dirs = ot.sample_unit_directions(3, 12, rng)
    dcfg = DistanceConfig()
    if kind is Distance.MMD:
        # the bandwidth is a constant of the loss; compare at a fixed bandwidth
        sigma = ot.median_bandwidth(mu0, nu)
        f = lambda m: tape_distance(kind, m, ad.constant(nu), dcfg, dirs)
        numeric = ad.numerical_gradient(lambda m: ot.mmd_rbf(m, nu, bandwidth=sigma), mu0, 1e-5)
        node = ad.parameter(mu0)
        f(node).backward()
        assert ad.max_relative_error(node.grad, numeric) < 1e-4
    else:
        err = ad.finite_diff_check(lambda m: tape_distance(kind, m, ad.constant(nu), dcfg, dirs), mu0, 1e-5)
        assert err < 1e-4


def test_projected_ascent_regularizer_uses_ascent_direction():
    rng = np.random.default_rng(6)
    mu, nu = rng.standard_normal((12, 4)), rng.standard_normal((12, 4))
    dirs = ot.sample_unit_directions(4, 8, rng)
    dcfg = DistanceConfig(max_mode=MaxMode.PROJECTED_ASCENT)
    tape = tape_distance(Distance.MAX_SLICED, ad.constant(mu), ad.constant(nu), dcfg, dirs).value
    assert tape == pytest.approx(ot.max_sliced_wasserstein(mu, nu, dcfg, directions=dirs)[0], abs=1e-12)


def test_objective_lambda_zero_is_loss():
    net = small_net()
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((8, 6)), rng.integers(0, 3, 8)
    J, L, R, _ = objective(net, X, y, TrainConfig(lam=0.0))
    assert J.value == L.value and R.value == 0.0


@pytest.mark.parametrize("which", ["L", "R", "J"])
def test_objective_gradients(which):
    rng = np.random.default_rng(8)
    net = build_residual_mlp(5, [5, 5], 3, rng)
    X, y = rng.standard_normal((8, 5)), rng.integers(0, 3, 8)
    dirs = ot.sample_unit_directions(5, 10, rng)
    err, generic = check(net, X, y, TrainConfig(lam=0.5), dirs, which)
    assert generic
    assert err < 1e-4


def test_first_block_gradient_sees_later_blocks():
    rng = np.random.default_rng(9)
    net = build_residual_mlp(4, [4, 4], 2, rng)
    X = rng.standard_normal((10, 4))
    dirs = ot.sample_unit_directions(4, 8, rng)
    cfg = TrainConfig()
    nodes = net.parameter_nodes()
    R, _ = regularizer(net, X, cfg, nodes=nodes, directions=dirs)
    R.backward()
    full = nodes["blocks.0.W2"].grad.copy()
    # the block-0 term alone, without the dependence of block 1's term
    fresh = net.parameter_nodes()
    _, pairs = net.forward_collect(X, fresh)
    own = ad.scale(tape_distance(Distance.MAX_SLICED, *pairs[0], cfg.distance_cfg, dirs), 0.5)
    own.backward()
    assert not np.allclose(full, fresh["blocks.0.W2"].grad)


def test_direction_source_policies():
    src = DirectionSource(DistanceConfig(n_proj=5, seed=3), np.random.default_rng(0))
    a = src.draw(4)
    assert src.draw(4) is a
    src.next_step()
    assert np.array_equal(src.draw(4), a)
    free = DirectionSource(DistanceConfig(n_proj=5), np.random.default_rng(0))
    b = free.draw(4)
    free.next_step()
    assert not np.array_equal(free.draw(4), b)


def blobs(seed=0, noise=0.3, n=400, classes=2, dim=4):
    spec = DatasetSpec(kind="blobs", n_samples=n, n_classes=classes, input_dim=dim, noise=noise, seed=seed)
    return make_splits(spec)


def test_train_separable_blobs():
    sp = blobs(seed=1)
    net = build_residual_mlp(4, [4] * 4, 2, np.random.default_rng(0))
    history = train(net, sp.train.X, sp.train.y, TrainConfig(lam=0.0, epochs=15))
    assert len(history) == 15
    assert history[-1].accuracy >= 0.99


def test_train_is_deterministic_when_seeded():
    sp = blobs(seed=2)
    cfg = TrainConfig(epochs=3, distance_cfg=DistanceConfig(seed=4), seed=5)
    nets = [build_residual_mlp(4, [4, 4], 2, np.random.default_rng(1)) for _ in range(2)]
    for net in nets:
        train(net, sp.train.X, sp.train.y, cfg)
    for (k, a), (_, b) in zip(nets[0].parameters().items(), nets[1].parameters().items()):
        assert np.array_equal(a, b), k


def test_heavy_regularization_lowers_distances():
    sp = blobs(seed=3)
    means = []
    for lam, lr in ((0.0, 0.05), (20.0, 0.01)):
        net = build_residual_mlp(4, [4, 4, 4], 2, np.random.default_rng(2))
        cfg = TrainConfig(lam=lam, epochs=10, learning_rate=lr, distance_cfg=DistanceConfig(seed=0))
        train(net, sp.train.X, sp.train.y, cfg)
        R, _ = regularizer(net, sp.val.X, cfg)
        means.append(R.value)
    assert means[1] < means[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_state():
    sp = blobs(seed=4)
    net = build_residual_mlp(4, [4, 4], 2, np.random.default_rng(3))
    with pytest.raises(TrainingDiverged) as info:
        train(net, sp.train.X * 1e200, sp.train.y, TrainConfig(epochs=1, learning_rate=1e10))
    assert "epoch" in info.value.state


def test_frozen_blocks_do_not_move():
    sp = blobs(seed=5)
    net = build_residual_mlp(4, [4, 4], 2, np.random.default_rng(4))
    net.blocks[0].frozen = True
    before = net.blocks[0].W1.copy()
    train(net, sp.train.X, sp.train.y, TrainConfig(epochs=2))
    assert np.array_equal(before, net.blocks[0].W1)


def test_heal_keeps_states():
    sp = blobs(seed=6)
    net = build_residual_mlp(4, [4, 4, 4], 2, np.random.default_rng(5))
    net.replace_with_identity(1)
    heal(net, sp.train.X, sp.train.y, TrainConfig(epochs=2), epochs=2)
    assert net.blocks[1].state is BlockState.IDENTITY


def test_fit_adapter_on_linear_lift():
    sp = blobs(seed=7, dim=2, classes=3, noise=0.5, n=600)
    net = build_residual_mlp(2, [5, 5], 3, np.random.default_rng(6), lift_activation="linear")
    net.attach_adapter(0, np.random.default_rng(0))
    history = fit_adapter(net, 0, sp.train.X, TrainConfig(seed=1), epochs=60, restarts=6,
                          rng=np.random.default_rng(1))
    assert len(history) == 60
    b = net.blocks[0]
    target = b.apply(sp.val.X, net._block_params(0, None)).value
    err = ot.max_sliced_wasserstein(b.adapter_output(sp.val.X).value, target, DistanceConfig(seed=0))[0]
    assert err < 1e-2
    with pytest.raises(ValueError):
        fit_adapter(net, 1, sp.train.X, TrainConfig(), epochs=1)
