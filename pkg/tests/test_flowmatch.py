import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fitflow.errors import ConfigError, ContractError, SamplingError
from fitflow.flowmatch import (
    FlowTrainConfig,
    SamplerConfig,
    VelocityModel,
    calibrate_target,
    cfg_velocity,
    cfm_loss,
    default_target_grid,
    euler_integrate,
    euler_sample,
    generate,
    initial_noise,
    interpolate,
    train_flow,
)
from fitflow.latentcodec import Codec, CodecConfig
from fitflow.numcore import Tensor, finite_diff_check, ops


class Field:
    """Analytic velocity field test double that counts evaluations."""

    def __init__(self, fn, shape=(1, 2)):
        self.fn, self.latent_shape, self.calls, self.null_calls = fn, shape, 0, 0

    def __call__(self, z, t, f):
        self.calls += 1
        self.null_calls += f is None
        return self.fn(np.asarray(z), t, f)


def test_interpolate_examples():
    z0, z1 = np.array([1.0, -2.0]), np.array([3.0, 5.0])
    assert np.array_equal(interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(interpolate(z0, z1, 1.0), z1)
    assert np.array_equal(interpolate(np.zeros(3), 2 * np.ones(3), 0.25), 0.5 * np.ones(3))
    with pytest.raises(ContractError):
        interpolate(z0, z1, 1.5)
    with pytest.raises(ContractError):
        interpolate(z0, np.zeros(3), 0.5)


class Linear2:
    """forward(z_t, t) = 2 z_t + t, a fully hand-evaluable stand-in."""

    latent_shape = (1, 2)

    def forward(self, z, t, f, cond_mask=None):
        t = np.asarray(t).reshape(-1, 1, 1)
        return ops.add(ops.mul(ops.as_tensor(z), 2.0), t)


def test_cfm_loss_scalar_trace():
    z1 = np.array([[[0.7, -0.3]]])
    loss = cfm_loss(Linear2(), z1, np.array([0.5]), np.random.default_rng(11), 0.0).item()
    rng = np.random.default_rng(11)
    t = rng.random(1)[0]
    z0 = rng.standard_normal((1, 1, 2))
    zt = (1 - t) * z0 + t * z1
    v = 2 * zt + t
    target = z1 - z0
    expected = (v[0, 0, 0] - target[0, 0, 0]) ** 2 + (v[0, 0, 1] - target[0, 0, 1]) ** 2
    assert abs(loss - expected) < 1e-12


class Oracle:
    """Returns exactly z1 - z0 by inverting the straight path for the known z1."""

    latent_shape = (1, 2)

    def __init__(self, z1):
        self.z1 = z1

    def forward(self, z, t, f, cond_mask=None):
        t = np.asarray(t).reshape(-1, 1, 1)
        return Tensor((self.z1 - np.asarray(z.data if isinstance(z, Tensor) else z)) / (1.0 - t))


def test_cfm_loss_zero_for_oracle_model():
    z1 = np.random.default_rng(0).standard_normal((8, 1, 2))
    assert cfm_loss(Oracle(z1), z1, np.zeros(8), np.random.default_rng(1), 0.3).item() < 1e-20


def _model(shape=(1, 2), **kw):
    return VelocityModel(shape, hidden=16, n_blocks=1, time_dim=8, cond_dim=8, **kw)


def test_cfm_loss_dropout_counters_and_nonnegative():
    m = _model()
    z1 = np.random.default_rng(0).standard_normal((32, 1, 2))
    val = cfm_loss(m, z1, np.full(32, 0.4), np.random.default_rng(2), 1.0).item()
    assert val >= 0.0
    assert m.fitness_reads == 0 and m.null_uses == 32
    cfm_loss(m, z1, np.full(32, 0.4), np.random.default_rng(2), 0.0)
    assert m.fitness_reads == 32


def test_cfm_loss_gradient_check():
    m = _model()
    rng = np.random.default_rng(3)
    z1 = rng.standard_normal((4, 1, 2))
    f = rng.random(4)
    assert finite_diff_check(lambda: cfm_loss(m, z1, f, np.random.default_rng(9), 0.5), m.store) < 1e-4


def test_null_condition_never_reads_fitness():
    m = _model()
    z = np.random.default_rng(0).standard_normal((3, 1, 2))
    out_null = m.forward(z, 0.3, None).data
    out_masked = m.forward(z, 0.3, np.full(3, np.nan), cond_mask=np.zeros(3, bool)).data
    assert out_null.shape == z.shape
    assert np.array_equal(out_null, out_masked)
    assert np.all(np.isfinite(out_masked))


def test_cfg_identities():
    rng = np.random.default_rng(0)
    m = _model(seed=1)
    counted = Field(lambda z, t, f: m(z, t, f))
    z = rng.standard_normal((4, 1, 2))
    f = np.full(4, 0.5)
    v0 = cfg_velocity(counted, z, 0.2, f, 0.0)
    assert counted.calls == 1 and np.array_equal(v0, m(z, 0.2, f))
    cfg_velocity(counted, z, 0.2, f, 0.7)
    assert counted.calls == 3 and counted.null_calls == 1

    hand = Field(lambda z, t, f: np.array([0.0, 1.0]) if f is None else np.array([1.0, 0.0]))
    assert np.array_equal(cfg_velocity(hand, z, 0.0, f, 0.5), np.array([1.5, -0.5]))


@settings(max_examples=50, deadline=None)
@given(w=st.floats(-3, 3, allow_nan=False))
def test_cfg_equal_branches_collapse(w):
    same = Field(lambda z, t, f: np.array([0.25, -0.5]))
    assert np.allclose(cfg_velocity(same, None, 0.0, 1.0, w), [0.25, -0.5], rtol=0, atol=1e-15)


@pytest.mark.parametrize("K", [1, 5, 40])
def test_euler_exact_on_point_mass_field(K):
    zstar = np.array([[[1.5, -0.25]]])
    field = Field(lambda z, t, f: (zstar - z) / (1.0 - t))
    z0 = np.random.default_rng(0).standard_normal((3, 1, 2))
    out = euler_integrate(field, z0, None, 0.0, K)
    assert np.max(np.abs(out - zstar)) < 1e-10
    assert field.calls == K


@pytest.mark.parametrize("K", [1, 3, 40])
def test_euler_constant_field_and_eval_counts(K):
    c = np.array([0.5, -1.0])
    field = Field(lambda z, t, f: np.broadcast_to(c, z.shape))
    out = euler_sample(field, SamplerConfig(K=K, w=0.3, target=0.1, n=4), np.random.default_rng(5))
    z0 = np.random.default_rng(5).standard_normal((4, 1, 2))
    assert np.allclose(out, z0 + c, atol=1e-12)
    assert field.calls == 2 * K


def test_euler_single_step_and_failure_step():
    field = Field(lambda z, t, f: z * 3.0 + 1.0)
    z0 = np.ones((1, 1, 2))
    assert np.array_equal(euler_integrate(field, z0, 0.0, 0.0, 1), z0 + (z0 * 3.0 + 1.0))
    bad = Field(lambda z, t, f: z * np.inf if t >= 0.5 else z)
    with pytest.raises(SamplingError, match="step 2"):
        euler_integrate(bad, z0, 0.0, 0.0, 4)
    with pytest.raises(ConfigError):
        SamplerConfig(K=0).validate()


def test_generate_contracts():
    codec = Codec(CodecConfig(embed_dim=8, latent_dim=2, compression=20, decoder_hidden=8, mix_hidden=8))
    m = _model(codec.latent_shape)
    assert generate(m, codec, SamplerConfig(n=0, top_k=0, target=0.5)) == []
    a = generate(m, codec, SamplerConfig(K=4, n=6, top_k=2, target=0.5, seed=3))
    b = generate(m, codec, SamplerConfig(K=4, n=6, top_k=2, target=0.5, seed=3))
    assert a == b and len(a) == 6
    with pytest.raises(ConfigError):
        generate(_model((3, 2)), codec, SamplerConfig(n=2, top_k=1, target=0.5))
    with pytest.raises(ConfigError):
        generate(m, codec, SamplerConfig(n=2, top_k=1))


def test_initial_noise_is_independent_of_batch_size():
    full = initial_noise((2, 3), 8, seed=4)
    assert np.array_equal(initial_noise((2, 3), 3, seed=4), full[:3])
    assert not np.array_equal(initial_noise((2, 3), 3, seed=5), full[:3])


def test_train_flow_point_mass_converges():
    z1 = np.array([[[1.0, -2.0]]])
    cfg = dict(batch=32, warmup=10, lr=3e-3, eval_every=50, hidden=32, n_blocks=1, time_dim=8, cond_dim=8)
    dists = []
    for steps in (20, 200, 1500):
        m, _ = train_flow(z1, np.array([0.5]), FlowTrainConfig(steps=steps, **cfg))
        out = euler_integrate(m, initial_noise((1, 2), 64, 0), np.full(64, 0.5), 0.0, 40)
        dists.append(float(np.mean(np.linalg.norm((out - z1).reshape(64, -1), axis=1))))
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 0.2 * dists[0]


def test_train_flow_dropout_fraction_and_determinism():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((200, 1, 2))
    f = rng.random(200)
    cfg = FlowTrainConfig(steps=40, batch=256, p=0.2, eval_every=20, hidden=16, n_blocks=1, time_dim=8, cond_dim=8)
    m1, h1 = train_flow(z, f, cfg)
    m2, h2 = train_flow(z, f, cfg)
    assert abs(h1.null_fraction - 0.2) <= 0.02
    assert h1.train_loss == h2.train_loss
    for k, v in m1.store.state_dict().items():
        assert np.array_equal(v, m2.store.state_dict()[k])


def test_p_one_leaves_fitness_embedding_untouched():
    rng = np.random.default_rng(1)
    z, f = rng.standard_normal((50, 1, 2)), rng.random(50)
    cfg = FlowTrainConfig(steps=30, batch=32, p=1.0, eval_every=10, hidden=16, n_blocks=1, time_dim=8, cond_dim=8)
    m, h = train_flow(z, f, cfg)
    fresh = VelocityModel((1, 2), 16, 1, 8, 8, seed=0)
    for name in ("fitness.embed.weight", "fitness.embed.bias"):
        assert np.array_equal(m.store[name].data, fresh.store[name].data)
    assert h.null_fraction == 1.0
    assert not np.array_equal(m.store["fitness.null"].data, fresh.store["fitness.null"].data)


def test_flow_config_validation_and_meta_round_trip():
    with pytest.raises(ConfigError):
        FlowTrainConfig(p=1.5).validate()
    with pytest.raises(ContractError):
        train_flow(np.zeros((0, 1, 2)), np.zeros(0), FlowTrainConfig(steps=1))
    m = _model(f_mean=0.3, f_std=0.1)
    back = VelocityModel.from_meta(m.meta(), m.store.state_dict())
    z = np.ones((2, 1, 2))
    assert np.array_equal(back(z, 0.5, np.array([0.1, 0.9])), m(z, 0.5, np.array([0.1, 0.9])))


class CountA:
    def predict(self, seqs):
        return np.array([s.count("A") for s in seqs], dtype=float)


def test_calibration_picks_best_predicted_candidate():
    codec = Codec(CodecConfig(embed_dim=8, latent_dim=2, compression=20, decoder_hidden=8, mix_hidden=8))
    m = _model(codec.latent_shape, f_mean=0.4, f_std=0.02)
    grid = default_target_grid(np.array([0.38, 0.40, 0.44]), n=4)
    assert grid[0] == 0.44 and len(grid) == 4 and grid == sorted(grid)
    best, table = calibrate_target(m, codec, CountA(), grid, w=0.0, K=4, n=32, top_k=8)
    assert [r["target"] for r in table] == grid
    scores = [r["predicted_median"] for r in table]
    assert best == grid[int(np.argmax(scores))]
    with pytest.raises(ConfigError):
        calibrate_target(m, codec, CountA(), [], w=0.0)
