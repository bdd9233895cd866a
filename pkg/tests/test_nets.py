import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cfmatch.autodiff import ShapeError, Tensor, backward, zero_grad
from cfmatch.nets import Mlp, MlpSpec, decoder_forward, encoder_forward, generator_forward, mlp_init
from cfmatch.training import AdamState, adam_step


def test_spec_validation():
    with pytest.raises(ShapeError):
        MlpSpec((4, 2))  # no hidden layer
    with pytest.raises(ShapeError):
        MlpSpec((4, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((4, 3, 2), activation="sigmoid")


def test_init_is_deterministic_per_seed():
    spec = MlpSpec((3, 8, 2))
    a = mlp_init(spec, 5)
    b = mlp_init(spec, 5)
    for name in a:
        assert_array_equal(a[name].data, b[name].data)


def test_init_biases_are_zero():
    params = mlp_init(MlpSpec((3, 8, 2)), 1)
    assert_array_equal(params["b0"].data, np.zeros(8))
    assert_array_equal(params["b1"].data, np.zeros(2))


def test_init_weight_variance_matches_uniform_law():
    # var of uniform(-a, a) is a^2/3 with a = 1/sqrt(fan_in)
    params = mlp_init(MlpSpec((64, 256, 8)), 2)
    w = params["w0"].data
    expected = 1.0 / (3.0 * 64)
    assert expected / 2.0 < w.var() < expected * 2.0


def test_generator_rows_are_independent():
    # same first row whether alone or inside a batch (up to blas kernel
    # accumulation differences across shapes)
    gen = Mlp.build(MlpSpec((4, 8, 8, 3)), 7)
    z = np.random.default_rng(0).normal(size=(64, 4))
    single = generator_forward(Tensor(z[:1]), gen)
    batch = generator_forward(Tensor(z), gen)
    np.testing.assert_allclose(single.data[0], batch.data[0], rtol=1e-12, atol=1e-14)


def test_generator_with_zero_parameters_outputs_zero():
    gen = Mlp.build(MlpSpec((4, 8, 3)), 8)
    for p in gen.parameters().values():
        p.data[...] = 0.0
    out = generator_forward(Tensor(np.ones((5, 4))), gen)
    assert_array_equal(out.data, np.zeros((5, 3)))


def test_generator_output_shape():
    gen = Mlp.build(MlpSpec((16, 64, 64, 2)), 9)
    out = generator_forward(Tensor(np.zeros((64, 16))), gen)
    assert out.shape == (64, 2)


def test_forward_rejects_wrong_input_width():
    gen = Mlp.build(MlpSpec((4, 8, 3)), 10)
    with pytest.raises(ShapeError):
        gen(Tensor(np.ones((5, 3))))


def test_encoder_decoder_round_trip_shape():
    encoder = Mlp.build(MlpSpec((32, 24, 8)), 11)
    decoder = Mlp.build(MlpSpec((8, 24, 32)), 12)
    x = Tensor(np.random.default_rng(1).normal(size=(10, 32)))
    latent = encoder_forward(x, encoder)
    assert latent.shape == (10, 8)
    recon = decoder_forward(latent, decoder)
    assert recon.shape == x.shape


def test_forward_is_deterministic():
    gen = Mlp.build(MlpSpec((4, 8, 3)), 13)
    z = Tensor(np.random.default_rng(2).normal(size=(6, 4)))
    assert_array_equal(gen(z).data, gen(z).data)


def test_frozen_network_is_bit_identical_after_training_against_it():
    encoder = Mlp.build(MlpSpec((6, 8, 2)), 14)
    encoder.freeze()
    before = encoder.snapshot()

    trainee = Mlp.build(MlpSpec((6, 8, 2)), 15)
    state = AdamState.for_params(trainee.parameters())
    rng = np.random.default_rng(3)
    for _ in range(25):
        x = Tensor(rng.normal(size=(32, 6)))
        zero_grad(trainee.parameters())
        diff = trainee(x) - encoder(x)
        backward((diff * diff).mean())
        adam_step(trainee.parameters(), {n: p.grad for n, p in trainee.parameters().items()},
                  state, 1e-3, "descent")

    after = encoder.snapshot()
    for name in before:
        assert_array_equal(before[name], after[name])
    for p in encoder.parameters().values():
        assert p.grad is None and not p.requires_grad
