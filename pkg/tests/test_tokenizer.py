import numpy as np
import pytest

from sgt.channel import MimoInstance, sample_instance
from sgt.tokenizer import (
    LLR_MAX,
    PriorError,
    bits_to_prob,
    llr_to_prob,
    prob_to_bits,
    prob_to_llr,
    tokenize,
    tokenize_qr,
    untokenize,
)


def test_token_shapes_8x8():
    tokens = tokenize(sample_instance(8, 8, 10.0, seed=0))
    assert tokens.lin.shape == (16, 18)
    assert tokens.sym.shape == (16, 1)
    assert np.all(tokens.sym == 0.5)


def test_non_square_token_shapes():
    tokens = tokenize(sample_instance(4, 8, 10.0, seed=0))
    assert tokens.lin.shape == (16, 10)
    assert tokens.sym.shape == (8, 1)


def test_lin_row_is_verbatim():
    inst = MimoInstance(
        H=np.array([[1.0, 2.0], [3.0, 4.0]]),
        y=np.array([0.5, -0.5]),
        x=np.array([1.0, -1.0]) / np.sqrt(2),
        sigma2=np.array([0.1, 0.2]),
    )
    tokens = tokenize(inst)
    assert np.array_equal(tokens.lin[0], [0.5, 1.0, 2.0, 0.1])
    assert np.array_equal(tokens.lin[1], [-0.5, 3.0, 4.0, 0.2])


def test_tokenization_is_lossless(instance_2x2):
    y, h, sigma2 = untokenize(tokenize(instance_2x2))
    assert np.array_equal(y, instance_2x2.y)
    assert np.array_equal(h, instance_2x2.H)
    assert np.array_equal(sigma2, instance_2x2.sigma2)


def test_receive_permutation_permutes_rows():
    inst = sample_instance(2, 3, 5.0, seed=9)
    perm = np.random.default_rng(0).permutation(6)
    permuted = MimoInstance(H=inst.H[perm], y=inst.y[perm], x=inst.x, sigma2=inst.sigma2[perm], bits=inst.bits)
    assert np.array_equal(tokenize(permuted).lin, tokenize(inst).lin[perm])


def test_priors_validation(instance_2x2):
    priors = np.array([[0.9], [0.1], [0.5], [1.0]])
    assert np.array_equal(tokenize(instance_2x2, priors).sym, priors)
    with pytest.raises(PriorError):
        tokenize(instance_2x2, np.full((3, 1), 0.5))
    with pytest.raises(PriorError):
        tokenize(instance_2x2, np.array([[1.2], [0.1], [0.5], [0.5]]))


def test_qr_tokens_preserve_the_metric():
    inst = sample_instance(3, 4, 10.0, seed=4)
    tokens = tokenize_qr(inst)
    n = 2 * inst.n_t
    assert tokens.lin.shape == (n, n + 2)
    r, y_rot = tokens.lin[:, 1 : n + 1], tokens.lin[:, 0]
    assert np.allclose(np.triu(r), r)
    # ||y - Hx||^2 and ||Q^T y - R x||^2 differ by a constant for every x
    xs = np.random.default_rng(1).standard_normal((5, n))
    gaps = [np.sum((inst.y - inst.H @ x) ** 2) - np.sum((y_rot - r @ x) ** 2) for x in xs]
    assert np.allclose(gaps, gaps[0])


def test_qr_tokens_pad_wide_systems():
    tokens = tokenize_qr(sample_instance(4, 2, 10.0, seed=4))
    assert tokens.lin.shape == (8, 10)
    assert np.all(tokens.lin[4:, :-1] == 0.0)
    assert np.all(tokens.lin[:, -1] > 0.0)


def test_llr_prob_conversions():
    assert llr_to_prob(np.array(0.0)) == 0.5
    assert llr_to_prob(np.array(2.0)) > 0.5  # positive favours bit 0

    small = np.linspace(-12, 12, 241)
    assert np.max(np.abs(prob_to_llr(llr_to_prob(small)) - small)) < 1e-9
    # probabilities near 1 only carry ~1e-16 absolute resolution
    wide = np.linspace(-20, 20, 81)
    assert np.max(np.abs(prob_to_llr(llr_to_prob(wide)) - wide)) < 5e-7

    clamped = prob_to_llr(llr_to_prob(np.array([np.inf, -np.inf])))
    assert clamped.tolist() == pytest.approx([LLR_MAX, -LLR_MAX], abs=1e-2)
    assert np.all(np.abs(prob_to_llr(np.array([0.0, 1.0]))) <= LLR_MAX)


def test_bits_and_probabilities():
    bits = np.array([[0], [1], [1], [0]])
    assert np.array_equal(bits_to_prob(bits), [[1.0], [0.0], [0.0], [1.0]])
    assert np.array_equal(prob_to_bits(bits_to_prob(bits)), bits)
    assert prob_to_bits(np.array([0.5])).tolist() == [0]
