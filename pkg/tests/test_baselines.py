import itertools
import math

import numpy as np
import pytest
from conftest import slow

from sgt.baselines import (
    SearchSpaceError,
    candidate_count,
    candidate_labels,
    demap_llrs,
    lmmse_detect,
    make_detector,
    ml_detect,
    oamp_detect,
    random_detect,
)
from sgt.channel import (
    ComplexMimoSystem,
    MimoInstance,
    lift_to_real,
    make_constellation,
    modulate,
    random_bits,
    sample_instance,
    transmit,
)

QPSK = make_constellation("qpsk")


def brute_force(inst):
    """every candidate bit pattern, first minimum wins"""
    n = 2 * inst.n_t
    best, best_bits = math.inf, None
    for pattern in itertools.product([0, 1], repeat=n):
        bits = np.array(pattern).reshape(n, 1)
        metric = np.sum((inst.y - inst.H @ modulate(bits, QPSK)) ** 2 / inst.sigma2)
        if metric < best:
            best, best_bits = metric, bits
    return best, best_bits


def noiseless(n_t, n_r, seed):
    rng = np.random.default_rng(seed)
    h_c = (rng.standard_normal((n_r, n_t)) + 1j * rng.standard_normal((n_r, n_t))) / np.sqrt(2)
    return lift_to_real(transmit(h_c, random_bits(n_t, QPSK, rng), QPSK, 1e-20, rng))


@pytest.mark.parametrize("n_t,count", [(2, 1000), (4, 100)])
def test_ml_matches_brute_force(n_t, count):
    rng = np.random.default_rng(n_t)
    for _ in range(count):
        inst = sample_instance(n_t, n_t, float(rng.uniform(0, 12)), QPSK, rng)
        out = ml_detect(inst)
        metric, bits = brute_force(inst)
        assert np.array_equal(out.bits, bits)
        assert out.metadata["metric"] == pytest.approx(metric, rel=1e-12, abs=1e-12)


def test_ml_chunking_does_not_change_result():
    inst = sample_instance(3, 3, 2.0, seed=5)
    assert np.array_equal(ml_detect(inst, chunk=7).bits, ml_detect(inst).bits)


def test_ml_max_log_llrs():
    inst = sample_instance(2, 2, 3.0, seed=12)
    out = ml_detect(inst, soft=True, chunk=5)
    assert np.array_equal(out.bits, (out.llrs < 0).astype(int))

    metrics = {}
    for pattern in itertools.product([0, 1], repeat=4):
        bits = np.array(pattern).reshape(4, 1)
        metrics[pattern] = np.sum((inst.y - inst.H @ modulate(bits, QPSK)) ** 2 / inst.sigma2)
    for i in range(4):
        min0 = min(m for p, m in metrics.items() if p[i] == 0)
        min1 = min(m for p, m in metrics.items() if p[i] == 1)
        assert out.llrs[i, 0] == pytest.approx(np.clip((min1 - min0) / 2, -30, 30))


def test_ml_noiseless_and_search_space():
    for seed in range(20):
        inst = noiseless(3, 4, seed)
        assert np.array_equal(ml_detect(inst).bits, inst.bits)

    assert candidate_count(8, QPSK) == 2**16
    inst = sample_instance(8, 8, 10.0, seed=1)
    assert ml_detect(inst).metadata["candidates"] == 65536

    with pytest.raises(SearchSpaceError):
        ml_detect(sample_instance(16, 16, 10.0, seed=1))


def test_candidate_labels_order():
    labels = candidate_labels(0, 4, 2, 2)
    assert labels.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert candidate_labels(5, 6, 3, 2).tolist() == [[1, 0, 1]]


def test_demap_qpsk_closed_form():
    z = np.array([0.3, -1.2, 0.0])
    var = np.array([0.5, 0.1, 2.0])
    assert np.allclose(demap_llrs(z, var, QPSK)[:, 0], math.sqrt(2) * z / var)
    assert np.all(np.abs(demap_llrs(np.array([50.0]), 1e-6, QPSK)) <= 30)


def test_demap_16qam_signs():
    const = make_constellation("16qam")
    bits = random_bits(6, const, seed=1)
    llrs = demap_llrs(modulate(bits, const), 1e-3, const)
    assert np.array_equal((llrs < 0).astype(int), bits)


def test_lmmse_shrinkage():
    energy = QPSK.real_energy
    inst = MimoInstance(
        H=np.eye(4),
        y=np.array([0.4, -0.2, 1.0, 0.1]),
        x=np.full(4, 1 / math.sqrt(2)),
        sigma2=np.full(4, energy),
    )
    out = lmmse_detect(inst)
    assert np.allclose(out.metadata["x_hat"], inst.y / 2)


def test_detectors_exact_without_noise():
    for seed in range(20):
        inst = noiseless(4, 4, seed)
        assert np.array_equal(lmmse_detect(inst).bits, inst.bits)
        out = oamp_detect(inst, 10)
        assert np.array_equal(out.bits, inst.bits)
        assert not out.metadata["diverged"]


def test_oamp_single_iteration_orthogonal_channel():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4)))
    h_c = 1.7 * q
    sys = transmit(h_c, random_bits(4, QPSK, rng), QPSK, 0.3, rng)
    inst = lift_to_real(sys)

    out = oamp_detect(inst, iterations=1)
    c = 1.7**2
    r = inst.H.T @ inst.y / c
    tau2 = inst.sigma2[0] / c
    assert out.metadata["iterations"] == 1
    assert out.metadata["error_variance"][0] == pytest.approx(tau2)
    assert np.allclose(out.llrs[:, 0], np.clip(math.sqrt(2) * r / tau2, -30, 30))


def test_oamp_metadata():
    out = oamp_detect(sample_instance(4, 4, 8.0, seed=2), iterations=6)
    assert out.metadata["iterations"] == len(out.metadata["error_variance"]) == len(out.metadata["residual_norms"])
    assert out.metadata["iterations"] <= 6
    with pytest.raises(ValueError):
        oamp_detect(sample_instance(2, 2, 8.0, seed=2), iterations=0)


def test_random_detector_is_a_function_of_the_instance(instance_2x2):
    a = random_detect(instance_2x2, seed=1).bits
    assert np.array_equal(a, random_detect(instance_2x2, seed=1).bits)
    assert set(np.unique(a)) <= {0, 1}


def test_make_detector():
    assert make_detector("oamp", oamp_iterations=4).name == "oamp"
    inst = sample_instance(2, 2, 10.0, seed=0)
    assert make_detector("ml").detect(inst).bits.shape == (4, 1)
    with pytest.raises(ValueError):
        make_detector("sphere")


def test_output_bits_are_binary():
    inst = sample_instance(3, 5, 4.0, seed=8)
    for name in ["ml", "lmmse", "oamp", "random"]:
        bits = make_detector(name).detect(inst).bits
        assert bits.shape == (6, 1) and set(np.unique(bits)) <= {0, 1}


@slow
def test_ordering_8x8_at_10db():
    from sgt.trainer import evaluate_ber

    records = {
        name: evaluate_ber(make_detector(name), [10.0], 100_000, 21, 8, 8, QPSK, min_errors=0)[0]
        for name in ["ml", "lmmse", "oamp"]
    }
    ml, lmmse, oamp = records["ml"], records["lmmse"], records["oamp"]
    assert ml.ci_high < lmmse.ci_low
    assert ml.ber <= oamp.ber <= lmmse.ber
    assert lmmse.ber < 0.5


def test_complex_system_type():
    sys = ComplexMimoSystem(H_c=np.eye(2, dtype=complex), x_c=np.ones(2, dtype=complex), y_c=np.ones(2), sigma_c2=0.1)
    assert lift_to_real(sys).n_t == 2
