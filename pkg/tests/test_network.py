from dataclasses import replace

import numpy as np
import pytest

from sgt.channel import sample_instance
from sgt.network import (
    CheckpointError,
    SgtConfig,
    SgtDetector,
    SgtModel,
    cross_attention,
    detect_soft,
    embed,
    forward,
    load_checkpoint,
    save_checkpoint,
    self_attention,
    sinusoidal_encoding,
)
from sgt.tensor import GradTape, NonFiniteError, Tensor, backward, binary_cross_entropy, numerical_gradient
from sgt.tokenizer import LLR_MAX, bits_to_prob, tokenize, uninformative_priors


def _layer_norm(x, eps=1e-5):
    return (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + eps)


def _dense_attention(queries, keys_values, block):
    """straight numpy multi-head attention with unit norm gains, independent of the tape ops"""
    q_in = _layer_norm(queries)
    kv_in = _layer_norm(keys_values)
    q, k, v = q_in @ block.w_q.data, kv_in @ block.w_k.data, kv_in @ block.w_v.data
    d_k = q.shape[1] // block.n_heads
    heads = []
    for h in range(block.n_heads):
        part = slice(h * d_k, (h + 1) * d_k)
        scores = q[:, part] @ k[:, part].T / np.sqrt(d_k)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        heads.append(weights @ v[:, part])
    return queries + np.concatenate(heads, axis=1) @ block.w_o.data


@pytest.mark.parametrize("dims", [(2, 2), (4, 4), (8, 8), (8, 16)])
@pytest.mark.parametrize("variant", ["full-sgt", "no-cross-attention", "qr-baseline"])
def test_shapes(dims, variant):
    n_t, n_r = dims
    model = SgtModel(SgtConfig(n_t=n_t, n_r=n_r, d_model=16, n_layers=1, variant=variant))
    inst = sample_instance(n_t, n_r, 10.0, seed=1)
    out = forward(inst, model)
    assert out.shape == (2 * n_t, 1)
    assert np.all((out.data > 0.0) & (out.data < 1.0))


def test_embedding_shapes_8x8():
    model = SgtModel(SgtConfig(n_t=8, n_r=8, d_model=128, n_layers=1))
    assert model.config.n_heads == 8
    sym, lin = embed(tokenize(sample_instance(8, 8, 10.0, seed=0)), model)
    assert sym.shape == (16, 128) and lin.shape == (16, 128)


def test_zero_embedding_is_positional_encoding(tiny_model, instance_2x2):
    for p in tiny_model.sym_embed.parameters() + tiny_model.lin_embed.parameters():
        p.data[...] = 0.0
    sym, lin = embed(tokenize(instance_2x2), tiny_model)
    assert np.array_equal(sym.data, sinusoidal_encoding(4, 16))
    assert np.array_equal(lin.data, sinusoidal_encoding(4, 16))


def test_positional_part_is_shared(tiny_model):
    a = embed(tokenize(sample_instance(2, 2, 3.0, seed=1)), tiny_model)[1].data
    b = embed(tokenize(sample_instance(2, 2, 3.0, seed=2)), tiny_model)[1].data
    model_no_pe = SgtModel(replace(tiny_model.config, positional_encoding=False))
    a0 = embed(tokenize(sample_instance(2, 2, 3.0, seed=1)), model_no_pe)[1].data
    b0 = embed(tokenize(sample_instance(2, 2, 3.0, seed=2)), model_no_pe)[1].data
    assert np.allclose(a - a0, b - b0, atol=1e-12)


def test_embed_rejects_wrong_tokens(tiny_model):
    with pytest.raises(ValueError):
        embed(tokenize(sample_instance(3, 2, 3.0, seed=1)), tiny_model)


def test_self_attention_singleton():
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=32, n_layers=1))
    block = model.layers[0].sym_self
    t = np.random.default_rng(0).standard_normal((1, 32))
    out = self_attention(Tensor(t), block).data
    expected = t + _layer_norm(t) @ block.w_v.data @ block.w_o.data
    assert np.allclose(out, expected, atol=1e-12)


def test_self_attention_identical_tokens():
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=32, n_layers=1))
    t = np.tile(np.random.default_rng(1).standard_normal(32), (5, 1))
    out = self_attention(Tensor(t), model.layers[0].lin_self).data
    assert np.allclose(out, out[0], atol=1e-12)


def test_self_attention_matches_dense_reference():
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=32, n_layers=1))
    block = model.layers[0].sym_self
    t = np.random.default_rng(2).standard_normal((4, 32))
    rows = []
    out = self_attention(Tensor(t), block, hook=lambda label, head, w: rows.append(w.sum(axis=1))).data
    assert np.allclose(out, _dense_attention(t, t, block), atol=1e-10)
    assert len(rows) == 2 and np.allclose(np.concatenate(rows), 1.0, atol=1e-12)


def test_cross_attention_direction_and_shapes():
    model = SgtModel(SgtConfig(n_t=2, n_r=4, d_model=32, n_layers=1))
    block = model.layers[0].cross
    rng = np.random.default_rng(3)
    sym, lin = rng.standard_normal((4, 32)), rng.standard_normal((8, 32))
    lin_before = lin.copy()
    out = cross_attention(Tensor(sym), Tensor(lin), block).data
    assert out.shape == (4, 32)
    assert np.array_equal(lin, lin_before)
    assert np.allclose(out, _dense_attention(sym, lin, block), atol=1e-10)


def test_cross_attention_single_constraint():
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=32, n_layers=1))
    weights = []
    rng = np.random.default_rng(4)
    cross_attention(
        Tensor(rng.standard_normal((4, 32))),
        Tensor(rng.standard_normal((1, 32))),
        model.layers[0].cross,
        hook=lambda label, head, w: weights.append(w),
    )
    assert all(np.array_equal(w, np.ones((4, 1))) for w in weights)


def test_cross_attention_permutations():
    model = SgtModel(SgtConfig(n_t=3, n_r=3, d_model=32, n_layers=1, positional_encoding=False))
    block = model.layers[0].cross
    rng = np.random.default_rng(5)
    sym, lin = rng.standard_normal((6, 32)), rng.standard_normal((6, 32))
    out = cross_attention(Tensor(sym), Tensor(lin), block).data

    perm = rng.permutation(6)
    assert np.allclose(cross_attention(Tensor(sym), Tensor(lin[perm]), block).data, out, atol=1e-12)
    assert np.allclose(cross_attention(Tensor(sym[perm]), Tensor(lin), block).data, out[perm], atol=1e-12)


def test_attention_rows_sum_to_one_in_every_layer():
    model = SgtModel(SgtConfig(n_t=2, n_r=3, d_model=32, n_layers=3, bidirectional_cross=True))
    seen = []
    model.attention_hook = lambda label, head, w: seen.append((label, np.max(np.abs(w.sum(axis=1) - 1.0))))
    forward(sample_instance(2, 3, 5.0, seed=3), model)
    labels = {label for label, _ in seen}
    assert labels == {"sym_self", "lin_self", "cross", "lin_cross"}
    assert len(seen) == 3 * 4 * model.config.n_heads
    assert max(err for _, err in seen) < 1e-12


def test_no_cross_variant_compresses_constraint_stream():
    model = SgtModel(SgtConfig(n_t=2, n_r=4, d_model=16, n_layers=2, variant="no-cross-attention"))
    assert model.compress.shape == (4, 8)
    assert all(layer.cross is None and layer.sym_self is None for layer in model.layers)
    assert "compress" in model.parameters()


def test_weight_sharing_reuses_one_layer():
    shared = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=16, n_layers=3, weight_sharing=True))
    untied = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=16, n_layers=3))
    assert len(shared.layers) == 1 and shared.layer(2) is shared.layer(0)
    assert len(shared.parameters()) < len(untied.parameters())
    assert forward(sample_instance(2, 2, 5.0, seed=0), shared).shape == (4, 1)


def test_config_validation():
    assert SgtConfig(n_t=2, n_r=2, d_model=64).n_heads == 4
    assert SgtConfig(n_t=2, n_r=2, d_model=64).ffn_hidden == 128
    with pytest.raises(ValueError):
        SgtConfig(n_t=2, n_r=2, d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        SgtConfig(n_t=2, n_r=2, variant="bogus")


def test_non_finite_activation_names_layer(instance_2x2):
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=16, n_layers=2))
    model.layers[1].lin_self.w_q.data[...] = np.inf
    with pytest.raises(NonFiniteError, match="layer 1"):
        forward(instance_2x2, model)


def test_detect_soft(tiny_model, instance_2x2):
    plain = detect_soft(instance_2x2, tiny_model, allow_untrained=True)
    with_priors = detect_soft(instance_2x2, tiny_model, uninformative_priors(2, 1), allow_untrained=True)
    assert np.array_equal(plain, with_priors)
    assert np.all(np.abs(plain) <= LLR_MAX)

    out = SgtDetector(tiny_model, allow_untrained=True).detect(instance_2x2)
    assert out.bits.shape == (4, 1) and np.array_equal(out.bits, (out.llrs < 0).astype(int))
    assert SgtDetector(tiny_model, allow_untrained=True).name == "sgt"


def test_untrained_model_needs_explicit_flag(tiny_model, instance_2x2):
    assert not tiny_model.trained
    with pytest.raises(ValueError, match="untrained"):
        detect_soft(instance_2x2, tiny_model)
    with pytest.raises(ValueError, match="untrained"):
        SgtDetector(tiny_model)

    tiny_model.trained = True
    assert tiny_model.copy().trained
    assert np.array_equal(detect_soft(instance_2x2, tiny_model), SgtDetector(tiny_model).detect(instance_2x2).llrs)


def test_end_to_end_gradients():
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=8, n_layers=1, bidirectional_cross=True, init_seed=7))
    inst = sample_instance(2, 2, 5.0, seed=8)
    priors = np.array([[0.8], [0.3], [0.5], [0.6]])
    target = bits_to_prob(inst.bits)

    def value():
        return binary_cross_entropy(forward(inst, model, priors), target).item()

    with GradTape():
        grads = backward(binary_cross_entropy(forward(inst, model, priors), target))

    for name, p in model.parameters().items():
        analytic, numeric = grads[p], numerical_gradient(value, p)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale < 1e-9:
            continue
        assert np.linalg.norm(analytic - numeric) / scale < 1e-3, name


@pytest.mark.parametrize("seed", range(100))
def test_directional_gradients(seed):
    """tape gradient along a random direction in parameter space against a central difference"""
    rng = np.random.default_rng(seed)
    variant = ("full-sgt", "no-cross-attention", "qr-baseline")[seed % 3]
    config = SgtConfig(n_t=2, n_r=2, d_model=8, n_layers=1, variant=variant, bidirectional_cross=seed % 2 == 1)
    model = SgtModel(replace(config, init_seed=seed))
    inst = sample_instance(2, 2, float(rng.uniform(0.0, 15.0)), seed=rng)
    priors = rng.uniform(0.05, 0.95, size=(4, 1)) if seed % 4 else None
    target = bits_to_prob(inst.bits)
    params = model.parameters()
    direction = {name: rng.standard_normal(p.shape) for name, p in params.items()}
    state = model.state_dict()

    def value_at(step):
        model.load_state_dict({name: state[name] + step * direction[name] for name in state})
        return binary_cross_entropy(forward(inst, model, priors), target).item()

    with GradTape():
        grads = backward(binary_cross_entropy(forward(inst, model, priors), target))
    analytic = sum(float(np.sum(grads[p] * direction[name])) for name, p in params.items())

    eps = 1e-6
    numeric = (value_at(eps) - value_at(-eps)) / (2 * eps)
    assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic))


def test_checkpoint_round_trip(tmp_path, instance_2x2):
    model = SgtModel(SgtConfig(n_t=2, n_r=2, d_model=16, n_layers=2, init_seed=4))
    path_a, path_b = str(tmp_path / "a.npz"), str(tmp_path / "b.npz")
    save_checkpoint(model, path_a)
    save_checkpoint(model, path_b)
    assert open(path_a, "rb").read() == open(path_b, "rb").read()

    restored = load_checkpoint(path_a, 2, 2)
    assert restored.config == model.config
    assert not restored.trained
    assert np.array_equal(forward(instance_2x2, restored).data, forward(instance_2x2, model).data)
    assert np.array_equal(forward(instance_2x2, model.copy()).data, forward(instance_2x2, model).data)

    with np.load(path_a) as archive:
        assert archive["layers.0.lin_self.w_q"].dtype.str == "<f8"

    with pytest.raises(CheckpointError):
        load_checkpoint(path_a, 4, 4)

    model.trained = True
    save_checkpoint(model, path_b)
    assert load_checkpoint(path_b).trained
    assert open(path_a, "rb").read() != open(path_b, "rb").read()

    bogus = str(tmp_path / "bogus.npz")
    np.savez(bogus, weights=np.zeros(3))
    with pytest.raises(CheckpointError):
        load_checkpoint(bogus)


def test_state_dict_mismatch(tiny_model):
    state = tiny_model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(CheckpointError):
        tiny_model.load_state_dict(state)
