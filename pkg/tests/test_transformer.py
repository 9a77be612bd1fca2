import numpy as np
import pytest
from pydantic import ValidationError

from task_superposition.errors import PatchError, SequenceLengthError, VocabError
from task_superposition.model.numerics import finite_diff_check, log_softmax
from task_superposition.model.transformer import (
    PatchDirective, TransformerConfig, TransformerWeights, backward, binary_code_width, binary_position_code,
    check_weights, forward, greedy_decode, init_weights, next_token_distribution, with_layers,
)


def mean_loss(weights, config, tokens, targets, positions) -> float:
    logits, _ = forward(weights, config, tokens, positions=positions)
    log_probs = log_softmax(logits)
    mask = targets >= 0
    picked = np.take_along_axis(log_probs, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    return float(-np.mean(picked[mask]))


@pytest.mark.parametrize('seed', range(10))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    n_heads = int(rng.integers(1, 3))
    config = TransformerConfig(
        n_layers=int(rng.integers(1, 3)),
        n_heads=n_heads,
        d_model=4 * n_heads * int(rng.integers(1, 3)),
        d_mlp=int(rng.integers(4, 9)),
        vocab_size=7,
        max_seq_len=10,
        attention_scaling=bool(rng.integers(2)),
        tie_embeddings=bool(rng.integers(2)),
    )
    weights = init_weights(config, rng, std=0.5)
    tokens = rng.integers(0, 7, size=(2, 5))
    targets = rng.integers(0, 7, size=(2, 5))
    targets[0, :2] = -1
    positions = np.stack([np.arange(5), np.arange(5) + 3])

    grads, loss = backward(weights, config, tokens, targets, positions)
    assert loss == pytest.approx(mean_loss(weights, config, tokens, targets, positions), rel=1e-12)

    for name in TransformerWeights.names():
        def f(values, name=name):
            perturbed = weights.copy()
            setattr(perturbed, name, values)
            return mean_loss(perturbed, config, tokens, targets, positions)
        assert finite_diff_check(f, getattr(weights, name), getattr(grads, name)) < 1e-4, name


def test_attention_is_causal(tiny_config, tiny_weights):
    a = np.array([1, 2, 3, 4, 5])
    b = np.array([1, 2, 3, 9, 9])
    logits_a, _ = forward(tiny_weights, tiny_config, a)
    logits_b, _ = forward(tiny_weights, tiny_config, b)
    assert np.array_equal(logits_a[:3], logits_b[:3])
    assert not np.allclose(logits_a[3:], logits_b[3:])


def test_batch_rows_equal_single_sequences(tiny_config, tiny_weights):
    batch = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    logits, _ = forward(tiny_weights, tiny_config, batch)
    assert logits.shape == (2, 4, tiny_config.vocab_size)
    for row in range(2):
        single, _ = forward(tiny_weights, tiny_config, batch[row])
        assert np.allclose(logits[row], single, rtol=0, atol=1e-12)


def test_trace_and_patching(tiny_config, tiny_weights, rng):
    tokens = [3, 1, 4, 1, 5]
    _, trace = forward(tiny_weights, tiny_config, tokens, trace=True)
    assert len(trace.residual) == tiny_config.n_layers + 1
    assert trace.layer_output(0).shape == (5, tiny_config.d_model)

    # patching a layer output with its own value changes nothing
    same = PatchDirective(0, 2, trace.layer_output(0)[2].copy())
    patched, _ = forward(tiny_weights, tiny_config, tokens, patches=[same])
    unpatched, _ = forward(tiny_weights, tiny_config, tokens)
    assert np.array_equal(patched, unpatched)

    vector = rng.normal(size=tiny_config.d_model)
    _, patched_trace = forward(tiny_weights, tiny_config, tokens, patches=[PatchDirective(0, 2, vector)], trace=True)
    assert np.array_equal(patched_trace.layer_output(0)[2], vector)
    assert np.array_equal(patched_trace.layer_output(0)[:2], trace.layer_output(0)[:2])


@pytest.mark.parametrize('patch', [
    PatchDirective(2, 0, np.zeros(8)),
    PatchDirective(0, 5, np.zeros(8)),
    PatchDirective(0, 0, np.zeros(7)),
])
def test_invalid_patches_are_rejected(tiny_config, tiny_weights, patch):
    with pytest.raises(PatchError):
        forward(tiny_weights, tiny_config, [1, 2, 3, 4, 5], patches=[patch])


def test_input_checks(tiny_config, tiny_weights):
    with pytest.raises(VocabError):
        forward(tiny_weights, tiny_config, [1, tiny_config.vocab_size])
    with pytest.raises(SequenceLengthError):
        forward(tiny_weights, tiny_config, [1] * (tiny_config.max_seq_len + 1))


def test_next_token_distribution_and_greedy_decode(tiny_config, tiny_weights):
    p = next_token_distribution(tiny_weights, tiny_config, [1, 2, 3])
    assert p.shape == (tiny_config.vocab_size,)
    assert p.sum() == pytest.approx(1.0)
    decoded = greedy_decode(tiny_weights, tiny_config, [1, 2, 3], 4)
    assert len(decoded) == 4
    assert decoded[0] == int(np.argmax(p))


def test_identity_layers_keep_the_logits(tiny_config, tiny_weights):
    padded, config = with_layers(tiny_weights, tiny_config, 4)
    check_weights(padded, config)
    assert config.n_layers == 4
    logits, _ = forward(tiny_weights, tiny_config, [1, 2, 3])
    padded_logits, _ = forward(padded, config, [1, 2, 3])
    assert np.allclose(logits, padded_logits, rtol=0, atol=1e-14)


def test_binary_position_codes():
    assert np.array_equal(binary_position_code(5, 3), [1.0, -1.0, 1.0])
    assert binary_code_width(149) == 8
    codes = {tuple(binary_position_code(p, binary_code_width(149))) for p in range(149)}
    assert len(codes) == 149


def test_config_validation():
    with pytest.raises(ValidationError):
        TransformerConfig(n_layers=1, n_heads=3, d_model=8, d_mlp=4, vocab_size=5, max_seq_len=4)
    with pytest.raises(ValidationError):
        TransformerConfig(n_layers=1, n_heads=2, d_model=8, d_mlp=4, vocab_size=5, max_seq_len=4, unknown=1)
