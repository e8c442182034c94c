import numpy as np
import pytest
import torch

from ssmrecall import numerics as nx
from ssmrecall.latent import (
    FingerprintError,
    LatentState,
    decoder_from_encoder,
    encode,
    encoder_continuation,
    freeze,
    init_decoder,
    read_back,
    reconstruct,
)
from ssmrecall.ssm import ModelConfig, SelectiveSSM, StepCache, forward_step, lm_forward
from ssmrecall.tokenizer import BOS, EOS


def test_bos_alone_equals_one_step(tiny_model):
    latent = encode(tiny_model, [BOS])
    _, cache = forward_step(tiny_model, BOS, StepCache.zeros(tiny_model.config))
    assert latent.source_length == 0
    for a, b in zip(latent.conv + latent.ssm, cache.conv + cache.ssm):
        assert torch.equal(a, b.detach())


def test_large_config_state_shapes():
    cfg = ModelConfig(n_layers=1, d_model=768, d_inner=1536, d_state=16, d_conv=4)
    assert cfg.ssm_state_shape == (1536, 16)
    assert cfg.conv_state_shape == (1536, 4)
    model = SelectiveSSM(cfg)
    latent = encode(model, [BOS, 104, 105])
    assert tuple(latent.ssm[0].shape[1:]) == (1536, 16)
    assert tuple(latent.conv[0].shape[1:]) == (1536, 4)


def test_state_size_does_not_depend_on_length(tiny_model):
    short = encode(tiny_model, [BOS, 1])
    long = encode(tiny_model, [BOS] + list(range(100)))
    assert short.nbytes == long.nbytes
    assert long.source_length == 100


def test_encode_equals_token_by_token(tiny_model):
    x = [BOS] + list(b"state space")
    cache = StepCache.zeros(tiny_model.config)
    with torch.no_grad():
        for tok in x:
            _, cache = forward_step(tiny_model, tok, cache)
    latent = encode(tiny_model, x)
    for a, b in zip(latent.conv + latent.ssm, cache.conv + cache.ssm):
        assert torch.allclose(a, b, atol=1e-6)


def test_encode_requires_bos(tiny_model):
    with pytest.raises(ValueError):
        encode(tiny_model, [65, 66])
    with pytest.raises(ValueError):
        encode(tiny_model, [[BOS, 1], [2, BOS]])


def test_fingerprint_mismatch(tiny_model):
    other = SelectiveSSM(ModelConfig(n_layers=2, d_model=16, d_inner=32, d_state=8))
    with pytest.raises(FingerprintError):
        init_decoder(encode(tiny_model, [BOS, 1]), other)


def test_zero_latent_gives_zero_cache(tiny_model):
    cache = init_decoder(LatentState.zeros_like(tiny_model, 2), tiny_model)
    assert all(float(t.abs().sum()) == 0 for t in cache.conv + cache.ssm)
    assert cache.batch_size == 2


def test_inject_then_read_back_is_lossless(tiny_model):
    latent = encode(tiny_model, [BOS, 3, 1, 4, 1, 5])
    back = read_back(init_decoder(latent, tiny_model), latent.fingerprint, latent.source_length)
    for a, b in zip(latent.conv + latent.ssm, back.conv + back.ssm):
        assert torch.equal(a, b)


def test_latent_save_load(tiny_model, tmp_path):
    latent = encode(tiny_model, [[BOS, 1, 2], [BOS, 3, 4]])
    latent.save(tmp_path / "z.latent")
    back = LatentState.load(tmp_path / "z.latent")
    assert back.fingerprint == latent.fingerprint and back.source_length == 2
    for a, b in zip(latent.conv + latent.ssm, back.conv + back.ssm):
        assert torch.equal(a, b)


@pytest.mark.parametrize("seed", range(5))
def test_untrained_decoder_continues_like_encoder(tiny_model64, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, size=int(rng.integers(1, 12))).tolist()
    decoder = decoder_from_encoder(tiny_model64)
    got = reconstruct(encode(tiny_model64, [BOS] + x), decoder, max_tokens=20)[0]
    assert got == encoder_continuation(tiny_model64, x, max_tokens=20)


def test_decoder_copy_is_independent(tiny_model):
    freeze(tiny_model)
    dec = decoder_from_encoder(tiny_model)
    assert all(p.requires_grad for p in dec.parameters())
    assert not any(p.requires_grad for p in tiny_model.parameters())
    with torch.no_grad():
        dec.embedding.add_(1.0)
    assert not torch.equal(dec.embedding, tiny_model.embedding)


def _eos_decoder(config):
    """A decoder trained for a few steps to answer EOS to everything."""
    model = SelectiveSSM(config, seed=1)
    opt = nx.OptimizerState(list(model.parameters()), 1e-2)
    gen = torch.Generator().manual_seed(0)
    for _ in range(60):
        tokens = torch.randint(0, 259, (8, 6), generator=gen)
        tokens[:, 0] = BOS
        opt.zero_grad()
        logits, _ = lm_forward(model, tokens)
        nx.cross_entropy(logits, torch.full((8, 6), EOS)).backward()
        nx.adam_step(opt)
    return freeze(model)


def test_immediate_eos_gives_empty_reconstruction(tiny_config, tiny_model):
    decoder = _eos_decoder(tiny_config)
    latent = encode(tiny_model, [[BOS, 1, 2, 3], [BOS, 200, 100, 50]])
    assert reconstruct(latent, decoder) == [[], []]


def test_cap_limits_non_terminating_decoder(tiny_config, tiny_model):
    decoder = SelectiveSSM(tiny_config)
    with torch.no_grad():
        decoder.norm_f.zero_()  # all-zero logits: argmax is token 0, never EOS
    out = reconstruct(encode(tiny_model, [BOS, 9, 9]), decoder, max_tokens=5)
    assert out == [[0, 0, 0, 0, 0]]
