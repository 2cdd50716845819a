"""Shapes, freezing, parameter counts and gradients of the three networks."""

import numpy as np
import pytest
import torch

from radarllm import models as M
from radarllm.errors import ValidationError
from radarllm.nncore import LoRALinear, finite_difference_check, parameter_hash, token_cross_entropy
from radarllm.training import ae_total_loss

D64 = torch.float64

TINY_REF = M.ReferenceConfig(K=5, L=4, d_model=8, n_heads=2, n_layers=1, d_ff=8, head_hidden=4)
TINY_BB = M.BackboneConfig(K=5, L=4, d_model=8, n_heads=2, n_layers=1, lora_rank=2, head_hidden=4)


def _tokens(B, K, L, seed=0, dtype=torch.float32):
    return torch.randn(B, K, L, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _generic_point(model, std=0.5, seed=0):
    """Redraw every parameter so no derivative sits at round-off level (small-init attention is nearly uniform)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def _randomize_lora(model):
    with torch.no_grad():
        for layer in model.lora_layers():
            layer.lora_B.normal_(0, 0.1)


# -- reference model --------------------------------------------------------------------------


def test_reference_output_shape_and_eval_determinism():
    torch.manual_seed(0)
    model = M.ReferenceModel()
    x = _tokens(2, 55, 48)
    model.train()
    assert model(x).shape == (2, 55, 2)
    model.eval()
    dup = torch.cat([x[:1], x[:1]])
    out = model(dup)
    assert torch.equal(out[0], out[1])
    assert torch.equal(model(dup), out)


def test_reference_rejects_wrong_shape():
    with pytest.raises(ValidationError):
        M.ReferenceModel()(_tokens(2, 54, 48))


def test_reference_gradient_check_two_samples():
    torch.manual_seed(1)
    model = _generic_point(M.ReferenceModel(TINY_REF).double(), seed=1)
    model.train()
    x = _tokens(2, 5, 4, seed=1, dtype=D64)
    y = torch.tensor([[0] * 5, [1] * 5])
    # softmax ignores the key bias, and a constant shift through value/output biases is
    # removed by the following batch norm: their true gradient is exactly zero
    invariant = ("attn.k.bias", "attn.v.bias", "attn.o.bias")
    params = [p for n, p in model.named_parameters() if not n.endswith(invariant)]
    zero_grad = [p for n, p in model.named_parameters() if n.endswith(invariant)]

    def f():
        # fresh running stats each call so the function is identical across perturbations
        for m in model.modules():
            if isinstance(m, M.BatchNorm):
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
        return token_cross_entropy(model(x), y).mean()

    assert finite_difference_check(f, params) < 1e-4
    # judged in absolute terms: |g_fd - g| / 1e-6 < 1e-4 means agreement to 1e-10
    assert finite_difference_check(f, zero_grad, floor=1e-6) < 1e-4
    grads = torch.autograd.grad(f(), zero_grad)
    assert max(g.abs().max().item() for g in grads) < 1e-14


# -- backbone ------------------------------------------------------------------------------------


def test_backbone_shapes():
    torch.manual_seed(2)
    model = M.BackboneModel()
    logits, hidden = model(_tokens(3, 55, 48))
    assert logits.shape == (3, 55, 2) and hidden.shape == (3, 55, 128)


@pytest.mark.slow
def test_backbone_full_profile_hidden_shape():
    torch.manual_seed(3)
    model = M.BackboneModel(M.BackboneConfig.full())
    _, hidden = model(_tokens(1, 55, 48))
    assert hidden.shape == (1, 55, 768)


def test_backbone_zero_lora_matches_frozen_base():
    torch.manual_seed(4)
    model = M.BackboneModel(TINY_BB).double()
    x = _tokens(2, 5, 4, seed=4, dtype=D64)
    logits, _ = model(x)
    # rebuild every adapted layer as a plain dense layer with the frozen weights only
    for layer in model.lora_layers():
        layer.forward = lambda inp, layer=layer: inp @ layer.weight + layer.bias
    base, _ = model(x)
    assert (logits - base).abs().max() < 1e-10


def test_backbone_permutation_equivariance():
    torch.manual_seed(5)
    model = M.BackboneModel(TINY_BB).double()
    _randomize_lora(model)
    x = _tokens(4, 5, 4, seed=5, dtype=D64)
    perm = torch.tensor([2, 0, 3, 1])
    a, _ = model(x)
    b, _ = model(x[perm])
    assert torch.allclose(a[perm], b, atol=1e-12)


def test_backbone_trainable_set():
    model = M.BackboneModel(TINY_BB)
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    assert all(("lora_" in n) or ("ln" in n) or n.startswith(("embed", "head", "norm")) for n in trainable)
    assert {"blocks.0.attn.q.weight", "blocks.0.attn.k.weight", "blocks.0.attn.v.weight",
            "blocks.0.attn.o.weight", "blocks.0.mlp.fc1.weight", "blocks.0.mlp.fc2.weight"} <= frozen
    assert "pos" not in dict(model.named_parameters())
    assert "pos" in dict(model.named_parameters()) or "pos" in dict(model.named_buffers())
    assert "pos" in dict(M.BackboneModel(M.BackboneConfig(**{**TINY_BB.__dict__, "trainable_positions": True})).named_parameters())


def _desk_counts(cfg: M.BackboneConfig):
    d, L, r, hh = cfg.d_model, cfg.L, cfg.lora_rank, cfg.head_hidden
    ff = 4 * d
    per_block_trainable = 2 * d + 2 * d + 2 * (d * r + r * d)
    per_block_frozen = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d)
    trainable = (L * d + d) + cfg.n_layers * per_block_trainable + 2 * d + (d * hh + hh) + (hh * 2 + 2)
    return trainable, cfg.n_layers * per_block_frozen


def test_desk_parameter_counts_match_hand_arithmetic():
    cfg = M.BackboneConfig()
    counts = M.parameter_counts(M.BackboneModel(cfg))
    trainable, frozen = _desk_counts(cfg)
    assert counts == {"total": trainable + frozen, "trainable": trainable, "frozen": frozen}


def test_lora_count_per_adapted_matrix():
    layer = LoRALinear(768, 768, rank=8, scale=2.0)
    assert sum(p.numel() for p in layer.parameters() if p.requires_grad) == 2 * 768 * 8 == 12288


def test_report_lists_every_parameter():
    model = M.BackboneModel(TINY_BB)
    rep = M.trainable_parameter_report(model)
    assert len(rep) == len(list(model.parameters()))
    assert all(isinstance(n, str) and c > 0 for n, c, _ in rep)


def test_backbone_gradient_check():
    torch.manual_seed(6)
    model = _generic_point(M.BackboneModel(TINY_BB).double(), seed=6)
    x = _tokens(2, 5, 4, seed=6, dtype=D64)
    y = torch.tensor([[0] * 5, [1] * 5])
    params = [p for p in model.parameters() if p.requires_grad]
    assert finite_difference_check(lambda: token_cross_entropy(model(x)[0], y).mean(), params) < 1e-4


def test_freeze_all_and_import_hook():
    model = M.BackboneModel(TINY_BB)
    before = parameter_hash(model)
    model.freeze_all()
    assert not any(p.requires_grad for p in model.parameters())
    assert parameter_hash(model) == before
    with pytest.raises(NotImplementedError):
        model.import_pretrained({})


# -- autoencoder head ------------------------------------------------------------------------------


def test_autoencoder_shapes_desk_and_full():
    torch.manual_seed(7)
    head = M.AutoencoderHead()
    rec, logits, z = head(torch.randn(3, 55, 128))
    assert rec.shape == (3, 55, 128) and logits.shape == (3, 2) and z.shape == (3, 20)
    full = M.AutoencoderConfig.full()
    assert full.channels == (768, 512, 256, 128, 64, 32, 16)
    head = M.AutoencoderHead(full)
    assert head.enc_fc1.weight.shape == (55 * 16, 64)
    rec, logits, z = head(torch.randn(1, 55, 768))
    assert rec.shape == (1, 55, 768) and z.shape == (1, 20)


def test_autoencoder_ladder_for_width():
    assert M.AutoencoderConfig.for_width(55, 128).channels == (128, 64, 32, 16, 8)
    assert M.AutoencoderConfig.for_width(55, 768).channels[-1] == 16


def test_autoencoder_zero_input_and_shape_error():
    head = M.AutoencoderHead()
    rec, logits, z = head(torch.zeros(2, 55, 128))
    assert torch.isfinite(rec).all() and torch.equal(rec[0], rec[1])
    with pytest.raises(ValidationError):
        head(torch.zeros(2, 55, 64))


def test_autoencoder_classifier_uses_latent_only():
    torch.manual_seed(8)
    head = M.AutoencoderHead(M.AutoencoderConfig(K=3, channels=(8, 4), fc_hidden=6, latent=5))
    z = torch.randn(2, 5)
    assert torch.equal(head.classify(z), head.cls_fc(head.cls_norm(torch.nn.functional.gelu(z, approximate="tanh"))))


def test_autoencoder_total_loss_gradient():
    torch.manual_seed(9)
    head = M.AutoencoderHead(M.AutoencoderConfig(K=3, channels=(8, 4), fc_hidden=6, latent=5)).double()
    with torch.no_grad():
        head.log_sigma_recon.fill_(0.3)
        head.log_sigma_ce.fill_(-0.2)
    h = torch.randn(2, 3, 8, dtype=D64)
    labels = np.array([0, 1])

    def f():
        rec, logits, _ = head(h)
        return ae_total_loss(h, rec, logits, labels, head.log_sigma_recon, head.log_sigma_ce)[0]

    assert finite_difference_check(f, list(head.parameters())) < 1e-4


def test_autoencoder_reconstruction_improves():
    torch.manual_seed(10)
    head = M.AutoencoderHead(M.AutoencoderConfig(K=5, channels=(16, 8, 4)))
    h = torch.randn(8, 5, 16)
    opt = torch.optim.Adam(head.parameters(), lr=1e-2)
    losses = []
    for _ in range(10):
        rec, _, _ = head(h)
        loss = ((rec - h) ** 2).mean()
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.isfinite(losses).all() and losses[-1] < losses[0]


def test_config_dict_is_json_friendly():
    d = M.config_dict(M.AutoencoderConfig())
    assert d["channels"] == [128, 64, 32, 16, 8]
