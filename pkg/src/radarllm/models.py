"""The three networks: reference encoder, LoRA-adapted backbone, autoencoder head.

Class convention for every 2-way output: index 0 = target, index 1 = clutter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ValidationError
from .nncore import (
    BatchNorm,
    LayerNorm,
    Linear,
    LoRALinear,
    MultiHeadAttention,
    TokenLayerNorm,
    gelu,
    relu,
    sinusoidal_positional_encoding,
)


@dataclass
class ReferenceConfig:
    K: int = 55
    L: int = 48
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    head_hidden: int = 32


@dataclass
class BackboneConfig:
    K: int = 55
    L: int = 48
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int | None = None  # None -> 4 * d_model, as in GPT2
    lora_rank: int = 8
    lora_scale: float = 2.0
    head_hidden: int = 64
    trainable_positions: bool = False
    causal: bool = False

    @classmethod
    def full(cls, **kw) -> "BackboneConfig":
        return cls(**{"d_model": 768, "n_heads": 12, **kw})


@dataclass
class AutoencoderConfig:
    K: int = 55
    channels: tuple[int, ...] = (128, 64, 32, 16, 8)
    fc_hidden: int = 64
    latent: int = 20

    @classmethod
    def full(cls, **kw) -> "AutoencoderConfig":
        return cls(**{"channels": (768, 512, 256, 128, 64, 32, 16), **kw})

    @classmethod
    def for_width(cls, K: int, d_model: int) -> "AutoencoderConfig":
        if d_model == 768:
            return cls.full(K=K)
        ladder = [d_model]
        while ladder[-1] > 8:
            ladder.append(ladder[-1] // 2)
        return cls(K=K, channels=tuple(ladder))


def _check_tokens(tokens: torch.Tensor, K: int, L: int):
    if tokens.dim() != 3 or tokens.shape[1] != K or tokens.shape[2] != L:
        raise ValidationError(f"expected tokens [B, {K}, {L}], got {tuple(tokens.shape)}")


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, std: float | None = None, trainable: bool = True):
        super().__init__()
        self.fc1 = Linear(d_model, d_ff, std=std)
        self.fc2 = Linear(d_ff, d_model, std=std)
        if not trainable:
            self.requires_grad_(False)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class OutputHead(nn.Module):
    """Two dense layers producing 2 logits per token."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d_model, hidden)
        self.fc2 = Linear(hidden, 2, std=0.02)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


# -- reference model -----------------------------------------------------------------


class ReferenceBlock(nn.Module):
    def __init__(self, d_model, n_heads, d_ff):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.bn1 = BatchNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.bn2 = BatchNorm(d_model)

    def forward(self, x):
        x = self.bn1(x + self.attn(x))
        return self.bn2(x + self.ff(x))


class ReferenceModel(nn.Module):
    """Lightweight encoder trained on validation data to score training tokens."""

    def __init__(self, cfg: ReferenceConfig = ReferenceConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(cfg.L, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(cfg.K, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(ReferenceBlock(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers))
        self.norm = TokenLayerNorm(cfg.d_model)
        self.head = OutputHead(cfg.d_model, cfg.head_hidden)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        _check_tokens(tokens, self.cfg.K, self.cfg.L)
        h = self.embed(tokens) + self.pos
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h))


# -- backbone --------------------------------------------------------------------------


class BackboneBlock(nn.Module):
    """Pre-norm transformer block (GPT2 layout) with LoRA on W_Q and W_V.

    Base attention and FFN weights are frozen; LayerNorm parameters and the
    LoRA factors train.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d_ff = cfg.d_ff or 4 * cfg.d_model
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(
            cfg.d_model, cfg.n_heads, lora_rank=cfg.lora_rank, lora_scale=cfg.lora_scale, causal=cfg.causal
        )
        self.attn.k.requires_grad_(False)
        self.attn.o.requires_grad_(False)
        self.ln2 = LayerNorm(cfg.d_model)
        self.mlp = FeedForward(cfg.d_model, d_ff, std=0.02, trainable=False)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class BackboneModel(nn.Module):
    """Patch embedding + positional encoding + LoRA transformer stack + token-axis LayerNorm + 2 FC."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(cfg.L, cfg.d_model)
        pe = sinusoidal_positional_encoding(cfg.K, cfg.d_model, dtype=torch.get_default_dtype())
        if cfg.trainable_positions:
            self.pos = nn.Parameter(pe)
        else:
            self.register_buffer("pos", pe)
        self.blocks = nn.ModuleList(BackboneBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = TokenLayerNorm(cfg.d_model)
        self.head = OutputHead(cfg.d_model, cfg.head_hidden)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (token logits [B, K, 2], post-LayerNorm hidden states [B, K, d_model])."""
        _check_tokens(tokens, self.cfg.K, self.cfg.L)
        h = self.embed(tokens) + self.pos
        for block in self.blocks:
            h = block(h)
        hidden = self.norm(h)
        return self.head(hidden), hidden

    def lora_layers(self) -> list[LoRALinear]:
        return [m for m in self.modules() if isinstance(m, LoRALinear)]

    def import_pretrained(self, state) -> None:
        """Reserved hook for loading external pretrained transformer weights."""
        raise NotImplementedError("pretrained weight import is not supported in this build")

    def freeze_all(self):
        self.requires_grad_(False)


# -- autoencoder head -----------------------------------------------------------------


class AutoencoderHead(nn.Module):
    """Channel-mixing (1x1 conv) autoencoder over [B, K, C] with a latent classifier.

    The encoder narrows the channel ladder with ReLU, flattens, then maps
    to ``fc_hidden`` and the latent.  The decoder maps the latent straight
    back to K * smallest-channel and widens the ladder again; its final
    layer is linear so negative hidden values can be reconstructed.
    """

    def __init__(self, cfg: AutoencoderConfig = AutoencoderConfig()):
        super().__init__()
        self.cfg = cfg
        ch = list(cfg.channels)
        self.enc_convs = nn.ModuleList(Linear(a, b) for a, b in zip(ch[:-1], ch[1:]))
        flat = cfg.K * ch[-1]
        self.enc_fc1 = Linear(flat, cfg.fc_hidden)
        self.enc_fc2 = Linear(cfg.fc_hidden, cfg.latent)
        self.dec_fc = Linear(cfg.latent, flat)
        rev = ch[::-1]
        self.dec_convs = nn.ModuleList(Linear(a, b) for a, b in zip(rev[:-1], rev[1:]))
        self.cls_norm = LayerNorm(cfg.latent)
        self.cls_fc = Linear(cfg.latent, 2)
        self.log_sigma_recon = nn.Parameter(torch.zeros(()))
        self.log_sigma_ce = nn.Parameter(torch.zeros(()))

    def encode(self, hidden):
        h = hidden
        for conv in self.enc_convs:
            h = relu(conv(h))
        return self.enc_fc2(self.enc_fc1(h.reshape(h.shape[0], -1)))

    def decode(self, latent):
        h = self.dec_fc(latent).reshape(latent.shape[0], self.cfg.K, self.cfg.channels[-1])
        last = len(self.dec_convs) - 1
        for i, conv in enumerate(self.dec_convs):
            h = conv(h)
            if i < last:
                h = relu(h)
        return h

    def classify(self, latent):
        return self.cls_fc(self.cls_norm(gelu(latent)))

    def forward(self, hidden: torch.Tensor):
        """Return (reconstruction [B, K, C], class logits [B, 2], latent [B, latent])."""
        if hidden.dim() != 3 or hidden.shape[1] != self.cfg.K or hidden.shape[2] != self.cfg.channels[0]:
            raise ValidationError(
                f"expected hidden [B, {self.cfg.K}, {self.cfg.channels[0]}], got {tuple(hidden.shape)}"
            )
        latent = self.encode(hidden)
        return self.decode(latent), self.classify(latent), latent


# -- reporting -----------------------------------------------------------------------------


def trainable_parameter_report(model: nn.Module) -> list[tuple[str, int, bool]]:
    return [(name, p.numel(), p.requires_grad) for name, p in model.named_parameters()]


def parameter_counts(model: nn.Module) -> dict[str, int]:
    report = trainable_parameter_report(model)
    trainable = sum(n for _, n, t in report if t)
    frozen = sum(n for _, n, t in report if not t)
    return {"total": trainable + frozen, "trainable": trainable, "frozen": frozen}


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
