"""Dense-tensor building blocks with reverse-mode gradients.

Tensors and autograd come from torch; every layer, loss and the Adam
update used by the models is written out here so that its exact
arithmetic is visible and testable.  Weight matrices use the
``[d_in, d_out]`` layout (``y = x @ W + b``).
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NumericError, ValidationError

DEFAULT_DTYPE = torch.float32
LORA_INIT_STD = 0.02


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# -- functional ops -------------------------------------------------------------


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if W.dim() != 2 or x.shape[-1] != W.shape[0]:
        raise ValidationError(f"linear: input dim {tuple(x.shape)} incompatible with weight {tuple(W.shape)}")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ValidationError(f"linear: bias shape {tuple(b.shape)} != ({W.shape[1]},)")
        y = y + b
    return y


def sinusoidal_positional_encoding(K: int, d_model: int, dtype=torch.float64) -> torch.Tensor:
    """E[k, 2l] = sin(k / 10000^(2l/d)), E[k, 2l+1] = cos(k / 10000^(2l/d))."""
    if d_model % 2:
        raise ValidationError(f"positional encoding width must be even, got {d_model}")
    k = torch.arange(K, dtype=torch.float64)[:, None]
    two_l = torch.arange(0, d_model, 2, dtype=torch.float64)[None, :]
    angle = k / torch.pow(torch.tensor(10000.0, dtype=torch.float64), two_l / d_model)
    enc = torch.empty(K, d_model, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(angle)
    enc[:, 1::2] = torch.cos(angle)
    return enc.to(dtype)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize over the token axis.

    For x of shape [B, K, D] the statistics are taken across the K tokens
    separately for every (sample, feature-dim) pair, then gamma/beta of
    shape [D] scale and shift.  Variance is the biased (1/K) estimate.
    """
    if eps <= 0:
        raise ValidationError("eps must be > 0")
    if x.dim() != 3 or gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValidationError(f"layer_norm: x {tuple(x.shape)}, gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}")
    mu = x.mean(dim=1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
    return gamma * (x - mu) / torch.sqrt(var + eps) + beta


def feature_layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Conventional LayerNorm over the last axis (used inside transformer blocks)."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValidationError("feature_layer_norm: parameter shape mismatch")
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Batch normalization over (B, K) per channel of x [B, K, D].

    In training mode the running statistics are updated in place with the
    unbiased batch variance.
    """
    if x.dim() != 3 or gamma.shape != (x.shape[-1],):
        raise ValidationError(f"batch_norm: x {tuple(x.shape)} vs gamma {tuple(gamma.shape)}")
    if training:
        if x.shape[0] < 2:
            raise ValidationError("batch_norm in train mode needs a batch of at least 2 samples")
        mu = x.mean(dim=(0, 1))
        var = ((x - mu) ** 2).mean(dim=(0, 1))
        n = x.shape[0] * x.shape[1]
        with torch.no_grad():
            running_mean.mul_(1 - momentum).add_(momentum * mu.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    return gamma * (x - mu) / torch.sqrt(var + eps) + beta


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Tanh-approximated GELU (the GPT2 variant)."""
    return F.gelu(x, approximate="tanh")


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0)


def attention_heads(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int, causal: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over pre-projected q, k, v of shape [B, K, D].

    Returns the concatenated head outputs [B, K, D] and the attention
    weights [B, H, K, K].
    """
    B, K, D = q.shape
    if D % n_heads:
        raise ValidationError(f"model width {D} is not divisible by {n_heads} heads")
    d_k = D // n_heads

    def split(t):
        return t.reshape(B, K, n_heads, d_k).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d_k)
    if causal:
        mask = torch.ones(K, K, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    weights = softmax(scores, dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(B, K, D)
    return out, weights


def multi_head_attention(
    x: torch.Tensor,
    Wq: torch.Tensor,
    Wk: torch.Tensor,
    Wv: torch.Tensor,
    Wo: torch.Tensor,
    n_heads: int,
    bq=None,
    bk=None,
    bv=None,
    bo=None,
    causal: bool = False,
) -> torch.Tensor:
    if x.shape[-1] % n_heads:
        raise ValidationError(f"model width {x.shape[-1]} is not divisible by {n_heads} heads")
    out, _ = attention_heads(linear(x, Wq, bq), linear(x, Wk, bk), linear(x, Wv, bv), n_heads, causal)
    return linear(out, Wo, bo)


def lora_linear(
    x: torch.Tensor,
    W: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    scale: float,
    b: torch.Tensor | None = None,
) -> torch.Tensor:
    """y = x (W + s A B) + b, evaluated as two paths so the base product is untouched."""
    if A.shape[0] != W.shape[0] or B.shape[1] != W.shape[1] or A.shape[1] != B.shape[0]:
        raise ValidationError(f"lora shapes W{tuple(W.shape)} A{tuple(A.shape)} B{tuple(B.shape)} disagree")
    return linear(x, W, b) + scale * ((x @ A) @ B)


def token_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-token -log softmax(logits)[label]; logits [..., C], labels [...]."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise ValidationError(f"labels must lie in [0, {C})")
    if labels.shape != logits.shape[:-1]:
        raise ValidationError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    m = logits.amax(dim=-1, keepdim=True).detach()
    lse = m.squeeze(-1) + torch.log(torch.exp(logits - m).sum(dim=-1))
    picked = torch.gather(logits, -1, labels.unsqueeze(-1)).squeeze(-1)
    return lse - picked


# -- modules --------------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * std)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LoRALinear(nn.Module):
    """Frozen dense layer plus a trainable low-rank update s * A @ B."""

    def __init__(self, d_in: int, d_out: int, rank: int, scale: float, std: float = 0.02):
        super().__init__()
        if rank < 1:
            raise ValidationError("LoRA rank must be >= 1")
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * std, requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(d_out), requires_grad=False)
        self.lora_A = nn.Parameter(torch.randn(d_in, rank) * LORA_INIT_STD)
        self.lora_B = nn.Parameter(torch.zeros(rank, d_out))
        self.scale = scale

    def forward(self, x):
        return lora_linear(x, self.weight, self.lora_A, self.lora_B, self.scale, self.bias)

    def merged_weight(self) -> torch.Tensor:
        return self.weight + self.scale * self.lora_A @ self.lora_B

    def forward_merged(self, x):
        return linear(x, self.merged_weight(), self.bias)


class TokenLayerNorm(nn.Module):
    """LayerNorm whose statistics run over the token axis (see :func:`layer_norm`)."""

    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return feature_layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(nn.Module):
    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class MultiHeadAttention(nn.Module):
    """Self-attention; with ``lora_rank`` set, W_Q and W_V become LoRA layers over frozen bases."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        lora_rank: int | None = None,
        lora_scale: float = 1.0,
        causal: bool = False,
        std: float | None = None,
    ):
        super().__init__()
        if d_model % n_heads:
            raise ValidationError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.causal = causal
        if lora_rank is None:
            self.q = Linear(d_model, d_model, std=std)
            self.k = Linear(d_model, d_model, std=std)
            self.v = Linear(d_model, d_model, std=std)
            self.o = Linear(d_model, d_model, std=std)
        else:
            base_std = 0.02 if std is None else std
            self.q = LoRALinear(d_model, d_model, lora_rank, lora_scale, std=base_std)
            self.k = Linear(d_model, d_model, std=base_std)
            self.v = LoRALinear(d_model, d_model, lora_rank, lora_scale, std=base_std)
            self.o = Linear(d_model, d_model, std=base_std)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x):
        out, weights = attention_heads(self.q(x), self.k(x), self.v(x), self.n_heads, self.causal)
        self.last_weights = weights.detach()
        return self.o(out)


# -- optimizer ------------------------------------------------------------------


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: Iterable[str] = (),
) -> None:
    """One bias-corrected Adam update, applied in place.

    ``state`` holds ``step`` and per-name first/second moments; it starts
    empty (equivalent to zero moments).  Names in ``frozen`` and names with
    no gradient are skipped.
    """
    frozen = set(frozen)
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    t = state.get("step", 0) + 1
    state["step"] = t
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if name in frozen or g is None:
                continue
            m = m_all.get(name)
            v = v_all.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_all[name], v_all[name] = m, v
            p -= lr * (m / c1) / (torch.sqrt(v / c2) + eps)


class Adam:
    """Adam over the trainable parameters of a module (requires_grad=False means frozen)."""

    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def trainable(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.module.named_parameters() if p.requires_grad}

    def zero_grad(self):
        for p in self.module.parameters():
            p.grad = None

    def step(self):
        params = self.trainable()
        grads = {n: p.grad for n, p in params.items()}
        adam_step(params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([self.state.get("step", 0)], dtype=np.int64)}
        for kind in ("m", "v"):
            for n, t in self.state.get(kind, {}).items():
                out[f"optim.{kind}.{n}"] = t.detach().cpu().numpy()
        return out

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]):
        self.state = {"step": int(tensors.get("optim.step", [0])[0]), "m": {}, "v": {}}
        for key, arr in tensors.items():
            for kind in ("m", "v"):
                prefix = f"optim.{kind}."
                if key.startswith(prefix):
                    self.state[kind][key[len(prefix):]] = torch.from_numpy(np.array(arr))


# -- verification harness -------------------------------------------------------


def finite_difference_check(
    f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], h: float = 1e-5, floor: float = 1e-8
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` re-evaluates a scalar from the current values of ``params``, which
    are perturbed in place one coordinate at a time.  The relative error
    of a coordinate is |g_fd - g| / max(|g|, floor).  Coordinates whose true
    gradient is exactly zero turn round-off into a large ratio at the
    default floor; raise ``floor`` to judge those in absolute terms.
    """
    params = list(params)
    value = f()
    if not torch.isfinite(value):
        raise NumericError("function value is not finite")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("function value is not finite under perturbation")
                fd = (fp - fm) / (2 * h)
                analytic = gflat[i].item()
                worst = max(worst, abs(fd - analytic) / max(abs(analytic), floor))
    return worst


# -- parameters, hashing, checkpoints ------------------------------------------------


def parameter_hash(module: nn.Module, trainable: bool | None = None) -> str:
    """SHA-256 over parameters, optionally restricted to frozen (False) or trainable (True)."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if trainable is not None and p.requires_grad != trainable:
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise ValidationError(f"checkpoint lacks tensors {missing[:5]}")
    with torch.no_grad():
        for k, t in state.items():
            src = torch.from_numpy(np.array(tensors[prefix + k]))
            if tuple(src.shape) != tuple(t.shape):
                raise ValidationError(f"shape mismatch for {k}: {tuple(src.shape)} vs {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))


MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Write a checkpoint directory: JSON manifest plus one little-endian tensor blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            dt = arr.dtype.newbyteorder("<")
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            entries[name] = {"shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    manifest = {"meta": dict(meta or {}), "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    tensors = {}
    for name, e in manifest["tensors"].items():
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[name] = arr.astype(dt.newbyteorder("="))
    return tensors, manifest["meta"]
