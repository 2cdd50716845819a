"""Reference training, token scoring, preference-aware fine-tuning and head retraining.

Every token inherits the label of its sample.  The importance score
s = ReLU(L_t - alpha * L_r) is a detached weight: gradients flow through
the weighted target loss only.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from . import detect
from .errors import EmptyInputError, NumericError, ValidationError
from .features import FeatureTokenBatch
from .models import AutoencoderHead, BackboneModel, ReferenceConfig, ReferenceModel
from .nncore import Adam, parameter_hash, seed_everything, token_cross_entropy

log = logging.getLogger(__name__)

LOSS_MODES = ("preference", "plain_ce", "weighted_ce_sample")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 64
    eval_batch_size: int = 400
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    alpha: float = 0.9
    loss_mode: str = "preference"
    class_balanced: bool = False
    eval_far: float = 0.01
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0:
            raise ValidationError("epochs >= 0, batch_size >= 2 and lr > 0 are required")


def _tensor(a, like: torch.nn.Module):
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def token_labels(labels, K: int) -> torch.Tensor:
    """Broadcast per-sample labels [B] to per-token labels [B, K]."""
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)[:, None].expand(-1, K)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, labels=None, balanced: bool = False):
    """Seeded shuffled mini-batches; a trailing singleton is folded into the previous batch."""
    if balanced and labels is not None:
        labels = np.asarray(labels)
        groups = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
        size = max(len(g) for g in groups)
        # oversample the minority class so each epoch sees both classes equally
        order = np.concatenate([np.resize(g, size) for g in groups])
        order = order[rng.permutation(order.size)]
    else:
        order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, order.size, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {where}")


# -- Stage 2: reference model -----------------------------------------------------


@dataclass
class ReferenceResult:
    model: ReferenceModel
    epoch_losses: list[float]
    final_token_ce: float


def train_reference(
    model: ReferenceModel, validation: FeatureTokenBatch, cfg: TrainConfig, opt: Adam | None = None
) -> ReferenceResult:
    """Train the reference encoder on validation samples with plain per-token CE.

    Pass ``opt`` to keep (and later checkpoint) the optimizer state.
    """
    if len(validation) < 2:
        raise EmptyInputError("reference training needs at least 2 validation samples")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, cfg.lr, cfg.betas) if opt is None else opt
    tokens = _tensor(validation.tokens, model)
    labels = token_labels(validation.labels, validation.K)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in epoch_batches(len(validation), cfg.batch_size, rng, validation.labels, cfg.class_balanced):
            idx_t = torch.as_tensor(idx)
            loss = token_cross_entropy(model(tokens[idx_t]), labels[idx_t]).mean()
            _check_finite(loss, f"in reference training at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * idx.size
            count += idx.size
        history.append(total / count)
    final = float(token_losses(model, validation).mean())
    return ReferenceResult(model, history, final)


@torch.no_grad()
def token_losses(model: torch.nn.Module, batch: FeatureTokenBatch, eval_batch_size: int = 400) -> np.ndarray:
    """Eval-mode per-token CE, shape [B, K]."""
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(batch), eval_batch_size):
        sl = slice(start, start + eval_batch_size)
        result = model(_tensor(batch.tokens[sl], model))
        logits = result[0] if isinstance(result, tuple) else result
        out.append(token_cross_entropy(logits, token_labels(batch.labels[sl], batch.K)).double().numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, batch.K))


@torch.no_grad()
def token_logits(model: torch.nn.Module, batch: FeatureTokenBatch, eval_batch_size: int = 400) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(batch), eval_batch_size):
        result = model(_tensor(batch.tokens[start : start + eval_batch_size], model))
        out.append((result[0] if isinstance(result, tuple) else result).double().numpy())
    model.train(was_training)
    return np.concatenate(out)


_TABLE_MAGIC = b"RLTS"
_TABLE_HEADER = struct.Struct("<4sHIIdH")


@dataclass
class TokenScoreTable:
    """Cached reference losses L_r(sample_id, k), computed once after reference training."""

    sample_ids: np.ndarray
    losses: np.ndarray  # [n, K]
    reference_checkpoint_id: str = ""
    alpha: float = 0.9

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.shape[0] != self.sample_ids.size:
            raise ValidationError("one loss row per sample id is required")
        if len(set(self.sample_ids.tolist())) != self.sample_ids.size:
            raise ValidationError("duplicate sample ids in score table")
        if not (np.isfinite(self.losses).all() and (self.losses >= 0).all()):
            raise NumericError("reference losses must be finite and nonnegative")
        self._row = {int(s): i for i, s in enumerate(self.sample_ids)}

    def __len__(self) -> int:
        return self.losses.size

    def lookup(self, sample_ids) -> np.ndarray:
        ids = [int(s) for s in np.asarray(sample_ids)]
        missing = [s for s in ids if s not in self._row]
        if missing:
            raise ValidationError(f"score table has no entries for sample ids {missing}")
        return self.losses[[self._row[s] for s in ids]]

    def save(self, path: str | Path) -> None:
        ref = self.reference_checkpoint_id.encode()
        n, K = self.losses.shape
        with open(path, "wb") as fh:
            fh.write(_TABLE_HEADER.pack(_TABLE_MAGIC, 1, n, K, self.alpha, len(ref)))
            fh.write(ref)
            fh.write(self.sample_ids.astype("<u8").tobytes())
            fh.write(self.losses.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TokenScoreTable":
        raw = Path(path).read_bytes()
        magic, _, n, K, alpha, ref_len = _TABLE_HEADER.unpack_from(raw, 0)
        if magic != _TABLE_MAGIC:
            raise ValidationError(f"{path} is not a token score table")
        off = _TABLE_HEADER.size
        ref = raw[off : off + ref_len].decode()
        off += ref_len
        ids = np.frombuffer(raw, dtype="<u8", count=n, offset=off).astype(np.int64)
        off += 8 * n
        losses = np.frombuffer(raw, dtype="<f4", count=n * K, offset=off).reshape(n, K).astype(np.float64)
        return cls(ids, losses, ref, alpha)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "token_index", "reference_loss"])
            for sid, row in zip(self.sample_ids, self.losses):
                for k, v in enumerate(row):
                    w.writerow([int(sid), k, repr(float(v))])


def score_tokens(
    reference: ReferenceModel, training: FeatureTokenBatch, alpha: float = 0.9, checkpoint_id: str = ""
) -> TokenScoreTable:
    return TokenScoreTable(training.sample_ids.copy(), token_losses(reference, training), checkpoint_id, alpha)


# -- Stage 3: preference-aware fine-tuning ------------------------------------------


def token_importance(target_loss, reference_loss, alpha: float):
    """s = ReLU(L_t - alpha * L_r), returned without gradient history."""
    L_t = torch.as_tensor(target_loss).detach()
    L_r = torch.as_tensor(reference_loss, dtype=L_t.dtype)
    if not (torch.isfinite(L_t).all() and torch.isfinite(L_r).all()):
        raise NumericError("non-finite loss passed to token_importance")
    return torch.clamp(L_t - alpha * L_r, min=0)


def preference_loss(target_loss: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(1 / (B K)) * sum_b sum_k s[b, k] * L_t[b, k]; zero-weight tokens still count in B K."""
    if target_loss.shape != weights.shape:
        raise ValidationError(f"loss {tuple(target_loss.shape)} and weights {tuple(weights.shape)} differ")
    return (weights * target_loss).sum() / target_loss.numel()


def _weights(mode: str, L_t: torch.Tensor, L_r: torch.Tensor | None, alpha: float) -> torch.Tensor:
    if mode == "plain_ce":
        return torch.ones_like(L_t)
    if mode == "preference":
        return token_importance(L_t, L_r, alpha)
    # sample-level reweighting: one weight per sample from mean token losses
    s = torch.clamp(L_t.detach().mean(dim=1) - alpha * L_r.mean(dim=1), min=0)
    return s[:, None].expand_as(L_t)


@dataclass
class EpochRecord:
    epoch: int
    mean_target_loss: float
    mean_importance: float
    zero_fraction: float
    eval_detection_rate: float | None
    token_weights: np.ndarray


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValidationError("epochs must be strictly increasing")
        self.records.append(rec)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_target_loss", "mean_importance", "zero_fraction", "eval_detection_rate"])
            for r in self.records:
                dr = "" if r.eval_detection_rate is None else repr(r.eval_detection_rate)
                w.writerow([r.epoch, repr(r.mean_target_loss), repr(r.mean_importance), repr(r.zero_fraction), dr])

    def write_token_weights_csv(self, path: str | Path, origin: Sequence[tuple[str, int]]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "token_index", "feature_name", "mean_weight"])
            for r in self.records:
                for k, v in enumerate(r.token_weights):
                    w.writerow([r.epoch, k, origin[k][0], repr(float(v))])


def evaluate_tokens(model: BackboneModel, batch: FeatureTokenBatch, p_fa: float) -> float:
    scores = detect.aggregate_token_outputs(token_logits(model, batch))
    return detect.evaluate(scores, batch.labels, p_fa, batch.sample_ids).detection_rate


def finetune_backbone(
    model: BackboneModel,
    train: FeatureTokenBatch,
    table: TokenScoreTable | None,
    cfg: TrainConfig,
    eval_set: FeatureTokenBatch | None = None,
    opt: Adam | None = None,
) -> TrainLog:
    """Stage 3: LoRA fine-tuning under the configured token weighting."""
    if cfg.loss_mode != "plain_ce":
        if table is None:
            raise ValidationError(f"loss_mode {cfg.loss_mode!r} needs a token score table")
        ref_all = table.lookup(train.sample_ids)
    else:
        ref_all = np.zeros(train.tokens.shape[:2])
    frozen_before = parameter_hash(model, trainable=False)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, cfg.lr, cfg.betas) if opt is None else opt
    tokens = _tensor(train.tokens, model)
    labels = token_labels(train.labels, train.K)
    ref_t = _tensor(ref_all, model)
    tlog = TrainLog()
    best, stale = -1.0, 0
    for epoch in range(cfg.epochs):
        model.train()
        loss_sum = imp_sum = zeros = n_tok = 0.0
        weight_sum = torch.zeros(train.K, dtype=torch.float64)
        n_samples = 0
        for idx in epoch_batches(len(train), cfg.batch_size, rng, train.labels, cfg.class_balanced):
            idx_t = torch.as_tensor(idx)
            logits, _ = model(tokens[idx_t])
            L_t = token_cross_entropy(logits, labels[idx_t])
            s = _weights(cfg.loss_mode, L_t, ref_t[idx_t], cfg.alpha)
            loss = preference_loss(L_t, s)
            _check_finite(loss, f"in fine-tuning at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += L_t.detach().sum().item()
            imp_sum += s.sum().item()
            zeros += (s == 0).sum().item()
            n_tok += s.numel()
            weight_sum += s.double().sum(dim=0)
            n_samples += idx.size
        dr = evaluate_tokens(model, eval_set, cfg.eval_far) if eval_set is not None else None
        tlog.append(
            EpochRecord(
                epoch=epoch,
                mean_target_loss=loss_sum / n_tok,
                mean_importance=imp_sum / n_tok,
                zero_fraction=zeros / n_tok,
                eval_detection_rate=dr,
                token_weights=(weight_sum / n_samples).numpy(),
            )
        )
        if cfg.early_stop_patience is not None and dr is not None:
            if dr > best:
                best, stale = dr, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    if parameter_hash(model, trainable=False) != frozen_before:
        raise AssertionError("frozen backbone weights changed during fine-tuning")
    return tlog


# -- Stage 4: autoencoder head ------------------------------------------------------


def ae_total_loss(
    hidden: torch.Tensor,
    reconstruction: torch.Tensor,
    logits: torch.Tensor,
    labels,
    log_sigma_recon: torch.Tensor,
    log_sigma_ce: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Uncertainty-weighted total: L_recon / (2 sr^2) + L_ce / sc^2 + log(sr * sc).

    L_recon is the mean squared reconstruction error over all elements and
    L_ce the batch-mean sample cross-entropy.  Returns (total, recon, ce).
    """
    recon = ((hidden - reconstruction) ** 2).mean()
    ce = token_cross_entropy(logits, torch.as_tensor(np.asarray(labels), dtype=torch.long)).mean()
    total = (
        0.5 * torch.exp(-2 * log_sigma_recon) * recon
        + torch.exp(-2 * log_sigma_ce) * ce
        + log_sigma_recon
        + log_sigma_ce
    )
    return total, recon, ce


@torch.no_grad()
def backbone_hidden(model: BackboneModel, batch: FeatureTokenBatch, eval_batch_size: int = 400) -> np.ndarray:
    was = model.training
    model.eval()
    out = [
        model(_tensor(batch.tokens[i : i + eval_batch_size], model))[1].numpy()
        for i in range(0, len(batch), eval_batch_size)
    ]
    model.train(was)
    return np.concatenate(out)


@dataclass
class HeadResult:
    model: AutoencoderHead
    epoch_losses: list[float]
    recon_losses: list[float]
    ce_losses: list[float]


def train_head(
    backbone: BackboneModel, head: AutoencoderHead, train: FeatureTokenBatch, cfg: TrainConfig, opt: Adam | None = None
) -> HeadResult:
    """Stage 4: train the autoencoder head on frozen backbone hidden states."""
    backbone_hash = parameter_hash(backbone)
    hidden = _tensor(backbone_hidden(backbone, train, cfg.eval_batch_size), head)
    labels = np.asarray(train.labels)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(head, cfg.lr, cfg.betas) if opt is None else opt
    totals, recons, ces = [], [], []
    for epoch in range(cfg.epochs):
        head.train()
        t_sum = r_sum = c_sum = 0.0
        for idx in epoch_batches(len(train), cfg.batch_size, rng, labels, cfg.class_balanced):
            h = hidden[torch.as_tensor(idx)]
            rec, logits, _ = head(h)
            total, recon, ce = ae_total_loss(h, rec, logits, labels[idx], head.log_sigma_recon, head.log_sigma_ce)
            _check_finite(total, f"in head training at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if not (torch.isfinite(head.log_sigma_recon) and torch.isfinite(head.log_sigma_ce)):
                raise NumericError(f"uncertainty parameters became non-finite at epoch {epoch}")
            t_sum += total.item() * idx.size
            r_sum += recon.item() * idx.size
            c_sum += ce.item() * idx.size
        totals.append(t_sum / len(train))
        recons.append(r_sum / len(train))
        ces.append(c_sum / len(train))
    if parameter_hash(backbone) != backbone_hash:
        raise AssertionError("backbone changed during head training")
    return HeadResult(head, totals, recons, ces)


@torch.no_grad()
def head_scores(backbone: BackboneModel, head: AutoencoderHead, batch: FeatureTokenBatch) -> np.ndarray:
    """Target probability from the autoencoder classifier."""
    head.eval()
    hidden = _tensor(backbone_hidden(backbone, batch), head)
    _, logits, _ = head(hidden)
    p = torch.softmax(logits.double(), dim=-1)
    return p[:, 0].numpy()


# -- learning-value oracle ----------------------------------------------------------------


@dataclass
class OracleConfig:
    base_epochs: int = 60
    retrain_steps: int = 25
    reference_epochs: int = 120
    lr: float = 3e-3
    inclusion_weight: float = 10.0
    alpha: float = 0.9
    seed: int = 0
    model: ReferenceConfig = field(default_factory=lambda: ReferenceConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, head_hidden=16))


@dataclass
class OracleResult:
    correlation: float
    scores: np.ndarray
    reductions: np.ndarray
    target_losses: np.ndarray
    reference_losses: np.ndarray


def _full_batch_train(model, tokens, labels, weights, steps, lr, norm=None, betas=(0.9, 0.999)):
    opt = Adam(model, lr, betas)
    model.train()
    norm = weights.sum() if norm is None else norm
    for _ in range(steps):
        L = token_cross_entropy(model(tokens), labels)
        loss = (weights * L).sum() / norm
        opt.zero_grad()
        loss.backward()
        opt.step()


def _eval_loss(model, tokens, labels) -> float:
    model.eval()
    with torch.no_grad():
        return token_cross_entropy(model(tokens), labels).mean().item()


def learning_value_oracle(
    tiny_train: FeatureTokenBatch,
    tiny_test: FeatureTokenBatch,
    candidates: FeatureTokenBatch,
    candidate_tokens: Sequence[int],
    reference_set: FeatureTokenBatch | None = None,
    cfg: OracleConfig = OracleConfig(),
) -> OracleResult:
    """Brute-force check that importance scores rank patches by their true learning value.

    Candidate c is token ``candidate_tokens[c]`` of sample c in ``candidates``.
    Starting from a fixed checkpoint trained on ``tiny_train``, the model is
    retrained twice per candidate - once with the candidate's loss term
    included (weight ``inclusion_weight``) and once without, the candidate
    sample being present in the batch both times so batch statistics
    match.  The measured learning value is the resulting drop in mean test
    token loss.  Scores use the fixed checkpoint as the target model and a
    reference model trained on ``reference_set`` (default: train + test,
    the set the score is meant to stand in for).  Returns the Spearman
    correlation of scores against measured reductions.
    """
    n_cand = len(candidates)
    if n_cand < 5 or len(candidate_tokens) != n_cand:
        raise ValidationError("need at least 5 candidates, one token index each")
    if len(tiny_train) < 2 or len(tiny_test) < 1:
        raise EmptyInputError("tiny train/test sets are empty")
    mcfg = cfg.model
    dtype = torch.float64

    def build(seed):
        seed_everything(seed)
        return ReferenceModel(mcfg).to(dtype)

    def as_t(a):
        return torch.as_tensor(np.asarray(a), dtype=dtype)

    K = tiny_train.K
    tr_x, tr_y = as_t(tiny_train.tokens), token_labels(tiny_train.labels, K)
    te_x, te_y = as_t(tiny_test.tokens), token_labels(tiny_test.labels, K)
    ca_x, ca_y = as_t(candidates.tokens), token_labels(candidates.labels, K)

    base = build(cfg.seed)
    _full_batch_train(base, tr_x, tr_y, torch.ones_like(tr_y, dtype=dtype), cfg.base_epochs, cfg.lr)
    base_state = {k: v.clone() for k, v in base.state_dict().items()}

    ref_batch = reference_set
    if ref_batch is None:
        ref_batch = FeatureTokenBatch(
            np.concatenate([tiny_train.tokens, tiny_test.tokens]),
            np.concatenate([tiny_train.labels, tiny_test.labels]),
            np.concatenate([tiny_train.sample_ids, tiny_test.sample_ids]),
            tiny_train.token_feature_origin,
            tiny_train.N,
        )
    reference = build(cfg.seed + 1)
    rx, ry = as_t(ref_batch.tokens), token_labels(ref_batch.labels, K)
    _full_batch_train(reference, rx, ry, torch.ones_like(ry, dtype=dtype), cfg.reference_epochs, cfg.lr)

    ks = np.asarray(candidate_tokens)
    rows = np.arange(n_cand)
    base.eval()
    reference.eval()
    with torch.no_grad():
        L_t = token_cross_entropy(base(ca_x), ca_y).numpy()[rows, ks]
        L_r = token_cross_entropy(reference(ca_x), ca_y).numpy()[rows, ks]
    s = np.maximum(L_t - cfg.alpha * L_r, 0.0)

    reductions = np.zeros(n_cand)
    for c in range(n_cand):
        x = torch.cat([tr_x, ca_x[c : c + 1]])
        y = torch.cat([tr_y, ca_y[c : c + 1]])
        losses = []
        for include in (False, True):
            model = build(cfg.seed)
            model.load_state_dict(base_state)
            w = torch.ones(y.shape, dtype=dtype)
            w[-1] = 0.0
            if include:
                w[-1, ks[c]] = cfg.inclusion_weight
            _full_batch_train(model, x, y, w, cfg.retrain_steps, cfg.lr, norm=tr_y.numel())
            losses.append(_eval_loss(model, te_x, te_y))
        reductions[c] = losses[0] - losses[1]
    if np.ptp(s) == 0 or np.ptp(reductions) == 0:
        rho = 0.0
    else:
        rho = float(stats.spearmanr(s, reductions).statistic)
    return OracleResult(rho, s, reductions, L_t, L_r)
