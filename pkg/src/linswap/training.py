"""Two-stage training: attention transfer (stage 1) teaches the swapped hybrid
layers to mimic the frozen softmax attentions; low-rank adjusting (stage 2)
finetunes LoRA adapters with next-token cross-entropy on the fully swapped
model. Both stages are estimator-shaped (fit / get_params / set_params).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import attention_entropy, sample_esl
from .base import ParamsMixin
from .errors import (
    AdaptersMissing,
    BadConfig,
    DivergedLoss,
    IndivisibleBlocks,
    NonFiniteResult,
    NotStochastic,
    ShapeMismatch,
)
from .model import Model, adapter_parameters, freeze_feature_maps, lora_attach
from .tensor import Tensor
from .validation import check_converted, check_positive, check_token_array

LOSS_KINDS = ("output_mse", "weight_xent", "combined")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _check_paired(ys, y_hats):
    if len(ys) != len(y_hats) or not ys:
        raise ShapeMismatch(f"{len(ys)} teacher layers vs {len(y_hats)} student layers")
    for y, y_hat in zip(ys, y_hats):
        if y.shape != y_hat.shape:
            raise ShapeMismatch(f"layer outputs {y.shape} vs {y_hat.shape}")


def per_layer_mse(y, y_hat) -> Tensor:
    """sum over heads of mean-squared error, reduced (head, position, dim)."""
    diff = y_hat - (y.detach() if isinstance(y, Tensor) else Tensor(y))
    return (diff * diff).mean(axis=(0, 2, 3)).sum()


def mse_attention_loss(ys: list, y_hats: list) -> Tensor:
    """(1 / (M H)) sum over layers and heads of per-head output MSE."""
    _check_paired(ys, y_hats)
    heads = ys[0].shape[1]
    total = None
    for y, y_hat in zip(ys, y_hats):
        layer = per_layer_mse(y, y_hat)
        total = layer if total is None else total + layer
    return total * (1.0 / (len(ys) * heads))


def blockwise_loss(ys: list, y_hats: list, block_size: int) -> list[Tensor]:
    """Per-block transfer losses: (1 / (b H)) sums over each b-layer block."""
    _check_paired(ys, y_hats)
    m = len(ys)
    if block_size < 1 or m % block_size:
        raise IndivisibleBlocks(f"{m} layers not divisible by block size {block_size}")
    heads = ys[0].shape[1]
    out = []
    for start in range(0, m, block_size):
        block = None
        for y, y_hat in zip(ys[start : start + block_size], y_hats[start : start + block_size]):
            layer = per_layer_mse(y, y_hat)
            block = layer if block is None else block + layer
        out.append(block * (1.0 / (block_size * heads)))
    return out


def hedgehog_weight_xent_loss(a, a_hat) -> Tensor:
    """Cross-entropy between teacher softmax weights and student weights,
    -sum a log a_hat per row, averaged over rows/heads/batch. Student entries
    are clamped at 1e-12 before the log."""
    a_data = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    a_hat_t = a_hat if isinstance(a_hat, Tensor) else Tensor(a_hat)
    if a_data.shape != a_hat_t.shape:
        raise ShapeMismatch(f"weight tensors {a_data.shape} vs {a_hat_t.shape}")
    for wts in (a_data, a_hat_t.data):
        sums = wts.sum(-1)
        if (np.asarray(wts) < -1e-4).any() or np.abs(sums - 1.0).max() > 1e-4:
            raise NotStochastic("attention weights must be row-stochastic")
    clamped = T.masked_fill(a_hat_t, a_hat_t.data < 1e-12, 1e-12)
    row_xent = -(Tensor(a_data.astype(np.float32), dtype=a_hat_t.dtype) * T.log(clamped)).sum(-1)
    return row_xent.mean()


def next_token_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross-entropy with log-softmax stabilization.

    logits [b, l, vocab]; targets [b, l] already shifted by one. An optional
    boolean mask (True = scored) drops positions, e.g. padding after EOS.
    """
    targets = np.asarray(targets)
    if logits.ndim != 3 or targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    shifted = logits - logits.max(-1, keepdims=True)
    logp = shifted - T.log(T.exp(shifted).sum(-1, keepdims=True))
    picked = T.take_along_last(logp, targets.astype(np.int64))
    if mask is None:
        return -picked.mean()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs targets {targets.shape}")
    count = int(mask.sum())
    if count == 0:
        raise BadConfig("next_token_loss mask scores zero positions")
    return -(picked * Tensor(mask.astype(logits.data.dtype.type))).sum() * (1.0 / count)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class AdamW:
    """AdamW with global-norm gradient clipping; parameter order is fixed by
    the insertion order of the name -> tensor dict, so runs are bit-reproducible."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        clip_norm: float | None = 1.0,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def _clip(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad *= scale
        return norm

    def step(self) -> float:
        grad_norm = self._clip()
        self.t += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data = t.data - self.lr * update.astype(t.data.dtype)
        return grad_norm


class ReduceLROnPlateau:
    """Halve the learning rate when the eval metric stops improving."""

    def __init__(self, optimizer: AdamW, factor: float = 0.5, patience: int = 10, rel_threshold: float = 1e-4):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.rel_threshold = rel_threshold
        self.best = np.inf
        self.stale = 0

    def on_eval(self, metric: float) -> None:
        if metric < self.best * (1.0 - self.rel_threshold):
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.optimizer.lr *= self.factor
                self.stale = 0


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def synthetic_corpus(n_tokens: int, seed: int = 0, n_motifs: int = 8) -> np.ndarray:
    """A tiny byte language: documents repeat one of a few short motifs with a
    newline separator, so a competent model drives next-token loss well below
    the uniform baseline."""
    from .model import tokenize

    rng = np.random.default_rng(seed)
    motifs = [bytes(rng.integers(65, 91, size=rng.integers(3, 8)).tolist()) for _ in range(n_motifs)]
    pieces = []
    total = 0
    while total < n_tokens:
        motif = motifs[int(rng.integers(0, n_motifs))]
        reps = int(rng.integers(3, 9))
        doc = (motif + b"\n") * reps
        ids = tokenize(doc)
        pieces.append(ids)
        total += ids.size
    return np.concatenate(pieces)[:n_tokens].astype(np.uint32)


def sample_batch(corpus: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator):
    """Random crops of seq_len + 1 tokens -> (inputs [b, l], targets [b, l])."""
    if corpus.size < seq_len + 1:
        raise BadConfig(f"corpus of {corpus.size} tokens cannot yield seq_len {seq_len}")
    starts = rng.integers(0, corpus.size - seq_len - 1, size=batch_size)
    ids = np.stack([corpus[s : s + seq_len + 1] for s in starts]).astype(np.int64)
    return ids[:, :-1], ids[:, 1:]


def eval_next_token_loss(model: Model, corpus: np.ndarray, batch_size: int = 8, seq_len: int = 64, seed: int = 1234, n_batches: int = 4) -> float:
    rng = np.random.default_rng(seed)
    losses = []
    with T.no_grad():
        for _ in range(n_batches):
            inputs, targets = sample_batch(corpus, batch_size, seq_len, rng)
            logits = model.forward(inputs)
            losses.append(next_token_loss(logits, targets).item())
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class TransferReport:
    train_losses: list[float] = field(default_factory=list)
    layer_mse: list[float] = field(default_factory=list)
    layer_entropy: list[float] = field(default_factory=list)
    mean_esl: float = 0.0
    wall_time: float = 0.0

    def rows(self) -> list[dict]:
        return [
            {"layer": i, "eval_mse": self.layer_mse[i], "mean_entropy": self.layer_entropy[i]}
            for i in range(len(self.layer_mse))
        ]


def layerwise_diagnostics(model: Model, eval_tokens: np.ndarray, batch_size: int = 4, seq_len: int = 64, seed: int = 7) -> TransferReport:
    """Per-layer eval MSE and teacher-attention entropy plus mean sample ESL."""
    check_converted(model)
    rng = np.random.default_rng(seed)
    inputs, _ = sample_batch(np.asarray(eval_tokens), batch_size, seq_len, rng)
    with T.no_grad():
        records, _ = model.forward_teacher_forced(inputs, return_weights=True)
    heads = records[0]["y"].shape[1]
    report = TransferReport()
    weight_list = []
    for rec in records:
        report.layer_mse.append(per_layer_mse(rec["y"], rec["y_hat"]).item() / heads)
        entropy = attention_entropy(rec["a"].data)
        report.layer_entropy.append(float(entropy.mean()))
        weight_list.append(rec["a"].data)
    report.mean_esl = sample_esl(weight_list)
    return report


def feature_map_parameters(model: Model) -> dict[str, Tensor]:
    """Stage-1 trainables: feature-map weights/biases and gamma_raw, nothing else."""
    suffixes = ("gamma_raw", "phi_q.weight", "phi_q.bias", "phi_k.weight", "phi_k.bias")
    out = {n: t for n, t in model.parameters().items() if n.endswith(suffixes)}
    if not out:
        raise BadConfig("model has no feature-map parameters; convert it first")
    for t in out.values():
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return out


# --------------------------------------------------------------------------
# stage 1: attention transfer
# --------------------------------------------------------------------------


class AttentionTransfer(ParamsMixin):
    """Trains feature maps and gamma_raw to make hybrid attention mimic the
    frozen softmax attention, layer by layer, with teacher forcing.

    Block training folds per-block losses back to the joint normalization
    (factor block_size / n_layers), so per-parameter gradients are identical
    for every block size; teacher forcing already decouples the blocks.
    """

    def __init__(
        self,
        lr: float = 1e-2,
        steps: int = 200,
        batch_size: int = 8,
        seq_len: int = 64,
        block_size: int | None = None,
        loss: str = "output_mse",
        w_mse: float = 1000.0,
        w_xent: float = 1.0,
        clip_norm: float = 1.0,
        plateau_factor: float = 0.5,
        plateau_patience: int = 10,
        eval_every: int = 50,
        seed: int = 0,
    ):
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.block_size = block_size
        self.loss = loss
        self.w_mse = w_mse
        self.w_xent = w_xent
        self.clip_norm = clip_norm
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.eval_every = eval_every
        self.seed = seed

    # -- losses over a teacher-forced forward -------------------------------

    def _resolve_block_size(self, model: Model) -> int:
        m = model.config.n_layers
        b = self.block_size if self.block_size is not None else m
        if b < 1 or m % b:
            raise IndivisibleBlocks(f"{m} layers not divisible by block size {b}")
        return b

    def transfer_loss(self, model: Model, inputs: np.ndarray) -> tuple[Tensor, float]:
        """Total training loss for one batch plus its output-MSE component."""
        kind = self.loss
        if kind not in LOSS_KINDS:
            raise BadConfig(f"loss must be one of {LOSS_KINDS}")
        if self.w_mse < 0 or self.w_xent < 0:
            raise BadConfig("loss weights must be non-negative")
        b = self._resolve_block_size(model)
        m = model.config.n_layers
        records, _ = model.forward_teacher_forced(inputs, return_weights=kind != "output_mse")
        ys = [r["y"] for r in records]
        y_hats = [r["y_hat"] for r in records]

        blocks = blockwise_loss(ys, y_hats, b)
        mse_total = blocks[0] * (b / m)
        for blk in blocks[1:]:
            mse_total = mse_total + blk * (b / m)

        if kind == "output_mse":
            return mse_total, mse_total.item()
        xent_total = None
        for r in records:
            layer_xent = hedgehog_weight_xent_loss(r["a"], r["a_hat"]) * (1.0 / m)
            xent_total = layer_xent if xent_total is None else xent_total + layer_xent
        if kind == "weight_xent":
            return xent_total, mse_total.item()
        return mse_total * self.w_mse + xent_total * self.w_xent, mse_total.item()

    def step(self, model: Model, inputs: np.ndarray, optimizer: AdamW) -> float:
        """One teacher-forced forward/backward/update; returns the loss value."""
        optimizer.zero_grad()
        try:
            loss, _ = self.transfer_loss(model, inputs)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedLoss(f"transfer loss {value}")
            T.backpropagate(loss)
        except NonFiniteResult as exc:
            raise DivergedLoss(str(exc)) from exc
        optimizer.step()
        return value

    def fit(self, model: Model, corpus) -> "AttentionTransfer":
        check_converted(model)
        corpus = check_token_array(corpus, model.config.vocab_size)
        check_positive("steps", self.steps)
        self._resolve_block_size(model)
        rng = np.random.default_rng(self.seed)
        params = feature_map_parameters(model)
        optimizer = AdamW(params, lr=self.lr, clip_norm=self.clip_norm)
        plateau = ReduceLROnPlateau(optimizer, self.plateau_factor, self.plateau_patience)
        report = TransferReport()
        start = time.perf_counter()
        for step_idx in range(self.steps):
            inputs, _ = sample_batch(corpus, self.batch_size, self.seq_len, rng)
            value = self.step(model, inputs, optimizer)
            report.train_losses.append(value)
            if self.eval_every and (step_idx + 1) % self.eval_every == 0:
                plateau.on_eval(value)
        diag = layerwise_diagnostics(model, corpus, min(self.batch_size, 4), self.seq_len, seed=self.seed + 1)
        report.layer_mse = diag.layer_mse
        report.layer_entropy = diag.layer_entropy
        report.mean_esl = diag.mean_esl
        report.wall_time = time.perf_counter() - start
        self.report_ = report
        self.optimizer_ = optimizer
        return self


# --------------------------------------------------------------------------
# stage 2: low-rank adjusting
# --------------------------------------------------------------------------


class LoraAdjust(ParamsMixin):
    """Next-token finetuning of LoRA adapters on the fully swapped model.

    Feature maps and gamma are frozen on entry; only adapter matrices train.
    """

    def __init__(
        self,
        lr: float = 1e-4,
        steps: int = 500,
        batch_size: int = 8,
        seq_len: int = 64,
        rank: int = 8,
        alpha: float = 16.0,
        targets: tuple[str, ...] = ("wq", "wk", "wv", "wo"),
        clip_norm: float = 1.0,
        plateau_factor: float = 0.5,
        plateau_patience: int = 10,
        eval_every: int = 50,
        seed: int = 0,
    ):
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.rank = rank
        self.alpha = alpha
        self.targets = targets
        self.clip_norm = clip_norm
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.eval_every = eval_every
        self.seed = seed

    def step(self, model: Model, inputs: np.ndarray, targets: np.ndarray, optimizer: AdamW) -> float:
        adapter_parameters(model)  # AdaptersMissing when none attached
        optimizer.zero_grad()
        try:
            logits = model.forward(inputs)
            loss = next_token_loss(logits, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedLoss(f"adjust loss {value}")
            T.backpropagate(loss)
        except NonFiniteResult as exc:
            raise DivergedLoss(str(exc)) from exc
        optimizer.step()
        return value

    def fit(self, model: Model, corpus) -> "LoraAdjust":
        check_converted(model)
        corpus = check_token_array(corpus, model.config.vocab_size)
        freeze_feature_maps(model)
        try:
            params = adapter_parameters(model)
        except AdaptersMissing:
            lora_attach(model, rank=self.rank, alpha=self.alpha, targets=tuple(self.targets), seed=self.seed)
            params = adapter_parameters(model)
        rng = np.random.default_rng(self.seed)
        optimizer = AdamW(params, lr=self.lr, clip_norm=self.clip_norm)
        plateau = ReduceLROnPlateau(optimizer, self.plateau_factor, self.plateau_patience)
        self.train_losses_ = []
        start = time.perf_counter()
        for step_idx in range(self.steps):
            inputs, targets = sample_batch(corpus, self.batch_size, self.seq_len, rng)
            value = self.step(model, inputs, targets, optimizer)
            self.train_losses_.append(value)
            if self.eval_every and (step_idx + 1) % self.eval_every == 0:
                plateau.on_eval(value)
        self.wall_time_ = time.perf_counter() - start
        self.optimizer_ = optimizer
        return self


# --------------------------------------------------------------------------
# base-model pretraining (toy teacher for experiments)
# --------------------------------------------------------------------------


def pretrain_base(
    model: Model,
    corpus: np.ndarray,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 8,
    seq_len: int = 64,
    clip_norm: float = 1.0,
    seed: int = 0,
) -> list[float]:
    """Full-parameter next-token training of the softmax base model. This is
    experiment scaffolding (a desk-scale stand-in for a pretrained checkpoint),
    not part of either linearizing stage."""
    corpus = check_token_array(corpus, model.config.vocab_size)
    model.set_all_trainable(True)
    optimizer = AdamW(model.parameters(), lr=lr, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        inputs, targets = sample_batch(corpus, batch_size, seq_len, rng)
        optimizer.zero_grad()
        loss = next_token_loss(model.forward(inputs), targets)
        T.backpropagate(loss)
        optimizer.step()
        losses.append(loss.item())
    return losses
