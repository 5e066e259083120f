"""The toy two-stream model and its training loop.

Architecture: a per-token visual embedding (affine + tanh) and a linguistic
embedding (token lookup + affine + tanh) each emit the mean of a diagonal
Gaussian conditional with a learned per-dimension log-variance; token
representations are reparameterized draws in training and the means at
evaluation.  One affine pooling map per modality reads the flattened token
sequence into the global vector consumed by the answer head (two affine
layers with tanh between) and by the cross-modal critic.

Training minimizes task loss + beta * regularizer with momentum SGD under a
linear warmup / linear decay schedule, updating every parameter group
(embeddings, pooling, answer head, critic, log-variances) in the same step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import objective as O
from . import tensor as T
from .density import TokenConditionals
from .estimators import FCCritic
from .objective import CIBConfig, RegularizerBreakdown
from .optim import MomentumSGD, WarmupLinearDecay, effective_warmup
from .task import Dataset, SyntheticExample, TaskConfig
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite at step {step} (value {value!r})")
        self.step = step


@dataclass
class EncodedBatch:
    v: TokenConditionals
    l: TokenConditionals
    pooled_v: Tensor
    pooled_l: Tensor


class ToyModel:
    """Two-stream encoder, pooling maps, answer head, and critic."""

    def __init__(self, task: TaskConfig, rng: np.random.Generator,
                 head_hidden: int | None = None, critic_hidden: int | None = None,
                 init_log_var: float = -4.0):
        d = task.rep_dim
        k, ell = task.visual_tokens, task.question_tokens
        self.task = task
        self.d = d
        self.head_hidden = head_hidden or 2 * d
        h = self.head_hidden

        def w(shape, scale):
            return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "vis.w": w((task.token_dim, d), 1.0 / math.sqrt(task.token_dim)),
            "vis.b": zeros(d),
            "vis.log_var": Tensor(np.full(d, init_log_var), requires_grad=True),
            "lang.table": w((task.vocab, d), 1.0),
            "lang.w": w((d, d), 1.0 / math.sqrt(d)),
            "lang.b": zeros(d),
            "lang.log_var": Tensor(np.full(d, init_log_var), requires_grad=True),
            "pool_v.w": w((k * d, d), 1.0 / math.sqrt(k * d)),
            "pool_v.b": zeros(d),
            "pool_l.w": w((ell * d, d), 1.0 / math.sqrt(ell * d)),
            "pool_l.b": zeros(d),
            "head.w1": w((2 * d, h), 1.0 / math.sqrt(2 * d)),
            "head.b1": zeros(h),
            "head.w2": w((h, task.answers), 0.01 / math.sqrt(h)),
            "head.b2": zeros(task.answers),
        }
        self.critic = FCCritic(d, d, critic_hidden or d, rng, name="critic")
        self.params.update(self.critic.params)

    # ------------------------------------------------------------------
    def _visual_mu(self, x_flat: Tensor) -> Tensor:
        return T.tanh(T.add(T.matmul(x_flat, self.params["vis.w"]), self.params["vis.b"]))

    def _linguistic_mu(self, onehot_flat: Tensor) -> Tensor:
        emb = T.matmul(onehot_flat, self.params["lang.table"])
        return T.tanh(T.add(T.matmul(emb, self.params["lang.w"]), self.params["lang.b"]))

    def encode(self, batch: Sequence[SyntheticExample], train: bool,
               noise_v: np.ndarray | None = None,
               noise_l: np.ndarray | None = None) -> EncodedBatch:
        """Token conditionals plus pooled global vectors for one batch.

        In training mode representations are reparameterized draws using the
        supplied standard-normal noise; in evaluation mode they equal the
        conditional means and the pass is deterministic.
        """
        n = len(batch)
        if n == 0:
            raise ValueError("encode: empty batch")
        cfg = self.task
        k, ell, d = cfg.visual_tokens, cfg.question_tokens, self.d

        x_v = Tensor(np.concatenate([ex.x_v for ex in batch], axis=0))
        mu_v = self._visual_mu(x_v)
        onehot = np.zeros((n * ell, cfg.vocab))
        tokens = np.array([tok for ex in batch for tok in ex.x_l])
        onehot[np.arange(n * ell), tokens] = 1.0
        mu_l = self._linguistic_mu(Tensor(onehot))

        lv_v = self.params["vis.log_var"]
        lv_l = self.params["lang.log_var"]
        if train:
            if noise_v is None or noise_l is None:
                raise ValueError("training-mode encode needs noise draws")
            std_v = T.exp(T.scalar_mul(lv_v, 0.5))
            std_l = T.exp(T.scalar_mul(lv_l, 0.5))
            s_v = T.add(mu_v, T.elementwise_mul(std_v, Tensor(noise_v)))
            s_l = T.add(mu_l, T.elementwise_mul(std_l, Tensor(noise_l)))
        else:
            s_v, s_l = mu_v, mu_l

        enc_v = TokenConditionals(mu=mu_v, log_var=lv_v, samples=s_v,
                                  n_examples=n, tokens_per_example=k)
        enc_l = TokenConditionals(mu=mu_l, log_var=lv_l, samples=s_l,
                                  n_examples=n, tokens_per_example=ell)

        pooled_v = T.add(T.matmul(T.reshape(s_v, (n, k * d)), self.params["pool_v.w"]),
                         self.params["pool_v.b"])
        pooled_l = T.add(T.matmul(T.reshape(s_l, (n, ell * d)), self.params["pool_l.w"]),
                         self.params["pool_l.b"])
        return EncodedBatch(v=enc_v, l=enc_l, pooled_v=pooled_v, pooled_l=pooled_l)

    def predict_logits(self, enc: EncodedBatch) -> Tensor:
        fused = T.concat([enc.pooled_v, enc.pooled_l], axis=1)
        h = T.tanh(T.add(T.matmul(fused, self.params["head.w1"]), self.params["head.b1"]))
        return T.add(T.matmul(h, self.params["head.w2"]), self.params["head.b2"])


def build_loss(model: ToyModel, batch: Sequence[SyntheticExample], cfg: CIBConfig,
               noise_v: np.ndarray, noise_l: np.ndarray,
               mine_ema: float | None = None):
    """One full forward pass: encode, predict, estimate all regularizer terms,
    assemble the minimized loss.  Deterministic given the noise draws."""
    enc = model.encode(batch, train=True, noise_v=noise_v, noise_l=noise_l)
    logits = model.predict_logits(enc)
    vqa = O.vqa_loss(logits, [ex.y for ex in batch])
    reg, new_ema = O.regularizer(enc.v, enc.l, enc.pooled_v, enc.pooled_l,
                                 model.critic, cfg, mine_ema=mine_ema)
    loss = O.cib_loss(vqa, reg, cfg.beta)
    return loss, vqa, reg, new_ema


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    total_steps: int = 0

    def epoch_losses(self) -> list[float]:
        return [row["loss"] for row in self.history]


def train_model(model: ToyModel, dataset: Dataset, cfg: CIBConfig) -> TrainResult:
    """Run the training loop over the train split.

    Per step: encode with fresh reparameterization noise, predict, estimate
    every regularizer term, assemble the loss, and update all parameter
    groups together.  Aborts with the offending step index if the loss stops
    being finite.
    """
    train = dataset["train"]
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = effective_warmup(cfg.warmup_steps, total_steps)
    schedule = WarmupLinearDecay(cfg.learning_rate, warmup, total_steps)
    opt = MomentumSGD(model.params, lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(42,)))

    result = TrainResult()
    mine_ema: float | None = None
    step = 0
    kdim = (model.task.visual_tokens, model.task.question_tokens)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "vqa": 0.0, "i_xv_tv": 0.0, "i_xl_tl": 0.0,
                "i_tv_tl": 0.0, "d_skl": 0.0, "reg_total": 0.0}
        for b0 in range(0, n, cfg.batch_size):
            batch = [train[i] for i in order[b0:b0 + cfg.batch_size]]
            noise_v = rng.standard_normal((len(batch) * kdim[0], model.d))
            noise_l = rng.standard_normal((len(batch) * kdim[1], model.d))
            try:
                loss, vqa, reg, mine_ema = build_loss(model, batch, cfg,
                                                      noise_v, noise_l, mine_ema)
                value = loss.item()
            except T.DomainError as e:
                raise TrainingDiverged(step, float("nan")) from e
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            opt.step(T.backward(loss), lr=schedule.lr_at(step))
            step += 1
            sums["loss"] += value
            sums["vqa"] += vqa.item()
            sums["i_xv_tv"] += reg.i_xv_tv
            sums["i_xl_tl"] += reg.i_xl_tl
            sums["i_tv_tl"] += reg.i_tv_tl
            sums["d_skl"] += reg.d_skl
            sums["reg_total"] += reg.total
        row = {k: v / steps_per_epoch for k, v in sums.items()}
        row["epoch"] = epoch
        result.history.append(row)
    result.total_steps = step
    return result


def predict_answers(model: ToyModel, examples: Sequence[SyntheticExample],
                    batch_size: int = 256) -> np.ndarray:
    """Deterministic evaluation-mode argmax predictions."""
    preds = []
    with T.no_grad():
        for b0 in range(0, len(examples), batch_size):
            chunk = examples[b0:b0 + batch_size]
            logits = model.predict_logits(model.encode(chunk, train=False))
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def accuracy(model: ToyModel, examples: Sequence[SyntheticExample]) -> float:
    preds = predict_answers(model, examples)
    gold = np.array([ex.y for ex in examples])
    return float(np.mean(preds == gold))


def mi_snapshot(model: ToyModel, examples: Sequence[SyntheticExample],
                cfg: CIBConfig, batch_size: int = 256) -> RegularizerBreakdown:
    """Evaluation-mode regularizer terms on a split (representations at the
    conditional means), averaged over batches."""
    parts = np.zeros(5)
    count = 0
    with T.no_grad():
        for b0 in range(0, len(examples), batch_size):
            chunk = examples[b0:b0 + batch_size]
            if len(chunk) < 2:
                continue
            enc = model.encode(chunk, train=False)
            reg, _ = O.regularizer(enc.v, enc.l, enc.pooled_v, enc.pooled_l,
                                   model.critic, cfg)
            parts += np.array([reg.i_xv_tv, reg.i_xl_tl, reg.i_tv_tl,
                               reg.d_skl, reg.total])
            count += 1
    parts = parts / max(count, 1)
    return RegularizerBreakdown(i_xv_tv=parts[0], i_xl_tl=parts[1], i_tv_tl=parts[2],
                                d_skl=parts[3], total=parts[4], variant=cfg.variant)
