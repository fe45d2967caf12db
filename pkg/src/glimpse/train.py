"""Training loop: decoupled-weight-decay Adam, linear warmup/decay schedule,
deterministic seeding, JSON-lines metrics, and bit-exact checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Episode, Vocab
from .model import VideoQAModel, save_checkpoint
from .objectives import (
    MATCHED,
    UNMATCHED,
    answer_cross_entropy,
    contrastive_loss,
    exchange_annotations,
    make_batch,
    mask_tokens,
    total_loss,
    vg_mlm_loss,
    vtm_loss,
)
from .tensor import Tensor


class NumericFailure(RuntimeError):
    """Non-finite loss; carries the offending term and step for the exit path."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite loss term '{term}' at step {step}")
        self.term = term
        self.step = step


def derive_seed(*keys: int) -> int:
    """Deterministic, well-mixed child seed from integer keys."""
    ss = np.random.SeedSequence([abs(int(k)) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def episode_noise_seed(cfg_seed: int, episode_seed: int, step: int) -> int:
    """Selection-noise seed tied to the episode (xor), then mixed with the step,
    so batch parallelism or reordering cannot change any draw."""
    return derive_seed(cfg_seed ^ episode_seed, step)


class AdamW:
    """Adam with decoupled weight decay on the raw parameters."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.named_params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            m, v = self.moments[name]
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * (p.grad * p.grad)
            self.moments[name] = (m, v)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def state(self) -> dict:
        return {"t": self.t, "moments": self.moments}

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        for name in self.moments:
            if name in state["moments"]:
                self.moments[name] = state["moments"][name]


def lr_at(cfg: RunConfig, step: int) -> float:
    """Linear warmup to cfg.lr, then linear decay to zero at cfg.steps."""
    warm = max(1, int(round(cfg.warmup * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    return cfg.lr * max(0.0, cfg.steps - step) / span


def tau_g_at(cfg: RunConfig, step: int) -> float:
    if not cfg.tau_g_anneal:
        return cfg.tau_g
    frac = step / max(1, cfg.steps - 1)
    return cfg.tau_g * (cfg.tau_g_final / cfg.tau_g) ** frac


def _finite_or_raise(value: Tensor, term: str, step: int) -> Tensor:
    if not np.isfinite(value.data).all():
        raise NumericFailure(term, step)
    return value


def train_step(model: VideoQAModel, optimizer: AdamW, episodes: Sequence[Episode],
               cfg: RunConfig, step: int) -> dict:
    """One optimization step; returns the metrics record for the step."""
    if model.sampler is not None:
        model.sampler.tau_g = tau_g_at(cfg, step)
    rng = np.random.default_rng(derive_seed(cfg.seed, 11, step))
    take = min(cfg.batch_size, len(episodes))
    idx = rng.choice(len(episodes), size=take, replace=False)
    batch = make_batch([episodes[i] for i in idx])
    exchange_annotations(batch, cfg.exchange_prob, derive_seed(cfg.seed, 13, step))

    # Early steps may run the soft selection branch: its gradient is exactly
    # what the straight-through estimator propagates, but its forward carries
    # a little of every frame, so the refiner and heads see event content
    # before the selector has learned to find it.
    surrogate = cfg.soft_warmup > 0 and step < cfg.soft_warmup * cfg.steps

    try:
        reps = []
        for item in batch:
            seed = episode_noise_seed(cfg.seed, item.episode.seed, step)
            reps.append(model.represent(item.episode.bundle, item.annotation, seed,
                                        surrogate=surrogate))
        dim = cfg.dim
        v_batch = T.concat([T.reshape(r["v_star"], (1, dim)) for r in reps], axis=0)
        t_batch = T.concat([r["t_cls"] for r in reps], axis=0)
        labels = [MATCHED if item.matched else UNMATCHED for item in batch]
        flags = [item.matched for item in batch]

        l_vtm = vtm_loss(v_batch, labels, model.vtm_head) if cfg.w_vtm else Tensor(0.0)
        l_cl = (contrastive_loss(v_batch, t_batch, flags, cfg.tau)
                if cfg.w_cl and any(flags) else Tensor(0.0))

        matched_ids = [j for j, item in enumerate(batch) if item.matched]
        l_vgmlm = Tensor(0.0)
        if cfg.w_vgmlm and matched_ids:
            parts = []
            for j in matched_ids:
                masked = mask_tokens(batch[j].annotation,
                                     derive_seed(cfg.seed, 19, step, j),
                                     cfg.mask_rate, vocab=model.vocab)
                parts.append(vg_mlm_loss(masked, model.encode_text_tokens,
                                         reps[j]["v_star"], model.mlm_head))
            total_part = parts[0]
            for part in parts[1:]:
                total_part = total_part + part
            l_vgmlm = total_part * (1.0 / len(parts))

        l_qa = Tensor(0.0)
        if cfg.w_qa and matched_ids:
            v_matched = T.concat([T.reshape(reps[j]["v_star"], (1, dim))
                                  for j in matched_ids], axis=0)
            answers = [batch[j].episode.answer for j in matched_ids]
            l_qa = answer_cross_entropy(v_matched, answers, model.answer_head)
    except ValueError as err:
        if "non-finite" in str(err):  # overflowed activations surface here
            raise NumericFailure("forward", step) from err
        raise

    for term, value in (("vtm", l_vtm), ("cl", l_cl), ("vgmlm", l_vgmlm), ("qa", l_qa)):
        _finite_or_raise(value, term, step)
    pretrain = total_loss(l_vtm, l_vgmlm, l_cl, (cfg.w_vtm, cfg.w_vgmlm, cfg.w_cl))
    total = _finite_or_raise(pretrain + l_qa * cfg.w_qa, "total", step)

    lr = lr_at(cfg, step)
    optimizer.zero_grad()
    total.backward()
    optimizer.step(lr)
    return {
        "step": step,
        "l_vtm": float(l_vtm.data),
        "l_cl": float(l_cl.data),
        "l_vgmlm": float(l_vgmlm.data),
        "l_qa": float(l_qa.data),
        "l_total": float(total.data),
        "lr": lr,
    }


def train(cfg: RunConfig, episodes: Sequence[Episode], out_dir=None,
          metrics_stream: IO[str] | None = None, resume: dict | None = None,
          checkpoint_every: int = 0) -> tuple[VideoQAModel, AdamW, list[dict]]:
    """Run the configured number of steps over the episode pool.

    ``resume`` is the (model_state, optimizer_state, step) payload produced by
    checkpoint loading; training continues from the recorded step with the
    same seed streams, so a resumed run emits the same metrics as an
    uninterrupted one.
    """
    vocab = Vocab(cfg.vocab_seed, cfg.dim)
    model = VideoQAModel(cfg, vocab, np.random.default_rng(cfg.seed))
    optimizer = AdamW(list(model.named_parameters()), cfg.weight_decay)
    start_step = 0
    if resume is not None:
        model.load_state_dict(resume["model_state"])
        if resume.get("optimizer_state"):
            optimizer.load_state(resume["optimizer_state"])
        start_step = resume["step"]

    records = []
    for step in range(start_step, cfg.steps):
        record = train_step(model, optimizer, episodes, cfg, step)
        records.append(record)
        if metrics_stream is not None:
            metrics_stream.write(json.dumps(record) + "\n")
        if out_dir and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(Path(out_dir), model, step + 1, optimizer.state())
    if out_dir:
        save_checkpoint(Path(out_dir), model, cfg.steps, optimizer.state())
    return model, optimizer, records
