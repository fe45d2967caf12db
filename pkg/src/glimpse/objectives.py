"""Pretraining losses, the annotation-exchange and token-masking procedures,
and the answer heads.

Matching loss: binary classification of matched vs exchanged pairs from the
video CLS alone.  Contrastive constraint: per-row softmax over cosine
similarities at a fixed temperature, counting only matched rows.  Masked-word
loss: predict masked tokens from the stop-gradiented masked-sentence tokens
combined with the video CLS, which makes the visual pathway carry the signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Episode, Vocab
from .nn import Linear, Mlp
from .tensor import Tensor

UNMATCHED, MATCHED = 0, 1  # label convention for the matching head


@dataclass
class BatchItem:
    """One training pair: an episode plus its (possibly swapped) annotation."""

    episode: Episode
    annotation: list[int]
    matched: bool = True
    exchanged_with: int | None = None


def make_batch(episodes: Sequence[Episode]) -> list[BatchItem]:
    return [BatchItem(ep, list(ep.question_tokens)) for ep in episodes]


def exchange_annotations(batch: list[BatchItem], p: float, rng_seed: int) -> list[BatchItem]:
    """Swap annotations between randomly flagged pairs.

    Each item is flagged independently with probability ``p``; flagged items
    are paired in shuffled order and swap annotations (an involution).  A
    leftover odd item reverts to matched.  The multiset of annotations in the
    batch is preserved.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("exchange probability must be in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    flags = rng.random(len(batch)) < p
    chosen = np.flatnonzero(flags)
    rng.shuffle(chosen)
    if len(chosen) % 2:
        chosen = chosen[:-1]
    for a, b in zip(chosen[0::2], chosen[1::2]):
        ia, ib = int(a), int(b)
        batch[ia].annotation, batch[ib].annotation = batch[ib].annotation, batch[ia].annotation
        batch[ia].matched = batch[ib].matched = False
        batch[ia].exchanged_with = ib
        batch[ib].exchanged_with = ia
    return batch


def _onehot(indices, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), np.asarray(indices, dtype=int)] = 1.0
    return out


def vtm_loss(v_cls_star_batch: Tensor, labels: Sequence[int], head: Linear) -> Tensor:
    """Mean negative log-likelihood of the match labels under the linear head."""
    if v_cls_star_batch.ndim != 2:
        raise ValueError("expected a (B, D) batch of video CLS tokens")
    logits = head(v_cls_star_batch)                       # (B, 2)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.tsum(logp * Tensor(_onehot(labels, 2)), axis=-1)
    return -T.tmean(picked)


def _unit_rows(x: Tensor) -> Tensor:
    norm_sq = T.tsum(x * x, axis=-1, keepdims=True)
    if not (norm_sq.data > 0.0).all():
        raise ValueError("zero-norm vector")
    return x / T.sqrt(norm_sq)


def contrastive_loss(v: Tensor, t: Tensor, matched: Sequence[bool], tau: float) -> Tensor:
    """Alignment constraint over matched pairs only.

    Each matched row i contributes -log softmax_j(cos(v_i, t_j)/tau) at j=i;
    exchanged rows are dropped from the outer sum but stay in every
    denominator.  With no matched rows the loss is zero (with a warning),
    since there is nothing to align.
    """
    if tau <= 0:
        raise ValueError("nonpositive temperature")
    if v.shape != t.shape or v.ndim != 2:
        raise ValueError("contrastive_loss expects matching (B, D) batches")
    matched = np.asarray(matched, dtype=bool)
    if not matched.any():
        warnings.warn("contrastive_loss: no matched pairs in batch", stacklevel=2)
        return Tensor(0.0)
    sim = T.matmul(_unit_rows(v), T.transpose(_unit_rows(t), (1, 0))) * (1.0 / tau)
    logp = T.log_softmax(sim, axis=-1)                    # row i over all j
    diag_mask = np.diag(matched.astype(np.float64))
    return -T.tsum(logp * Tensor(diag_mask))


@dataclass
class MaskedText:
    """A masked token sequence plus everything needed to score predictions."""

    token_ids: list[int]
    mask_positions: list[int]
    original_ids: list[int]
    replacements: list[str] = field(default_factory=list)  # mask | random | kept


def mask_tokens(token_ids: Sequence[int], rng_seed: int, mask_rate: float = 0.15,
                *, vocab: Vocab) -> MaskedText:
    """Standard masked-language masking with the 80/10/10 replacement split.

    Non-special tokens are masked independently at ``mask_rate``; if nothing
    is drawn one position is forced, so downstream losses always have a
    target.  Masked positions become the mask token 80% of the time, a random
    non-special vocab token 10%, and stay unchanged 10%.
    """
    if not token_ids:
        raise ValueError("cannot mask an empty sequence")
    rng = np.random.default_rng(rng_seed)
    maskable = [i for i, t in enumerate(token_ids) if t not in vocab.special_ids]
    if not maskable:
        raise ValueError("sequence has no maskable tokens")
    draws = rng.random(len(maskable)) < mask_rate
    positions = [pos for pos, hit in zip(maskable, draws) if hit]
    if not positions:
        positions = [maskable[int(rng.integers(len(maskable)))]]

    candidates = [i for i in range(len(vocab)) if i not in vocab.special_ids]
    new_ids = list(token_ids)
    originals, hows = [], []
    for pos in positions:
        originals.append(int(token_ids[pos]))
        roll = rng.random()
        if roll < 0.8:
            new_ids[pos] = vocab.mask_id
            hows.append("mask")
        elif roll < 0.9:
            new_ids[pos] = candidates[int(rng.integers(len(candidates)))]
            hows.append("random")
        else:
            hows.append("kept")
    return MaskedText(token_ids=new_ids, mask_positions=positions,
                      original_ids=originals, replacements=hows)


def vg_mlm_loss(masked: MaskedText, encode_tokens: Callable[[Sequence[int]], Tensor],
                v_cls_star: Tensor, mlp_head: Mlp) -> Tensor:
    """Predict masked words from their stop-gradiented encodings plus the video CLS.

    ``encode_tokens`` maps token ids to per-token outputs (M, D) on the live
    graph.  The masked-token rows are detached before the head, so the text
    encoder receives no gradient from this loss, while the video CLS (and the
    whole visual pipeline behind it) does.
    """
    if not masked.mask_positions:
        raise ValueError("mask_tokens must force >=1 masked position")
    tokens = encode_tokens(masked.token_ids)
    w_masked = T.stop_gradient(T.take(tokens, masked.mask_positions, axis=0))  # (I, D)
    count = len(masked.mask_positions)
    dim = v_cls_star.size
    v_row = T.reshape(v_cls_star, (1, dim))
    v_tiled = T.take(v_row, [0] * count, axis=0)                               # (I, D)
    logits = mlp_head(T.concat([w_masked, v_tiled], axis=1))                   # (I, V)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.tsum(logp * Tensor(_onehot(masked.original_ids, logits.shape[1])), axis=-1)
    return -T.tmean(picked)


def total_loss(l_vtm: Tensor, l_vgmlm: Tensor, l_cl: Tensor,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three pretraining terms (defaults are unweighted)."""
    terms = {"vtm": l_vtm, "vgmlm": l_vgmlm, "cl": l_cl}
    for name, term in terms.items():
        if not np.isfinite(term.data).all():
            raise ValueError(f"non-finite loss term: {name}")
    return l_vtm * weights[0] + l_vgmlm * weights[1] + l_cl * weights[2]


def answer_open_ended(v_cls_star: Tensor, mlp_head: Mlp) -> int:
    """Answer index from the video CLS alone; ties resolve to the lowest index.

    No text embedding enters this head: the question can steer the answer only
    through the conditioning it already applied inside the visual pipeline.
    """
    logits = mlp_head(T.reshape(v_cls_star, (1, v_cls_star.size)))
    return int(np.argmax(logits.data[0]))


def answer_multichoice(candidate_v_cls_stars: Tensor, vtm_head: Linear) -> int:
    """Pick the candidate whose matched logit is largest (lowest index on ties)."""
    if candidate_v_cls_stars.ndim != 2 or candidate_v_cls_stars.shape[0] < 1:
        raise ValueError("expected a (C, D) candidate batch")
    logits = vtm_head(candidate_v_cls_stars)
    return int(np.argmax(logits.data[:, MATCHED]))


def answer_cross_entropy(v_cls_star_batch: Tensor, answers: Sequence[int],
                         mlp_head: Mlp) -> Tensor:
    """Cross-entropy for training the open-ended head on a (B, D) batch."""
    logits = mlp_head(v_cls_star_batch)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.tsum(logp * Tensor(_onehot(answers, logits.shape[1])), axis=-1)
    return -T.tmean(picked)
