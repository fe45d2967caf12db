"""The full pipeline: text encoding, frame selection, refinement, heads.

The dense visual stream is frozen input; everything trainable lives here.
The open-ended answer head consumes only the video CLS token, so question
information can reach an answer solely through the conditioning it applied
inside the selection and refinement stacks.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import NUM_VALUES, FrameBundle, Vocab
from .nn import LayerNorm, Linear, Mlp, Module, SelfAttention, init_normal
from .objectives import answer_cross_entropy  # noqa: F401  (re-exported for callers)
from .refiner import RefinerParams, refine
from .sampler import (
    SamplerParams,
    apply_mask,
    gumbel_softmax,
    selection_logits,
    sparse_sample,
    straight_through_mask,
    uniform_select,
)
from .tensor import Tensor, load_tensor, save_tensor


def derive_init_seed(seed: int) -> int:
    ss = np.random.SeedSequence([abs(int(seed)), 0x1217])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class TextEncoder(Module):
    """Frozen word embeddings under a small trainable encoder.

    One pre-norm attention/MLP block over [CLS, tokens] with learned position
    embeddings; the CLS output conditions the visual pipeline and the token
    outputs feed the masked-word loss.
    """

    def __init__(self, vocab: Vocab, dim: int, heads: int, rng: np.random.Generator,
                 max_len: int = 16, mlp_ratio: int = 4):
        self.embed = Tensor(vocab.embeddings)  # frozen lookup table
        self.pos = init_normal(rng, (max_len, dim))
        self.cls = init_normal(rng, (1, dim))
        self.ln_attn = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)
        self.max_len = max_len

    def __call__(self, token_ids: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Returns (t_cls (1, D), token outputs (M, D))."""
        m = len(token_ids)
        if m == 0:
            raise ValueError("empty text condition")
        if m > self.max_len:
            raise ValueError(f"text length {m} exceeds max {self.max_len}")
        emb = T.take(self.embed, list(token_ids), axis=0)
        x = T.concat([self.cls, emb + T.take(self.pos, np.arange(m), axis=0)], axis=0)
        x = x + self.attn(self.ln_attn(x))
        x = x + self.mlp(self.ln_mlp(x))
        return T.take(x, [0], axis=0), T.take(x, np.arange(1, m + 1), axis=0)


class PlainFusionBlock(Module):
    """Standard pre-norm transformer block (joint attention, no gating)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln_attn = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln_attn(x))
        x = x + self.mlp(self.ln_mlp(x))
        return x


class PlainFusion(Module):
    """Baseline head-end: one joint transformer over [CLS, text, patches].

    Text tokens sit in the same sequence as the visual tokens, so unlike the
    gated refiner this module fuses language directly into the representation
    the heads consume.
    """

    def __init__(self, dim: int, heads: int, k_select: int, n_patches: int,
                 depth: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.cls_init = init_normal(rng, (1, dim), 0.02)
        self.spatial_table = init_normal(rng, (n_patches, dim), 0.02)
        self.temporal_table_k = init_normal(rng, (k_select, dim), 0.02)
        self.blocks = [PlainFusionBlock(dim, heads, rng, mlp_ratio) for _ in range(depth)]
        self.dim = dim
        self.k_select = k_select
        self.n_patches = n_patches

    def __call__(self, v_patch_k: Tensor, text_rows: Tensor) -> Tensor:
        k, p, d = v_patch_k.shape
        spatial = T.reshape(self.spatial_table, (1, p, d))
        temporal = T.reshape(self.temporal_table_k, (k, 1, d))
        body = T.reshape(v_patch_k + spatial + temporal, (k * p, d))
        x = T.concat([self.cls_init, text_rows, body], axis=0)
        for block in self.blocks:
            x = block(x)
        return T.reshape(T.take(x, [0], axis=0), (d,))


class VideoQAModel(Module):
    """Composes the configured pipeline and owns every trainable parameter."""

    def __init__(self, cfg: RunConfig, vocab: Vocab, rng: np.random.Generator):
        cfg.validate()
        if vocab.dim != cfg.dim:
            raise ValueError("vocab dimension does not match config")
        self.cfg = cfg
        self.vocab = vocab
        n_patches = cfg.n_grid * cfg.n_grid

        self.text_encoder = TextEncoder(vocab, cfg.dim, cfg.heads, rng,
                                        max_len=cfg.text_max_len, mlp_ratio=cfg.mlp_ratio)
        self.sampler = None
        if cfg.sampler in ("sparse", "soft"):
            self.sampler = SamplerParams(cfg.dim, cfg.heads, cfg.n_frames, cfg.k_select,
                                         cfg.depth, rng, n_max=cfg.temporal_capacity,
                                         fusion=cfg.fusion, tau_g=cfg.tau_g)
        self.refiner = None
        self.plain = None
        if cfg.refiner == "gated":
            self.refiner = RefinerParams(cfg.dim, cfg.heads, cfg.k_select, n_patches,
                                         cfg.depth, rng, fusion=cfg.fusion)
        else:
            self.plain = PlainFusion(cfg.dim, cfg.heads, cfg.k_select, n_patches,
                                     cfg.depth, rng, mlp_ratio=cfg.mlp_ratio)

        self.vtm_head = Linear(cfg.dim, 2, rng)
        self.answer_head = Mlp(cfg.dim, cfg.answer_head_hidden, rng, out_dim=NUM_VALUES)
        self.mlm_head = Mlp(2 * cfg.dim, 2 * cfg.dim, rng, out_dim=len(vocab))

        if cfg.init_std != 0.02:
            # One deterministic re-draw of every projection matrix; positional
            # tables and norm parameters keep the standard small init.
            redraw = np.random.default_rng(derive_init_seed(cfg.seed))
            for name, p in self.named_parameters():
                if name.endswith(".w"):
                    p.data = redraw.normal(0.0, cfg.init_std, size=p.data.shape)

    # -- forward paths ---------------------------------------------------

    def encode_text(self, token_ids: Sequence[int]) -> tuple[Tensor, Tensor]:
        return self.text_encoder(token_ids)

    def encode_text_tokens(self, token_ids: Sequence[int]) -> Tensor:
        """Token outputs only; the masked-word loss consumes these."""
        return self.text_encoder(token_ids)[1]

    def select(self, bundle: FrameBundle, t_cls: Tensor, rng_seed: int,
               surrogate: bool = False) -> tuple[Tensor, np.ndarray]:
        """Pick K frames per the configured sampler.

        Returns the selected patches (K, P, D) and the nominal frame indices.
        With ``surrogate=True`` a sparse sampler applies the soft distribution
        instead of the straight-through mask: the forward becomes the smooth
        function whose gradient the straight-through estimator copies, which
        is the branch the finite-difference oracle can certify.
        """
        cfg = self.cfg
        if cfg.sampler == "sparse" and not surrogate:
            selected, mask = sparse_sample(bundle, t_cls, self.sampler, rng_seed)
            return selected, mask.indices
        if cfg.sampler in ("soft", "sparse"):
            logits = selection_logits(Tensor(bundle.v_cls), t_cls, self.sampler)
            y_soft = gumbel_softmax(logits, self.sampler.tau_g, rng_seed)
            return apply_mask(y_soft, bundle), np.argmax(y_soft.data, axis=-1)
        mask = uniform_select(cfg.n_frames, cfg.k_select)
        return apply_mask(mask.hard, bundle), mask.indices

    def represent(self, bundle: FrameBundle, token_ids: Sequence[int], rng_seed: int,
                  surrogate: bool = False) -> dict:
        """Full pipeline for one (video, text) pair.

        Returns the video CLS ``v_star`` (D,), the text CLS ``t_cls`` (1, D),
        text token outputs, and the selected frame indices.
        """
        t_cls, t_tokens = self.encode_text(token_ids)
        selected, indices = self.select(bundle, t_cls, rng_seed, surrogate=surrogate)
        if self.refiner is not None:
            v_star = refine(selected, t_cls, self.refiner)
        else:
            text_rows = T.concat([t_cls, t_tokens], axis=0)
            v_star = self.plain(selected, text_rows)
        return {"v_star": v_star, "t_cls": t_cls, "t_tokens": t_tokens,
                "indices": indices}

    # -- checkpointing -----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValueError(f"checkpoint/model parameter mismatch: {missing[:6]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = arr


def save_checkpoint(directory, model: VideoQAModel, step: int,
                    optimizer_state: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(model.cfg.to_json())
    (directory / "meta.json").write_text(json.dumps({"step": step, "format": 1}))
    for name, arr in model.state_dict().items():
        save_tensor(directory / "params" / f"{name}.tdmp", arr)
    if optimizer_state is not None:
        opt_dir = directory / "opt"
        opt_dir.mkdir(exist_ok=True)
        (opt_dir / "opt.json").write_text(json.dumps({"t": optimizer_state["t"]}))
        for name, (m, v) in optimizer_state["moments"].items():
            save_tensor(opt_dir / f"{name}.m.tdmp", m)
            save_tensor(opt_dir / f"{name}.v.tdmp", v)


def load_checkpoint(directory) -> tuple[VideoQAModel, int, dict | None]:
    directory = Path(directory)
    cfg = RunConfig.from_file(directory / "config.json")
    meta = json.loads((directory / "meta.json").read_text())
    vocab = Vocab(cfg.vocab_seed, cfg.dim)
    model = VideoQAModel(cfg, vocab, np.random.default_rng(cfg.seed))
    state = {}
    for path in sorted((directory / "params").glob("*.tdmp")):
        state[path.name[:-5]] = load_tensor(path)
    model.load_state_dict(state)
    optimizer_state = None
    opt_dir = directory / "opt"
    if opt_dir.exists():
        t = json.loads((opt_dir / "opt.json").read_text())["t"]
        moments = {}
        for m_path in sorted(opt_dir.glob("*.m.tdmp")):
            name = m_path.name[:-7]
            moments[name] = (load_tensor(m_path), load_tensor(opt_dir / f"{name}.v.tdmp"))
        optimizer_state = {"t": t, "moments": moments}
    return model, meta["step"], optimizer_state
