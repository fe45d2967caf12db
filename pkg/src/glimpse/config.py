"""Run configuration: one flat dataclass, JSON in, CLI overrides on top."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

SAMPLERS = ("sparse", "uniform", "soft", "none")
FUSIONS = ("la_gate", "cross_attention")
REFINERS = ("gated", "plain")


@dataclass
class RunConfig:
    # architecture sizes (reference scale; desk runs override)
    n_frames: int = 100          # dense frames per video
    k_select: int = 16           # frames kept by the sampler
    depth: int = 3               # stacked blocks in sampler and refiner
    dim: int = 1024              # hidden size
    heads: int = 8               # attention heads everywhere
    n_grid: int = 14             # patch grid side; n_grid^2 patches per frame
    n_max: int = 0               # temporal table capacity; 0 means n_frames

    # temperatures
    tau_g: float = 1.0           # selection sampling temperature
    tau_g_anneal: bool = False   # exponential anneal tau_g -> tau_g_final
    tau_g_final: float = 0.5
    tau: float = 0.07            # contrastive temperature

    # module switches (ablation grid axes)
    sampler: str = "sparse"
    fusion: str = "la_gate"
    refiner: str = "gated"

    # loss weights
    w_vtm: float = 1.0
    w_cl: float = 1.0
    w_vgmlm: float = 1.0
    w_qa: float = 1.0            # answer-head cross-entropy, matched items only

    # optimization
    lr: float = 3e-5
    weight_decay: float = 1e-3
    warmup: float = 0.1          # fraction of steps spent ramping up
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    exchange_prob: float = 0.5
    mask_rate: float = 0.15
    init_std: float = 0.02       # projection-weight init scale
    soft_warmup: float = 0.0     # fraction of steps applying the soft selection
                                 # branch before switching to straight-through

    # synthetic world / minor sizes
    vocab_seed: int = 7
    mlp_ratio: int = 4
    answer_hidden: int = 0       # open-ended head hidden width; 0 means 2*dim
    text_max_len: int = 16

    def validate(self) -> "RunConfig":
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.k_select > self.n_frames:
            raise ValueError("k_select must not exceed n_frames")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.tau_g <= 0 or self.tau <= 0:
            raise ValueError("temperatures must be positive")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.refiner not in REFINERS:
            raise ValueError(f"refiner must be one of {REFINERS}")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warmup fraction must be in [0, 1)")
        if not 0.0 <= self.soft_warmup <= 1.0:
            raise ValueError("soft_warmup fraction must be in [0, 1]")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.n_max and self.n_max < self.n_frames:
            raise ValueError("n_max must be >= n_frames")
        return self

    @property
    def temporal_capacity(self) -> int:
        return self.n_max or self.n_frames

    @property
    def answer_head_hidden(self) -> int:
        return self.answer_hidden or 2 * self.dim

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values).validate()

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()


# Small sizes for the end-to-end synthetic task: big enough to exercise the
# divided attention and multi-head gating, small enough for CPU minutes.
DESK_OVERRIDES = dict(n_frames=30, k_select=4, depth=2, dim=32, heads=2, n_grid=2)

# Tiny sizes for the finite-difference suite, where every parameter element
# costs two full forward passes.
GRADCHECK_OVERRIDES = dict(n_frames=6, k_select=2, depth=1, dim=16, heads=2, n_grid=2)


def desk_config(**overrides) -> RunConfig:
    merged = {**DESK_OVERRIDES, **overrides}
    return RunConfig(**merged).validate()


def table_variant(config: RunConfig, row: str) -> RunConfig:
    """Module-ablation rows: which of sampler/refiner/gating is active.

    (a) no sampler, plain fusion; (b) uniform frames + refiner; (c) soft
    selection + refiner; (d) sampler + plain fusion; (e) full with
    cross-attention instead of gates; (f) the full model.
    """
    rows = {
        "a": dict(sampler="none", refiner="plain"),
        "b": dict(sampler="uniform", refiner="gated", fusion="la_gate"),
        "c": dict(sampler="soft", refiner="gated", fusion="la_gate"),
        "d": dict(sampler="sparse", refiner="plain", fusion="la_gate"),
        "e": dict(sampler="sparse", refiner="gated", fusion="cross_attention"),
        "f": dict(sampler="sparse", refiner="gated", fusion="la_gate"),
    }
    if row not in rows:
        raise ValueError(f"unknown ablation row {row!r}")
    return config.replace(**rows[row])


def loss_variant(config: RunConfig, row: str) -> RunConfig:
    """Pretraining-loss rows as (vtm, cl, vgmlm) weight switches."""
    rows = {
        "a": (0.0, 0.0, 0.0),
        "b": (0.0, 0.0, 1.0),
        "c": (1.0, 0.0, 0.0),
        "d": (0.0, 1.0, 0.0),
        "e": (1.0, 0.0, 1.0),
        "f": (1.0, 1.0, 1.0),
    }
    if row not in rows:
        raise ValueError(f"unknown loss row {row!r}")
    w_vtm, w_cl, w_vgmlm = rows[row]
    return config.replace(w_vtm=w_vtm, w_cl=w_cl, w_vgmlm=w_vgmlm)
