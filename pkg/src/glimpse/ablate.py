"""Variant grids: train and evaluate configurations side by side.

All variants of a grid share the same seed and step budget, so rows are
comparable; episode pools regenerate from seeds, so no dataset directory is
needed.
"""

from __future__ import annotations

from .config import RunConfig, loss_variant, table_variant
from .data import Vocab, gen_episode
from .evaluate import evaluate_model
from .train import train

MODULE_ROWS = ("a", "b", "c", "d", "e", "f")
FRAME_SWEEP_K = (4, 8, 16, 32)
N_SWEEP = (30, 90)


def _episode_pool(cfg: RunConfig, base_seed: int, count: int):
    vocab = Vocab(cfg.vocab_seed, cfg.dim)
    return [gen_episode(base_seed ^ i, cfg.n_frames, cfg.n_grid, cfg.dim, vocab)
            for i in range(count)]


def _run_variant(label: str, cfg: RunConfig, train_episodes: int,
                 eval_episodes: int, data_seed: int) -> dict:
    train_pool = _episode_pool(cfg, data_seed, train_episodes)
    eval_pool = _episode_pool(cfg, data_seed ^ 0x5EED, eval_episodes)
    model, _, records = train(cfg, train_pool)
    metrics = evaluate_model(model, eval_pool, eval_seed=cfg.seed + 77,
                             with_mcq=False)
    return {
        "variant": label,
        "sampler": cfg.sampler,
        "refiner": cfg.refiner,
        "fusion": cfg.fusion,
        "n_frames": cfg.n_frames,
        "k_select": cfg.k_select,
        "steps": cfg.steps,
        "w_vtm": cfg.w_vtm,
        "w_cl": cfg.w_cl,
        "w_vgmlm": cfg.w_vgmlm,
        "qa_accuracy": round(metrics["qa_accuracy"], 4),
        "hit_rate": round(metrics["hit_rate"], 4),
        "vtm_accuracy": round(metrics.get("vtm_accuracy", float("nan")), 4),
        "final_loss": round(records[-1]["l_total"], 4) if records else float("nan"),
    }


def run_grid(cfg: RunConfig, grid: str, train_episodes: int = 3000,
             eval_episodes: int = 300, data_seed: int = 1) -> list[dict]:
    rows = []
    if grid == "modules":
        for row in MODULE_ROWS:
            rows.append(_run_variant(row, table_variant(cfg, row),
                                     train_episodes, eval_episodes, data_seed))
    elif grid == "frames":
        for sampler in ("sparse", "none"):
            for k in FRAME_SWEEP_K:
                if k > cfg.n_frames:
                    continue
                variant = cfg.replace(sampler=sampler, k_select=k,
                                      refiner=cfg.refiner if sampler == "sparse" else "plain")
                rows.append(_run_variant(f"{sampler}-k{k}", variant,
                                         train_episodes, eval_episodes, data_seed))
    elif grid == "losses":
        for row in MODULE_ROWS:
            rows.append(_run_variant(row, loss_variant(cfg, row),
                                     train_episodes, eval_episodes, data_seed))
    elif grid == "n-sweep":
        for sampler in ("sparse", "uniform"):
            for n in N_SWEEP:
                variant = cfg.replace(sampler=sampler, n_frames=n, n_max=0)
                rows.append(_run_variant(f"{sampler}-n{n}", variant,
                                         train_episodes, eval_episodes, data_seed))
    else:
        raise ValueError(f"unknown grid {grid!r}")
    return rows
