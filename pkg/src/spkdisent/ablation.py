"""Loss-set comparison on a synthetic corpus with held-out utterances."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .data import Corpus, make_trials
from .evaluate import EmbeddingCache, evaluate, intra_speaker_cosine_distance, linear_probe_accuracy
from .train import TrainConfig, fit

BASELINE = "ls"
CONFIGS = ("ls", "ls,lr,ladv", "ls,lr,lmi,lic")


def protocol_config(**overrides) -> TrainConfig:
    """Desk-scale training budget used for the comparison."""
    base = TrainConfig(segment_s=0.5, batch_size=16, phase1_epochs=10, phase2_epochs=10,
                       steps_per_epoch=20, prefetch=0)
    return base.with_overrides(**overrides)


def split_by_utterance(corpus: Corpus, n_train: int) -> tuple[Corpus, Corpus]:
    """First ``n_train`` utterances of every speaker (manifest order) train; the rest are held out."""
    train, held = [], []
    for utts in corpus.by_speaker().values():
        if len(utts) <= n_train:
            raise ValueError(f"speaker {utts[0].speaker} has no utterances left to hold out")
        train += utts[:n_train]
        held += utts[n_train:]
    return Corpus(train), Corpus(held)


@dataclass(frozen=True)
class AblationRun:
    losses: str
    seed: int
    eer_phase1: float
    eer: float
    intra_phase1: float
    intra: float
    probe_spk: float
    probe_res: float
    seconds: float


def run_one(cfg: TrainConfig, train: Corpus, held: Corpus, trials) -> AblationRun:
    t0 = time.perf_counter()
    res = fit(cfg, train)
    seconds = time.perf_counter() - t0
    c1 = EmbeddingCache(res.phase1_model, held)
    c2 = EmbeddingCache(res.model, held)
    return AblationRun(
        cfg.losses, cfg.seed,
        evaluate(res.phase1_model, held, trials, c1).result.eer,
        evaluate(res.model, held, trials, c2).result.eer,
        intra_speaker_cosine_distance(c1), intra_speaker_cosine_distance(c2),
        linear_probe_accuracy(c2, "spk", cfg.seed), linear_probe_accuracy(c2, "res", cfg.seed),
        seconds)


def run_ablation(corpus: Corpus, configs: Sequence[str] = CONFIGS, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 n_train_utts: int = 5, n_target: int = 200, n_nontarget: int = 200, trial_seed: int = 1,
                 on_run: Callable[[AblationRun], None] | None = None, **overrides) -> list[AblationRun]:
    train, held = split_by_utterance(corpus, n_train_utts)
    trials = make_trials(held, n_target, n_nontarget, trial_seed)
    runs = []
    for losses in configs:
        for seed in seeds:
            run = run_one(protocol_config(losses=losses, seed=seed, **overrides), train, held, trials)
            runs.append(run)
            if on_run:
                on_run(run)
    return runs


def median_eer(runs: Sequence[AblationRun], losses: str) -> float:
    vals = [r.eer for r in runs if r.losses == losses]
    if not vals:
        raise KeyError(f"no runs for {losses!r}")
    return statistics.median(vals)
