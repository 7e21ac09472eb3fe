"""Verification scoring, EER, embedding export and disentanglement probes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Corpus, Trial
from .nets import ModelBundle, embed_batch


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    far: float
    frr: float


def score_pair(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine similarity."""
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cannot score a zero-norm embedding")
    return float(np.clip(np.dot(e1, e2) / (n1 * n2), -1.0, 1.0))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """``-inf``, midpoints between adjacent distinct scores, ``+inf`` (ascending)."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def compute_eer(scores: Sequence[float], labels: Sequence[bool]) -> EerResult:
    """Equal error rate by a midpoint threshold sweep.

    Accept when ``score >= threshold``. Picks the threshold minimising
    ``|FAR - FRR|`` (the lowest one on ties) and reports their mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be non-empty and aligned")
    tgt = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("EER needs at least one target and one nontarget score")
    thr = candidate_thresholds(scores)
    frr = np.searchsorted(tgt, thr, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    gap = np.abs(far - frr)
    i = int(np.flatnonzero(gap == gap.min())[0])
    return EerResult(float((far[i] + frr[i]) / 2.0), float(thr[i]), float(far[i]), float(frr[i]))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def segment_stack(spec: np.ndarray, seg_frames: int) -> np.ndarray:
    """Consecutive non-overlapping ``seg_frames`` blocks of a feature matrix."""
    n = spec.shape[0] // seg_frames
    if n < 1:
        raise ValueError(f"utterance of {spec.shape[0]} frames shorter than one {seg_frames}-frame segment")
    return spec[:n * seg_frames].reshape(n, seg_frames, spec.shape[1])


def embed_utterance(model: ModelBundle, spec: np.ndarray, which: str = "spk") -> np.ndarray:
    """Mean embedding over the utterance's consecutive segments (no randomness)."""
    return embed_batch(model, segment_stack(spec, model.cfg.frames), which).mean(axis=0)


class EmbeddingCache:
    """Utterance-level embeddings computed once per (ref, kind)."""

    def __init__(self, model: ModelBundle, corpus: Corpus):
        self.model = model
        self.corpus = corpus
        self.extractor = model.cfg.extractor()
        self._spec: dict[str, np.ndarray] = {}
        self._emb: dict[tuple[str, str], np.ndarray] = {}

    def spec(self, ref: str) -> np.ndarray:
        if ref not in self._spec:
            self._spec[ref] = self.extractor(self.corpus[ref].wave)[0]
        return self._spec[ref]

    def segments(self, ref: str, which: str = "spk") -> np.ndarray:
        return embed_batch(self.model, segment_stack(self.spec(ref), self.model.cfg.frames), which)

    def __call__(self, ref: str, which: str = "spk") -> np.ndarray:
        key = (ref, which)
        if key not in self._emb:
            self._emb[key] = embed_utterance(self.model, self.spec(ref), which)
        return self._emb[key]


@dataclass
class Evaluation:
    result: EerResult
    rows: list[tuple[int, str, str, float]]


def evaluate(model: ModelBundle, corpus: Corpus, trials: Sequence[Trial],
             cache: EmbeddingCache | None = None) -> Evaluation:
    missing = sorted({r for t in trials for r in (t.ref1, t.ref2) if r not in corpus})
    if missing:
        raise KeyError(f"trial refs not in corpus: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    cache = cache or EmbeddingCache(model, corpus)
    rows = [(int(t.target), t.ref1, t.ref2, score_pair(cache(t.ref1), cache(t.ref2))) for t in trials]
    res = compute_eer([r[3] for r in rows], [bool(r[0]) for r in rows])
    return Evaluation(res, rows)


def write_scores(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "ref1", "ref2", "score"])
        for lab, r1, r2, s in rows:
            w.writerow([lab, r1, r2, repr(s)])


def export_embeddings(model: ModelBundle, corpus: Corpus, path: str | Path,
                      cache: EmbeddingCache | None = None) -> int:
    """CSV with one row per (utterance, kind); returns the number of rows."""
    cache = cache or EmbeddingCache(model, corpus)
    d = model.cfg.d_emb
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["speaker_id", "utterance_id", "kind"] + [f"e{i}" for i in range(d)])
        for kind in ("spk", "res"):
            for u in corpus.utterances:
                w.writerow([u.speaker, u.utt_id, kind] + [repr(float(x)) for x in cache(u.ref, kind)])
                n += 1
    return n


# ---------------------------------------------------------------------------
# disentanglement diagnostics
# ---------------------------------------------------------------------------

def linear_probe_accuracy(cache: EmbeddingCache, which: str, seed: int = 0) -> float:
    """Speaker-ID accuracy of a logistic-regression probe on segment embeddings.

    Each speaker's utterances are split in half by utterance; the probe
    trains on segments of one half and is scored on the other.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    rng = np.random.default_rng(seed)
    xtr, ytr, xte, yte = [], [], [], []
    for label, (spk, utts) in enumerate(cache.corpus.by_speaker().items()):
        order = rng.permutation(len(utts))
        half = len(utts) // 2
        for rank, idx in enumerate(order):
            emb = cache.segments(utts[idx].ref, which)
            (xtr if rank < half else xte).append(emb)
            (ytr if rank < half else yte).extend([label] * len(emb))
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=2000))
    clf.fit(np.concatenate(xtr), np.asarray(ytr))
    return float(clf.score(np.concatenate(xte), np.asarray(yte)))


def intra_speaker_cosine_distance(cache: EmbeddingCache, which: str = "spk") -> float:
    """Mean ``1 - cos`` over all same-speaker utterance pairs."""
    dists = []
    for utts in cache.corpus.by_speaker().values():
        embs = [cache(u.ref, which) for u in utts]
        for i in range(len(embs)):
            for j in range(i + 1, len(embs)):
                dists.append(1.0 - score_pair(embs[i], embs[j]))
    return float(np.mean(dists))
