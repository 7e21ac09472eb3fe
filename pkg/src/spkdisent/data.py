"""Corpus handling: manifests, synthetic speakers, segment-pair sampling, trials."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import FeatureExtractor, Waveform, read_wav, write_wav

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Utterance:
    speaker: str
    utt_id: str
    wave: Waveform

    @property
    def ref(self) -> str:
        return f"{self.speaker}/{self.utt_id}"


@dataclass
class Corpus:
    utterances: list[Utterance]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        keys = [u.ref for u in self.utterances]
        dup = {k for k in keys if keys.count(k) > 1}
        if dup:
            raise ValueError(f"duplicate (speaker, utterance) keys: {sorted(dup)}")
        self._by_ref = {u.ref: u for u in self.utterances}

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def by_speaker(self) -> dict[str, list[Utterance]]:
        groups: dict[str, list[Utterance]] = {s: [] for s in self.speakers}
        for u in self.utterances:
            groups[u.speaker].append(u)
        return groups

    def __getitem__(self, ref: str) -> Utterance:
        try:
            return self._by_ref[ref]
        except KeyError:
            raise KeyError(f"unknown utterance ref {ref!r}") from None

    def __contains__(self, ref: str) -> bool:
        return ref in self._by_ref

    def __len__(self) -> int:
        return len(self.utterances)

    def subset(self, speakers: Iterable[str]) -> "Corpus":
        keep = set(speakers)
        return Corpus([u for u in self.utterances if u.speaker in keep])

    def check_pairable(self) -> None:
        for spk, utts in self.by_speaker().items():
            if len(utts) < 2:
                raise ValueError(f"speaker {spk!r} has {len(utts)} utterance(s); at least 2 required")


def load_corpus(root: str | Path, manifest: str | Path | None = None,
                min_seconds: float = 0.0) -> Corpus:
    """Read a tab-separated ``speaker<TAB>utterance<TAB>wav`` manifest.

    Relative WAV paths resolve against ``root``. Utterances shorter than
    ``min_seconds`` are skipped and listed in ``Corpus.rejected``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    manifest = Path(manifest) if manifest is not None else root / "manifest.tsv"
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    utts, rejected, seen = [], [], set()
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        spk, utt, path = parts
        if (spk, utt) in seen:
            raise ValueError(f"{manifest}:{lineno}: duplicate key {spk}/{utt}")
        seen.add((spk, utt))
        wav_path = Path(path) if Path(path).is_absolute() else root / path
        try:
            wave = read_wav(wav_path)
        except (OSError, ValueError) as exc:
            raise ValueError(f"{manifest}:{lineno}: cannot read {wav_path}: {exc}") from exc
        if wave.duration < min_seconds:
            rejected.append((f"{spk}/{utt}", f"{wave.duration:.3f}s < {min_seconds}s"))
            continue
        utts.append(Utterance(spk, utt, wave))
    for ref, why in rejected:
        log.warning("rejected %s: %s", ref, why)
    corpus = Corpus(utts, rejected)
    corpus.check_pairable()
    return corpus


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    lines = []
    for u in corpus.utterances:
        rel = Path("wav") / u.speaker / f"{u.utt_id}.wav"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        write_wav(out_dir / rel, u.wave)
        lines.append(f"{u.speaker}\t{u.utt_id}\t{rel.as_posix()}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# synthetic speakers
# ---------------------------------------------------------------------------

# formant multipliers shared by every speaker; the "phonetic content"
VOWELS = np.array([
    [1.00, 1.00, 1.00],
    [1.45, 0.80, 0.95],
    [0.60, 1.35, 1.08],
    [0.70, 0.65, 0.92],
    [1.25, 1.15, 1.04],
    [0.85, 0.90, 1.10],
])


@dataclass(frozen=True)
class SyntheticSpeakerSpec:
    f0: float
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    tilt_db_per_oct: float = -12.0
    f0_jitter: float = 0.08
    formant_jitter: float = 0.06

    def __post_init__(self):
        if not (self.formants[0] < self.formants[1] < self.formants[2]):
            raise ValueError("formants must be strictly increasing")


def random_speaker(rng: np.random.Generator, sample_rate: int = 16000) -> SyntheticSpeakerSpec:
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(260.0))))
    # vocal-tract length scales all formants together
    scale = rng.uniform(0.82, 1.22)
    base = np.array([520.0, 1450.0, 2500.0]) * scale
    base = base * rng.uniform(0.9, 1.1, size=3)
    base[2] = max(base[2], base[1] * 1.25)
    base = np.minimum(base, 0.45 * sample_rate)
    bw = rng.uniform([60, 80, 110], [110, 150, 220])
    return SyntheticSpeakerSpec(
        f0=f0, formants=tuple(float(v) for v in base), bandwidths=tuple(float(v) for v in bw),
        tilt_db_per_oct=float(rng.uniform(-15.0, -8.0)))


def _resonance_db(freqs: np.ndarray, fc: np.ndarray, bw: np.ndarray) -> np.ndarray:
    """Magnitude (dB) of second-order resonators, normalized to 0 dB at DC."""
    r = freqs / fc
    mag2 = (1.0 - r ** 2) ** 2 + (r * bw / fc) ** 2
    return -10.0 * np.log10(mag2)


def _smooth_track(rng: np.random.Generator, n_ctrl: int, n_knots: int) -> np.ndarray:
    knots = rng.uniform(-1.0, 1.0, n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n_ctrl), np.arange(n_knots), knots)


def synthesize_utterance(spec: SyntheticSpeakerSpec, seconds: float, rng: np.random.Generator,
                         sample_rate: int = 16000, snr_db: float = 20.0) -> Waveform:
    """Harmonic source at the speaker's F0 shaped by its formant envelope.

    Per-utterance variation comes from a vowel sequence (shared formant
    multipliers), slow pitch and amplitude movement, a random channel
    colouration and additive white noise at ``snr_db``.
    """
    n = int(round(seconds * sample_rate))
    ctrl_rate = 200
    n_ctrl = int(np.ceil(seconds * ctrl_rate)) + 1
    t_ctrl = np.arange(n_ctrl) / ctrl_rate

    # vowel sequence with smooth transitions
    n_syll = max(2, int(seconds * rng.uniform(3.0, 5.0)))
    vowel_ids = rng.integers(0, len(VOWELS), n_syll)
    syll_t = np.linspace(0.0, seconds, n_syll)
    ratios = np.stack([np.interp(t_ctrl, syll_t, VOWELS[vowel_ids, i]) for i in range(3)], axis=1)
    wobble = 1.0 + spec.formant_jitter * np.stack(
        [_smooth_track(rng, n_ctrl, max(3, int(seconds * 2))) for _ in range(3)], axis=1)
    formants = np.asarray(spec.formants)[None, :] * ratios * wobble
    formants = np.maximum.accumulate(formants, axis=1)  # keep ordering
    formants[:, 1] = np.maximum(formants[:, 1], formants[:, 0] * 1.1)
    formants[:, 2] = np.maximum(formants[:, 2], formants[:, 1] * 1.1)
    formants = np.minimum(formants, 0.48 * sample_rate)

    f0_ctrl = spec.f0 * (1.0 + spec.f0_jitter * _smooth_track(rng, n_ctrl, max(3, int(seconds * 1.5))))
    amp_ctrl = 0.55 + 0.45 * np.abs(np.sin(np.pi * t_ctrl * rng.uniform(2.0, 4.0) + rng.uniform(0, np.pi)))

    # channel: tilt plus one broad peak/notch, constant over the utterance
    ch_tilt = rng.uniform(-5.0, 5.0)
    ch_fc = np.exp(rng.uniform(np.log(300.0), np.log(5000.0)))
    ch_gain = rng.uniform(-8.0, 8.0)
    ch_q = rng.uniform(0.7, 2.0)

    t = np.arange(n) / sample_rate
    f0 = np.interp(t, t_ctrl, f0_ctrl)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)
    amp = np.interp(t, t_ctrl, amp_ctrl)
    n_harm = int((0.5 * sample_rate) // (spec.f0 * (1.0 + spec.f0_jitter)))
    out = np.zeros(n)
    for h in range(1, n_harm + 1):
        hf = h * f0_ctrl
        octaves = np.log2(np.maximum(hf, 1.0) / 100.0)
        gain_db = spec.tilt_db_per_oct * np.log2(h) + ch_tilt * octaves
        gain_db += _resonance_db(hf[:, None], formants, np.asarray(spec.bandwidths)[None, :]).sum(axis=1)
        gain_db += ch_gain * np.exp(-0.5 * (np.log2(np.maximum(hf, 1.0) / ch_fc) * ch_q * 2) ** 2)
        gain = 10.0 ** (gain_db / 20.0)
        gain[hf >= 0.5 * sample_rate] = 0.0
        out += np.interp(t, t_ctrl, gain) * np.sin(h * phase)
    out *= amp
    out /= np.sqrt(np.mean(out ** 2)) + 1e-12
    noise = rng.standard_normal(n) * 10.0 ** (-snr_db / 20.0)
    sig = out + noise
    sig *= 0.3 / np.max(np.abs(sig))
    # round-trip through float32 so in-memory and on-disk corpora agree exactly
    return Waveform(sig.astype(np.float32).astype(np.float64), sample_rate)


def generate_synthetic_corpus(n_speakers: int = 20, utts_per_speaker: int = 10,
                              utt_seconds: float = 4.0, seed: int = 7,
                              sample_rate: int = 16000) -> Corpus:
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    if utts_per_speaker < 2:
        raise ValueError("need at least 2 utterances per speaker")
    root = np.random.SeedSequence(seed)
    spk_seeds = root.spawn(n_speakers)
    utts = []
    for i, ss in enumerate(spk_seeds):
        spec_seed, *utt_seeds = ss.spawn(utts_per_speaker + 1)
        spec = random_speaker(np.random.default_rng(spec_seed), sample_rate)
        for j, us in enumerate(utt_seeds):
            wave = synthesize_utterance(spec, utt_seconds, np.random.default_rng(us), sample_rate)
            utts.append(Utterance(f"spk{i:03d}", f"utt{j:03d}", wave))
    return Corpus(utts)


# ---------------------------------------------------------------------------
# features and sampling
# ---------------------------------------------------------------------------

class FeatureBank:
    """Whole-utterance features, computed once.

    A segment starting ``k`` hops into an utterance has exactly the frames
    ``k .. k + n - 1`` of the whole-utterance spectrogram, so segments are
    cut from the cached matrices instead of re-running the STFT.
    """

    def __init__(self, corpus: Corpus, extractor: FeatureExtractor):
        self.corpus = corpus
        self.extractor = extractor
        self.spec: dict[str, np.ndarray] = {}
        self.mel: dict[str, np.ndarray] = {}
        for u in corpus.utterances:
            self.spec[u.ref], self.mel[u.ref] = extractor(u.wave)

    def n_frames(self, ref: str) -> int:
        return self.spec[ref].shape[0]


@dataclass
class SegmentPairBatch:
    spec_a: np.ndarray   # (N, frames, bins)
    spec_a2: np.ndarray
    spec_b: np.ndarray
    mel_a: np.ndarray    # (N, frames, mels)
    mel_a2: np.ndarray
    mel_b: np.ndarray
    labels: np.ndarray
    refs_a: list[str]
    refs_b: list[str]
    offsets_a: np.ndarray
    offsets_a2: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


class PairSampler:
    """Draws A / A' (same utterance, distinct offsets) and B (same speaker).

    Owns its RNG; not shareable between threads.
    """

    def __init__(self, bank: FeatureBank, segment_frames: int, batch_size: int = 32,
                 rng: np.random.Generator | None = None, speakers: Sequence[str] | None = None):
        self.bank = bank
        self.segment_frames = segment_frames
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(0)
        corpus = bank.corpus
        corpus.check_pairable()
        self.speakers = list(speakers) if speakers is not None else corpus.speakers
        self.label_of = {s: i for i, s in enumerate(self.speakers)}
        groups = corpus.by_speaker()
        self.utts = [u for s in self.speakers for u in groups[s]]
        self.same_speaker = {s: [u.ref for u in groups[s]] for s in self.speakers}
        for u in self.utts:
            if bank.n_frames(u.ref) - segment_frames + 1 < 2:
                raise ValueError(f"{u.ref}: too short for two distinct {segment_frames}-frame offsets")

    def _offset(self, ref: str) -> int:
        return int(self.rng.integers(0, self.bank.n_frames(ref) - self.segment_frames + 1))

    def sample(self) -> SegmentPairBatch:
        n, seg = self.batch_size, self.segment_frames
        picks = self.rng.integers(0, len(self.utts), n)
        spec = {k: [] for k in ("a", "a2", "b")}
        mel = {k: [] for k in ("a", "a2", "b")}
        refs_a, refs_b, off_a, off_a2, labels = [], [], [], [], []
        for p in picks:
            ua = self.utts[int(p)]
            others = [r for r in self.same_speaker[ua.speaker] if r != ua.ref]
            ref_b = others[int(self.rng.integers(0, len(others)))]
            oa = self._offset(ua.ref)
            oa2 = self._offset(ua.ref)
            while oa2 == oa:
                oa2 = self._offset(ua.ref)
            ob = self._offset(ref_b)
            for key, ref, off in (("a", ua.ref, oa), ("a2", ua.ref, oa2), ("b", ref_b, ob)):
                spec[key].append(self.bank.spec[ref][off:off + seg])
                mel[key].append(self.bank.mel[ref][off:off + seg])
            refs_a.append(ua.ref)
            refs_b.append(ref_b)
            off_a.append(oa)
            off_a2.append(oa2)
            labels.append(self.label_of[ua.speaker])
        return SegmentPairBatch(
            np.stack(spec["a"]), np.stack(spec["a2"]), np.stack(spec["b"]),
            np.stack(mel["a"]), np.stack(mel["a2"]), np.stack(mel["b"]),
            np.asarray(labels, dtype=np.int64), refs_a, refs_b,
            np.asarray(off_a), np.asarray(off_a2))


def sample_training_batch(corpus: Corpus, batch_size: int = 32, segment_s: float = 1.0,
                          rng: np.random.Generator | None = None,
                          extractor: FeatureExtractor | None = None) -> SegmentPairBatch:
    """One-shot convenience wrapper around :class:`PairSampler`."""
    extractor = extractor or FeatureExtractor()
    bank = FeatureBank(corpus, extractor)
    return PairSampler(bank, extractor.frames_for(segment_s), batch_size, rng).sample()


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    target: bool
    ref1: str
    ref2: str


def make_trials(corpus: Corpus, n_target: int, n_nontarget: int, seed: int = 1) -> list[Trial]:
    """Balanced verification trials without repeated pairs, deterministic per seed."""
    groups = corpus.by_speaker()
    tgt_pool = [(a.ref, b.ref) for utts in groups.values()
                for a, b in itertools.combinations(utts, 2)]
    spk = corpus.speakers
    n_non_total = sum(len(groups[a]) * len(groups[b]) for a, b in itertools.combinations(spk, 2))
    if n_target > len(tgt_pool):
        raise ValueError(f"requested {n_target} target trials, only {len(tgt_pool)} distinct pairs")
    if n_nontarget > n_non_total:
        raise ValueError(f"requested {n_nontarget} nontarget trials, only {n_non_total} distinct pairs")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(tgt_pool), size=n_target, replace=False)
    trials = [Trial(True, *tgt_pool[i]) for i in sorted(chosen)]
    refs = [u.ref for u in corpus.utterances]
    spk_of = {u.ref: u.speaker for u in corpus.utterances}
    seen: set[tuple[str, str]] = set()
    non = []
    while len(non) < n_nontarget:
        i, j = rng.integers(0, len(refs), 2)
        a, b = refs[i], refs[j]
        if spk_of[a] == spk_of[b]:
            continue
        key = (a, b) if a < b else (b, a)
        if key in seen:
            continue
        seen.add(key)
        non.append(Trial(False, *key))
    return trials + non


def write_trials(trials: Sequence[Trial], path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(t.target)} {t.ref1} {t.ref2}\n" for t in trials))


def read_trials(path: str | Path) -> list[Trial]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trial list {path} not found")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected '1|0 ref1 ref2'")
        out.append(Trial(parts[0] == "1", parts[1], parts[2]))
    return out
