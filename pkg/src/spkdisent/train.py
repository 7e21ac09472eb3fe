"""Adam, the step-decay schedule, and the two-phase training procedure."""
from __future__ import annotations

import configparser
import csv
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import Corpus, FeatureBank, PairSampler, SegmentPairBatch
from .dsp import FeatureExtractor, FrameParams
from .losses import (LOSS_NAMES, LossWeights, adversarial_loss, am_softmax_loss,
                     identity_change_loss, mi_objective, reconstruction_loss, speaker_loss,
                     total_loss)
from .nets import ModelBundle, ModelConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_S", "V", "L_R", "L_IC", "L_adv", "total", "phase", "stage", "epoch", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_mels: int = 64
    segment_s: float = 1.0
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_halving_epochs: int = 10
    phase1_epochs: int = 20
    phase2_epochs: int = 20
    steps_per_epoch: int = 0
    losses: str = "ls,lr,lmi,lic"
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 0.1
    mi_mode: str = "cooperative"
    speaker_criterion: str = "softmax"
    am_margin: float = 0.2
    am_scale: float = 30.0
    phase2_speaker_loss: bool = True
    phase2_disentangle: bool = True
    d_emb: int = 128
    enc_channels: str = "8,8,8"
    enc_kernel: int = 3
    enc_hidden: int = 128
    dec_fc: str = "256"
    dec_channels: str = "16,8,4"
    dec_extra_layers: int = 0
    critic_hidden: int = 128
    critic_bound: float = 10.0
    prefetch: int = 4
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        bad = set(self.enabled) - set(LOSS_NAMES)
        if bad:
            raise ValueError(f"unknown losses {sorted(bad)}; choose from {LOSS_NAMES}")
        if "ls" not in self.enabled:
            raise ValueError("the speaker loss 'ls' is required")
        if self.mi_mode not in ("cooperative", "adversarial"):
            raise ValueError(f"mi_mode must be cooperative or adversarial, got {self.mi_mode!r}")
        if self.speaker_criterion not in ("softmax", "am"):
            raise ValueError(f"speaker_criterion must be softmax or am, got {self.speaker_criterion!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lr_halving_epochs < 1:
            raise ValueError("lr_halving_epochs must be positive")
        self.weights  # validates non-negative weights

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.losses.split(",") if s.strip())

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    @property
    def frame_params(self) -> FrameParams:
        return FrameParams(self.window_ms, self.hop_ms, self.fft_size)

    def extractor(self) -> FeatureExtractor:
        return FeatureExtractor(self.sample_rate, self.frame_params, self.n_mels)

    def model_config(self, n_classes: int, **stats: float) -> ModelConfig:
        ints = lambda s: tuple(int(x) for x in s.split(",") if x.strip())  # noqa: E731
        return ModelConfig(
            n_bins=self.fft_size // 2 + 1, n_mels=self.n_mels,
            frames=self.extractor().frames_for(self.segment_s), n_classes=n_classes,
            d_emb=self.d_emb, enc_channels=ints(self.enc_channels), enc_kernel=self.enc_kernel,
            enc_hidden=self.enc_hidden, dec_fc=ints(self.dec_fc),
            dec_channels=ints(self.dec_channels), dec_extra_layers=self.dec_extra_layers,
            critic_hidden=self.critic_hidden, critic_bound=self.critic_bound, sample_rate=self.sample_rate,
            window_ms=self.window_ms, hop_ms=self.hop_ms, **stats)

    def with_overrides(self, **kw) -> "TrainConfig":
        d = asdict(self)
        unknown = set(kw) - set(d)
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        d.update(kw)
        return TrainConfig(**d)

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        parser.read_string("[run]\n" + text)
        raw = dict(parser["run"])
        raw.update({k: str(v) for k, v in overrides.items()})
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for k, v in raw.items():
            typ = known[k].type
            if typ == "bool":
                if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{k}: expected a boolean, got {v!r}")
                kw[k] = v.lower() in ("true", "1", "yes")
            elif typ == "int":
                kw[k] = int(v)
            elif typ == "float":
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        return cls.from_text(path.read_text(encoding="utf-8"), **overrides)


def learning_rate(epoch: int, base: float = 1e-3, period: int = 10) -> float:
    """Step decay: halve every ``period`` epochs."""
    return base * 0.5 ** (epoch // period)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step: int = 0


class Adam:
    """Bias-corrected Adam; each parameter keeps its own step count so that
    parameters updated on alternate steps still get correct bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        s = self.state
        s.step += 1
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in s.m:
                s.m[name] = np.zeros_like(p.data)
                s.v[name] = np.zeros_like(p.data)
                s.t[name] = 0
            s.t[name] += 1
            t = s.t[name]
            m = s.m[name] = self.beta1 * s.m[name] + (1.0 - self.beta1) * g
            v = s.v[name] = self.beta2 * s.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(opt: Adam, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    opt.step(params, grads, lr)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

STAGE_TRAINABLE = {
    "joint": ("spk", "res", "dec", "cls"),
    "ic": ("dec", "res"),
    "adapt": ("dec", "spk", "cls"),
}


@dataclass
class StepReport:
    values: dict[str, float]
    stage: str

    def __getitem__(self, key: str) -> float:
        return self.values[key]


class Trainer:
    """Owns the model, optimizer and per-step logic for both phases."""

    def __init__(self, model: ModelBundle, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.enabled = set(cfg.enabled)

    # -- pieces ------------------------------------------------------------

    def _speaker_term(self, f: Tensor, labels: np.ndarray) -> Tensor:
        if self.cfg.speaker_criterion == "am":
            return am_softmax_loss(f, self.model.params["cls.w"], labels,
                                   self.cfg.am_margin, self.cfg.am_scale)
        return speaker_loss(self.model.classify(f), labels)

    def _critic_update(self, spk_a, spk_a2, res_a, res_a2, lr: float) -> float:
        """Ascend the DV value with encoder outputs held fixed."""
        sg = ad.stop_gradient
        v = mi_objective(self.model, sg(spk_a), sg(spk_a2), sg(res_a), sg(res_a2))
        critic = self.model.group("critic")
        grads = ad.backward(ad.neg(v), critic)
        self.opt.step(critic, grads, lr)
        return v.item()

    def _mi_contribution(self, v: Tensor) -> Tensor:
        return ad.neg(v) if self.cfg.mi_mode == "cooperative" else v

    def _apply(self, total: Tensor, stage: str, lr: float) -> None:
        trainable = self.model.group(*STAGE_TRAINABLE[stage])
        self.opt.step(trainable, ad.backward(total, trainable), lr)

    # -- phases ------------------------------------------------------------

    def phase1_step(self, batch: SegmentPairBatch, lr: float) -> StepReport:
        """Critic ascent, then one joint update of encoders, decoder and head."""
        m, on = self.model, self.enabled
        need_res = bool(on & {"lr", "ladv", "lmi", "lic"})
        spk_a = m.encode_speaker(batch.spec_a)
        spk_a2 = m.encode_speaker(batch.spec_a2)
        res_a = m.encode_residual(batch.spec_a) if need_res else None
        res_a2 = m.encode_residual(batch.spec_a2) if "lmi" in on else None
        values, comps = {}, {}
        if "lmi" in on:
            self._critic_update(spk_a, spk_a2, res_a, res_a2, lr)
            v = mi_objective(m, spk_a, spk_a2, res_a, res_a2)
            values["V"] = v.item()
            comps["lmi"] = self._mi_contribution(v)
        labels = np.concatenate([batch.labels, batch.labels])
        comps["ls"] = self._speaker_term(ad.concat([spk_a, spk_a2], axis=0), labels)
        if "lr" in on:
            comps["lr"] = reconstruction_loss(m.decode(spk_a, res_a), m.normalize_target(batch.mel_a))
        if "ladv" in on:
            comps["ladv"] = adversarial_loss(m.classify(res_a, frozen=True))
        total = total_loss(comps, self.cfg.weights)
        self._apply(total, "joint", lr)
        values.update({k: c.item() for k, c in comps.items() if k != "lmi"})
        values["total"] = total.item()
        return StepReport(values, "joint")

    def phase2_step(self, batch: SegmentPairBatch, lr: float, stage: str) -> StepReport:
        """One stage of the alternating identity-change procedure.

        ``ic``: identity replaced by the A/B mean; decoder and residual encoder
        learn. ``adapt``: original identity; decoder, speaker encoder (and head)
        learn from the plain reconstruction error.
        """
        if stage not in ("ic", "adapt"):
            raise ValueError(f"unknown phase II stage {stage!r}")
        if len(batch.refs_b) != len(batch) or any(
                a.split("/")[0] != b.split("/")[0] for a, b in zip(batch.refs_a, batch.refs_b)):
            raise ValueError("phase II batch lacks same-speaker B segments")
        m, on, cfg = self.model, self.enabled, self.cfg
        sg = ad.stop_gradient
        spk_a = m.encode_speaker(batch.spec_a)
        spk_a2 = m.encode_speaker(batch.spec_a2)
        res_a = m.encode_residual(batch.spec_a)
        res_a2 = m.encode_residual(batch.spec_a2) if "lmi" in on else None
        values, comps = {}, {}
        if "lmi" in on:
            self._critic_update(spk_a, spk_a2, res_a, res_a2, lr)
        if stage == "ic":
            spk_a, spk_a2 = sg(spk_a), sg(spk_a2)
            spk_b = sg(m.encode_speaker(batch.spec_b))
            res_b = m.encode_residual(batch.spec_b)
            comps["lic"] = identity_change_loss(
                m, spk_a, spk_b, res_a, res_b,
                m.normalize_target(batch.mel_a), m.normalize_target(batch.mel_b))
        else:
            res_a = sg(res_a)
            res_a2 = sg(res_a2) if res_a2 is not None else None
            if "lr" in on:
                comps["lr"] = reconstruction_loss(m.decode(spk_a, res_a),
                                                  m.normalize_target(batch.mel_a))
            if cfg.phase2_speaker_loss:
                labels = np.concatenate([batch.labels, batch.labels])
                comps["ls"] = self._speaker_term(ad.concat([spk_a, spk_a2], axis=0), labels)
        if cfg.phase2_disentangle:
            if "lmi" in on:
                v = mi_objective(m, spk_a, spk_a2, res_a, res_a2)
                values["V"] = v.item()
                comps["lmi"] = self._mi_contribution(v)
            if "ladv" in on and stage == "ic":
                comps["ladv"] = adversarial_loss(m.classify(res_a, frozen=True))
        if not comps:
            return StepReport(values, stage)
        total = total_loss(comps, cfg.weights)
        self._apply(total, stage, lr)
        values.update({k: c.item() for k, c in comps.items() if k != "lmi"})
        values["total"] = total.item()
        return StepReport(values, stage)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _prefetch(source: Iterator, capacity: int) -> Iterator:
    """Run ``source`` in a producer thread; items come out in source order."""
    if capacity <= 0:
        yield from source
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    stop = threading.Event()
    done = object()

    def produce():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
            return
        q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def feature_stats(bank: FeatureBank) -> dict[str, float]:
    spec = np.concatenate(list(bank.spec.values()), axis=0)
    mel = np.concatenate(list(bank.mel.values()), axis=0)
    return {"feat_mean": float(spec.mean()), "feat_std": float(spec.std()),
            "mel_mean": float(mel.mean()), "mel_std": float(mel.std())}


@dataclass
class FitResult:
    model: ModelBundle
    log_rows: list[dict]
    phase1_model: ModelBundle
    speakers: list[str]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])


def fit(cfg: TrainConfig, corpus: Corpus, out_dir: str | Path | None = None,
        bank: FeatureBank | None = None) -> FitResult:
    """Phase I then Phase II, deterministic for a given (config, corpus, seed).

    With ``out_dir`` set, writes ``config.ini``, ``train_log.csv``, one
    checkpoint per epoch and ``phase1.ckpt`` / ``final.ckpt``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    extractor = cfg.extractor()
    bank = bank or FeatureBank(corpus, extractor)
    speakers = corpus.speakers
    mcfg = cfg.model_config(len(speakers), **feature_stats(bank))
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = ModelBundle.init(mcfg, seed=int(seeds[0].generate_state(1)[0]))
    sampler = PairSampler(bank, mcfg.frames, cfg.batch_size, np.random.default_rng(seeds[1]),
                          speakers)
    trainer = Trainer(model, cfg)
    steps_per_epoch = cfg.steps_per_epoch or math.ceil(len(corpus) / cfg.batch_size)
    total_epochs = cfg.phase1_epochs + cfg.phase2_epochs
    csv_log = CsvLog(out / "train_log.csv" if out else None)
    rows: list[dict] = []
    phase1_model = model.copy()

    batches = _prefetch((sampler.sample() for _ in range(steps_per_epoch * total_epochs)),
                        cfg.prefetch)
    step = 0
    use_ic = "lic" in trainer.enabled
    for epoch in range(total_epochs):
        phase = 1 if epoch < cfg.phase1_epochs else 2
        if phase == 2 and epoch == cfg.phase1_epochs:
            phase1_model = model.copy()
            if out is not None:
                model.save(out / "phase1.ckpt")
        lr = learning_rate(epoch, cfg.lr, cfg.lr_halving_epochs)
        for _ in range(steps_per_epoch):
            batch = next(batches)
            try:
                if phase == 1 or not use_ic:
                    rep = trainer.phase1_step(batch, lr)
                else:
                    rep = trainer.phase2_step(batch, lr, "ic" if step % 2 == 0 else "adapt")
            except NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            vals = rep.values
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(step, f"loss report {vals}")
            row = {"step": step, "L_S": vals.get("ls"), "V": vals.get("V"), "L_R": vals.get("lr"),
                   "L_IC": vals.get("lic"), "L_adv": vals.get("ladv"), "total": vals.get("total"),
                   "phase": phase, "stage": rep.stage, "epoch": epoch, "lr": lr}
            rows.append(row)
            csv_log.append(row)
            step += 1
        log.info("epoch %d phase %d lr %.2e last %s", epoch, phase, lr,
                 {k: round(v, 4) for k, v in vals.items()})
        if out is not None and cfg.checkpoint_every_epoch:
            model.save(out / f"epoch{epoch:03d}.ckpt")
    if cfg.phase2_epochs == 0:
        phase1_model = model.copy()
        if out is not None:
            model.save(out / "phase1.ckpt")
    if out is not None:
        model.save(out / "final.ckpt")
        (out / "speakers.txt").write_text("\n".join(speakers) + "\n")
    return FitResult(model, rows, phase1_model, speakers)
