"""Speaker/residual encoders, decoder, shared classifier head and MINE critic."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import FeatureExtractor, FrameParams

GROUPS = ("spk", "res", "dec", "cls", "critic")


@dataclass
class ModelConfig:
    n_bins: int = 257
    n_mels: int = 64
    frames: int = 98
    n_classes: int = 20
    d_emb: int = 128
    enc_channels: tuple[int, ...] = (8, 8, 8)
    enc_kernel: int = 3
    enc_hidden: int = 128
    dec_fc: tuple[int, ...] = (256,)
    dec_channels: tuple[int, ...] = (16, 8, 4)
    dec_extra_layers: int = 0
    critic_hidden: int = 128
    critic_bound: float = 10.0
    feat_mean: float = 0.0
    feat_std: float = 1.0
    mel_mean: float = 0.0
    mel_std: float = 1.0
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.dec_fc = tuple(int(c) for c in self.dec_fc)
        self.dec_channels = tuple(int(c) for c in self.dec_channels)
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.n_mels % (2 ** self.n_upsample):
            raise ValueError(f"n_mels={self.n_mels} not divisible by 2**{self.n_upsample}")

    def extractor(self) -> FeatureExtractor:
        params = FrameParams(self.window_ms, self.hop_ms, 2 * (self.n_bins - 1))
        return FeatureExtractor(self.sample_rate, params, self.n_mels)

    @property
    def n_upsample(self) -> int:
        return len(self.dec_channels)

    @property
    def enc_out_bins(self) -> int:
        n = self.n_bins
        for _ in self.enc_channels:
            n = (n + 2 * (self.enc_kernel // 2) - self.enc_kernel) // 2 + 1
        return n

    @property
    def dec_grid(self) -> tuple[int, int]:
        """Time and mel extent of the map the transposed convs start from."""
        up = 2 ** self.n_upsample
        return -(-self.frames // up), self.n_mels // up

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            default = getattr(cls, f.name, None)
            if isinstance(default, tuple) or f.type.startswith("tuple"):
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif f.type == "float":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _param_specs(cfg: ModelConfig):
    """(name, shape, fan_in, fan_out) in declaration order; fan_in 0 marks a zero init."""
    specs = []
    k = cfg.enc_kernel
    for enc in ("spk", "res"):
        ci = 1
        for i, co in enumerate(cfg.enc_channels):
            specs.append((f"{enc}.conv{i}.w", (k, ci, co), k * ci, k * co))
            specs.append((f"{enc}.conv{i}.b", (co,), 0, 0))
            ci = co
        flat = cfg.enc_out_bins * ci
        specs.append((f"{enc}.frame.w", (flat, cfg.enc_hidden), flat, cfg.enc_hidden))
        specs.append((f"{enc}.frame.b", (cfg.enc_hidden,), 0, 0))
        specs.append((f"{enc}.out.w", (cfg.enc_hidden, cfg.d_emb), cfg.enc_hidden, cfg.d_emb))
        specs.append((f"{enc}.out.b", (cfg.d_emb,), 0, 0))
    t0, m0 = cfg.dec_grid
    widths = [2 * cfg.d_emb, *cfg.dec_fc, cfg.dec_channels[0] * t0 * m0]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        specs.append((f"dec.fc{i}.w", (a, b), a, b))
        specs.append((f"dec.fc{i}.b", (b,), 0, 0))
    chans = [*cfg.dec_channels, 1]
    for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
        specs.append((f"dec.up{i}.w", (a, b, 4, 4), a * 16, b * 16))
        specs.append((f"dec.up{i}.b", (b,), 0, 0))
    for i in range(cfg.dec_extra_layers):
        specs.append((f"dec.refine{i}.w", (1, 1, 3, 3), 9, 9))
        specs.append((f"dec.refine{i}.b", (1,), 0, 0))
    specs.append(("cls.w", (cfg.d_emb, cfg.n_classes), cfg.d_emb, cfg.n_classes))
    specs.append(("cls.b", (cfg.n_classes,), 0, 0))
    specs.append(("critic.fc0.w", (2 * cfg.d_emb, cfg.critic_hidden), 2 * cfg.d_emb, cfg.critic_hidden))
    specs.append(("critic.fc0.b", (cfg.critic_hidden,), 0, 0))
    specs.append(("critic.fc1.w", (cfg.critic_hidden, 1), 0, 0))  # zero: critic starts at T = 0
    specs.append(("critic.fc1.b", (1,), 0, 0))
    return specs


class ModelBundle:
    """All trainable parameters plus the configuration that shapes them."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape, fan_in, fan_out in _param_specs(cfg):
            data = _xavier(rng, shape, fan_in, fan_out) if fan_in else np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(cfg, params)

    def group(self, *names: str) -> dict[str, Tensor]:
        for n in names:
            if n not in GROUPS:
                raise KeyError(f"unknown parameter group {n!r}")
        return {k: v for k, v in self.params.items() if k.split(".", 1)[0] in names}

    def copy(self) -> "ModelBundle":
        return ModelBundle(ModelConfig(**asdict(self.cfg)),
                           {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                            for k, v in self.params.items()})

    def checksum(self, *groups: str) -> str:
        h = hashlib.sha256()
        for k, v in (self.group(*groups) if groups else self.params).items():
            h.update(k.encode())
            h.update(v.data.astype("<f8").tobytes())
        return h.hexdigest()

    # -- inputs ------------------------------------------------------------

    def normalize_input(self, spec: np.ndarray) -> Tensor:
        spec = np.asarray(spec, dtype=np.float64)
        if spec.ndim == 2:
            spec = spec[None]
        if spec.shape[-1] != self.cfg.n_bins:
            raise ValueError(f"expected {self.cfg.n_bins} bins, got {spec.shape[-1]}")
        return Tensor((spec - self.cfg.feat_mean) / self.cfg.feat_std)

    def normalize_target(self, mel: np.ndarray) -> Tensor:
        return Tensor((np.asarray(mel, dtype=np.float64) - self.cfg.mel_mean) / self.cfg.mel_std)

    def denormalize_mel(self, mel: np.ndarray) -> np.ndarray:
        return mel * self.cfg.mel_std + self.cfg.mel_mean

    # -- networks ----------------------------------------------------------

    def _encode(self, prefix: str, spec) -> Tensor:
        x = spec if isinstance(spec, Tensor) else self.normalize_input(spec)
        if x.shape[-1] != self.cfg.n_bins:
            raise ValueError(f"expected {self.cfg.n_bins} bins, got {x.shape[-1]}")
        n, t, f = x.shape
        p = self.params
        h = ad.reshape(x, (n * t, f, 1))
        pad = self.cfg.enc_kernel // 2
        for i in range(len(self.cfg.enc_channels)):
            h = ad.conv1d(h, p[f"{prefix}.conv{i}.w"], stride=2, padding=pad)
            h = ad.relu(ad.add_bias(h, p[f"{prefix}.conv{i}.b"]))
        h = ad.reshape(h, (n, t, h.shape[1] * h.shape[2]))
        h = ad.relu(ad.add_bias(h @ p[f"{prefix}.frame.w"], p[f"{prefix}.frame.b"]))
        h = ad.sorted_mean(h, axis=1)  # time average pooling
        return ad.add_bias(h @ p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])

    def encode_speaker(self, spec) -> Tensor:
        return self._encode("spk", spec)

    def encode_residual(self, spec) -> Tensor:
        return self._encode("res", spec)

    def classify(self, f: Tensor, frozen: bool = False) -> Tensor:
        """Logits from the shared head; ``frozen`` detaches the head's weights."""
        w, b = self.params["cls.w"], self.params["cls.b"]
        if f.shape[-1] != w.shape[0]:
            raise ValueError(f"embedding dim {f.shape[-1]} does not match head {w.shape[0]}")
        if frozen:
            w, b = ad.stop_gradient(w), ad.stop_gradient(b)
        return ad.add_bias(f @ w, b)

    def decode(self, f_spk: Tensor, f_res: Tensor) -> Tensor:
        """Normalized log-mel reconstruction, shape ``(N, frames, n_mels)``."""
        cfg, p = self.cfg, self.params
        if f_spk.shape != f_res.shape or f_spk.shape[-1] != cfg.d_emb:
            raise ValueError(f"decoder inputs {f_spk.shape} / {f_res.shape} vs d_emb={cfg.d_emb}")
        h = ad.concat([f_spk, f_res], axis=-1)
        n_fc = len(cfg.dec_fc) + 1
        for i in range(n_fc):
            h = ad.relu(ad.add_bias(h @ p[f"dec.fc{i}.w"], p[f"dec.fc{i}.b"]))
        t0, m0 = cfg.dec_grid
        n = h.shape[0]
        h = ad.reshape(h, (n, cfg.dec_channels[0], t0, m0))
        for i in range(cfg.n_upsample):
            h = ad.conv_transpose2d(h, p[f"dec.up{i}.w"], stride=2, padding=1)
            h = ad.add_channel_bias(h, p[f"dec.up{i}.b"])
            if i < cfg.n_upsample - 1 or cfg.dec_extra_layers:
                h = ad.relu(h)
        for i in range(cfg.dec_extra_layers):
            h = ad.conv_transpose2d(h, p[f"dec.refine{i}.w"], stride=1, padding=1)
            h = ad.add_channel_bias(h, p[f"dec.refine{i}.b"])
            if i < cfg.dec_extra_layers - 1:
                h = ad.relu(h)
        return ad.getitem(h, (slice(None), 0, slice(0, cfg.frames), slice(None)))

    def critic(self, x: Tensor, y: Tensor) -> Tensor:
        """Statistics network T(x, y): one scalar per row.

        The raw MLP output is soft-clamped to ``(-bound, bound)`` with a scaled
        tanh; ``bound <= 0`` disables the clamp.
        """
        p = self.params
        if x.shape != y.shape or x.shape[-1] != self.cfg.d_emb:
            raise ValueError(f"critic inputs {x.shape} / {y.shape} vs d_emb={self.cfg.d_emb}")
        h = ad.relu(ad.add_bias(ad.concat([x, y], axis=-1) @ p["critic.fc0.w"], p["critic.fc0.b"]))
        out = ad.add_bias(h @ p["critic.fc1.w"], p["critic.fc1.b"])
        out = ad.reshape(out, (out.shape[0],))
        c = self.cfg.critic_bound
        if c > 0:
            out = ad.mul(ad.tanh(ad.mul(out, 1.0 / c)), c)
        return out

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        header = self.cfg.to_text() + "\n" + "\n".join(
            f"param.{k}={','.join(str(s) for s in v.shape)}" for k, v in self.params.items())
        hb = header.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(b"SPKD")
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            for v in self.params.values():
                fh.write(v.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        raw = Path(path).read_bytes()
        if raw[:4] != b"SPKD":
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", raw[4:12])
        header = raw[12:12 + hlen].decode("utf-8")
        kv = dict(line.split("=", 1) for line in header.splitlines() if line)
        cfg = ModelConfig.from_dict({k: v for k, v in kv.items() if not k.startswith("param.")})
        expected = [(name, shape) for name, shape, _, _ in _param_specs(cfg)]
        stored = [(k[6:], tuple(int(x) for x in v.split(",") if x))
                  for k, v in kv.items() if k.startswith("param.")]
        if stored != [(n, tuple(s)) for n, s in expected]:
            raise ValueError(f"{path}: parameter layout does not match its config")
        offset = 12 + hlen
        params = {}
        for name, shape in expected:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
            params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
            offset += 8 * count
        if offset != len(raw):
            raise ValueError(f"{path}: trailing bytes after parameters")
        return cls(cfg, params)


def embed_batch(model: ModelBundle, specs: np.ndarray, which: str = "spk",
                chunk: int = 64) -> np.ndarray:
    """Forward-only embeddings for a stack of segments."""
    enc = model.encode_speaker if which == "spk" else model.encode_residual
    out = [enc(specs[i:i + chunk]).data for i in range(0, len(specs), chunk)]
    return np.concatenate(out, axis=0)

