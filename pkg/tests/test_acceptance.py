"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criterion 6 and 7 share one ablation sweep (15 training runs, roughly
15-20 minutes on one CPU core).
"""
import math
import statistics
import time

import numpy as np
import pytest

from conftest import record_acceptance
from spkdisent import ablation, verify
from spkdisent.autodiff import Tensor
from spkdisent.cli import main
from spkdisent.data import FeatureBank, PairSampler, generate_synthetic_corpus
from spkdisent.losses import (LossWeights, adversarial_loss, identity_change_loss, mi_objective,
                              reconstruction_loss, total_loss)
from spkdisent.nets import ModelBundle, ModelConfig
from spkdisent.train import TrainConfig, Trainer, feature_stats

SEEDS = (0, 1, 2, 3, 4)
FULL, BASE, SPK = "ls,lr,lmi,lic", "ls,lr,ladv", "ls"


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    cases = verify.gradcheck_suite(eps=1e-5, tol=1e-4)
    secs = time.perf_counter() - t0
    losses = sorted({c.name.split("/")[0] for c in cases})
    worst = max(cases, key=lambda c: c.value)
    ok = all(c.passed for c in cases) and secs < 60 and set(losses) == {
        "L_S", "L_adv", "V", "L_R", "L_IC", "AM-softmax"}
    record_acceptance(1, ok, f"{len(cases)} checks over {losses}; worst {worst.name} {worst.value:.2e} "
                             f"(< 1e-4); {secs:.1f}s (< 60s)")
    assert ok


def test_2_mine_gaussian_oracle():
    t0 = time.perf_counter()
    cases = verify.mi_bench(rhos=(0.0, 0.5, 0.9), seeds=(0, 1, 2), tol=0.10)
    secs = time.perf_counter() - t0
    detail = "; ".join(f"{c.name} {c.value:.4f}" for c in cases)
    ok = all(c.passed for c in cases) and secs < 120
    record_acceptance(2, ok, f"targets 0/0.1438/0.8304 nats +-0.10: {detail}; {secs:.1f}s (< 120s)")
    assert ok


def test_3_loss_identities():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(n_bins=33, n_mels=16, frames=10, n_classes=4, d_emb=6, enc_channels=(2,),
                      enc_hidden=6, dec_fc=(8,), dec_channels=(2,), critic_hidden=4)
    model = ModelBundle.init(cfg, seed=0)
    emb = [Tensor(rng.normal(size=(5, 6))) for _ in range(4)]

    class Const:
        def critic(self, x, y):
            return Tensor(np.full(x.shape[0], 1.7))

    checks = {}
    checks["mi_const_critic_zero"] = abs(mi_objective(Const(), *emb).item()) < 1e-12
    s = emb[0]
    ta, tb = Tensor(rng.normal(size=(5, 10, 16))), Tensor(rng.normal(size=(5, 10, 16)))
    lic = identity_change_loss(model, s, s, emb[1], emb[2], ta, tb).item()
    plain = (reconstruction_loss(model.decode(s, emb[1]), ta).item()
             + reconstruction_loss(model.decode(s, emb[2]), tb).item())
    checks["lic_equal_embeddings"] = abs(lic - plain) < 1e-12
    uniform = adversarial_loss(Tensor(np.full((3, 4), 0.3))).item()
    others = [adversarial_loss(Tensor(rng.normal(scale=3, size=(1, 4)))).item() for _ in range(200)]
    checks["adv_min_ln_c"] = abs(uniform - math.log(4)) < 1e-15 and min(others) > math.log(4)
    checks["total_weights"] = total_loss({"ls": 1.0, "lmi": 2.0, "lr": 3.0, "lic": 4.0}, LossWeights()) == \
        1.0 + 0.1 * 2.0 + 0.1 * 3.0 + 0.1 * 4.0 and LossWeights() == LossWeights(1.0, 0.1, 0.1, 0.1)
    ok = all(checks.values())
    record_acceptance(3, ok, ", ".join(f"{k}={'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


def test_4_eer_oracle_equivalence():
    cases = verify.eer_oracle(n_sets=1000, seed=0)
    ok = all(c.passed for c in cases)
    record_acceptance(4, ok, "; ".join(c.detail for c in cases))
    assert ok


def test_5_selective_update():
    corpus = generate_synthetic_corpus(4, 3, 1.5, seed=11)
    cfg = TrainConfig(segment_s=0.3, batch_size=8, d_emb=12, enc_channels="3,3", enc_hidden=16,
                      dec_fc="32", dec_channels="4,2", critic_hidden=12, losses="ls,lr,lmi,lic,ladv")
    bank = FeatureBank(corpus, cfg.extractor())
    mcfg = cfg.model_config(4, **feature_stats(bank))
    tr = Trainer(ModelBundle.init(mcfg, 0), cfg)
    sampler = PairSampler(bank, mcfg.frames, 8, np.random.default_rng(0))
    for _ in range(3):
        tr.phase1_step(sampler.sample(), 1e-3)
    m = tr.model
    results = []
    for i in range(6):
        stage = "ic" if i % 2 == 0 else "adapt"
        frozen, trained = ("spk", "res") if stage == "ic" else ("res", "spk")
        before = {g: m.checksum(g) for g in ("spk", "res")}
        tr.phase2_step(sampler.sample(), 1e-3, stage)
        results.append(m.checksum(frozen) == before[frozen] and m.checksum(trained) != before[trained])
    ok = all(results)
    record_acceptance(5, ok, f"{sum(results)}/6 alternating stage steps: stage 1 kept E_spk, "
                             f"stage 2 kept E_res bit-identical (sha256)")
    assert ok


@pytest.fixture(scope="module")
def sweep():
    corpus = generate_synthetic_corpus(20, 10, 4.0, seed=7)
    t0 = time.perf_counter()
    runs = ablation.run_ablation(
        corpus, configs=(SPK, BASE, FULL), seeds=SEEDS,
        on_run=lambda r: print(f"  {r.losses:<14} seed {r.seed}: eer {r.eer:.4f} "
                               f"(phase I {r.eer_phase1:.4f}) {r.seconds:.0f}s", flush=True))
    return runs, time.perf_counter() - t0


def test_6_ablation_ordering(sweep):
    runs, secs = sweep
    med = {c: ablation.median_eer(runs, c) for c in (SPK, BASE, FULL)}
    rel = (med[SPK] - med[FULL]) / med[SPK] if med[SPK] > 0 else 0.0
    checks = [med[SPK] > med[BASE], med[BASE] >= med[FULL], rel >= 0.20, secs < 30 * 60]
    per_seed = {c: [round(r.eer, 4) for r in runs if r.losses == c] for c in med}
    ok = all(checks)
    record_acceptance(6, ok, f"median EER {{L_S}} {med[SPK]:.4f} > {{L_S,L_R,L_adv}} {med[BASE]:.4f} "
                             f">= {{L_S,L_R,L_MI,L_IC}} {med[FULL]:.4f}: {checks[0]}/{checks[1]}; "
                             f"relative gain {100 * rel:.1f}% (need >= 20%); {secs / 60:.1f} min (< 30); "
                             f"per seed {per_seed}")
    assert ok


def test_7_disentanglement_signature(sweep):
    runs, _ = sweep
    full = [r for r in runs if r.losses == FULL]
    ratio = statistics.median(r.probe_res / r.probe_spk for r in full)
    d1 = statistics.median(r.intra_phase1 for r in full)
    d2 = statistics.median(r.intra for r in full)
    ok = ratio <= 0.5 and d2 < d1
    record_acceptance(7, ok, f"median probe acc res/spk = {ratio:.3f} (need <= 0.5; per seed "
                             f"{[(round(r.probe_res, 3), round(r.probe_spk, 3)) for r in full]}); "
                             f"median intra-speaker cosine distance phase I {d1:.4f} -> phase II {d2:.4f}")
    assert ok


def test_8_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--speakers", "3", "--utts", "3", "--seconds", "1.0", "--seed", "5",
                 "--out", str(corpus)]) == 0
    ini = tmp_path / "cfg.ini"
    ini.write_text("segment_s = 0.4\nbatch_size = 6\nphase1_epochs = 2\nphase2_epochs = 2\n"
                   "steps_per_epoch = 3\nd_emb = 16\nenc_channels = 4,4\nenc_hidden = 16\n"
                   "dec_fc = 32\ndec_channels = 4,2\ncritic_hidden = 16\nseed = 3\n")
    for name in ("a", "b"):
        assert main(["train", "--config", str(ini), "--corpus", str(corpus), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = all(same) and files == sorted(p.name for p in (tmp_path / "b").iterdir()) and "final.ckpt" in files
    record_acceptance(8, ok, f"{sum(same)}/{len(files)} output files bit-identical across two train runs "
                             f"({', '.join(files)})")
    assert ok
