"""Command-line entry point: synth, trials, train, eval, verify, features."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .train import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("spkdisent")


class UsageError(Exception):
    pass


def _config_help() -> str:
    lines = ["training config keys (file entries or --set key=value):"]
    for f in fields(TrainConfig):
        lines.append(f"  {f.name} = {f.default}")
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="spkdisent", description="Disentangled speaker embedding toolkit.",
                epilog=_config_help(), formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic source-filter corpus")
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utts", type=int, default=10)
    s.add_argument("--seconds", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("trials", help="write a balanced trial list for a corpus")
    t.add_argument("--corpus", required=True, type=Path)
    t.add_argument("--targets", type=int, default=200)
    t.add_argument("--nontargets", type=int, default=200)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--out", required=True, type=Path)

    tr = sub.add_parser("train", help="run both training phases", epilog=_config_help(),
                        formatter_class=fmt)
    tr.add_argument("--config", type=Path, help="INI-style key = value file (no section header needed)")
    tr.add_argument("--corpus", required=True, type=Path)
    tr.add_argument("--out", required=True, type=Path)
    tr.add_argument("--ablation", help="comma-joined loss set, e.g. ls,lr,lmi,lic")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")

    e = sub.add_parser("eval", help="score trials and export embeddings")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--corpus", required=True, type=Path)
    e.add_argument("--trials", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)

    v = sub.add_parser("verify", help="run a self-check suite")
    v.add_argument("--suite", required=True, choices=["gradcheck", "mi-bench", "eer-oracle", "all"])

    f = sub.add_parser("features", help="dump log-power or log-mel features of one WAV to CSV")
    f.add_argument("--wav", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--kind", choices=["spec", "mel"], default="mel")
    return p


def load_train_config(config: Path | None, ablation: str | None, sets: list[str]) -> TrainConfig:
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if ablation is not None:
        overrides["losses"] = ablation
    try:
        if config is not None:
            if not config.is_file():
                raise UsageError(f"config file {config} not found")
            return TrainConfig.from_file(config, **overrides)
        return TrainConfig.from_text("", **overrides)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc.args[0] if exc.args else exc)) from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(a) -> int:
    from .data import generate_synthetic_corpus, write_corpus

    if a.speakers < 2:
        raise UsageError("--speakers must be at least 2 (same-speaker pairs need another speaker to contrast)")
    if a.utts < 2:
        raise UsageError("--utts must be at least 2")
    if a.seconds <= 0:
        raise UsageError("--seconds must be positive")
    corpus = generate_synthetic_corpus(a.speakers, a.utts, a.seconds, a.seed)
    manifest = write_corpus(corpus, a.out)
    print(f"wrote {len(corpus)} utterances from {len(corpus.speakers)} speakers; manifest {manifest}")
    return EXIT_OK


def cmd_trials(a) -> int:
    from .data import load_corpus, make_trials, write_trials

    corpus = load_corpus(a.corpus)
    trials = make_trials(corpus, a.targets, a.nontargets, a.seed)
    write_trials(trials, a.out)
    print(f"wrote {len(trials)} trials to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .data import load_corpus
    from .train import fit

    cfg = load_train_config(a.config, a.ablation, a.set)
    min_s = cfg.segment_s + cfg.hop_ms / 1000.0  # room for two distinct offsets
    corpus = load_corpus(a.corpus, min_seconds=min_s)
    if corpus.rejected:
        print(f"rejected {len(corpus.rejected)} utterance(s) shorter than {min_s:.3f}s", file=sys.stderr)
    res = fit(cfg, corpus, a.out)
    last = res.log_rows[-1] if res.log_rows else {}
    print(f"trained {len(res.log_rows)} steps on {len(corpus)} utterances ({cfg.losses}); "
          f"final total {last.get('total')}; checkpoints in {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .data import load_corpus, read_trials
    from .evaluate import EmbeddingCache, evaluate, export_embeddings, write_scores
    from .nets import ModelBundle

    if not a.model.is_file():
        raise FileNotFoundError(f"checkpoint {a.model} not found")
    trials = read_trials(a.trials)
    model = ModelBundle.load(a.model)
    corpus = load_corpus(a.corpus)
    cache = EmbeddingCache(model, corpus)
    ev = evaluate(model, corpus, trials, cache)
    a.out.mkdir(parents=True, exist_ok=True)
    write_scores(ev.rows, a.out / "scores.csv")
    n = export_embeddings(model, corpus, a.out / "embeddings.csv", cache)
    print(f"EER {ev.result.eer:.4f} ({100 * ev.result.eer:.4f}%) over {len(trials)} trials")
    print(f"wrote {a.out / 'scores.csv'} and {a.out / 'embeddings.csv'} ({n} rows)")
    return EXIT_OK


def cmd_verify(a) -> int:
    from .verify import SUITES

    names = list(SUITES) if a.suite == "all" else [a.suite]
    failed = 0
    for name in names:
        for case in SUITES[name]():
            print(case.line())
            failed += not case.passed
    print(f"{'FAILED' if failed else 'OK'}: {failed} failing case(s)")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_features(a) -> int:
    from .dsp import FeatureExtractor, read_wav, write_feature_csv

    w = read_wav(a.wav)
    spec, mel = FeatureExtractor(w.sample_rate)(w)
    out = spec if a.kind == "spec" else mel
    write_feature_csv(a.out, out)
    print(f"wrote {out.shape[0]}x{out.shape[1]} {a.kind} features to {a.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "trials": cmd_trials, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "features": cmd_features}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, parse errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"spkdisent {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures become exit 2 with a one-line reason
        if args.verbose:
            log.exception("command failed")
        print(f"spkdisent {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
