"""Command-line entry point.

Exit codes: 0 on success, 1 on invalid input (bad manifest or arguments),
2 when a stage or command fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import adaptation, combination, decoding, evaluation
from .conformer import ConformerConfig, load_conformer, save_conformer, train_seq_system
from .corpus import Corpus, CorpusConfig, generate_corpus
from .manifest import ManifestError, parse_manifest, validate_manifest
from .pipeline import StageError, run_experiment
from .tdnn import TdnnConfig, TrainHyper, load_tdnn, save_tdnn, train_frame_system

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("xsyscomb")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_model(system: str, ckpt: str):
    return load_tdnn(ckpt) if system == "tdnn" else load_conformer(ckpt)


def _manifest_or_default(path: str | None):
    return validate_manifest(path) if path else parse_manifest({})


def _config_from(path: str | None, cls, section: str, fallback):
    """A config from a JSON file holding either the bare config or a manifest with that section."""
    if not path:
        return fallback
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: invalid JSON ({exc})"]) from None
    if section in raw and isinstance(raw[section], dict):
        raw = raw[section]
    try:
        cfg = cls.from_dict({**fallback.to_dict(), **raw})
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ManifestError([f"{path}: {exc}"]) from None
    return cfg


def _utts(corpus_dir: str, split: str):
    corpus = Corpus.load(corpus_dir)
    if split not in corpus.splits:
        raise UsageError(f"corpus has no split {split!r}")
    return corpus, sorted(corpus.splits[split], key=lambda u: u.utterance_id)


# ------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config_from(args.config, CorpusConfig, "corpus", _manifest_or_default(args.manifest).corpus)
    if args.noise_std is not None:
        cfg = CorpusConfig.from_dict({**cfg.to_dict(), "noise_std": args.noise_std})
    generate_corpus(cfg, args.seed).save(args.out)
    print(f"corpus written to {args.out}")
    return EXIT_OK


def cmd_train(args, kind: str) -> int:
    m = _manifest_or_default(args.manifest)
    hyper = m.tdnn_train if kind == "tdnn" else m.conformer_train
    if args.epochs is not None:
        hyper = TrainHyper.from_dict({**hyper.to_dict(), "epochs": args.epochs})
    corpus = Corpus.load(args.corpus)
    if kind == "tdnn":
        base = _config_from(args.config, TdnnConfig, "tdnn", m.tdnn)
        cfg = TdnnConfig.from_dict({**base.to_dict(), "feat_dim": corpus.config.feat_dim,
                                    "vocab_size": corpus.config.vocab_size})
        model, hist = train_frame_system(corpus, cfg, hyper, args.seed)
        save_tdnn(model, args.out, {"epoch_loss": hist.epoch_loss})
    else:
        base = _config_from(args.config, ConformerConfig, "conformer", m.conformer)
        cfg = ConformerConfig.from_dict({**base.to_dict(), "feat_dim": corpus.config.feat_dim,
                                         "vocab_size": corpus.config.vocab_size})
        model, hist = train_seq_system(corpus, cfg, hyper, args.seed)
        save_conformer(model, args.out, {"epoch_loss": hist.epoch_loss})
    print(f"{kind} checkpoint written to {args.out}; final loss {hist.epoch_loss[-1]:.4f}"
          if hist.epoch_loss else f"{kind} checkpoint written to {args.out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    model = _load_model(args.system, args.ckpt)
    corpus, utts = _utts(args.corpus, args.split)
    if args.supervision == "reference":
        sup, source = {u.utterance_id: u.reference for u in utts}, "reference"
    else:
        sup, source = decoding.one_best(decoding.read_nbest(args.supervision)), "self-decode"
        missing = [u.utterance_id for u in utts if u.utterance_id not in sup]
        if missing:
            raise UsageError(f"supervision file lacks {len(missing)} utterances, e.g. {missing[0]}")
    m = _manifest_or_default(args.manifest)
    sets = combination.speaker_sets(utts, sup, source)
    system = decoding.System(args.system, model)
    _, transforms = combination.adapt_system(system, sets, args.method, m.adaptation.hyper, args.seed, args.system)
    for t in transforms.values():
        adaptation.save_transform(t, args.out)
    print(f"{len(transforms)} speaker transforms written to {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.system, args.ckpt)
    _, utts = _utts(args.corpus, args.split)
    lhuc = adaptation.load_transforms(args.lhuc) if args.lhuc else None
    cfg = decoding.DecodeConfig(args.nbest, args.beam)
    cfg.validate()
    system = decoding.System(args.system, model, lhuc, cfg)
    decoding.write_nbest(args.out, system.decode_all(utts))
    print(f"{len(utts)} n-best lists written to {args.out}")
    return EXIT_OK


def cmd_rescore(args) -> int:
    lists = decoding.read_nbest(args.nbest)
    if args.ckpt:
        model = _load_model(args.score_with, args.ckpt)
        _, utts = _utts(args.corpus, args.split)
        by_id = {u.utterance_id: u for u in utts}
        lhuc = adaptation.load_transforms(args.lhuc) if args.lhuc else None
        system = decoding.System(args.score_with, model, lhuc)
        lists = [system.fill(nb, by_id[nb.utterance_id]) for nb in lists]
        if args.scored_out:
            decoding.write_nbest(args.scored_out, lists)
    out = combination.rescore_corpus(lists, args.beta)
    text = combination.combined_csv(out)
    _write_or_print(args.out, text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    lists = decoding.read_nbest(args.nbest)
    corpus, _ = _utts(args.corpus, args.split)
    rows = combination.weight_sweep(lists, combination.parse_grid(args.grid), corpus.references(args.split))
    _write_or_print(args.out, combination.rows_csv(rows, ("beta", "wer", "errors", "words", "best")))
    return EXIT_OK


def cmd_depth(args) -> int:
    lists = decoding.read_nbest(args.nbest)
    corpus, _ = _utts(args.corpus, args.split)
    depths = [int(d) for d in args.depths.split(",")]
    rows = combination.nbest_depth_study(lists, depths, args.beta, corpus.references(args.split))
    _write_or_print(args.out, combination.rows_csv(rows, ("depth", "wer", "oracle_wer")))
    return EXIT_OK


def cmd_cross_adapt(args) -> int:
    if args.source == args.target and args.source_ckpt == args.target_ckpt and not args.source_lhuc:
        log.info("source and target coincide: this is plain self-adaptation")
    m = _manifest_or_default(args.manifest)
    corpus = Corpus.load(args.corpus)
    source = decoding.System(args.source, _load_model(args.source, args.source_ckpt),
                             adaptation.load_transforms(args.source_lhuc) if args.source_lhuc else None,
                             decoding.DecodeConfig(1, m.decode.onebest_beam))
    target = decoding.System(args.target, _load_model(args.target, args.target_ckpt),
                             decode=decoding.DecodeConfig(1, m.decode.onebest_beam))
    adapt_utts = list(corpus.splits["adapt"]) + list(corpus.splits["test"])
    res = combination.cross_adapt(source, target, adapt_utts, corpus.splits["test"], m.adaptation.hyper, args.seed)
    out = Path(args.out)
    for t in res.transforms.values():
        adaptation.save_transform(t, out / "lhuc")
    decoding.write_nbest(out / "decode.jsonl", res.decodes)
    wer = evaluation.corpus_wer(corpus.references("test"), decoding.one_best(res.decodes)).wer
    print(f"{args.source} => {args.target}: supervision WER {res.supervision_wer:.2f}%, test WER {wer:.2f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    corpus, _ = _utts(args.ref, args.split)
    refs = corpus.references(args.split)
    rows = []
    for i, path in enumerate(args.hyp, start=1):
        s = evaluation.corpus_wer(refs, decoding.one_best(decoding.read_nbest(path)))
        rows.append(evaluation.ReportRow(str(i), Path(path).stem, wers={args.split: s.wer}))
    csv_text, table = evaluation.report_table(rows, [args.split])
    if args.out:
        Path(args.out).write_text(csv_text)
    print(table, end="")
    return EXIT_OK


def cmd_sigtest(args) -> int:
    corpus, _ = _utts(args.ref, args.split)
    refs = corpus.references(args.split)
    a = evaluation.corpus_wer(refs, decoding.one_best(decoding.read_nbest(args.hyp_a)))
    b = evaluation.corpus_wer(refs, decoding.one_best(decoding.read_nbest(args.hyp_b)))
    r = evaluation.paired_test(a.per_utt, b.per_utt, args.alpha)
    print(json.dumps({"wer_a": round(a.wer, 4), "wer_b": round(b.wer, 4), "z": r.z_statistic, "p": r.p_value,
                      "significant": r.significant, "degenerate": r.degenerate}))
    return EXIT_OK


def cmd_run(args) -> int:
    m = validate_manifest(args.manifest)
    root = run_experiment(m, args.out, force=args.force)
    print((root / "summary.txt").read_text(), end="")
    print(f"experiment directory: {root}")
    return EXIT_OK


def cmd_validate(args) -> int:
    m = validate_manifest(args.manifest)
    print(f"manifest ok (hash {m.digest()})")
    return EXIT_OK


def _write_or_print(out: str | None, text: str) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        print(text, end="")


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xsyscomb", description="Cross-system combination of frame- and label-synchronous recognisers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (stages currently run serially)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def manifest_opt(sp):
        sp.add_argument("--manifest", help="take hyperparameters from this manifest")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--noise-std", type=float)
    sp.add_argument("--config", help="corpus config JSON (or a manifest)")
    manifest_opt(sp)
    sp.set_defaults(func=cmd_gen_data)

    for name, kind in (("train-tdnn", "tdnn"), ("train-conformer", "cfm")):
        sp = sub.add_parser(name, help=f"train the {kind} system")
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--config", help="model config JSON (or a manifest)")
        manifest_opt(sp)
        sp.set_defaults(func=lambda a, k=kind: cmd_train(a, k))

    sp = sub.add_parser("adapt", help="estimate per-speaker LHUC parameters")
    sp.add_argument("--system", choices=("tdnn", "cfm"), required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="adapt")
    sp.add_argument("--method", choices=("lhuc", "blhuc"), default="lhuc")
    sp.add_argument("--supervision", default="reference", help="'reference' or an n-best file")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--out", required=True)
    manifest_opt(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("decode", help="write n-best lists")
    sp.add_argument("--system", choices=("tdnn", "cfm"), required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--lhuc", help="directory of per-speaker transforms")
    sp.add_argument("--nbest", type=int, default=100)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("rescore", help="two-pass rescoring at one weight")
    sp.add_argument("--nbest", required=True)
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--score-with", choices=("tdnn", "cfm"), default="cfm")
    sp.add_argument("--ckpt", help="fill missing scores with this model first")
    sp.add_argument("--corpus")
    sp.add_argument("--split", default="test")
    sp.add_argument("--lhuc")
    sp.add_argument("--scored-out", help="also write the fully scored n-best lists here")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rescore)

    sp = sub.add_parser("sweep", help="WER across combination weights")
    sp.add_argument("--nbest", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--grid", default="0:1:0.1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("depth-study", help="WER and oracle WER across n-best depths")
    sp.add_argument("--nbest", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--depths", default="10,25,50,100")
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_depth)

    sp = sub.add_parser("cross-adapt", help="adapt one system to another's 1-best output")
    sp.add_argument("--source", choices=("tdnn", "cfm"), required=True)
    sp.add_argument("--target", choices=("tdnn", "cfm"), required=True)
    sp.add_argument("--source-ckpt", required=True)
    sp.add_argument("--target-ckpt", required=True)
    sp.add_argument("--source-lhuc")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--out", required=True)
    manifest_opt(sp)
    sp.set_defaults(func=cmd_cross_adapt)

    sp = sub.add_parser("evaluate", help="score n-best files against the references")
    sp.add_argument("--ref", required=True, help="corpus directory")
    sp.add_argument("--hyp", required=True, nargs="+")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sigtest", help="matched-pairs significance test between two systems")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp-a", required=True)
    sp.add_argument("--hyp-b", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.set_defaults(func=cmd_sigtest)

    sp = sub.add_parser("run", help="run a full experiment from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="experiment directory (overrides the manifest)")
    sp.add_argument("--force", action="store_true", help="ignore completed-stage markers")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("validate", help="check a manifest")
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        for err in exc.errors:
            print(f"manifest error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
