"""End-to-end experiment runner with resumable, hash-stamped stages.

Stage order::

    gen-data -> train-tdnn, train-conformer -> si-decode -> self-adapt
      -> adapted-decode -> rescore, cross-adapt, sparse-adapt -> report

Each stage writes ``stages/<name>.done`` holding a hash of its inputs (the
manifest sections it reads plus its upstream hashes).  A rerun skips stages
whose marker matches and recomputes everything downstream of a stage that ran.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .adaptation import load_transforms, save_transform
from .combination import (
    adapt_system, cross_adapt, nbest_depth_study, rescore_corpus, rows_csv, speaker_sets, weight_sweep,
    combined_csv,
)
from .conformer import load_conformer, save_conformer, train_seq_system
from .corpus import Corpus, generate_corpus
from .decoding import DecodeConfig, System, one_best, read_nbest, write_nbest
from .evaluation import ReportRow, corpus_wer, paired_test, report_table
from .manifest import SCHEMA_VERSION, ExperimentManifest
from .rng import derive_seed
from .tdnn import load_tdnn, save_tdnn, train_frame_system

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-tdnn", "train-conformer", "si-decode", "self-adapt", "adapted-decode",
          "rescore", "cross-adapt", "sparse-adapt", "report")

# stage -> (manifest sections read, upstream stages)
DEPENDENCIES = {
    "gen-data": (("corpus",), ()),
    "train-tdnn": (("tdnn", "tdnn_train"), ("gen-data",)),
    "train-conformer": (("conformer", "conformer_train"), ("gen-data",)),
    "si-decode": (("decode",), ("train-tdnn", "train-conformer")),
    "self-adapt": (("adaptation",), ("si-decode",)),
    "adapted-decode": (("decode",), ("self-adapt",)),
    "rescore": (("combination",), ("adapted-decode",)),
    "cross-adapt": (("adaptation", "decode"), ("adapted-decode",)),
    "sparse-adapt": (("adaptation", "decode"), ("si-decode",)),
    "report": (("combination",), ("si-decode", "adapted-decode", "rescore", "cross-adapt")),
}

SUMMARY_COLUMNS = ("schema", "manifest", "id", "system", "combination", "weights", "wer_test", "sig_test")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


def stage_seed(master_seed: int, stage: str) -> int:
    """Seed of a pipeline stage: SplitMix64 of the master seed xor FNV-1a64(stage name)."""
    return derive_seed(master_seed, f"stage/{stage}")


@dataclass
class Experiment:
    manifest: ExperimentManifest
    root: Path

    # ----------------------------------------------------------- paths

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def marker(self, stage: str) -> Path:
        return self.path("stages", f"{stage}.done")

    def input_hash(self, stage: str) -> str:
        sections, upstream = DEPENDENCIES[stage]
        h = hashlib.sha256()
        h.update(f"{stage}:{self.manifest.seed}:{self.manifest.section_digest(*sections)}".encode())
        for up in upstream:
            h.update(self.input_hash(up).encode())
        return h.hexdigest()[:16]

    def is_done(self, stage: str) -> bool:
        m = self.marker(stage)
        if not m.exists():
            return False
        return json.loads(m.read_text()).get("input_hash") == self.input_hash(stage)

    def seed(self, stage: str) -> int:
        return stage_seed(self.manifest.seed, stage)

    # --------------------------------------------------------- loaders

    def corpus(self) -> Corpus:
        if not hasattr(self, "_corpus"):
            self._corpus = Corpus.load(self.path("corpus"))
        return self._corpus

    def onebest_cfg(self) -> DecodeConfig:
        d = self.manifest.decode.nbest
        return DecodeConfig(1, self.manifest.decode.onebest_beam, d.length_norm, d.max_len, d.max_len_penalty)

    def tdnn(self, lhuc_dir: str | None = None, name: str = "tdnn") -> System:
        lhuc = load_transforms(self.path("lhuc", lhuc_dir)) if lhuc_dir else None
        return System(name, load_tdnn(self.path("models", "tdnn.ckpt")), lhuc, self.manifest.decode.nbest)

    def cfm(self, lhuc_dir: str | None = None, name: str = "cfm") -> System:
        lhuc = load_transforms(self.path("lhuc", lhuc_dir)) if lhuc_dir else None
        return System(name, load_conformer(self.path("models", "cfm.ckpt")), lhuc, self.onebest_cfg())

    def test_utts(self):
        return sorted(self.corpus().splits["test"], key=lambda u: u.utterance_id)

    def adapt_utts(self):
        c = self.corpus()
        utts = list(c.splits["adapt"])
        if self.manifest.adaptation.data == "adapt+test":
            utts += c.splits["test"]
        return sorted(utts, key=lambda u: u.utterance_id)

    def decodes(self, name: str) -> dict[str, tuple[int, ...]]:
        """1-best tokens for every adaptation and test utterance decoded under ``name``."""
        out = one_best(read_nbest(self.path("decode", f"{name}.jsonl")))
        extra = self.path("decode", f"{name}.adapt.jsonl")
        if extra.exists():
            out.update(one_best(read_nbest(extra)))
        return out

    def write_json(self, rel: str, obj) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")

    # ---------------------------------------------------------- stages

    def stage_gen_data(self) -> None:
        generate_corpus(self.manifest.corpus, self.seed("gen-data")).save(self.path("corpus"))

    def stage_train_tdnn(self) -> None:
        m = self.manifest
        model, hist = train_frame_system(self.corpus(), m.tdnn, m.tdnn_train, self.seed("train-tdnn"))
        save_tdnn(model, self.path("models", "tdnn.ckpt"), {"epoch_loss": hist.epoch_loss})
        self.write_json("models/tdnn.log.json", {"epoch_loss": hist.epoch_loss, "orth_residual": hist.orth_residual})

    def stage_train_conformer(self) -> None:
        m = self.manifest
        model, hist = train_seq_system(self.corpus(), m.conformer, m.conformer_train, self.seed("train-conformer"))
        save_conformer(model, self.path("models", "cfm.ckpt"), {"epoch_loss": hist.epoch_loss})
        self.write_json("models/cfm.log.json", {"epoch_loss": hist.epoch_loss})

    def _decode(self, system: System, name: str, extra_adapt: bool, cfg: DecodeConfig | None = None) -> None:
        write_nbest(self.path("decode", f"{name}.jsonl"), system.decode_all(self.test_utts(), cfg))
        if extra_adapt:
            write_nbest(self.path("decode", f"{name}.adapt.jsonl"),
                        system.decode_all(self.corpus().splits["adapt"], self.onebest_cfg() if system.kind == "tdnn" else cfg))

    def stage_si_decode(self) -> None:
        self._decode(self.tdnn(), "tdnn_si", True)
        self._decode(self.cfm(), "cfm_si", True)

    def _self_adapt(self, system: System, source: str, method: str, out: str) -> None:
        sets = speaker_sets(self.adapt_utts(), self.decodes(source), "self-decode")
        _, transforms = adapt_system(system, sets, method, self.manifest.adaptation.hyper,
                                     self.seed("self-adapt"), out)
        for t in transforms.values():
            save_transform(t, self.path("lhuc", out))

    def stage_self_adapt(self) -> None:
        self._self_adapt(self.tdnn(), "tdnn_si", "lhuc", "tdnn_lhuc")
        self._self_adapt(self.tdnn(), "tdnn_si", "blhuc", "tdnn_blhuc")
        method = "blhuc" if self.manifest.adaptation.bayesian_conformer else "lhuc"
        self._self_adapt(self.cfm(), "cfm_si", method, "cfm_lhuc")

    def stage_adapted_decode(self) -> None:
        self._decode(self.tdnn("tdnn_lhuc"), "tdnn_lhuc", False)
        self._decode(self.tdnn("tdnn_blhuc"), "tdnn_blhuc", True)
        self._decode(self.cfm("cfm_lhuc"), "cfm_lhuc", True)

    def stage_rescore(self) -> None:
        m = self.manifest
        corpus = self.corpus()
        cfm = self.cfm("cfm_lhuc")
        utts = {u.utterance_id: u for u in self.test_utts()}
        lists = [cfm.fill(nb, utts[nb.utterance_id]) for nb in read_nbest(self.path("decode", "tdnn_blhuc.jsonl"))]
        write_nbest(self.path("rescore", "combined.jsonl"), lists)
        refs = corpus.references("test")
        sweep = weight_sweep(lists, m.combination.config.grid, refs)
        self.path("rescore", "sweep.csv").write_text(rows_csv(sweep, ("beta", "wer", "errors", "words", "best")))
        best = next(r.beta for r in sweep if r.best)
        beta = m.combination.depth_beta if m.combination.depth_beta is not None else best
        depth = nbest_depth_study(lists, m.combination.config.depths, beta, refs)
        self.path("rescore", "depth.csv").write_text(rows_csv(depth, ("depth", "wer", "oracle_wer")))
        self.path("rescore", "rescored.csv").write_text(combined_csv(rescore_corpus(lists, best)))

    def stage_cross_adapt(self) -> None:
        hyper = self.manifest.adaptation.hyper
        seed = self.seed("cross-adapt")
        info = {}
        for source, target, name in ((self.cfm("cfm_lhuc", "cfm_lhuc"), self.tdnn(), "cfm_lhuc=>tdnn"),
                                     (self.tdnn("tdnn_blhuc", "tdnn_blhuc"), self.cfm(), "tdnn_blhuc=>cfm")):
            standalone = self.decodes("tdnn_si" if target.kind == "tdnn" else "cfm_si")
            res = cross_adapt(source, target, self.adapt_utts(), self.test_utts(), hyper, seed,
                              source_decodes=self.decodes(source.name), standalone=standalone)
            tag = name.replace("=>", "2")
            for t in res.transforms.values():
                save_transform(t, self.path("lhuc", tag))
            write_nbest(self.path("decode", f"{tag}.jsonl"), res.decodes)
            info[name] = {"supervision_wer": round(res.supervision_wer, 4), "changed_utterances": res.changed}
        self.write_json("cross/info.json", info)

    def stage_sparse_adapt(self) -> None:
        """TDNN LHUC vs Bayesian LHUC when each speaker has only the held-out adaptation utterances."""
        refs = self.corpus().references("test")
        sets = speaker_sets(self.corpus().splits["adapt"], self.decodes("tdnn_si"), "self-decode")
        info = {"utterances_per_speaker": max(len(s.utterances) for s in sets.values())}
        for method in ("lhuc", "blhuc"):
            adapted, _ = adapt_system(self.tdnn(), sets, method, self.manifest.adaptation.hyper,
                                      self.seed("sparse-adapt"), f"tdnn_{method}_sparse")
            hyps = one_best(adapted.decode_all(self.test_utts(), self.onebest_cfg()))
            info[f"wer_{method}"] = round(corpus_wer(refs, hyps).wer, 4)
        self.write_json("sparse/info.json", info)

    def stage_report(self) -> None:
        m = self.manifest
        refs = self.corpus().references("test")
        alpha = m.combination.alpha
        systems: list[tuple[str, str, str, dict]] = []
        for label, name in (("TDNN SI", "tdnn_si"), ("CFM SI", "cfm_si"), ("TDNN LHUC", "tdnn_lhuc"),
                            ("TDNN BLHUC", "tdnn_blhuc"),
                            ("CFM BLHUC" if m.adaptation.bayesian_conformer else "CFM LHUC", "cfm_lhuc")):
            systems.append((label, "-", "-", one_best(read_nbest(self.path("decode", f"{name}.jsonl")))))
        lists = read_nbest(self.path("rescore", "combined.jsonl"))
        for beta in m.combination.config.grid:
            hyps = {u: o.tokens for u, o in rescore_corpus(lists, beta).items()}
            systems.append(("TDNN BLHUC + CFM LHUC", "two-pass", f"{beta:.1f}/{1 - beta:.1f}", hyps))
        systems.append(("CFM LHUC => TDNN BLHUC", "cross-adapt", "-",
                        one_best(read_nbest(self.path("decode", "cfm_lhuc2tdnn.jsonl")))))
        systems.append(("TDNN BLHUC => CFM LHUC", "cross-adapt", "-",
                        one_best(read_nbest(self.path("decode", "tdnn_blhuc2cfm.jsonl")))))
        baseline = corpus_wer(refs, systems[0][3])
        rows = []
        for i, (label, comb, weights, hyps) in enumerate(systems, start=1):
            s = corpus_wer(refs, hyps)
            sig = False if i == 1 else paired_test(s.per_utt, baseline.per_utt, alpha).significant
            rows.append(ReportRow(str(i), label, comb, weights, {"test": s.wer}, {"test": sig}))
        csv_text, table = report_table(rows, ["test"])
        self.path("summary.csv").write_text(stamp_summary(csv_text, m.digest()))
        self.path("summary.txt").write_text(table)

    # ------------------------------------------------------------- run

    def run(self, stages=STAGES, force: bool = False) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.write_json("manifest.json", self.manifest.to_dict())
        ran: set[str] = set()
        for stage in stages:
            stale_upstream = any(up in ran for up in DEPENDENCIES[stage][1])
            if not force and not stale_upstream and self.is_done(stage):
                log.info("%s: up to date", stage)
                continue
            self.marker(stage).unlink(missing_ok=True)
            start = time.perf_counter()
            log.info("%s: running", stage)
            try:
                getattr(self, "stage_" + stage.replace("-", "_"))()
            except Exception as exc:  # the partial outputs stay on disk
                raise StageError(stage, exc) from exc
            elapsed = time.perf_counter() - start
            self.write_json(f"stages/{stage}.done", {"stage": stage, "input_hash": self.input_hash(stage),
                                                     "seconds": round(elapsed, 3)})
            ran.add(stage)
            log.info("%s: done in %.1fs", stage, elapsed)
        return self.root


def stamp_summary(csv_text: str, digest: str) -> str:
    """Prefix every row of the report CSV with the schema version and manifest hash."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SUMMARY_COLUMNS))
    for r in rows[1:]:
        w.writerow([SCHEMA_VERSION, digest, *r])
    return buf.getvalue()


def read_summary(path) -> list[dict[str, str]]:
    with Path(path).open() as f:
        return list(csv.DictReader(f))


def run_experiment(manifest: ExperimentManifest, out_dir=None, force: bool = False) -> Path:
    root = Path(out_dir) if out_dir is not None else manifest.experiment_dir()
    return Experiment(manifest, root).run(force=force)
