"""Experiment configuration and the train -> evaluate -> analyze -> report pipeline.

A run directory looks like::

    config.yaml            resolved configuration
    encoder.ckpt           frozen encoder (pretrained here unless supplied)
    decoders/L{n}.ckpt     best decoder per sequence length
    training/train_L{n}.jsonl
    records/{kind}_L{n}.jsonl
    analysis/tables.json   analysis tables before rendering
    reports/*.csv          delimited tables; reports/plot_data/*.csv
    figures/*.png
    manifest.json          seeds, checksums, stage status, file digests
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import (
    category_omission,
    corpus_frequency,
    f1_by_length,
    frequency_group_omission,
    paired_comparison,
    pairwise_ttests,
    per_source_f1,
    perplexity_omission_correlation,
    repeat_summary,
    synthetic_numeric_sequences,
    supported_samples,
    top_omitted,
)
from .corpus import CHARCLASS, CorpusRecord, charclass_labels, ingest, stream
from .latent import freeze
from .metrics import ReconstructionRecord, numeric_deviation, position_errors
from .plotting import render_figures
from .reports import SCHEMAS, Table, emit_reports
from .ssm import ModelConfig, SelectiveSSM, load_model, lm_forward, param_checksum, save_model
from .tokenizer import BOS, DIGIT_IDS, detokenize, token_repr
from .training import (
    PretrainConfig,
    TrainConfig,
    TrainingReport,
    chunk_stream,
    pretrain_encoder,
    reconstruct_chunks,
    train_until_converged,
)

log = logging.getLogger(__name__)

DECISIONS = {
    "rouge_unit": "model tokens (bytes), unigram F1 with clipping",
    "early_stopping_reference": "best_so_far",
    "ttest": "Welch, one sample per sequence per category, Bonferroni over all pairs",
    "correlation": "Spearman",
    "decoding": "greedy; decoder fed BOS after state injection",
    "position_alignment": "edit-distance alignment, moved tokens credited nearest-first",
    "omission_clamp": "reproduced counts clipped per sequence",
}


@dataclass
class DataSpec:
    path: str
    format: str = "text"
    source: str | None = None
    label_column: int = -1
    scheme: str | None = None


@dataclass
class PairedSpec(DataSpec):
    variant_a: str = "as_written"
    variant_b: str = "upper_case"


@dataclass
class EvalConfig:
    n_per_source: int = 150
    n_synthetic: int = 200
    n_repeated: int = 100
    min_frequency: int = 100
    min_support: int = 100
    alpha: float = 0.05
    n_perplexity_bins: int = 10
    max_gen_tokens: int = 300


@dataclass
class ExperimentConfig:
    train_data: DataSpec
    validation_data: DataSpec
    eval_data: list[DataSpec]
    lengths: list[int] = field(default_factory=lambda: [4, 8, 16, 32, 64])
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    max_steps_by_length: dict[int, int] = field(default_factory=dict)
    annotations: list[DataSpec] = field(default_factory=list)
    paired: PairedSpec | None = None
    encoder_checkpoint: str | None = None
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            train_data=DataSpec(**d.pop("train_data")),
            validation_data=DataSpec(**d.pop("validation_data")),
            eval_data=[DataSpec(**e) for e in d.pop("eval_data")],
            model=ModelConfig(**d.pop("model", {})),
            pretrain=PretrainConfig(**d.pop("pretrain", {})),
            train=TrainConfig(**d.pop("train", {})),
            annotations=[DataSpec(**a) for a in d.pop("annotations", [])],
            paired=PairedSpec(**d["paired"]) if d.get("paired") else None,
            evaluation=EvalConfig(**d.pop("evaluation", {})),
            max_steps_by_length={int(k): int(v) for k, v in (d.pop("max_steps_by_length", None) or {}).items()},
            **{k: v for k, v in d.items() if k not in ("paired", "base_dir")},
        )
        cfg.base_dir = str(d.get("base_dir", base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else (Path(self.base_dir) / path).resolve()

    def validate(self) -> None:
        paths = [self.resolve(self.train_data.path), self.resolve(self.validation_data.path)]
        paths += [self.resolve(e.path) for e in self.eval_data]
        if len(set(paths)) != len(paths):
            raise ValueError("train, validation and eval corpora must be distinct files")
        if not self.lengths or any(L < 1 for L in self.lengths):
            raise ValueError("lengths must be positive")

    def train_config(self, length: int, max_steps: int | None = None) -> TrainConfig:
        d = asdict(self.train)
        d["sequence_length"] = length
        d["seed"] = self.seed + length
        if length in self.max_steps_by_length:
            d["max_steps"] = self.max_steps_by_length[length]
        if max_steps is not None:
            d["max_steps"] = max_steps
        return TrainConfig(**d)


# --- helpers -----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_jsonl(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_records(path) -> list[ReconstructionRecord]:
    return [ReconstructionRecord.from_dict(d) for d in read_jsonl(path)]


def _corpus_tokens(cfg: ExperimentConfig, spec: DataSpec) -> list[int]:
    toks, _ = stream(ingest(cfg.resolve(spec.path), spec.format, spec.source, spec.label_column))
    return toks


@torch.no_grad()
def batch_perplexity(model: SelectiveSSM, chunks: list[list[int]], batch_size: int = 128) -> list[float]:
    out = []
    for i in range(0, len(chunks), batch_size):
        x = torch.tensor(chunks[i:i + batch_size], dtype=torch.long)
        inp = torch.cat([torch.full((x.shape[0], 1), BOS), x[:, :-1]], dim=1)
        logits, _ = lm_forward(model, inp)
        logp = torch.log_softmax(logits.double(), -1).gather(-1, x.unsqueeze(-1)).squeeze(-1)
        out.extend(torch.exp(-logp.mean(-1)).tolist())
    return out


# --- stages ----------------------------------------------------------------------

class Run:
    """One run directory and the stages that fill it."""

    def __init__(self, cfg: ExperimentConfig, out_dir, resume: bool = False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.resume = resume
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        self.manifest.setdefault("stages", {})
        (self.out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

    def _mark(self, stage: str, status: str) -> None:
        self.manifest["stages"][stage] = status
        self._write_manifest()

    def _write_manifest(self) -> None:
        self.manifest["version"] = __version__
        self.manifest["seed"] = self.cfg.seed
        self.manifest["decisions"] = DECISIONS
        files = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p != self.manifest_path:
                files[str(p.relative_to(self.out))] = sha256_file(p)
        self.manifest["files"] = files
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def _stage(self, name, fn, *args, **kw):
        self._mark(name, "running")
        try:
            result = fn(*args, **kw)
        except BaseException:
            self._mark(name, "failed")
            raise
        self._mark(name, "complete")
        return result

    # encoder -------------------------------------------------------------
    def encoder(self) -> SelectiveSSM:
        path = self.out / "encoder.ckpt"
        if path.exists():
            model, _ = load_model(path)
        elif self.cfg.encoder_checkpoint:
            model, _ = load_model(self.cfg.resolve(self.cfg.encoder_checkpoint))
            save_model(path, model, {"origin": "supplied"})
        else:
            log.info("pretraining encoder on %s", self.cfg.train_data.path)
            model = SelectiveSSM(self.cfg.model, seed=self.cfg.seed)
            pcfg = PretrainConfig(**{**asdict(self.cfg.pretrain), "seed": self.cfg.seed})
            losses = pretrain_encoder(model, _corpus_tokens(self.cfg, self.cfg.train_data), pcfg)
            save_model(path, model, {"origin": "pretrained", "final_loss": float(np.mean(losses[-50:]))})
            model, _ = load_model(path)
        freeze(model)
        checksum = param_checksum(model)
        prev = self.manifest.get("encoder_checksum_pre")
        if prev is not None and prev != checksum:
            raise RuntimeError("encoder checkpoint differs from the one recorded in the manifest")
        self.manifest["encoder_checksum_pre"] = checksum
        return model

    def decoder_path(self, L: int) -> Path:
        return self.out / "decoders" / f"L{L}.ckpt"

    def report_path(self, L: int) -> Path:
        return self.out / "training" / f"train_L{L}.jsonl"

    def decoders(self, lengths) -> dict[int, SelectiveSSM]:
        out = {}
        for L in lengths:
            if not self.decoder_path(L).exists():
                raise FileNotFoundError(f"no decoder checkpoint for length {L}; run `train` first")
            out[L], _ = load_model(self.decoder_path(L))
            freeze(out[L])
        return out

    # stages --------------------------------------------------------------
    def train(self, lengths=None, max_steps: int | None = None) -> None:
        self._stage("train", self._train, lengths or self.cfg.lengths, max_steps)

    def _train(self, lengths, max_steps):
        encoder = self.encoder()
        train_toks = _corpus_tokens(self.cfg, self.cfg.train_data)
        val_toks = _corpus_tokens(self.cfg, self.cfg.validation_data)
        for L in lengths:
            if self.resume and self.decoder_path(L).exists() and self.report_path(L).exists():
                log.info("length %d already trained; skipping", L)
                continue
            tcfg = self.cfg.train_config(L, max_steps)
            decoder, report = train_until_converged(tcfg, encoder, train_toks, val_toks)
            save_model(self.decoder_path(L), decoder, {"sequence_length": L, "best_step": report.best_step})
            report.write(self.report_path(L))
        self.manifest["encoder_checksum_post"] = param_checksum(encoder)

    def evaluate(self, lengths=None) -> None:
        self._stage("evaluate", self._evaluate, lengths or self.cfg.lengths)

    def _eval_items(self, L: int, rng_seed: int):
        """Natural-text chunks per source, sampled without replacement."""
        by_source = defaultdict(list)
        for spec in self.cfg.eval_data:
            for rec in ingest(self.cfg.resolve(spec.path), spec.format, spec.source, spec.label_column):
                by_source[rec.source or spec.source or Path(spec.path).stem].append(rec)
        items = []
        for src in sorted(by_source):
            toks, _ = stream(by_source[src])
            chunks = chunk_stream(toks, L)
            rng = np.random.default_rng([rng_seed, L, len(items)])
            n = min(self.cfg.evaluation.n_per_source, len(chunks))
            for i in np.sort(rng.choice(len(chunks), n, replace=False)):
                items.append((src, chunks[i]))
        return items

    def _evaluate(self, lengths):
        encoder = self.encoder()
        decoders = self.decoders(lengths)
        ev = self.cfg.evaluation
        seed = self.cfg.seed
        rec_dir = self.out / "records"
        for L in lengths:
            dec = decoders[L]
            items = self._eval_items(L, seed)
            chunks = [c for _, c in items]
            recs = reconstruct_chunks(encoder, dec, chunks, ev.max_gen_tokens)
            ppl = batch_perplexity(encoder, chunks)
            write_jsonl(rec_dir / f"natural_L{L}.jsonl", [
                ReconstructionRecord(c, r, charclass_labels(c), src, perplexity=p).to_dict()
                for (src, c), r, p in zip(items, recs, ppl)
            ])

            digits = synthetic_numeric_sequences(L, ev.n_synthetic, seed)
            recs = reconstruct_chunks(encoder, dec, digits, ev.max_gen_tokens)
            write_jsonl(rec_dir / f"synthetic_L{L}.jsonl", [
                ReconstructionRecord(s, r, source="synthetic_numeric").to_dict() for s, r in zip(digits, recs)
            ])

            rng = np.random.default_rng([seed, L, 7])
            alphabet = sorted({t for _, c in items for t in c if 33 <= t < 127})
            toks = rng.choice(np.asarray(alphabet), size=ev.n_repeated).tolist() if alphabet else []
            seqs = [[t] * L for t in toks]
            recs = reconstruct_chunks(encoder, dec, seqs, ev.max_gen_tokens) if seqs else []
            write_jsonl(rec_dir / f"repeated_L{L}.jsonl", [
                ReconstructionRecord(s, r, source="repeated_token").to_dict() for s, r in zip(seqs, recs)
            ])

            for spec in self.cfg.annotations:
                recs_in = ingest(self.cfg.resolve(spec.path), spec.format, spec.source, spec.label_column)
                toks, labels = stream(recs_in, sep=" ")
                if labels is None:
                    raise ValueError(f"{spec.path}: annotation corpus carries no labels")
                chunks = chunk_stream(toks, L)
                lab_chunks = chunk_stream(labels, L)
                recs = reconstruct_chunks(encoder, dec, chunks, ev.max_gen_tokens) if chunks else []
                scheme = spec.scheme or Path(spec.path).stem
                write_jsonl(rec_dir / f"annotated-{scheme}_L{L}.jsonl", [
                    ReconstructionRecord(c, r, lab, scheme).to_dict() for c, lab, r in zip(chunks, lab_chunks, recs)
                ])

            if self.cfg.paired is not None:
                p = self.cfg.paired
                pairs = defaultdict(dict)
                for rec in ingest(self.cfg.resolve(p.path), p.format, p.source):
                    pairs[rec.pair_id][rec.variant] = rec.tokens()
                keep = [
                    pid for pid in sorted(pairs, key=lambda s: (len(s), s))
                    if all(len(pairs[pid].get(v, [])) >= L for v in (p.variant_a, p.variant_b))
                ][:ev.n_per_source]
                seqs, meta = [], []
                for pid in keep:
                    for v in (p.variant_a, p.variant_b):
                        seqs.append(pairs[pid][v][:L])
                        meta.append((pid, v))
                recs = reconstruct_chunks(encoder, dec, seqs, ev.max_gen_tokens) if seqs else []
                write_jsonl(rec_dir / f"paired_L{L}.jsonl", [
                    ReconstructionRecord(s, r, source=v, pair_id=pid, variant=v).to_dict()
                    for s, r, (pid, v) in zip(seqs, recs, meta)
                ])

    def analyze(self, lengths=None) -> dict[str, Table]:
        return self._stage("analyze", self._analyze, lengths or self.cfg.lengths)

    def _load(self, kind: str, L: int) -> list[ReconstructionRecord]:
        path = self.out / "records" / f"{kind}_L{L}.jsonl"
        return load_records(path) if path.exists() else []

    def _analyze(self, lengths):
        ev = self.cfg.evaluation
        tables = {name: Table(name) for name in SCHEMAS}
        train_toks = _corpus_tokens(self.cfg, self.cfg.train_data)
        train_counts = Counter(train_toks)
        summary = {"spearman": {}, "frequency_groups": {}}
        all_natural = []
        schemes = [(CHARCLASS, "natural")] + [
            (spec.scheme or Path(spec.path).stem, f"annotated-{spec.scheme or Path(spec.path).stem}")
            for spec in self.cfg.annotations
        ]
        for L in lengths:
            natural = self._load("natural", L)
            if not natural:
                raise FileNotFoundError(f"no evaluation records for length {L}; run `evaluate` first")
            all_natural.extend(natural)

            for (src, length), (n, f1) in per_source_f1(natural).items():
                tables["f1_by_source"].add(src, length, n, f1)
            synth = self._load("synthetic", L)
            if synth:
                for (src, length), (n, f1) in per_source_f1(synth).items():
                    tables["f1_by_source"].add(src, length, n, f1)

            counts = position_errors(natural, L)
            for pos, c in enumerate(counts):
                tables["position_errors"].add(L, pos, int(c), len(natural))

            for scheme, kind in schemes:
                recs = self._load(kind, L) if kind != "natural" else natural
                if not recs:
                    continue
                om = category_omission(recs)
                for cat, row in om.rows.items():
                    tables["omission_by_category"].add(scheme, L, cat, row.f_in, row.f_in - row.f_rec, row.rate, len(om.samples[cat]))
                samples = supported_samples(om, ev.min_support)
                if len(samples) >= 2:
                    for res in pairwise_ttests(samples, ev.alpha):
                        tables["ttests"].add(scheme, L, res.category_a, res.category_b, res.t_statistic,
                                             res.p_value, res.p_adjusted, int(res.significant))

            corr = perplexity_omission_correlation(natural, ev.n_perplexity_bins)
            summary["spearman"][L] = corr.spearman
            for k, n, mp, mo in corr.bins:
                tables["perplexity_bins"].add(L, k, n, mp, mo, corr.spearman)

            dev = numeric_deviation((detokenize(r.input), detokenize(r.reconstruction)) for r in natural)
            lev, lens = dev.edit_distances, dev.ref_lengths
            tables["numeric_deviation"].add(
                L, len(dev.pairs), dev.dropped_unpaired,
                float(np.mean(lev)) if lev else None, float(np.median(lev)) if lev else None,
                float(np.mean(lens)) if lens else None, float(np.median(lens)) if lens else None,
                dev.mape(),
            )

            rep = self._load("repeated", L)
            if rep:
                pct, mode = repeat_summary([(r.input[0], r.reconstruction) for r in rep])
                tables["repeated_tokens"].add(L, len(rep), pct, mode)

            groups = frequency_group_omission(natural, train_counts)
            summary["frequency_groups"][L] = [[g, fi, fr, rate] for g, _, fi, fr, rate in groups]
            for g, toks, fi, fr, rate in groups:
                tc = [train_counts.get(t, 0) for t in toks]
                tables["frequency_groups"].add(L, g, len(toks), min(tc), max(tc), fi, fr, rate)

            paired = self._load("paired", L)
            if paired and self.cfg.paired is not None:
                p = self.cfg.paired
                for length, (n, fa, fb, gap) in paired_comparison(paired, p.variant_a, p.variant_b).items():
                    tables["paired_gap"].add(length, n, p.variant_a, p.variant_b, fa, fb, gap)
                for (src, length), (n, f1) in per_source_f1(paired).items():
                    tables["f1_by_source"].add(src, length, n, f1)

        for L, (n, mean, median) in f1_by_length(all_natural).items():
            tables["f1_by_length"].add(L, n, mean, median)
        for rank, row in enumerate(top_omitted(all_natural, ev.min_frequency), 1):
            tables["omission_by_token"].add(rank, row.key, token_repr(row.key), row.f_in, row.f_rec, row.rate)

        for row in corpus_frequency(zip(train_toks, charclass_labels(train_toks))):
            tables["corpus_frequency"].add(CHARCLASS, row.category, row.total, row.unique, float(row.ratio))
        for spec in self.cfg.annotations:
            scheme = spec.scheme or Path(spec.path).stem
            words = []
            for rec in ingest(self.cfg.resolve(spec.path), spec.format, spec.source, spec.label_column):
                words.extend(_labelled_words(rec))
            for row in corpus_frequency(words):
                tables["corpus_frequency"].add(scheme, row.category, row.total, row.unique, float(row.ratio))

        out = self.out / "analysis"
        out.mkdir(parents=True, exist_ok=True)
        payload = {name: [list(r) for r in t.rows] for name, t in tables.items()}
        (out / "tables.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        return tables

    def load_tables(self) -> dict[str, Table]:
        payload = json.loads((self.out / "analysis" / "tables.json").read_text())
        tables = {}
        for name, rows in payload.items():
            t = Table(name)
            for r in rows:
                t.add(*r)
            tables[name] = t
        return tables

    def report(self) -> list[Path]:
        return self._stage("report", self._report)

    def _report(self):
        tables = self.load_tables()
        paths = emit_reports(tables, self.out / "reports")
        paths += render_figures(tables, self.out / "figures")
        return paths

    def run_all(self, lengths=None, max_steps: int | None = None) -> None:
        lengths = lengths or self.cfg.lengths
        self.train(lengths, max_steps)
        self.evaluate(lengths)
        self.analyze(lengths)
        self.report()


def _labelled_words(rec: CorpusRecord):
    """(word, tag) pairs recovered from a labelled record."""
    from .corpus import token_majority
    words = rec.text.split(" ")
    return list(zip(words, token_majority(rec.text, rec.labels)))


def run_experiment(cfg: ExperimentConfig, out_dir, resume: bool = False, lengths=None,
                   max_steps: int | None = None) -> Path:
    run = Run(cfg, out_dir, resume)
    run.run_all(lengths, max_steps)
    return run.out
