"""Command-line entry point: ``mg2p {train,evaluate,predict,selftrain,synth}``.

Every command writes a ``manifest.json`` into its output directory recording
the command line, the resolved configuration, input digests and the files it
produced. Checkpoints and JSON reports carry the manifest's ``run_id``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .data import (
    DataError,
    Dataset,
    PronunciationEntry,
    Vocabulary,
    build_vocabulary,
    format_prediction_tsv,
    read_tsv,
    read_word_list,
    validate_language_code,
)
from .decoding import DecodingError, EnsembleSpec, PredictionFailure, predict_file, prediction_rows
from .evaluation import EvalReport, ablation_table, evaluate, report_from_pairs
from .model import ConfigError, ModelConfig
from .selftrain import SelfTrainConfig, augment_and_retrain, build_silver, stats_tsv
from .synthetic import make_corpus, make_splits
from .training import Checkpoint, CheckpointError, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train_seeds

log = logging.getLogger("mg2p")

CONFIG_VERSION = 1

PRESETS = {
    "full": {"model": {}, "train": {}},
    "desk": {
        "model": asdict(ModelConfig.micro()),
        "train": {"total_steps": 3000, "batch_tokens": 512, "warmup_steps": 200, "lr_scale": 1.0},
    },
}
DEFAULT_DECODE = {"beam": 5, "jobs": 1}
DEFAULT_SELFTRAIN = {"threshold": 0.2, "cap": 1_000_000}


class CliError(Exception):
    """User-facing failure; the message is printed and the exit code is 1."""


# ---------------------------------------------------------------- config


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str], preset: str = "full") -> dict:
    """Preset defaults overlaid with a JSON config file (or a previous run's manifest)."""
    base = {"version": CONFIG_VERSION, **copy.deepcopy(PRESETS[preset]),
            "decode": dict(DEFAULT_DECODE), "selftrain": dict(DEFAULT_SELFTRAIN)}
    if path is None:
        return base
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if "run_id" in doc and "config" in doc:
        doc = dict(doc["config"])
        doc.pop("monolingual_languages", None)
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise CliError(f"config {path}: unsupported version {doc.get('version')}")
    unknown = set(doc) - set(base)
    if unknown:
        raise CliError(f"config {path}: unknown sections {sorted(unknown)}")
    if "preset" in doc:
        raise CliError("presets are chosen with --preset, not in the config file")
    return _merge(base, doc)


def _apply_flags(config: dict, args) -> dict:
    config = copy.deepcopy(config)
    if getattr(args, "steps", None) is not None:
        config["train"]["total_steps"] = args.steps
    if getattr(args, "seeds", None):
        config["train"]["seeds"] = list(args.seeds)
    if getattr(args, "beam", None) is not None:
        config["decode"]["beam"] = args.beam
    if getattr(args, "jobs", None) is not None:
        config["decode"]["jobs"] = args.jobs
    if getattr(args, "threshold", None) is not None:
        config["selftrain"]["threshold"] = args.threshold
    if getattr(args, "cap", None) is not None:
        config["selftrain"]["cap"] = args.cap
    return config


def model_and_train_config(config: dict) -> Tuple[ModelConfig, TrainConfig]:
    try:
        return ModelConfig(**config["model"]), TrainConfig(**config["train"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc


# ---------------------------------------------------------------- manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    inputs: Dict[str, str]
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: List[str] = field(default_factory=list)
    skipped_languages: List[str] = field(default_factory=list)
    status: str = "running"
    error: str = ""

    @property
    def run_id(self) -> str:
        """Content id: independent of timestamps so repeated runs agree."""
        key = json.dumps([self.command, self.config, sorted(self.inputs.items())], sort_keys=True)
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> str:
        doc = asdict(self)
        doc["run_id"] = self.run_id
        return json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True) + "\n"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, out_dir: str, command: str, argv: Sequence[str], config: dict, inputs: Sequence[str]):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        digests = {}
        for p in inputs:
            try:
                digests[str(p)] = file_digest(p)
            except OSError as exc:
                raise CliError(f"cannot read input {p}: {exc}") from exc
        self.manifest = RunManifest(command, list(argv), config, digests, started=_now())

    def write_text(self, rel: str, text: str) -> Path:
        path = self.dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.manifest.outputs.append(rel)
        return path

    def save_checkpoint(self, ckpt: Checkpoint, rel: str) -> Path:
        ckpt.meta = {"run_id": self.manifest.run_id}
        path = save_checkpoint(ckpt, self.dir / rel)
        self.manifest.outputs.append(rel)
        return path

    def finish(self, status: str, error: str = "") -> None:
        self.manifest.status, self.manifest.error, self.manifest.finished = status, error, _now()
        (self.dir / "manifest.json").write_text(self.manifest.to_json(), encoding="utf-8")


# ---------------------------------------------------------------- inputs

_LANG_ARG = re.compile(r"^([a-z]{3}):(.+)$")


def parse_data_arg(arg: str) -> Tuple[str, str]:
    """``lang:path``, or a bare path whose file name starts with the language code."""
    m = _LANG_ARG.match(arg)
    if m:
        return m.group(1), m.group(2)
    name = Path(arg).name
    try:
        return validate_language_code(name[:3]), arg
    except DataError:
        raise CliError(f"cannot infer a language code from {arg!r}; pass it as lang:path") from None


def _read_gold(args_list: Sequence[str], silver: bool = False) -> Tuple[List[PronunciationEntry], List[str]]:
    entries, paths = [], []
    for arg in args_list:
        lang, path = parse_data_arg(arg)
        try:
            entries += read_tsv(path, lang, silver)
        except OSError as exc:
            raise CliError(f"cannot read {path}: {exc}") from exc
        except DataError as exc:
            raise CliError(f"{path}: {exc}") from exc
        paths.append(path)
    return entries, paths


def _write_vocab(run: Run, prefix: str, src: Vocabulary, tgt: Vocabulary) -> None:
    run.write_text(f"{prefix}src.vocab", src.to_text())
    run.write_text(f"{prefix}tgt.vocab", tgt.to_text())


def _checkpoint_key(ckpt: Checkpoint):
    return ckpt.seed, ckpt.step


def load_run(run_dir: str, last_only: bool = False) -> Tuple[List[Checkpoint], Vocabulary, Vocabulary]:
    """Vocabularies plus checkpoints (sorted by seed, then step) of a training run directory."""
    d = Path(run_dir)
    try:
        src = Vocabulary.from_text((d / "src.vocab").read_text(encoding="utf-8"))
        tgt = Vocabulary.from_text((d / "tgt.vocab").read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{run_dir} is not a training run directory: {exc}") from exc
    paths = sorted((d / "checkpoints").glob("*.ckpt"))
    if not paths:
        raise CliError(f"no checkpoints under {d / 'checkpoints'}")
    ckpts = sorted((load_checkpoint(p, src, tgt) for p in paths), key=_checkpoint_key)
    if last_only:
        last = {}
        for c in ckpts:
            last[c.seed] = c
        ckpts = list(last.values())
    return ckpts, src, tgt


def _language_runs(run_dir: str) -> Optional[List[str]]:
    """Language subdirectories of a monolingual run, or None for a multilingual one."""
    manifest = Path(run_dir) / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text(encoding="utf-8"))
        langs = doc.get("config", {}).get("monolingual_languages")
        if langs:
            return list(langs)
    return None


def _spec_for(run_dir: str, lang: Optional[str], last_only: bool, cache: dict) -> EnsembleSpec:
    langs = _language_runs(run_dir)
    key = None
    path = run_dir
    if langs is not None:
        if lang not in langs:
            raise CliError(f"monolingual run {run_dir} has no model for {lang!r}")
        key, path = lang, str(Path(run_dir) / lang)
    if key not in cache:
        ckpts, src, tgt = load_run(path, last_only)
        cache[key] = EnsembleSpec.from_checkpoints(ckpts, src, tgt)
    return cache[key]


# ---------------------------------------------------------------- commands


def cmd_train(args, run: Run) -> None:
    config = run.manifest.config
    model_config, train_config = model_and_train_config(config)
    entries, _ = _read_gold(args.train)
    if not entries:
        raise CliError("training files contain no entries")
    groups = {None: entries}
    if args.monolingual:
        groups = Dataset(entries, "train").by_language()
    for lang, part in groups.items():
        prefix = f"{lang}/" if lang else ""
        src, tgt = build_vocabulary([Dataset(part, "train")])
        _write_vocab(run, prefix, src, tgt)
        log.info("training %s on %d entries, seeds %s, %d steps",
                 lang or "multilingual model", len(part), train_config.seeds, train_config.total_steps)
        ckpts = train_seeds(part, src, tgt, model_config, train_config, parallel=args.parallel_seeds)
        for c in ckpts:
            run.save_checkpoint(c, f"{prefix}checkpoints/{c.label}.ckpt")


def _prediction_pairs(pred_path: str, gold: Sequence[PronunciationEntry]):
    predicted: Dict[str, Tuple[str, ...]] = {}
    with open(pred_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise CliError(f"{pred_path}:{lineno}: expected word, segments and optional confidence")
            predicted.setdefault(parts[0], tuple(parts[1].split(" ")) if parts[1] else ())
    pairs, failed = [], 0
    for e in gold:
        pred = predicted.get(e.word)
        if pred is None:
            failed += 1
            pred = ()
        pairs.append((e.target, pred))
    return pairs, failed


def cmd_evaluate(args, run: Run) -> None:
    gold, _ = _read_gold(args.gold)
    if not gold:
        raise CliError("gold files contain no entries")
    beam, jobs = run.manifest.config["decode"]["beam"], run.manifest.config["decode"]["jobs"]
    by_lang = Dataset(gold, "dev").by_language()
    if args.predictions:
        pairs, failures = {}, {}
        for arg in args.predictions:
            lang, path = parse_data_arg(arg)
            if lang not in by_lang:
                raise CliError(f"no gold data for predictions in {lang}")
            pairs[lang], failures[lang] = _prediction_pairs(path, by_lang[lang])
        missing = sorted(set(by_lang) - set(pairs))
        if missing:
            raise CliError(f"no predictions given for {missing}")
        report = report_from_pairs(pairs, label="predictions", failures=failures)
    else:
        if args.run_dir is None:
            raise CliError("evaluate needs --run-dir or --predictions")
        cache: dict = {}
        if _language_runs(args.run_dir) is not None:
            if args.ablate_checkpoints:
                raise CliError("--ablate-checkpoints needs a multilingual run")
            rows = {}
            for lang, entries in by_lang.items():
                spec = _spec_for(args.run_dir, lang, args.last_only, cache)
                rows.update(evaluate(spec, entries, beam, jobs=jobs).rows)
            report = EvalReport(rows, label="monolingual")
        else:
            spec = _spec_for(args.run_dir, None, args.last_only, cache)
            report = evaluate(spec, gold, beam, label="ensemble", jobs=jobs)
            if args.ablate_checkpoints:
                run.write_text("ablation.tsv", _ablation(spec, gold, beam, jobs, args.ablate_seed, report))
    report.meta["run_id"] = run.manifest.run_id
    run.write_text("report.tsv", report.to_tsv())
    run.write_text("report.json", report.to_json())
    print(report.to_tsv(), end="")


def _ablation(spec: EnsembleSpec, gold, beam: int, jobs: int, seed: Optional[int], ensemble: EvalReport) -> str:
    """One row per checkpoint of a single seed, then the full ensemble."""
    seeds = sorted({label.split("_")[0] for label in spec.labels})
    chosen = f"seed{seed}" if seed is not None else seeds[0]
    idx = [i for i, label in enumerate(spec.labels) if label.split("_")[0] == chosen]
    if not idx:
        raise CliError(f"no checkpoints for {chosen}; available: {seeds}")
    singles = [evaluate(spec.subset([i]), gold, beam, label=spec.labels[i], jobs=jobs) for i in idx]
    return ablation_table(singles + [ensemble])


def cmd_predict(args, run: Run) -> None:
    lang = validate_language_code(args.lang)
    try:
        words = read_word_list(args.words)
    except OSError as exc:
        raise CliError(f"cannot read {args.words}: {exc}") from exc
    spec = _spec_for(args.run_dir, lang, args.last_only, {})
    decode = run.manifest.config["decode"]
    results = predict_file(spec, words, lang, decode["beam"], jobs=decode["jobs"])
    run.write_text(args.output, format_prediction_tsv(prediction_rows(results)))
    failures = [r for r in results if isinstance(r, PredictionFailure)]
    if failures:
        run.write_text(args.output + ".errors", "".join(f"{f.word}\t{f.error}\n" for f in failures))
        log.warning("%d of %d words failed; see %s.errors", len(failures), len(words), args.output)


def cmd_selftrain(args, run: Run) -> None:
    config = run.manifest.config
    model_config, train_config = model_and_train_config(config)
    st = config["selftrain"]

    def stage(name, fn, *a, **kw):
        try:
            return fn(*a, **kw)
        except CliError as exc:
            raise CliError(f"stage {name}: {exc}") from exc
        except (DataError, DecodingError, CheckpointError, TrainingError, ValueError, OSError) as exc:
            raise CliError(f"stage {name}: {type(exc).__name__}: {exc}") from exc

    gold, _ = stage("load", _read_gold, args.train)
    dev, _ = stage("load", _read_gold, args.dev or [])
    corpora = {}
    for arg in args.corpus:
        lang, path = stage("load", parse_data_arg, arg)
        corpora[lang] = stage("load", Path(path).read_text, encoding="utf-8")
    languages = tuple(args.languages) if args.languages else tuple(sorted({e.lang for e in gold}))
    st_config = stage("load", SelfTrainConfig, threshold=st["threshold"], word_cap=st["cap"],
                      languages=languages, lowercase=args.lowercase)
    ckpts, src, tgt = stage("load", load_run, args.run_dir, args.last_only)
    spec = EnsembleSpec.from_checkpoints(ckpts, src, tgt)
    decode = config["decode"]

    silver, stats, skipped = stage("label", build_silver, spec, corpora, st_config, decode["beam"], decode["jobs"])
    run.manifest.skipped_languages = skipped
    for lang in skipped:
        log.warning("no corpus for %s; skipped", lang)
    by_lang: Dict[str, List[str]] = {}
    for e, c in zip(silver.entries, silver.confidences):
        by_lang.setdefault(e.lang, []).append(f"{e.word}\t{' '.join(e.target)}\t{c:.4f}\n")
    for s in stats:
        run.write_text(f"silver/{s.lang}.tsv", "".join(by_lang.get(s.lang, [])))
    run.write_text("stats.tsv", stats_tsv(stats))

    result = stage("retrain", augment_and_retrain, gold, silver, model_config, train_config,
                   dev=None, beam_width=decode["beam"], jobs=decode["jobs"])
    if result.dropped_unknown:
        log.info("dropped %d silver pairs with unknown target symbols", result.dropped_unknown)
    _write_vocab(run, "retrained/", result.src_vocab, result.tgt_vocab)
    for c in result.checkpoints:
        run.save_checkpoint(c, f"retrained/checkpoints/{c.label}.ckpt")
    if dev:
        new_spec = EnsembleSpec.from_checkpoints(result.checkpoints, result.src_vocab, result.tgt_vocab)
        report = stage("evaluate", evaluate, new_spec, dev, decode["beam"], label="self-trained", jobs=decode["jobs"])
        report.meta["run_id"] = run.manifest.run_id
        run.write_text("report.tsv", report.to_tsv())
        run.write_text("report.json", report.to_json())
        print(report.to_tsv(), end="")


def cmd_synth(args, run: Run) -> None:
    for i, lang in enumerate(args.languages):
        train, dev = make_splits(lang, args.train_size, args.dev_size, seed=args.seed)
        run.write_text(f"{lang}_train.tsv", "".join(f"{e.word}\t{' '.join(e.target)}\n" for e in train))
        run.write_text(f"{lang}_dev.tsv", "".join(f"{e.word}\t{' '.join(e.target)}\n" for e in dev))
        if args.corpus_tokens:
            run.write_text(f"{lang}_corpus.txt", make_corpus(lang, args.corpus_tokens, seed=args.seed + i))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mg2p", description="Multilingual G2P: train, evaluate, predict, self-train.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=False, decoding=False):
        sp.add_argument("--config", help="JSON config file or a previous run's manifest.json")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="full",
                        help="base settings before --config and flags (default: full)")
        sp.add_argument("--full-scale", dest="preset", action="store_const", const="full",
                        help="alias for --preset full")
        sp.add_argument("--out-dir", required=True)
        if training:
            sp.add_argument("--steps", type=int)
            seeds = sp.add_mutually_exclusive_group()
            seeds.add_argument("--seeds", type=int, nargs="+")
            seeds.add_argument("--seed", dest="seeds", type=lambda s: [int(s)])
        if decoding:
            sp.add_argument("--beam", type=int)
            sp.add_argument("--jobs", type=int)
            sp.add_argument("--last-only", action="store_true", help="ensemble only the final checkpoint of each seed")

    t = sub.add_parser("train", help="train one multilingual model per seed (or per language with --monolingual)")
    common(t, training=True)
    t.add_argument("--train", nargs="+", required=True, metavar="LANG:TSV")
    t.add_argument("--monolingual", action="store_true")
    t.add_argument("--parallel-seeds", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score an ensemble (or prediction files) against gold TSVs")
    common(e, decoding=True)
    e.add_argument("--run-dir")
    e.add_argument("--gold", nargs="+", required=True, metavar="LANG:TSV")
    e.add_argument("--predictions", nargs="+", metavar="LANG:TSV")
    e.add_argument("--ablate-checkpoints", action="store_true", help="also score each checkpoint of one seed alone")
    e.add_argument("--ablate-seed", type=int)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="transcribe a word list")
    common(pr, decoding=True)
    pr.add_argument("--run-dir", required=True)
    pr.add_argument("--lang", required=True)
    pr.add_argument("--words", required=True)
    pr.add_argument("--output", default="predictions.tsv", help="path relative to --out-dir")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("selftrain", help="pseudo-label corpora, select, retrain, evaluate")
    common(s, training=True, decoding=True)
    s.add_argument("--run-dir", required=True, help="baseline run used for labeling")
    s.add_argument("--train", nargs="+", required=True, metavar="LANG:TSV")
    s.add_argument("--dev", nargs="+", metavar="LANG:TSV")
    s.add_argument("--corpus", nargs="+", default=[], metavar="LANG:TXT")
    s.add_argument("--languages", nargs="+")
    s.add_argument("--threshold", type=float)
    s.add_argument("--cap", type=int)
    s.add_argument("--lowercase", action="store_true")
    s.set_defaults(func=cmd_selftrain)

    y = sub.add_parser("synth", help="write toy lexicons and corpora for trying the pipeline")
    y.add_argument("--out-dir", required=True)
    y.add_argument("--languages", nargs="+", default=["alf", "bet", "gam"])
    y.add_argument("--train-size", type=int, default=400)
    y.add_argument("--dev-size", type=int, default=100)
    y.add_argument("--corpus-tokens", type=int, default=0)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)
    return p


def _inputs(args) -> List[str]:
    paths = []
    for name in ("train", "gold", "dev", "predictions", "corpus"):
        for arg in getattr(args, name, None) or []:
            if isinstance(arg, str):
                paths.append(parse_data_arg(arg)[1])
    if getattr(args, "words", None):
        paths.append(args.words)
    return paths


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        if args.command == "synth":
            config = {"version": CONFIG_VERSION, "synth": {k: getattr(args, k) for k in
                                                           ("languages", "train_size", "dev_size", "corpus_tokens", "seed")}}
        else:
            config = _apply_flags(load_config(args.config, args.preset), args)
            model_and_train_config(config)
            if getattr(args, "monolingual", False):
                langs = sorted({parse_data_arg(a)[0] for a in args.train})
                config["monolingual_languages"] = langs
        run = Run(args.out_dir, args.command, argv, config, _inputs(args))
        args.func(args, run)
    except (CliError, DataError, DecodingError, CheckpointError, TrainingError, ConfigError) as exc:
        print(f"mg2p {args.command}: error: {exc}", file=sys.stderr)
        if run is not None:
            run.finish("failed", str(exc))
        return 1
    run.finish("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
