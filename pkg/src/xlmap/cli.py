"""Command-line front end: ``xlmap {train,evaluate,translate,synth}``.

Settings come from dataclass defaults, then an optional INI-style config
file (sections ``[pipeline]``, ``[train]``, ``[refine]``, ``[criterion]``,
``[synth]``), then command-line flags. Training, refinement and synthesis
flags use the dataclass field names verbatim, e.g. ``--hidden_size 512``.

Every run writes a ``manifest.json`` holding the resolved settings, their
hash, the seed and a SHA-1 of each artifact. Reports carry the same hash and
seed. Nothing time- or host-dependent is written, so a rerun with the same
settings reproduces every file byte for byte.

Exit codes: 0 success, 2 usage error, 3 input/output error, 4 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import TrainConfig, TrainingDivergedError, train_adversarial
from .embed_io import (CACHE_MAGIC, Dictionary, EmbeddingFormatError, load_cache,
                       load_dictionary, load_embeddings, normalize, save_dictionary,
                       save_embeddings)
from .evalsuite import (EvalReport, IdfTable, build_translation_map, corpus_bleu, load_wordsim,
                        sentence_retrieval_precision, word_by_word_translate,
                        word_translation_precision, wordsim_pearson)
from .linmap import MappingMatrix, load_mapping, procrustes, save_mapping
from .metric import METHODS, translate
from .modelsel import CriterionConfig, validation_criterion
from .refine import EmptyDictionaryError, RefineParams, build_dictionary, refine
from .synthgen import SynthConfig, generate_pair

logger = logging.getLogger("xlmap")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

PRESETS = {
    "noiseless": {},
    "noisy": {"noise_sigma": 0.05},
    "hubbed": {"noise_sigma": 0.05, "hub_count": 20, "dim": 300, "n_words": 2000},
}

# derived from --seed rather than set directly
_SEEDED = {"rng_seed"}
# synth fields exposed on the command line
_SYNTH_FIELDS = ("n_words", "dim", "noise_sigma", "rotation", "hub_count", "zipf_exponent",
                 "structure", "salient_ratio", "tail_scale", "src_lang", "tgt_lang")


class UsageError(Exception):
    pass


def substream_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for the named consumer of the top-level seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _field_type(cls, f):
    default = f.default
    if f.name == "map_learning_rate":
        return float
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, (int, float, str)):
        return type(default)
    if f.name == "source_cap":
        return int
    raise TypeError(f"no command-line type for {cls.__name__}.{f.name}")


def _add_dataclass_flags(parser, cls, title, names=None, skip=()):
    group = parser.add_argument_group(title)
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name in _SEEDED or (names is not None and f.name not in names):
            continue
        kind = _field_type(cls, f)
        extra = {"nargs": "?", "const": True} if kind is _parse_bool else {}
        group.add_argument(f"--{f.name}", type=kind, default=None, metavar=f.name.upper(),
                           help=f"default {f.default!r}", **extra)


def _resolve(cls, section: str, args, file_cfg, skip=(), **fixed):
    """Dataclass instance from defaults < config file < flags."""
    values = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name in fixed:
            continue
        if file_cfg.has_option(section, f.name):
            raw = file_cfg.get(section, f.name)
            values[f.name] = None if raw.lower() == "none" else _field_type(cls, f)(raw)
        cli = getattr(args, f.name, None)
        if cli is not None:
            values[f.name] = cli
    try:
        return cls(**values, **fixed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"[{section}] {exc}") from exc


def _pipeline_option(args, file_cfg, name, default, kind=str):
    cli = getattr(args, name, None)
    if cli is not None:
        return cli
    if file_cfg.has_option("pipeline", name):
        return kind(file_cfg.get("pipeline", name))
    return default


def _read_config(path):
    cfg = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.read(path, encoding="utf-8")
    for section in ("pipeline", "train", "refine", "criterion", "synth"):
        if not cfg.has_section(section):
            cfg.add_section(section)
    return cfg


def config_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:16]


def _sha1(path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_manifest(out: Path, settings: dict, seed: int, artifacts) -> None:
    _write_json(out / "manifest.json", {
        "tool": "xlmap", "version": __version__, "seed": seed,
        "config_hash": config_hash(settings), "settings": settings,
        "artifacts": {p.name: _sha1(p) for p in artifacts},
    })


def _load_space(path, args, lang):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(len(CACHE_MAGIC))
    if head == CACHE_MAGIC:
        space = load_cache(path)
        space = space.head(args.max_vocab) if len(space) > args.max_vocab else space
    else:
        space = load_embeddings(path, max_vocab=args.max_vocab, lowercase=args.lowercase,
                                lang=lang, dtype=np.float64)
    return normalize(space, args.normalize)


def _load_pair(args):
    return _load_space(args.src, args, args.src_lang), _load_space(args.tgt, args, args.tgt_lang)


def _common_settings(args) -> dict:
    return {"src": str(args.src), "tgt": str(args.tgt), "max_vocab": args.max_vocab,
            "lowercase": args.lowercase, "normalize": args.normalize}


# ---------------------------------------------------------------- train

def cmd_train(args, file_cfg) -> int:
    seed = int(_pipeline_option(args, file_cfg, "seed", 0, int))
    train_cfg = _resolve(TrainConfig, "train", args, file_cfg,
                         rng_seed=substream_seed(seed, "adversary"))
    refine_p = _resolve(RefineParams, "refine", args, file_cfg)
    crit_cfg = _resolve(CriterionConfig, "criterion", args, file_cfg, skip=("metric",),
                        csls_k=refine_p.csls_k)
    settings = {"command": "train", **_common_settings(args), "seed": seed,
                "supervised": None if args.supervised is None else str(args.supervised),
                "train": dataclasses.asdict(train_cfg), "refine": dataclasses.asdict(refine_p),
                "criterion": dataclasses.asdict(crit_cfg)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = _load_pair(args)
    logger.info("loaded %d source and %d target words (d=%d)", len(src), len(tgt), src.dim)
    if src.dim != tgt.dim:
        raise UsageError(f"dimension mismatch: source {src.dim}, target {tgt.dim}")

    trace = []
    artifacts = []
    if args.supervised is not None:
        dico = load_dictionary(args.supervised, src, tgt, lowercase=args.lowercase)
        if len(dico) == 0:
            raise EmptyDictionaryError(f"{args.supervised}: no in-vocabulary pairs")
        w = procrustes(src.vectors[dico.src], tgt.vectors[dico.tgt])
        trace.append(("procrustes", 0, validation_criterion(w, src, tgt, crit_cfg)))
    else:
        monitor = None
        if args.monitor_dictionary is not None:
            gold = load_dictionary(args.monitor_dictionary, src, tgt, lowercase=args.lowercase)

            def monitor(m):
                res = word_translation_precision(gold, m, src, tgt, "csls", ks=(1,),
                                                 csls_k=refine_p.csls_k)
                return {"monitor_p1": res.precision[1]}

        w_adv, history = train_adversarial(src, tgt, train_cfg, crit_cfg, monitor=monitor,
                                           checkpoint_path=out / "checkpoint.npz"
                                           if args.checkpoint else None,
                                           resume=args.resume)
        history.to_csv(out / "history.csv")
        save_mapping(w_adv, out / "W_adversarial.txt")
        artifacts += [out / "history.csv", out / "W_adversarial.txt"]
        if args.checkpoint:
            artifacts.append(out / "checkpoint.npz")
        trace += [("adversarial", e["epoch"], e["criterion"]) for e in history.epochs]
        w = w_adv
        for it in range(refine_p.n_iterations):
            w, sizes = refine(w, src, tgt, dataclasses.replace(refine_p, n_iterations=1))
            if "aborted" in w.meta:
                break
            trace.append(("refine", it, validation_criterion(w, src, tgt, crit_cfg)))
            logger.info("refinement %d: %d pairs, criterion %.5f", it, sizes[0], trace[-1][2])

    save_mapping(w, out / "W.txt")
    induced = build_dictionary(w, src, tgt, refine_p)
    save_dictionary(induced, src, tgt, out / "dictionary.txt")
    with open(out / "criterion.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("stage,step,criterion,config_hash,seed\n")
        for stage, step, value in trace:
            fh.write(f"{stage},{step},{value!r},{config_hash(settings)},{seed}\n")
    artifacts += [out / "W.txt", out / "dictionary.txt", out / "criterion.csv"]
    _write_manifest(out, settings, seed, artifacts)
    print(f"wrote {out / 'W.txt'} (final criterion {trace[-1][2]:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def _read_sentences(path, lowercase):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [(ln.lower() if lowercase else ln).split() for ln in lines if ln]


def _methods(text) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown retrieval method(s) {bad}; choose from {list(METHODS)}")
    return methods


def _ks(text) -> tuple[int, ...]:
    try:
        ks = tuple(sorted({int(k) for k in text.split(",")}))
    except ValueError:
        raise UsageError(f"--ks must be comma-separated integers, got {text!r}") from None
    if not ks or ks[0] < 1:
        raise UsageError("--ks values must be positive")
    return ks


def cmd_evaluate(args, file_cfg) -> int:
    methods = _methods(args.methods)
    ks = _ks(args.ks)
    seed = int(_pipeline_option(args, file_cfg, "seed", 0, int))
    csls_k = args.csls_k
    if not Path(args.mapping).is_file():
        raise FileNotFoundError(f"mapping file not found: {args.mapping}")
    if args.dictionary is None and not args.wordsim and args.sentences is None:
        raise UsageError("nothing to evaluate: give --dictionary, --wordsim or --sentences")
    settings = {"command": "evaluate", **_common_settings(args), "seed": seed,
                "mapping": str(args.mapping), "methods": methods, "ks": list(ks),
                "csls_k": csls_k, "dictionary": args.dictionary,
                "reverse_dictionary": args.reverse_dictionary,
                "wordsim": [str(p) for p in args.wordsim],
                "sentences": args.sentences, "idf_corpus": args.idf_corpus,
                "oov_as_wrong": args.oov_as_wrong}
    w = load_mapping(args.mapping)
    src, tgt = _load_pair(args)
    report = EvalReport(metadata={"mapping": w.fingerprint, "seed": seed,
                                  "config_hash": config_hash(settings),
                                  "src": src.fingerprint, "tgt": tgt.fingerprint})

    directions = []
    if args.dictionary is not None:
        directions.append((f"{args.src_lang}-{args.tgt_lang}", args.dictionary, w, src, tgt))
    if args.reverse_dictionary is not None:
        directions.append((f"{args.tgt_lang}-{args.src_lang}", args.reverse_dictionary,
                           MappingMatrix(w.w.T, w.beta), tgt, src))
    for name, path, m, a, b in directions:
        dico = load_dictionary(path, a, b, lowercase=args.lowercase)
        table = {}
        for method in methods:
            res = word_translation_precision(dico, m, a, b, method, ks, args.oov_as_wrong,
                                             csls_k=csls_k)
            table[method] = res.precision
            report.metadata[f"{name}_queries"] = res.n_queries
            report.metadata[f"{name}_oov"] = res.n_oov
        report.word_translation[name] = table

    for path in args.wordsim:
        ds = load_wordsim(path, Path(path).stem)
        res = wordsim_pearson(ds, w, src, tgt)
        report.wordsim[ds.name] = dataclasses.asdict(res)

    if args.sentences is not None:
        src_sents = _read_sentences(args.sentences[0], args.lowercase)
        tgt_sents = _read_sentences(args.sentences[1], args.lowercase)
        if len(src_sents) != len(tgt_sents):
            raise UsageError("--sentences files have different numbers of sentences")
        if args.idf_corpus is not None:
            src_idf = IdfTable.from_sentences(_read_sentences(args.idf_corpus[0], args.lowercase))
            tgt_idf = IdfTable.from_sentences(_read_sentences(args.idf_corpus[1], args.lowercase))
        else:
            logger.warning("no --idf_corpus: idf weights come from the evaluation sentences")
            src_idf = IdfTable.from_sentences(src_sents)
            tgt_idf = IdfTable.from_sentences(tgt_sents)
        for method in methods:
            if method == "isf":
                continue
            report.sentence_retrieval[method] = sentence_retrieval_precision(
                src_sents, tgt_sents, w, src, tgt, src_idf, tgt_idf, method, ks, csls_k)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    artifacts = [out / "report.json"]
    if report.word_translation:
        report.precision_csv(out / "precision.csv", ks)
        artifacts.append(out / "precision.csv")
    _write_manifest(out, settings, seed, artifacts)
    for name, table in report.word_translation.items():
        for method, prec in table.items():
            cells = "  ".join(f"P@{k}={100 * v:.1f}" for k, v in prec.items())
            print(f"{name} {method:5s} {cells}")
    for name, res in report.wordsim.items():
        print(f"wordsim {name}: r={res['pearson']:.4f} ({res['n_pairs']} pairs)")
    for method, prec in report.sentence_retrieval.items():
        cells = "  ".join(f"P@{k}={100 * v:.1f}" for k, v in prec.items())
        print(f"sentences {method:5s} {cells}")
    return EXIT_OK


# ---------------------------------------------------------------- translate

def cmd_translate(args, file_cfg) -> int:
    method = _methods(args.method)[0]
    if (args.words is None) == (args.sentences is None):
        raise UsageError("give exactly one of --words or --sentences")
    if args.references is not None and args.sentences is None:
        raise UsageError("--references needs --sentences")
    if not Path(args.mapping).is_file():
        raise FileNotFoundError(f"mapping file not found: {args.mapping}")
    w = load_mapping(args.mapping)
    src, tgt = _load_pair(args)
    out = open(args.output, "w", encoding="utf-8", newline="\n") if args.output else sys.stdout
    try:
        if args.words is not None:
            words = [wd.lower() if args.lowercase else wd for wd in args.words]
            known = [wd for wd in words if wd in src]
            res = (translate([src.lookup(wd) for wd in known], w, src, tgt, method,
                             min(args.k, len(tgt)), csls_k=args.csls_k) if known else None)
            row = 0
            for wd in words:
                if wd not in src:
                    logger.warning("%s: not in the source vocabulary", wd)
                    out.write(f"{wd}\t<unknown>\n")
                    continue
                cells = [f"{tgt.words[t]}:{s:.4f}"
                         for t, s in zip(res.indices[row].tolist(), res.scores[row].tolist())]
                out.write(wd + "\t" + "\t".join(cells) + "\n")
                row += 1
            return EXIT_OK
        sents = _read_sentences(args.sentences, args.lowercase)
        tmap = build_translation_map({t for s in sents for t in s}, w, src, tgt, method,
                                     csls_k=args.csls_k)
        hyps = []
        passthrough = 0
        for s in sents:
            toks, missing = word_by_word_translate(s, tmap)
            hyps.append(toks)
            passthrough += missing
            out.write(" ".join(toks) + "\n")
        if passthrough:
            logger.info("%d tokens had no source embedding and were copied", passthrough)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.references is not None:
        refs = _read_sentences(args.references, args.lowercase)
        if len(refs) != len(hyps):
            raise UsageError("--references and --sentences differ in length")
        print(f"BLEU {corpus_bleu(hyps, refs):.2f}", file=sys.stderr if not args.output else sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------- synth

def cmd_synth(args, file_cfg) -> int:
    seed = int(_pipeline_option(args, file_cfg, "seed", 0, int))
    preset = dict(PRESETS[args.preset])
    base = SynthConfig(**preset, rng_seed=substream_seed(seed, "synthgen"))
    values = {}
    for name in _SYNTH_FIELDS:
        if file_cfg.has_option("synth", name):
            values[name] = _field_type(SynthConfig, next(
                f for f in dataclasses.fields(SynthConfig) if f.name == name))(
                file_cfg.get("synth", name))
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    try:
        cfg = dataclasses.replace(base, **values)
    except ValueError as exc:
        raise UsageError(f"[synth] {exc}") from exc
    settings = {"command": "synth", "preset": args.preset, "seed": seed,
                "synth": dataclasses.asdict(cfg)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pair = generate_pair(cfg)
    save_embeddings(pair.src, out / "src.vec", precision=args.precision)
    save_embeddings(pair.tgt, out / "tgt.vec", precision=args.precision)
    save_dictionary(pair.gold, pair.src, pair.tgt, out / "gold.txt")
    save_mapping(pair.planted_w, out / "planted_W.txt")
    artifacts = [out / n for n in ("src.vec", "tgt.vec", "gold.txt", "planted_W.txt")]
    if len(pair.hubs):
        (out / "hubs.txt").write_text("".join(f"{pair.tgt.words[i]}\n" for i in pair.hubs),
                                      encoding="utf-8")
        artifacts.append(out / "hubs.txt")
    _write_manifest(out, settings, seed, artifacts)
    print(f"wrote {len(pair.src)} x {cfg.dim} pair to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _space_args(p, need_out=True):
    p.add_argument("--src", required=True, help="source embeddings (.vec text or binary cache)")
    p.add_argument("--tgt", required=True, help="target embeddings")
    p.add_argument("--src_lang", default="src")
    p.add_argument("--tgt_lang", default="tgt")
    p.add_argument("--max_vocab", type=int, default=200_000)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--normalize", choices=("unit", "center_then_unit", "none"), default="unit")
    p.add_argument("--seed", type=int, default=None, help="top-level seed (default 0)")
    if need_out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlmap", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="INI-style settings file; flags override it")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a mapping (adversarial + refinement, or supervised)")
    _space_args(p)
    p.add_argument("--supervised", metavar="DICT",
                   help="skip adversarial training; Procrustes on this dictionary")
    p.add_argument("--monitor_dictionary", metavar="DICT",
                   help="gold dictionary for a per-epoch P@1 column in history.csv")
    p.add_argument("--checkpoint", action="store_true", help="write checkpoint.npz every epoch")
    p.add_argument("--resume", metavar="NPZ", help="continue from a checkpoint")
    _add_dataclass_flags(p, TrainConfig, "adversarial training")
    _add_dataclass_flags(p, RefineParams, "refinement")
    _add_dataclass_flags(p, CriterionConfig, "validation criterion", skip=("metric", "csls_k"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="word translation, similarity and sentence retrieval")
    _space_args(p)
    p.add_argument("--mapping", required=True)
    p.add_argument("--dictionary", help="gold source-target dictionary")
    p.add_argument("--reverse_dictionary", help="gold target-source dictionary")
    p.add_argument("--wordsim", action="append", default=[], help="word1 word2 score file")
    p.add_argument("--sentences", nargs=2, metavar=("SRC", "TGT"), help="aligned sentence files")
    p.add_argument("--idf_corpus", nargs=2, metavar=("SRC", "TGT"),
                   help="sentence files for idf weights (default: the evaluated sentences)")
    p.add_argument("--methods", default="nn,csls", help="comma list of nn, isf, csls")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--csls_k", type=int, default=10)
    p.add_argument("--oov_as_wrong", type=_parse_bool, default=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("translate", help="translate words or word-by-word translate sentences")
    _space_args(p, need_out=False)
    p.add_argument("--mapping", required=True)
    p.add_argument("--words", nargs="+")
    p.add_argument("--sentences", help="one whitespace-tokenized sentence per line")
    p.add_argument("--references", help="reference translations for BLEU")
    p.add_argument("--method", default="csls")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--csls_k", type=int, default=10)
    p.add_argument("--output", help="write translations here instead of stdout")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("synth", help="write a synthetic pair with a planted rotation")
    p.add_argument("--preset", choices=sorted(PRESETS), default="noiseless")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", type=int, default=10, help="decimals in the .vec files")
    _add_dataclass_flags(p, SynthConfig, "synthetic data", names=_SYNTH_FIELDS)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = _read_config(args.config)
        return args.func(args, file_cfg)
    except UsageError as exc:
        print(f"xlmap {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, EmbeddingFormatError, configparser.Error) as exc:
        print(f"xlmap {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergedError, FloatingPointError, np.linalg.LinAlgError,
            EmptyDictionaryError) as exc:
        print(f"xlmap {args.command}: numerical failure ({type(exc).__name__}): {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"xlmap {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled error", exc_info=True)
        print(f"xlmap {args.command}: error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
