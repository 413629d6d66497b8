"""Command-line entry point: ``chatnct <command> [options] [key=value ...]``.

Every command accepts ``--config file.json`` (a flat JSON object) plus
``key=value`` overrides, which win.  Exit codes: 0 success, 1 invalid input,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evalkit, synthetic
from .checkpoint import load_checkpoint
from .corpus import (Dialogue, Speaker, Utterance, UtterancePool, Vocabulary, build_vocabulary, make_context_view,
                     make_nud_samples, make_si_samples, parse_dialogue_corpus, read_dialogue_file,
                     read_parallel_file, write_dialogue_corpus)
from .inference import TRANSLATION_BANNED, BeamConfig, translate_corpus, write_scores
from .model import ChatTranslator, ModelConfig
from .trainer import TrainConfig, TrainingDiverged, finetune, pretrain

log = logging.getLogger("chatnct")

MODEL_FIELDS = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
PRETRAIN_FIELDS = ["T1", "batch_tokens", "adam_beta1", "adam_beta2", "adam_eps", "lr_scale", "warmup_steps",
                   "label_smoothing", "dropout", "grad_clip", "eval_every"]
FINETUNE_FIELDS = ["T2", "batch_tokens", "adam_beta1", "adam_beta2", "adam_eps", "lr_scale",
                   "finetune_warmup_steps", "label_smoothing", "dropout", "grad_clip", "context_window",
                   "schedule_mode", "alpha0", "eval_every"]
BEAM_FIELDS = ["beam_size", "length_penalty", "max_len", "context_window"]
PREPARE_FIELDS = ["vocab_max_size", "vocab_min_count", "skip_invalid", "vector_dim"]

DEFAULTS = {
    "vocab_max_size": 32000, "vocab_min_count": 1, "skip_invalid": False,
    "beam_size": 4, "length_penalty": 0.6, "max_len": 64,
    "coherence_max_n": 3, "vector_dim": 100, "gradcheck_coords": 4,
}
DEFAULTS.update({f.name: f.default for f in fields(ModelConfig) if f.name != "vocab_size"})
DEFAULTS.update({f.name: f.default for f in fields(TrainConfig)})

CONSUMES = {
    "prepare": PREPARE_FIELDS,
    "pretrain": MODEL_FIELDS + PRETRAIN_FIELDS + BEAM_FIELDS[:3],
    "finetune": FINETUNE_FIELDS + BEAM_FIELDS[:3],
    "translate": BEAM_FIELDS,
    "evaluate": ["coherence_max_n", "vector_dim", "context_window"],
    "coherence": ["coherence_max_n", "vector_dim"],
    "make-samples": ["context_window"],
    "gradcheck": ["gradcheck_coords"],
}


class UsageError(Exception):
    """Invalid invocation or input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config


def parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def effective_config(command: str, config_path, overrides, seed) -> dict:
    """Defaults for ``command``, then the config file, then overrides, then ``--seed``."""
    allowed = set(CONSUMES[command]) | {"seed"}
    cfg = {k: DEFAULTS[k] for k in CONSUMES[command] if k in DEFAULTS}
    cfg["seed"] = 0
    sources = []
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fp:
                data = json.load(fp)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {config_path} must be a JSON object")
        sources.append(("config file", data))
    sources.append(("override", dict(parse_override(o) for o in overrides)))
    for origin, data in sources:
        for k, v in data.items():
            if k == "vocab_size":
                raise UsageError("vocab_size comes from the vocabulary file and cannot be set")
            if k not in allowed and k not in DEFAULTS:
                raise UsageError(f"unknown config field {k!r} ({origin})")
            if k in allowed:
                cfg[k] = v
            else:
                log.info("ignoring %s field %r, not used by %s", origin, k, command)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _pick(cfg: dict, cls, **extra):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in cfg.items() if k in names}, **extra)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _echo_config(out_dir: Path, command: str, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fp:
        json.dump({"command": command, **cfg}, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _need(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _beam(cfg):
    return BeamConfig(beam_size=int(cfg["beam_size"]), length_penalty=float(cfg["length_penalty"]),
                      max_len=int(cfg["max_len"]), banned_ids=TRANSLATION_BANNED)


def _vocab_for(checkpoint: Path, explicit) -> Vocabulary:
    path = Path(explicit) if explicit else checkpoint.parent / "vocab.txt"
    return Vocabulary.load(_need(path, "vocabulary file"))


# ---------------------------------------------------------------- commands


def cmd_prepare(args, cfg):
    out = Path(args.out)
    _echo_config(out, "prepare", cfg)
    if args.synthetic:
        lex = synthetic.make_lexicon(seed=cfg["seed"])
        dialogues = synthetic.make_chat_corpus(args.synthetic, cfg["seed"], lex)
        heldout = synthetic.make_chat_corpus(max(1, args.synthetic // 4), cfg["seed"] + 1, lex, prefix="h")
        pairs = synthetic.make_parallel_corpus(10 * args.synthetic, cfg["seed"] + 2, lex)
        with open(out / "train.jsonl", "w", encoding="utf-8") as fp:
            write_dialogue_corpus(dialogues, fp)
        with open(out / "dev.jsonl", "w", encoding="utf-8") as fp:
            write_dialogue_corpus(heldout, fp)
        with open(out / "parallel.tsv", "w", encoding="utf-8") as fp:
            fp.writelines(" ".join(s) + "\t" + " ".join(t) + "\n" for s, t in pairs)
        words = [w for d in dialogues for u in d.utterances for w in u.target_tokens]
        vectors = synthetic.make_word_vectors(sorted(set(words)), int(cfg["vector_dim"]), cfg["seed"])
        with open(out / "vectors.txt", "w", encoding="utf-8") as fp:
            fp.write(f"{len(vectors)} {int(cfg['vector_dim'])}\n")
            for w, v in vectors.items():
                fp.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")
        log.info("wrote synthetic corpus: %d dialogues, %d sentence pairs", len(dialogues), len(pairs))
        args.corpus = [str(out / "train.jsonl")]
        args.parallel = [str(out / "parallel.tsv")]
    if not args.corpus and not args.parallel:
        raise UsageError("prepare needs --corpus and/or --parallel (or --synthetic N)")
    dialogues, sentences, errors = [], [], []
    for path in args.corpus or []:
        with open(_need(path, "dialogue corpus"), encoding="utf-8") as fp:
            dialogues += parse_dialogue_corpus(fp, skip_invalid=bool(cfg["skip_invalid"]), errors=errors)
    for path in args.parallel or []:
        for s, t in read_parallel_file(_need(path, "parallel corpus")):
            sentences += [s, t]
    vocab = build_vocabulary(dialogues, int(cfg["vocab_max_size"]), int(cfg["vocab_min_count"]), sentences)
    vocab.save(out / "vocab.txt")
    stats = {"dialogues": len(dialogues), "utterances": sum(len(d) for d in dialogues),
             "sentence_pairs": len(sentences) // 2, "vocab_size": len(vocab), "skipped_records": len(errors)}
    with open(out / "prepare_stats.json", "w", encoding="utf-8") as fp:
        json.dump(stats, fp, indent=2)
    log.info("vocabulary of %d tokens written to %s", len(vocab), out / "vocab.txt")
    return 0


def _dev_bleu(dialogues, vocab, cfg):
    beam = _beam(cfg)
    k = int(cfg.get("context_window", 3))

    def score(model):
        filled, _ = translate_corpus(dialogues, model, vocab, k, beam)
        hyps = [u.target_tokens for d in filled for u in d.utterances]
        refs = [u.target_tokens for d in dialogues for u in d.utterances]
        return evalkit.corpus_bleu(hyps, refs).score
    return score


def cmd_pretrain(args, cfg):
    out = Path(args.out)
    pairs = read_parallel_file(_need(args.parallel, "parallel corpus"))
    vocab = Vocabulary.load(_need(args.vocab, "vocabulary file"))
    _echo_config(out, "pretrain", cfg)
    # dropout=None is the trainer's "keep the model default"
    mcfg = _pick({k: v for k, v in cfg.items() if not (k == "dropout" and v is None)}, ModelConfig,
                 vocab_size=len(vocab))
    tcfg = _pick(cfg, TrainConfig)
    model = ChatTranslator(mcfg, seed=tcfg.seed)
    evaluate = None
    if args.dev:
        dev = read_parallel_file(_need(args.dev, "dev corpus"))
        dev_d = [Dialogue(f"dev{i}", (Utterance(1, Speaker.SX, s, t),)) for i, (s, t) in enumerate(dev)]
        evaluate = _dev_bleu(dev_d, vocab, {**cfg, "context_window": 0})
    vocab.save(out / "vocab.txt")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_fp:
        result = pretrain(pairs, vocab, model, tcfg, log_fp, evaluate, out / "theta.npz",
                          out / "best.npz" if evaluate else None)
    log.info("stage 1 done; theta checkpoint %s", out / "theta.npz")
    if result.best_score is not None:
        log.info("best dev BLEU %.2f at step %d", result.best_score, result.best_step)
    return 0


def cmd_finetune(args, cfg):
    out = Path(args.out)
    if args.init is None or not Path(args.init).exists():
        raise UsageError(f"stage-1 theta checkpoint not found: {args.init} (run `chatnct pretrain` first "
                         "and pass its theta.npz with --init)")
    init = Path(args.init)
    dialogues = read_dialogue_file(_need(args.corpus, "dialogue corpus"))
    vocab = _vocab_for(init, args.vocab)
    _echo_config(out, "finetune", cfg)
    tcfg = _pick(cfg, TrainConfig)
    model, manifest = load_checkpoint(init, seed=tcfg.seed)
    if model.config.vocab_size != len(vocab):
        raise UsageError(f"checkpoint vocabulary size {model.config.vocab_size} != {len(vocab)} in vocab file")
    with open(out / "load_manifest.json", "w", encoding="utf-8") as fp:
        json.dump({"loaded": manifest["loaded"], "freshly_initialized": manifest["fresh"]}, fp, indent=2)
    evaluate = None
    if args.dev:
        evaluate = _dev_bleu(read_dialogue_file(_need(args.dev, "dev corpus")), vocab, cfg)
    vocab.save(out / "vocab.txt")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_fp:
        result = finetune(dialogues, vocab, model, tcfg, log_fp, evaluate, out / "model.npz",
                          out / "best.npz" if evaluate else None)
    log.info("stage 2 done; model checkpoint %s", out / "model.npz")
    if result.best_score is not None:
        log.info("best dev BLEU %.2f at step %d", result.best_score, result.best_step)
    return 0


def cmd_translate(args, cfg):
    ckpt = _need(args.model, "model checkpoint")
    vocab = _vocab_for(ckpt, args.vocab)
    model, _ = load_checkpoint(ckpt)
    dialogues = read_dialogue_file(_need(args.input, "input corpus"), require_target=False)
    filled, scores = translate_corpus(dialogues, model, vocab, int(cfg["context_window"]), _beam(cfg))
    output = Path(args.output)
    _echo_config(output.parent, "translate", cfg)
    with open(output, "w", encoding="utf-8") as fp:
        write_dialogue_corpus(filled, fp)
    scores_path = Path(args.scores) if args.scores else output.with_suffix(".scores.jsonl")
    with open(scores_path, "w", encoding="utf-8") as fp:
        write_scores(scores, fp)
    log.info("translated %d dialogues into %s", len(filled), output)
    return 0


def _segments(path, fmt, lowercase, char):
    if fmt == "dialogue":
        dialogues = read_dialogue_file(_need(path, "file"), require_target=False)
        segs = [list(u.target_tokens) for d in dialogues for u in d.utterances]
    else:
        with open(_need(path, "file"), encoding="utf-8") as fp:
            segs = [line.split() for line in fp.read().splitlines()]
        dialogues = None
    if lowercase:
        segs = [[t.lower() for t in s] for s in segs]
    if char:
        segs = [list("".join(s)) for s in segs]
    return segs, dialogues


def cmd_evaluate(args, cfg):
    hyps, hyp_d = _segments(args.hyp, args.format, args.lowercase, args.char)
    refs, ref_d = _segments(args.ref, args.format, args.lowercase, args.char)
    if len(hyps) != len(refs):
        raise UsageError(f"{len(hyps)} hypothesis segments vs {len(refs)} references")
    if any(not r for r in refs):
        raise UsageError("empty reference segment")
    bleu = evalkit.corpus_bleu(hyps, refs)
    report = {"bleu": bleu.score}
    report.update({f"p{i + 1}": p for i, p in enumerate(bleu.precisions)})
    report.update(bp=bleu.bp, ter=evalkit.corpus_ter(hyps, refs), coherence=None)
    if args.vectors:
        if args.format != "dialogue":
            raise UsageError("coherence needs --format dialogue")
        table = evalkit.load_word_vectors(_need(args.vectors, "vector file"), int(cfg["vector_dim"]))
        report["coherence"] = evalkit.coherence_report([[list(u.target_tokens) for u in d.utterances] for d in hyp_d],
                                                       ref_d, table, int(cfg["coherence_max_n"]))
    _emit(report, args.out)
    return 0


def cmd_coherence(args, cfg):
    hyp_d = read_dialogue_file(_need(args.translations, "translation file"), require_target=False)
    ref_d = read_dialogue_file(_need(args.reference, "reference file"))
    table = evalkit.load_word_vectors(_need(args.vectors, "vector file"), int(cfg["vector_dim"]))
    by_id = {d.dialogue_id: d for d in hyp_d}
    missing = [d.dialogue_id for d in ref_d if d.dialogue_id not in by_id]
    if missing:
        raise UsageError(f"no translation for dialogue(s) {missing[:3]}")
    translations = [[list(u.target_tokens) for u in by_id[d.dialogue_id].utterances] for d in ref_d]
    _emit(evalkit.coherence_report(translations, ref_d, table, int(cfg["coherence_max_n"])), args.out)
    return 0


def cmd_make_samples(args, cfg):
    dialogues = read_dialogue_file(_need(args.corpus, "dialogue corpus"))
    k = int(cfg["context_window"])
    rng = np.random.default_rng([int(cfg["seed"]), 3])
    pool = UtterancePool(dialogues)
    out = Path(args.out)
    _echo_config(out.parent, "make-samples", cfg)
    counts = {"nud": 0, "si": 0}
    with open(out, "w", encoding="utf-8") as fp:
        for i, d in enumerate(dialogues):
            for u in range(1, len(d) + 1):
                view = make_context_view(d, u, k)
                for task, pair in (("nud", make_nud_samples(view, d, u, pool, rng, i)),
                                   ("si", make_si_samples(view, d, u))):
                    if pair is None:
                        continue
                    counts[task] += 1
                    for sample in pair:
                        fp.write(json.dumps({"dialogue_id": d.dialogue_id, **sample.to_record()},
                                            ensure_ascii=False) + "\n")
    log.info("wrote %d NUD and %d SI pairs to %s", counts["nud"], counts["si"], out)
    return 0


def cmd_gradcheck(args, cfg):
    from .gradcheck import run_gradcheck
    coords = cfg["gradcheck_coords"]
    rep = run_gradcheck(int(cfg["seed"]), max_coords=None if coords in (None, 0) else int(coords))
    print(f"max relative error {rep.max_rel_error:.3e} ({rep.worst_param}); "
          f"{rep.n_checked} of {rep.n_params} coordinates; {rep.seconds:.1f}s")
    return 0 if rep.max_rel_error < 1e-3 else 2


def _emit(report, out):
    text = json.dumps(report, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fp:
            fp.write(text + "\n")
    print(text)


# ------------------------------------------------------------------ parser


COMMANDS = {
    "prepare": (cmd_prepare, "validate corpora and build the shared vocabulary"),
    "pretrain": (cmd_pretrain, "stage 1: sentence-level training of the translation parameters"),
    "finetune": (cmd_finetune, "stage 2: multi-task fine-tuning from a stage-1 checkpoint"),
    "translate": (cmd_translate, "translate a dialogue corpus with beam search"),
    "evaluate": (cmd_evaluate, "BLEU / TER (and optional coherence) report"),
    "coherence": (cmd_coherence, "word-vector coherence of translations against preceding references"),
    "make-samples": (cmd_make_samples, "write the NUD and SI pairs of a chat corpus"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the joint objective on a toy model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chatnct", description="Context-aware chat translation with auxiliary tasks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        epilog = "config fields consumed: " + ", ".join(CONSUMES[name] + ["seed"])
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog)
        p.add_argument("--config", help="flat JSON object of config fields")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
        if name == "prepare":
            p.add_argument("--corpus", action="append", help="dialogue corpus (JSON lines); repeatable")
            p.add_argument("--parallel", action="append", help="sentence pairs (TSV); repeatable")
            p.add_argument("--synthetic", type=int, metavar="N", help="first generate an N-dialogue synthetic corpus")
            p.add_argument("--out", required=True, help="output directory")
        elif name == "pretrain":
            p.add_argument("--parallel", required=True)
            p.add_argument("--vocab", required=True)
            p.add_argument("--dev", help="dev sentence pairs for keep-best selection")
            p.add_argument("--out", required=True)
        elif name == "finetune":
            p.add_argument("--corpus", required=True)
            p.add_argument("--init", help="stage-1 theta checkpoint")
            p.add_argument("--vocab", help="defaults to vocab.txt next to --init")
            p.add_argument("--dev", help="dev dialogues for keep-best selection")
            p.add_argument("--out", required=True)
        elif name == "translate":
            p.add_argument("--model", required=True)
            p.add_argument("--vocab")
            p.add_argument("--input", required=True)
            p.add_argument("--output", required=True)
            p.add_argument("--scores", help="per-utterance score file (default: OUTPUT.scores.jsonl)")
        elif name == "evaluate":
            p.add_argument("--hyp", required=True)
            p.add_argument("--ref", required=True)
            p.add_argument("--format", choices=("text", "dialogue"), default="text")
            p.add_argument("--lowercase", action="store_true")
            p.add_argument("--char", action="store_true", help="score characters instead of tokens")
            p.add_argument("--vectors", help="word-vector file; enables coherence (dialogue format only)")
            p.add_argument("--out", help="also write the report here")
        elif name == "coherence":
            p.add_argument("--translations", required=True)
            p.add_argument("--reference", required=True)
            p.add_argument("--vectors", required=True)
            p.add_argument("--out")
        elif name == "make-samples":
            p.add_argument("--corpus", required=True)
            p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:           # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    handler, _ = COMMANDS[args.command]
    try:
        cfg = effective_config(args.command, args.config, args.overrides, args.seed)
        return handler(args, cfg)
    except (UsageError, ValueError) as exc:      # includes corpus, checkpoint and vector-file errors
        print(f"chatnct {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"chatnct {args.command}: training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("unhandled error", exc_info=True)
        print(f"chatnct {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
