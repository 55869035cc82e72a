"""Command-line entry point.

Subcommands mirror the pipeline stages::

    deidseq generate    --config cfg.ini [--out DIR] [--seed N]
    deidseq pretrain-lm --config cfg.ini
    deidseq train       --config cfg.ini [--preset s1..s4]
    deidseq predict     --config cfg.ini --model M.npz [--split dev|test]
    deidseq ensemble    --config cfg.ini --pred DIR --pred DIR ... [--weights ... --threshold t]
    deidseq evaluate    --config cfg.ini --gold DIR --pred DIR [--regions F] [--confusion F.csv]

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Every command writes a manifest (config hash, version, kernel backend,
seed) into its output directory; re-running with identical inputs
reproduces outputs bit-identically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import DataError, NumericError, __version__, kernels
from .corpusgen import generate as generate_corpus
from .corpusgen import write_corpus
from .embeddings import pretrain_charlm, save_charlm
from .ensemble import EnsembleConfig, ensemble_corpus, paper_config, tune_weights
from .evaluation import (
    confusion_matrix,
    evaluate_binary_merged,
    evaluate_binary_strict,
    evaluate_ner,
    filter_regions,
    load_regions,
)
from .ingest import load_split, write_split
from .pipeline import ConfigError, PipelineConfig, build_stack
from .postprocess import apply_rules
from .tagger import LabelInventory, load_model, predict_documents, save_model, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise ConfigError(message)


def _write_manifest(out_dir: Path, command: str, cfg: PipelineConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash,
        "version": __version__,
        "kernels_backend": kernels.BACKEND,
        "seed": cfg.seed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.generator.seed = args.seed
        cfg.charlm.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output_dir = Path(args.out)
    if getattr(args, "preset", None) is not None:
        cfg.preset = args.preset
    return cfg


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.corpus_dir
    corpus = generate_corpus(cfg.generator)
    write_corpus(corpus, out)
    _write_manifest(out, "generate", cfg)
    print(f"wrote {corpus.stats['documents']} documents to {out}")
    print(
        f"phi spans: {corpus.stats['phi_spans']} "
        f"(header/footer fraction {corpus.stats['header_footer_fraction']:.3f})"
    )
    return 0


def _cmd_pretrain_lm(args) -> int:
    cfg = _load_config(args)
    docs = load_split(cfg.corpus_dir / "train")
    if not docs:
        raise DataError(f"no documents in {cfg.corpus_dir / 'train'}")
    text = "\n".join(d.text for d in docs)
    result = pretrain_charlm(text, cfg.charlm)
    cfg.charlm_path.parent.mkdir(parents=True, exist_ok=True)
    save_charlm(cfg.charlm_path, result.embedder, {"perplexity": result.perplexity})
    _write_manifest(cfg.output_dir, "pretrain-lm", cfg)
    for direction, history in result.history.items():
        for epoch, loss, ppl in history:
            print(f"{direction} epoch {epoch}: loss {loss:.4f} heldout-ppl {ppl:.4f}")
    print(f"saved character LM to {cfg.charlm_path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    train_docs = load_split(cfg.corpus_dir / "train")
    dev_docs = load_split(cfg.corpus_dir / "dev")
    stack = build_stack(cfg, train_docs)
    result = train(train_docs, dev_docs, stack, cfg.train, hidden=cfg.hidden)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.npz"
    save_model(result.model, model_path)
    with open(out / "trainlog.tsv", "w", encoding="utf-8") as f:
        f.write("epoch\ttrain_loss\tdev_f1\n")
        for epoch, loss, f1 in result.log:
            f.write(f"{epoch}\t{loss:.6f}\t{f1:.6f}\n")
            print(f"epoch {epoch}: loss {loss:.4f} dev-f1 {f1:.4f}")
    _write_manifest(out, "train", cfg)
    print(
        f"saved model to {model_path} "
        f"(best dev F1 {result.model.meta['dev_f1']:.4f} at epoch {result.model.meta['best_epoch']}, "
        f"{result.boundary_snaps} boundary snaps)"
    )
    return 0


def _cmd_predict(args) -> int:
    cfg = _load_config(args)
    model_path = Path(args.model) if args.model else cfg.output_dir / "model.npz"
    model = load_model(model_path)
    docs = load_split(cfg.corpus_dir / args.split)
    preds = predict_documents(docs, model)
    if cfg.rules_enabled and not args.no_rules:
        preds = [apply_rules(d, cfg.rules) for d in preds]
    out = Path(args.out) if args.out else cfg.output_dir / f"pred-{args.split}"
    write_split(out, preds)
    _write_manifest(out, "predict", cfg)
    print(f"wrote predictions for {len(preds)} documents to {out}")
    return 0


def _cmd_ensemble(args) -> int:
    cfg = _load_config(args)
    if len(args.pred) < 2:
        raise ConfigError("ensemble needs at least two --pred directories")
    per_classifier = [load_split(d) for d in args.pred]
    if args.tune:
        if not args.gold:
            raise ConfigError("--tune requires --gold with development gold annotations")
        config = tune_weights(per_classifier, load_split(args.gold))
        print(f"tuned weights {config.weights} threshold {config.threshold}")
    elif args.weights:
        weights = [float(w) for w in args.weights.split(",")]
        if len(weights) != len(args.pred):
            raise ConfigError(f"{len(weights)} weights for {len(args.pred)} prediction dirs")
        config = EnsembleConfig(weights=weights, threshold=args.threshold)
    elif cfg.ensemble is not None and len(cfg.ensemble.weights) == len(args.pred):
        config = cfg.ensemble
    elif len(args.pred) == 4:
        config = paper_config()
    else:
        raise ConfigError("no ensemble weights given (use --weights or the [ensemble] section)")
    classes = sorted({s.label for docs in per_classifier for d in docs for s in d.spans})
    order = {lab: i for i, lab in enumerate(LabelInventory(classes).labels)}
    merged = ensemble_corpus(per_classifier, config, order)
    out = Path(args.out) if args.out else cfg.output_dir / "pred-ensemble"
    write_split(out, merged)
    _write_manifest(out, "ensemble", cfg)
    print(f"wrote ensemble of {len(args.pred)} classifiers to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    gold = load_split(args.gold)
    pred = load_split(args.pred)
    if args.regions:
        mask = load_regions(args.regions)
        gold_f = filter_regions(gold, mask)
        pred_f = filter_regions(pred, mask)
        print(
            f"region filter: gold kept {gold_f.retained} dropped {gold_f.dropped}; "
            f"pred kept {pred_f.retained} dropped {pred_f.dropped}"
        )
        gold, pred = gold_f.documents, pred_f.documents
    reports = [evaluate_ner(gold, pred), evaluate_binary_strict(gold, pred), evaluate_binary_merged(gold, pred)]
    for report in reports:
        print(report.format_table())
        print()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.kv", "w", encoding="utf-8") as f:
            for report in reports:
                f.write(report.to_keyvalues())
        confusion_matrix(gold, pred).to_csv(out / "confusion.csv")
        _write_manifest(out, "evaluate", cfg)
    elif args.confusion:
        confusion_matrix(gold, pred).to_csv(args.confusion)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="deidseq", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config file (INI)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override output directory")

    p = sub.add_parser("generate", help="write a synthetic corpus")
    common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("pretrain-lm", help="pretrain the character language model")
    common(p)
    p.set_defaults(func=_cmd_pretrain_lm)

    p = sub.add_parser("train", help="train a tagger")
    common(p)
    p.add_argument("--preset", choices=["s1", "s2", "s3", "s4", "s5"], help="embedding stack preset")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="annotate a corpus split")
    common(p)
    p.add_argument("--model", help="model checkpoint (default: <out>/model.npz)")
    p.add_argument("--split", default="test", help="corpus split to annotate (default test)")
    p.add_argument("--no-rules", action="store_true", help="skip regex post-processing")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("ensemble", help="weighted-vote combination of prediction dirs")
    common(p)
    p.add_argument("--pred", action="append", default=[], help="prediction directory (repeat)")
    p.add_argument("--weights", help="comma-separated classifier weights")
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--tune", action="store_true", help="grid-search weights on --gold")
    p.add_argument("--gold", help="gold directory for --tune")
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    common(p)
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--regions", help="region mask file; evaluate real-text intervals only")
    p.add_argument("--confusion", help="write token confusion matrix CSV here")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
