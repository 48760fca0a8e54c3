"""``mre`` command line: prepare | split | train | eval | sweep | export-emb.

Every subcommand prints a JSON summary on stdout. Exit codes: 0 on success,
2 when the input is rejected, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import MREError, ValidationError
from .kg import DATASET_FILES, generate_split, load_dataset_dir, save_mmkg, save_split
from .tokenization import Vocabulary

log = logging.getLogger("mre")

VOCAB_FILE = "vocab.txt"


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, **extra):
    over = _overrides(getattr(args, "set", None))
    over.update({k: v for k, v in extra.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "allow_missing", False):
        over["allow_missing"] = True
    return load_config(args.config, over)


def _load(data_dir, cfg):
    return load_dataset_dir(data_dir, image_size=cfg.data.image_size, allow_missing=cfg.data.allow_missing)


def _vocab(args, kg) -> Vocabulary:
    path = Path(args.vocab) if getattr(args, "vocab", None) else Path(args.data) / VOCAB_FILE
    if path.exists():
        return Vocabulary.from_file(path)
    log.info("no vocabulary at %s; building one from the graph's texts", path)
    return Vocabulary.from_corpus(list(kg.entity_text) + list(kg.relation_text))


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=1, sort_keys=True, default=str)
    sys.stdout.write("\n")


def _stats(kg) -> dict:
    sp = kg.split
    return {
        "entities": kg.num_entities,
        "relations": kg.num_relations,
        "triples": int(len(kg.triples)),
        "image_shape": list(kg.entity_image.shape[1:]),
        "split": None if sp is None else {"train": len(sp.train), "val": len(sp.val), "test": len(sp.test)},
    }


# -- subcommands ---------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.synthetic:
        from .synthetic import make_synthetic_mmkg, synthetic_vocabulary

        if not args.out:
            raise ValidationError("--synthetic needs --out")
        kg = make_synthetic_mmkg(args.seed or 0)
        out = save_mmkg(kg, args.out)
        synthetic_vocabulary(kg).save(out / VOCAB_FILE)
        _emit({"out": str(out), **_stats(kg)})
        return 0
    if not args.data:
        raise ValidationError("prepare needs --data or --synthetic")
    cfg = _config(args)
    kg = _load(args.data, cfg)
    kg.validate()
    stats = _stats(kg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _vocab(args, kg).save(out / VOCAB_FILE)
        (out / "stats.json").write_text(json.dumps(stats, indent=1) + "\n", encoding="utf-8")
    _emit(stats)
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    kg = _load(args.data, cfg)
    split = generate_split(kg, args.ratio, cfg.train.seed, n_val=args.n_val)
    out = Path(args.out) if args.out else Path(args.data) / DATASET_FILES["split"]
    save_split(split, kg, out)
    _emit({"out": str(out), **split.to_json(kg.relation_names)})
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer

    if not args.checkpoint:
        raise ValidationError("train needs --checkpoint")
    cfg = _config(args)
    kg = _load(args.data, cfg)
    if kg.split is None:
        raise ValidationError(f"{args.data} has no {DATASET_FILES['split']}; run `mre split` first")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    if args.resume:
        trainer = Trainer.resume(args.checkpoint, kg, log_path=log_path)
    else:
        trainer = Trainer(kg, _vocab(args, kg), cfg, log_path=log_path)
    state = trainer.fit(checkpoint_path=args.checkpoint)
    cfg.dump(out / "config.txt")
    _emit({"checkpoint": str(args.checkpoint), "metrics_log": str(log_path), **state.counters(),
           "best_val_mrr": state.best_val_mrr})
    return 0


def _restore(args):
    from .model import TokenizedKG
    from .trainer import load_model

    if not args.checkpoint:
        raise ValidationError(f"{args.command} needs --checkpoint")
    model, vocab, cfg = load_model(args.checkpoint)
    over = _overrides(args.set)
    if over:
        cfg.update(over).validate()
    kg = _load(args.data, cfg)
    missing = set(model.train_relations) - set(range(kg.num_relations))
    if missing:
        raise ValidationError("checkpoint refers to relations the graph does not have")
    return model, vocab, cfg, kg, TokenizedKG.build(kg, vocab, cfg)


def _relations(kg, names):
    if not names:
        return None
    index = kg.relation_index
    unknown = [n for n in names if n not in index]
    if unknown:
        raise ValidationError(f"unknown relations: {unknown}")
    return [index[n] for n in names]


def cmd_eval(args) -> int:
    from .evaluation import run_eval

    model, _vocab_, cfg, kg, data = _restore(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    n_noise = args.n_noise or cfg.eval.n_noise
    ties = args.ties or cfg.eval.ties
    primary = args.filtered or cfg.eval.filtered
    rels = _relations(kg, args.relations)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result = {"primary": "filtered" if primary else "unfiltered", "n_noise": n_noise, "seed": seed, "ties": ties}
    # both ranking protocols are always reported
    for filtered in (False, True):
        mode = "filtered" if filtered else "unfiltered"
        rep = run_eval(kg, model, data, n_noise, seed, relations=rels, filtered=filtered, ties=ties,
                       corrupt=cfg.eval.corrupt)
        result[mode] = rep.as_dict()
        if out:
            rep.write_csv(out / f"eval_{mode}.csv")
    if out:
        (out / "metrics.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _emit(result)
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import sweep

    cfg = _config(args)
    kg = _load(args.data, cfg)
    if kg.split is None and args.axis != "split_ratio":
        raise ValidationError(f"{args.data} has no {DATASET_FILES['split']}; run `mre split` first")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if args.axis == "noise_dim":
        values = [int(v) for v in values]
    out = Path(args.out or "sweep_out")
    rows = sweep(args.axis, values, cfg, kg, _vocab(args, kg), out, eval_filtered=args.filtered or None)
    _emit({"csv": str(out / f"sweep_{args.axis}.csv"), "rows": rows})
    return 0


def cmd_export(args) -> int:
    from .evaluation import export_embeddings

    model, _vocab_, cfg, kg, data = _restore(args)
    rels = _relations(kg, args.relations) or sorted(kg.relations)
    out = Path(args.out or "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed if args.seed is None else args.seed
    rows = export_embeddings(out, kg, model, data, rels, args.n_noise or cfg.eval.n_noise, seed, args.max_pairs)
    _emit({"out": str(out), "rows": rows, "relations": [kg.relation_names[r] for r in rels]})
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint", help="checkpoint file (written by train, read by eval/export-emb)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--vocab", help="vocabulary file (default: <data>/vocab.txt, else built from the texts)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    common.add_argument("--allow-missing", action="store_true", help="blank images for entities without one")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mre", description="Zero-shot relational learning on multimodal graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="validate a dataset or write the synthetic benchmark")
    s.add_argument("--synthetic", action="store_true")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("split", parents=[common], help="hold out a fraction of relations as unseen")
    s.add_argument("--ratio", type=float, default=0.3)
    s.add_argument("--n-val", type=int, default=0)
    s.set_defaults(func=cmd_split, needs_data=True)

    s = sub.add_parser("train", parents=[common], help="run both training phases")
    s.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    s.set_defaults(func=cmd_train, needs_data=True)

    for name, func, help_ in (("eval", cmd_eval, "rank tails for unseen relations"),
                              ("export-emb", cmd_export, "dump pair/generated/center embeddings")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--relations", nargs="+", metavar="NAME")
        s.add_argument("--n-noise", type=int)
        if name == "eval":
            s.add_argument("--ties", choices=("optimistic", "pessimistic", "mean"))
            s.add_argument("--filtered", action="store_true", help="mark filtered ranking as primary")
        else:
            s.add_argument("--max-pairs", type=int)
        s.set_defaults(func=func, needs_data=True)

    s = sub.add_parser("sweep", parents=[common], help="train/evaluate over one hyperparameter axis")
    s.add_argument("--axis", required=True, choices=("split_ratio", "mask_ratio", "noise_dim"))
    s.add_argument("--values", required=True, help="comma-separated")
    s.add_argument("--filtered", action="store_true")
    s.set_defaults(func=cmd_sweep, needs_data=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "needs_data", False) and not args.data:
            raise ValidationError(f"{args.command} needs --data")
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MREError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
