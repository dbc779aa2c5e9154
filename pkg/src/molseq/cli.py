"""Command-line entry points.

Subcommands: gen-data, train, eval, strategy, sweep, gradcheck, tokenize,
canonicalize.  Training and evaluation operate on dataset directories
(manifest.csv + frames/) and flat key=value config files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as dp
from . import train as tr
from .metrics import accuracy, evaluate_retrieval
from .model import load_checkpoint, pool_frames
from .smiles import SmilesError, canonical_smiles, tokenize
from .train import GRAD_TOLERANCE, TrainConfig, gradient_check_suite, load_config


def _load_split(dataset_dir, config: TrainConfig) -> dp.DatasetSplit:
    samples = dp.load_manifest(dataset_dir)
    return dp.prepare_split(samples, ratio=config.split_ratio, seed=config.seed,
                            drug_disjoint=config.drug_disjoint_split)


def _cmd_gen_data(args) -> int:
    spec = dp.SyntheticSpec.from_file(args.spec)
    samples = dp.generate_synthetic(spec)
    dp.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({spec.num_drugs} drugs, {spec.num_moas} MoAs) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    split = _load_split(args.data, config)
    init = load_checkpoint(args.init) if args.init else None
    result = tr.run_stage(config, split, init=init, out_dir=args.out)
    final = result.final
    print(
        f"stage={config.stage} epochs={config.epochs} "
        f"accuracy={final['accuracy']:.4f} rank1={final['rank1']:.4f} map={final['map']:.4f}"
    )
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig(**ckpt.extra_config) if ckpt.extra_config else TrainConfig()
    split = _load_split(args.data, config)
    model = ckpt.build_model()
    label_kind = config.label_kind
    if label_kind == "moa":
        query, gallery = split.query, split.gallery
    else:
        query, gallery = dp.split_query_gallery(split.test, config.seed, label_kind)

    def labels(samples):
        return np.array([s.drug_label if label_kind == "drug" else s.moa_label for s in samples])

    def embed(samples):
        return model.sequence_embeddings(np.stack([pool_frames(s.frames) for s in samples]))

    result = evaluate_retrieval(embed(query), labels(query), embed(gallery), labels(gallery))
    leaves = model.params.as_leaves()
    test_pooled = np.stack([pool_frames(s.frames) for s in split.test])
    logits = model.head.forward(model.encode_pooled(test_pooled, leaves), leaves).data
    acc = accuracy(logits, labels(split.test))
    line = f"{acc!r},{result.rank1!r},{result.rank5!r},{result.rank10!r},{result.map!r}"
    print("accuracy,rank1,rank5,rank10,map")
    print(line)
    cmc_path = Path(args.cmc_out) if args.cmc_out else Path(args.ckpt).with_name("cmc.csv")
    cmc_path.write_text("rank,cmc\n" + "".join(f"{k + 1},{v!r}\n" for k, v in enumerate(result.cmc)))
    print(f"cmc written to {cmc_path}")
    return 0


def _cmd_strategy(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.epochs:
        config.epochs = args.epochs
    split = _load_split(args.data, config)
    report, _ = tr.run_strategy(args.id, split, config, out_dir=args.out)
    print("strategy,rank1,map,accuracy")
    print(f"{report['strategy']},{report['rank1']!r},{report['map']!r},{report['accuracy']!r}")
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    weights = [float(w) for w in args.weights.split(",")] if args.weights else list(tr.DEFAULT_SWEEP_WEIGHTS)
    split = _load_split(args.data, config)
    rows = tr.sweep_center_weight(config, weights, split, out_dir=args.out)
    print("weight,rank1,map,accuracy")
    for row in rows:
        print(f"{row['weight']!r},{row['rank1']!r},{row['map']!r},{row['accuracy']!r}")
    return 0


def _cmd_gradcheck(args) -> int:
    checks = gradient_check_suite()
    failed = False
    for name, err in checks:
        ok = err <= GRAD_TOLERANCE
        failed |= not ok
        print(f"{name:20s} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def _iter_lines(path: str | None):
    if path:
        with open(path) as fh:
            yield from (line.rstrip("\n") for line in fh)
    else:
        yield from (line.rstrip("\n") for line in sys.stdin)


def _cmd_linewise(args, transform) -> int:
    for lineno, line in enumerate(_iter_lines(args.file), start=1):
        try:
            print(transform(line))
        except SmilesError as exc:
            if args.skip_invalid:
                print("")
                continue
            print(f"line {lineno}: {exc}", file=sys.stderr)
            return 1
    return 0


def _cmd_tokenize(args) -> int:
    return _cmd_linewise(args, lambda s: " ".join(t.text for t in tokenize(s)))


def _cmd_canonicalize(args) -> int:
    return _cmd_linewise(args, canonical_smiles)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="key=value synthetic spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="checkpoint to initialize from")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cmc-out", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("strategy", help="run a pretraining strategy (S1/S2/S3)")
    p.add_argument("--id", required=True, choices=list(tr.STRATEGIES))
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_strategy)

    p = sub.add_parser("sweep", help="sweep the center-loss weight")
    p.add_argument("--config", default=None)
    p.add_argument("--weights", default=None, help="comma-separated weights")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.set_defaults(fn=_cmd_gradcheck)

    for name, fn in (("tokenize", _cmd_tokenize), ("canonicalize", _cmd_canonicalize)):
        p = sub.add_parser(name, help=f"{name} SMILES, one per line")
        p.add_argument("file", nargs="?", default=None, help="input file (default: stdin)")
        p.add_argument("--skip-invalid", action="store_true", help="emit blank lines for failures")
        p.set_defaults(fn=fn)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
