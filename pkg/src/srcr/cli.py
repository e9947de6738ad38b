"""``srcr`` command line: synth, split, train, embed, eval, ablate, risk.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime error.
"""

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import checkpoint, dataset, metrics, pipeline, report
from .errors import ConfigError, ContractError, SrcrError

log = logging.getLogger("srcr")


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def fraction(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {value}")
    return value


def text_hash(entries):
    text = "".join(f"{k}={v}\n" for k, v in entries.items())
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_text(path, text):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def sidecar(path):
    return path + ".manifest"


# ---------------------------------------------------------------------------
# Pipeline config flags


def add_config_flags(parser):
    parser.add_argument("--config", help="key=value config file; flags override it")
    for f in fields(pipeline.PipelineConfig):
        kind = str if f.type in (str, "str") else (int if f.type in (int, "int") else float)
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def config_from_args(args):
    entries = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = pipeline.PipelineConfig.from_text(fh.read())
        entries = {f.name: getattr(base, f.name) for f in fields(base)}
    for f in fields(pipeline.PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            entries[f.name] = value
    return pipeline.PipelineConfig(**entries)


def load_subset(path, split_path, subset, labels):
    fs = dataset.read_ocmf(path, labels=labels)
    if subset == "all" or not split_path:
        return fs
    split = dataset.read_split(split_path)
    return fs.subset(split.train_indices if subset == "train" else split.test_indices)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args):
    fs = dataset.generate_synthetic(
        args.categories, args.per_category, args.modalities, args.dim,
        modality_shift=args.shift, noise=args.noise, seed=args.seed,
    )
    dataset.write_ocmf(fs, args.out)
    entries = {
        "categories": args.categories, "per_category": args.per_category,
        "modalities": args.modalities, "dim": args.dim, "shift": args.shift,
        "noise": args.noise, "seed": args.seed,
    }
    dataset.write_manifest(sidecar(args.out), {**entries, "config_sha256": text_hash(entries)})
    print(f"wrote {args.out}: M={fs.n_modalities} N={fs.n_objects} d0={fs.feature_dim} "
          f"categories={args.categories}")


def cmd_split(args):
    fs = dataset.read_ocmf(args.data)
    split = dataset.open_set_split(fs, args.unseen_fraction, args.seed)
    entries = {"data": os.path.basename(args.data), "unseen_fraction": args.unseen_fraction,
               "seed": args.seed}
    dataset.write_split(split, args.out, report.hash_comment(text_hash(entries)))
    print(f"wrote {args.out}: {len(split.seen_categories)} seen / {len(split.unseen_categories)} "
          f"unseen categories, {len(split.train_indices)} train / {len(split.test_indices)} test objects")


def cmd_train(args):
    config = config_from_args(args)
    # features only: the label section of the file is skipped, never read
    fs = load_subset(args.data, args.split, "train", labels=False)
    trained = pipeline.train_pipeline(fs, config)
    checkpoint.write_checkpoint(trained, args.out)
    log_path = args.log or args.out + ".loss.csv"
    write_text(log_path, report.loss_log_csv(trained.rce_history, trained.hsl_history, config.sha256()))
    final = trained.rce_history[-1] if trained.rce_history else float("nan")
    print(f"wrote {args.out} and {log_path}; final RCE loss {final:.6f}")


def cmd_embed(args):
    trained = checkpoint.read_checkpoint(args.checkpoint)
    fs = load_subset(args.data, args.split, args.subset, labels=True)
    z = pipeline.embed_pipeline(trained, fs)
    # labels are passed through untouched so that eval can score the file
    out = dataset.FeatureSet(z.astype(np.float32), fs.labels, fs.modality_names)
    dataset.write_ocmf(out, args.out)
    dataset.write_manifest(sidecar(args.out), {"config_sha256": trained.config.sha256()})
    print(f"wrote {args.out}: M={out.n_modalities} N={out.n_objects} d_z={out.feature_dim}")


def _embedding_hash(path):
    if os.path.exists(sidecar(path)):
        value = dataset.read_manifest(sidecar(path)).get("config_sha256")
        if value:
            return value
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_eval(args):
    fs = dataset.read_ocmf(args.embeddings)
    if fs.labels is None:
        raise ContractError(f"{args.embeddings} carries no labels to score against")
    config_hash = _embedding_hash(args.embeddings)
    reports = pipeline.evaluate_embeddings(fs.features.astype(np.float64), fs.labels,
                                           fs.modality_names, args.points)
    os.makedirs(args.out_dir, exist_ok=True)
    for pair, rep in reports.items():
        write_text(os.path.join(args.out_dir, f"{pair}.csv"), report.metric_report_csv(rep, config_hash, pair))
        write_text(os.path.join(args.out_dir, f"{pair}.svg"),
                   report.pr_curve_svg({pair: rep.pr_curve}, config_hash, f"PR curve {pair}"))
    write_text(os.path.join(args.out_dir, "summary.csv"), report.summary_csv(reports, config_hash))
    write_text(os.path.join(args.out_dir, "pr_curves.svg"),
               report.pr_curve_svg({p: r.pr_curve for p, r in reports.items()}, config_hash))
    mean = pipeline.mean_scalars(reports)
    print(f"{len(reports)} pairs: mAP {mean['mAP']:.4f} NDCG {mean['NDCG']:.4f} ANMRR {mean['ANMRR']:.4f}")


def cmd_ablate(args):
    config = config_from_args(args)
    fs = dataset.read_ocmf(args.data)
    split = dataset.read_split(args.split)
    variants = args.variants.split(",") if args.variants else None
    results = pipeline.ablate(fs, split, config, variants, use_labels=args.use_labels)
    write_text(args.out, report.ablation_csv(results, config.sha256()))
    for variant, row in results.items():
        print(f"{pipeline.ABLATION_LABELS[variant]:<18} mAP {row['mAP']:.4f} "
              f"NDCG {row['NDCG']:.4f} ANMRR {row['ANMRR']:.4f}")


def cmd_risk(args):
    fs = dataset.read_ocmf(args.embeddings)
    if fs.labels is None:
        raise ContractError(f"{args.embeddings} carries no labels")
    m = fs.n_modalities
    if not (0 <= args.query < m and 0 <= args.target < m):
        raise ConfigError(f"modalities must be in [0, {m})")
    x = fs.features.astype(np.float64)
    value = metrics.empirical_risk(x[args.query], fs.labels, x[args.target], fs.labels)
    if args.out:
        write_text(args.out, report.table_csv(
            ["query", "target", "risk"],
            [[fs.modality_names[args.query], fs.modality_names[args.target], value]],
            _embedding_hash(args.embeddings),
        ))
    print(f"empirical risk {value:.6f}")


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="srcr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-modal dataset")
    p.add_argument("--categories", type=positive_int, default=30)
    p.add_argument("--per-category", type=positive_int, default=20)
    p.add_argument("--modalities", type=positive_int, default=3)
    p.add_argument("--dim", type=positive_int, default=64)
    p.add_argument("--shift", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=2022)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="hold out unseen categories")
    p.add_argument("--data", required=True)
    p.add_argument("--unseen-fraction", type=fraction, default=0.3)
    p.add_argument("--seed", type=int, default=2022)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train RCE then HSL on unlabelled features")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="train on the seen-category objects of this split")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--subset", choices=("all", "train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score cross-modal retrieval for every modality pair")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--points", type=positive_int, default=11)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="retrain and score each ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(pipeline.VARIANTS))
    p.add_argument("--use-labels", action="store_true",
                   help="also run the label-consuming category-center variant")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("risk", help="empirical open-set risk between two modalities")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", type=int, default=0)
    p.add_argument("--target", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_risk)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SrcrError, OSError) as exc:
        print(f"srcr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
