"""Command-line pipeline: synthesize data, build a bank, adapt the
descriptor, score test samples, and evaluate.

All commands are deterministic for fixed inputs and seeds; no output file
embeds a timestamp or environment detail, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bank as bank_mod
from . import evaluation, scoring, synthetic, training
from .descriptor import OptimizerConfig, init_descriptor, load_descriptor, save_descriptor
from .errors import PatchBankError
from .featureio import MultiScaleFeatureSet, load_manifest, read_feature_header, write_feature_set
from .losses import REP_MARGIN_MODES, AdaptationParams


def _add_scoring_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--neighbors", type=int, default=3,
                   help="nearest centers per patch for scoring (default 3)")
    p.add_argument("--sigma", type=float, default=4.0,
                   help="Gaussian smoothing sigma at input resolution (default 4)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbank",
        description="Patch-feature anomaly localization against a compressed memory bank",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic feature dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--spec", help="JSON file of generator settings (defaults used if omitted)")
    p.add_argument("--seed", type=int, help="override the spec's seed")

    p = sub.add_parser("build-bank", help="initialize a descriptor and build the memory bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="bank checkpoint path")
    p.add_argument("--desc-out", help="descriptor checkpoint path (default: OUT.desc)")
    p.add_argument("--gamma-c", type=float, default=1.0,
                   help="bank size as a fraction of the patch count (default 1.0)")
    p.add_argument("--gamma-d", type=float, default=1.0,
                   help="embedding width as a fraction of the feature depth (default 1.0)")
    p.add_argument("--beta", type=float, default=0.1,
                   help="EMA step toward each matched sample (default 0.1)")
    p.add_argument("--kmeans-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="adapt the descriptor against a frozen bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--desc", required=True, help="initial descriptor checkpoint")
    p.add_argument("--out", required=True, help="trained descriptor checkpoint")
    p.add_argument("--log", help="per-epoch loss CSV")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--radius", type=float, default=1e-5)
    p.add_argument("--margin", type=float, default=1e-1)
    p.add_argument("--k-attract", type=int, default=3)
    p.add_argument("--j-repel", type=int, default=3)
    p.add_argument("--rep-margin-mode", choices=REP_MARGIN_MODES, default="non-degenerate")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("score", help="write per-sample anomaly maps for the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--desc", required=True)
    p.add_argument("--out-dir", required=True)
    _add_scoring_args(p)

    p = sub.add_parser("eval", help="image/pixel AUROC and F1 threshold over the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--desc", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--roc-csv", help="also write pixel-level ROC points")
    p.add_argument("--class-name", help="label for the report (default: manifest directory name)")
    _add_scoring_args(p)
    return parser


def _scoring_params(args) -> AdaptationParams:
    return AdaptationParams(attract_neighbors=args.neighbors)


def _cmd_gen_synthetic(args) -> int:
    if args.spec:
        spec = synthetic.SyntheticSpec.from_json(Path(args.spec).read_text())
    else:
        spec = synthetic.benchmark_spec()
    if args.seed is not None:
        spec = synthetic.SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    manifest = synthetic.generate(spec, args.out_dir)
    print(f"wrote {len(manifest.entries)} samples to {args.out_dir}")
    return 0


def _cmd_build_bank(args) -> int:
    manifest = load_manifest(args.manifest)
    entries = manifest.train_entries
    if not entries:
        raise PatchBankError("manifest has no train entries")
    depth = sum(d for d, _, _ in read_feature_header(entries[0].feature_path))
    out_dim = bank_mod.compressed_count(args.gamma_d, depth)
    descriptor = init_descriptor(depth, out_dim, args.seed)
    config = bank_mod.BankConfig(
        gamma_c=args.gamma_c, gamma_d=args.gamma_d, ema_beta=args.beta,
        kmeans_iters=args.kmeans_iters, seed=args.seed,
    )
    bank = bank_mod.build_bank(manifest, descriptor, config)
    bank_mod.save_bank(args.out, bank)
    desc_out = args.desc_out or f"{args.out}.desc"
    save_descriptor(desc_out, descriptor)
    print(f"bank: {bank.size} centers x {bank.depth} dims -> {args.out}")
    print(f"descriptor: {depth} -> {out_dim} dims -> {desc_out}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    bank = bank_mod.load_bank(args.bank)
    descriptor, _ = load_descriptor(args.desc)
    params = AdaptationParams(
        radius=args.radius, margin=args.margin,
        attract_neighbors=args.k_attract, repel_neighbors=args.j_repel,
        epochs=args.epochs, batch_size=args.batch,
        rep_margin_mode=args.rep_margin_mode,
    )
    optimizer = OptimizerConfig(learning_rate=args.lr, weight_decay=args.weight_decay)
    descriptor, history = training.train(
        manifest, descriptor, bank, params, optimizer,
        seed=args.seed, log_path=args.log,
    )
    save_descriptor(args.out, descriptor)
    last = history[-1]
    print(
        f"epoch {last.epoch}: l_att={last.attract:.6g} l_rep={last.repel:.6g} "
        f"l_total={last.total:.6g}"
    )
    print(f"descriptor -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    manifest = load_manifest(args.manifest)
    bank = bank_mod.load_bank(args.bank)
    descriptor, _ = load_descriptor(args.desc)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps, labels, _ = evaluation.score_test_split(
        manifest, descriptor, bank, _scoring_params(args), args.sigma
    )
    rows = ["sample_id,image_label,image_score"]
    for entry, label, score_map in zip(manifest.test_entries, labels, maps):
        raw32 = score_map.raw.astype("float32")
        write_feature_set(
            out_dir / f"{entry.sample_id}_map.pbt",
            MultiScaleFeatureSet(entry.sample_id, (raw32[None],)),
        )
        scoring.write_pgm(out_dir / f"{entry.sample_id}_map.pgm", score_map.normalized)
        rows.append(f"{entry.sample_id},{entry.image_label},{score_map.image_score!r}")
    (out_dir / "scores.csv").write_text("\n".join(rows) + "\n")
    print(f"scored {len(maps)} test samples -> {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    bank = bank_mod.load_bank(args.bank)
    descriptor, _ = load_descriptor(args.desc)
    class_name = args.class_name or Path(args.manifest).resolve().parent.name
    maps, labels, masks = evaluation.score_test_split(
        manifest, descriptor, bank, _scoring_params(args), args.sigma
    )
    report, _, pixel_roc = evaluation.report_from_split(
        manifest, class_name, maps, labels, masks
    )
    evaluation.write_report(args.report, report)
    if args.roc_csv:
        evaluation.write_roc_csv(args.roc_csv, pixel_roc)
    print(
        f"{report.class_name}: I-AUROC {report.image_auroc:.2f} "
        f"P-AUROC {report.pixel_auroc:.2f} F1 {report.f1:.4f} "
        f"@ threshold {report.threshold:.6g}"
    )
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "build-bank": _cmd_build_bank,
    "train": _cmd_train,
    "score": _cmd_score,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except PatchBankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
