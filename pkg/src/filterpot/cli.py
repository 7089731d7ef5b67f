"""Command-line entry point.

Every command is a pure function of its flags: all randomness flows from
explicit seeds, diagnostics go to stderr, and data goes to files or stdout.
Each file-producing run also writes a run manifest recording the resolved
argument vector; ``filterpot rerun`` replays a manifest and reproduces the
outputs byte for byte.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SPLITS, make_dataset
from .errors import FilterPotError
from .evaluate import (
    EvalConfig,
    attribution_report,
    collect_misclassified,
    finetune_sweep,
    make_ranking_providers,
    pruning_sweep,
    write_attribution_csv,
    write_report_csv,
)
from .profiles import DEFAULT_QUANTILE, SaliencyMatrix, load_profiles, save_profiles
from .ranking import (
    attach_reference,
    fit_tail_model,
    load_tail_model,
    pot_saliency,
    rank,
    save_tail_model,
    write_ranking_csv,
    zscore_saliency,
)
from .toycnn import (
    filter_metas,
    filter_saliency_profile,
    load_weights,
    predict,
    save_weights,
    train,
)

DEFAULT_DATA_SEED = 0


def _write_run_manifest(path: Path, command: str, argv: list[str], outputs: list[str]) -> None:
    doc = {
        "tool": "filterpot",
        "version": __version__,
        "command": command,
        "argv": argv,
        "outputs": outputs,
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _resolved_argv(command_parts: list[str], args: argparse.Namespace, spec: list[tuple[str, str]]) -> list[str]:
    """Reconstruct a fully explicit argument vector (defaults included)."""
    argv = list(command_parts)
    for flag, attr in spec:
        value = getattr(args, attr)
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        argv += [flag, str(value)]
    return argv


def _cmd_toy_train(args) -> int:
    dataset = make_dataset(args.data_seed, "train", args.train_size)
    state = train(dataset, epochs=args.epochs, seed=args.seed, lr=args.lr, batch_size=args.batch_size)
    out = Path(args.out)
    save_weights(state, out)
    argv = _resolved_argv(
        ["toy", "train"],
        args,
        [
            ("--seed", "seed"),
            ("--epochs", "epochs"),
            ("--data-seed", "data_seed"),
            ("--train-size", "train_size"),
            ("--lr", "lr"),
            ("--batch-size", "batch_size"),
            ("--out", "out"),
        ],
    )
    _write_run_manifest(out.with_name(out.name + ".manifest.json"), "toy-train", argv, [out.name])
    print(f"wrote {out}", file=sys.stderr)
    return 0


def _cmd_toy_profiles(args) -> int:
    state = load_weights(args.weights)
    dataset = make_dataset(args.data_seed, args.split, args.count)
    rows = [
        filter_saliency_profile(state, dataset.images[i], int(dataset.labels[i]))
        for i in range(len(dataset))
    ]
    matrix = SaliencyMatrix(np.stack(rows), filter_metas())
    out_dir = Path(args.out)
    manifest_path = save_profiles(matrix, out_dir)
    argv = _resolved_argv(
        ["toy", "profiles"],
        args,
        [
            ("--weights", "weights"),
            ("--split", "split"),
            ("--data-seed", "data_seed"),
            ("--count", "count"),
            ("--out", "out"),
        ],
    )
    _write_run_manifest(out_dir / "run_manifest.json", "toy-profiles", argv, ["manifest.json", "profiles.f32"])
    print(f"wrote {manifest_path} ({len(dataset)} samples x {matrix.num_filters} filters)", file=sys.stderr)
    return 0


def _cmd_fit(args) -> int:
    matrix = load_profiles(args.manifest)
    model = fit_tail_model(matrix, args.quantile)
    out = Path(args.out)
    save_tail_model(model, out)
    n_degenerate = sum(model.degenerate)
    argv = _resolved_argv(
        ["fit"],
        args,
        [("--manifest", "manifest"), ("--quantile", "quantile"), ("--out", "out")],
    )
    _write_run_manifest(out.with_name(out.name + ".manifest.json"), "fit", argv, [out.name])
    print(
        f"fitted {model.num_filters} filters ({n_degenerate} degenerate) -> {out}",
        file=sys.stderr,
    )
    return 0


def _cmd_rank(args) -> int:
    model = load_tail_model(args.model)
    matrix = load_profiles(args.manifest) if args.manifest else None
    filters = matrix.filters if matrix is not None else filter_metas()

    if args.weights:
        if args.split is None:
            raise FilterPotError("--split is required when ranking from --weights")
        state = load_weights(args.weights)
        dataset = make_dataset(args.data_seed, args.split, args.count)
        if not 0 <= args.sample_index < len(dataset):
            raise IndexError(
                f"sample index {args.sample_index} out of range for {len(dataset)} samples"
            )
        image = dataset.images[args.sample_index]
        label = int(dataset.labels[args.sample_index])
        profile = filter_saliency_profile(state, image, label)
        if predict(state, image) == label:
            print(
                f"warning: sample {args.sample_index} of split {args.split!r} is "
                "not misclassified; ranking produced anyway",
                file=sys.stderr,
            )
    else:
        if matrix is None:
            raise FilterPotError("rank needs --weights or --manifest to source a profile")
        if not 0 <= args.sample_index < matrix.num_samples:
            raise IndexError(
                f"sample index {args.sample_index} out of range for {matrix.num_samples} rows"
            )
        profile = matrix.values[args.sample_index].astype(np.float64)

    if args.method == "pot":
        if matrix is None:
            raise FilterPotError("POT ranking needs --manifest (the reference profiles)")
        attach_reference(model, matrix)
        scores = pot_saliency(profile, model)
    else:
        scores = zscore_saliency(profile, model)
    ranking = rank(scores, args.method, profile)

    if args.out:
        out = Path(args.out)
        with out.open("w", encoding="utf-8", newline="") as fh:
            write_ranking_csv(ranking, filters, fh, top=args.top)
        argv = _resolved_argv(
            ["rank"],
            args,
            [
                ("--model", "model"),
                ("--weights", "weights"),
                ("--manifest", "manifest"),
                ("--sample-index", "sample_index"),
                ("--split", "split"),
                ("--data-seed", "data_seed"),
                ("--count", "count"),
                ("--method", "method"),
                ("--top", "top"),
                ("--out", "out"),
            ],
        )
        _write_run_manifest(out.with_name(out.name + ".manifest.json"), "rank", argv, [out.name])
    else:
        write_ranking_csv(ranking, filters, sys.stdout, top=args.top)
    return 0


def _cmd_eval(args) -> int:
    config = EvalConfig(
        method=args.method,
        max_filters=args.max_filters,
        lr=args.lr,
        random_seeds=tuple(args.seeds),
        quantile=args.quantile,
    )
    state = load_weights(args.weights)
    dataset = make_dataset(args.data_seed, args.split, args.count)
    misclassified = collect_misclassified(state, dataset)

    model = None
    if args.method in ("pot", "zscore"):
        if not args.model:
            raise FilterPotError(f"--model is required for method {args.method!r}")
        model = load_tail_model(args.model)
        if args.method == "pot":
            if not args.manifest:
                raise FilterPotError("--manifest is required for method 'pot'")
            attach_reference(model, load_profiles(args.manifest))

    filters = filter_metas()
    providers = make_ranking_providers(
        args.method, state, filters, model=model, random_seeds=tuple(args.seeds)
    )
    sweep = pruning_sweep if args.experiment == "prune" else finetune_sweep
    report = sweep(state, misclassified, providers, config)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "report.csv").open("w", encoding="utf-8", newline="") as fh:
        write_report_csv([report], fh)
    attribution_rows = []
    if misclassified:
        shares = attribution_report(misclassified, providers, args.attribution_k, filters)
        attribution_rows.append((args.method, args.attribution_k, shares))
    with (out_dir / "attribution.csv").open("w", encoding="utf-8", newline="") as fh:
        write_attribution_csv(attribution_rows, fh)

    argv = _resolved_argv(
        ["eval"],
        args,
        [
            ("--experiment", "experiment"),
            ("--method", "method"),
            ("--weights", "weights"),
            ("--model", "model"),
            ("--manifest", "manifest"),
            ("--split", "split"),
            ("--data-seed", "data_seed"),
            ("--count", "count"),
            ("--max-filters", "max_filters"),
            ("--lr", "lr"),
            ("--seeds", "seeds"),
            ("--quantile", "quantile"),
            ("--attribution-k", "attribution_k"),
            ("--out", "out"),
        ],
    )
    _write_run_manifest(
        out_dir / "run_manifest.json", "eval", argv, ["report.csv", "attribution.csv"]
    )
    print(
        f"evaluated {len(misclassified)} misclassified samples "
        f"({args.experiment}, {args.method}) -> {out_dir}",
        file=sys.stderr,
    )
    return 0


def _cmd_rerun(args) -> int:
    path = Path(args.manifest)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        argv = doc["argv"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FilterPotError(f"cannot read run manifest {path}: {exc}") from exc
    if not isinstance(argv, list) or not all(isinstance(a, str) for a in argv):
        raise FilterPotError(f"run manifest {path} has a malformed argv")
    print(f"replaying: filterpot {' '.join(argv)}", file=sys.stderr)
    return main(argv)


def _parse_seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filterpot",
        description="Rank CNN filters by tail probabilities of gradient saliency",
    )
    parser.add_argument("--version", action="version", version=f"filterpot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    toy = sub.add_parser("toy", help="train the built-in CNN and export its profiles")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)

    tt = toy_sub.add_parser("train", help="train the toy CNN on the synthetic data")
    tt.add_argument("--seed", type=int, required=True)
    tt.add_argument("--epochs", type=int, default=8)
    tt.add_argument("--data-seed", type=int, default=DEFAULT_DATA_SEED)
    tt.add_argument("--train-size", type=int, default=None)
    tt.add_argument("--lr", type=float, default=0.08)
    tt.add_argument("--batch-size", type=int, default=32)
    tt.add_argument("--out", required=True)
    tt.set_defaults(func=_cmd_toy_train)

    tp = toy_sub.add_parser("profiles", help="write per-sample saliency profiles")
    tp.add_argument("--weights", required=True)
    tp.add_argument("--split", choices=SPLITS, required=True)
    tp.add_argument("--data-seed", type=int, default=DEFAULT_DATA_SEED)
    tp.add_argument("--count", type=int, default=None)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=_cmd_toy_profiles)

    fit = sub.add_parser("fit", help="fit per-filter stats and GPD tails")
    fit.add_argument("--manifest", required=True)
    fit.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=_cmd_fit)

    rk = sub.add_parser("rank", help="rank filters for one sample")
    rk.add_argument("--model", required=True)
    rk.add_argument("--weights", default=None)
    rk.add_argument("--manifest", default=None)
    rk.add_argument("--sample-index", type=int, required=True)
    rk.add_argument("--split", choices=SPLITS, default=None)
    rk.add_argument("--data-seed", type=int, default=DEFAULT_DATA_SEED)
    rk.add_argument("--count", type=int, default=None)
    rk.add_argument("--method", choices=("pot", "zscore"), required=True)
    rk.add_argument("--top", type=int, default=50)
    rk.add_argument("--out", default=None)
    rk.set_defaults(func=_cmd_rank)

    ev = sub.add_parser("eval", help="pruning / fine-tuning sweep over misclassified samples")
    ev.add_argument("--experiment", choices=("prune", "finetune"), required=True)
    ev.add_argument("--method", choices=("pot", "zscore", "random", "lastgroup"), required=True)
    ev.add_argument("--weights", required=True)
    ev.add_argument("--model", default=None)
    ev.add_argument("--manifest", default=None)
    ev.add_argument("--split", choices=SPLITS, required=True)
    ev.add_argument("--data-seed", type=int, default=DEFAULT_DATA_SEED)
    ev.add_argument("--count", type=int, default=None)
    ev.add_argument("--max-filters", type=int, default=50)
    ev.add_argument("--lr", type=float, default=0.001)
    ev.add_argument("--seeds", type=_parse_seed_list, default=[0, 1, 2, 3, 4])
    ev.add_argument("--quantile", type=float, default=DEFAULT_QUANTILE)
    ev.add_argument("--attribution-k", type=int, default=20)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=_cmd_eval)

    rr = sub.add_parser("rerun", help="replay a previous run from its manifest")
    rr.add_argument("manifest")
    rr.set_defaults(func=_cmd_rerun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FilterPotError, OSError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
