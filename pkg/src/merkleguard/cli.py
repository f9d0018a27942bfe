"""``merkleguard`` command line.

Every command prints one JSON document on stdout; diagnostics go to stderr.

Exit codes: 0 success / Match, 1 usage or I/O error, 2 Tampered,
3 StructureChanged.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import __version__
from .attack import AttackSpec, attack_and_measure, choose_epsilon, sink_class
from .checkpoint import CheckpointFormatError, IdxFormatError, load_checkpoint, load_mnist_split, save_checkpoint
from .guard import ManifestError, Verdict, commit, read_manifest, verify, write_manifest
from .merkle import Granularity
from .nn import TrainConfig, evaluate_accuracy, prediction_rates, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TAMPERED = 2
EXIT_STRUCTURE_CHANGED = 3

_VERDICT_EXIT = {
    Verdict.MATCH: EXIT_OK,
    Verdict.TAMPERED: EXIT_TAMPERED,
    Verdict.STRUCTURE_CHANGED: EXIT_STRUCTURE_CHANGED,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as "Tampered".
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _hidden_list(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or any(s <= 0 for s in sizes):
        raise argparse.ArgumentTypeError("hidden sizes must be positive integers")
    return sizes


def cmd_train(args: argparse.Namespace) -> int:
    train_set = load_mnist_split(args.data, "train")
    test_set = load_mnist_split(args.data, "test")
    cfg = TrainConfig(hidden_sizes=args.hidden, epochs=args.epochs, seed=args.seed)
    model = train(train_set, cfg)
    save_checkpoint(model, args.out)
    _emit({
        "command": "train",
        "test_accuracy": evaluate_accuracy(model, test_set),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "hidden_sizes": list(cfg.hidden_sizes),
        "out": str(args.out),
    })
    return EXIT_OK


def cmd_commit(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    manifest = commit(model, Granularity(args.granularity))
    write_manifest(manifest, args.manifest)
    _emit({
        "command": "commit",
        "root": manifest.root,
        "granularity": manifest.granularity.value,
        "leaf_count": manifest.leaf_count,
        "manifest": str(args.manifest),
    })
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    model = load_checkpoint(args.model)
    report = verify(model, manifest)
    _emit({"command": "verify", **report.to_dict()})
    if report.verdict is Verdict.TAMPERED:
        print(f"tampering detected in {len(report.tampered_neurons)} leaf(s)", file=sys.stderr)
    return _VERDICT_EXIT[report.verdict]


def cmd_attack(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    n_out = model.layers[-1].out_dim
    if not 0 <= args.sink < n_out:
        raise UsageError(f"--sink must be in [0, {n_out})")
    data = load_mnist_split(args.data, "test") if args.data else None
    if args.epsilon is None:
        if data is None:
            raise UsageError("--data is required when --epsilon is omitted")
        epsilon = choose_epsilon(model, data, -1, args.sink)
        chosen = True
    else:
        epsilon = args.epsilon
        chosen = False
    spec = AttackSpec(unit=args.sink, epsilon=epsilon, max_accuracy_drop=args.budget)
    trojaned, report = attack_and_measure(model, spec, data)
    save_checkpoint(trojaned, args.out)
    if report.budget_exceeded:
        print(
            f"warning: accuracy drop {report.accuracy_drop:.4f} exceeds budget {args.budget}",
            file=sys.stderr,
        )
    _emit({"command": "attack", "epsilon_chosen": chosen, **report.to_dict(), "out": str(args.out)})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    data = load_mnist_split(args.data, "test")
    _emit({
        "command": "eval",
        "accuracy": evaluate_accuracy(model, data),
        "samples": len(data),
        "class_prediction_rates": prediction_rates(model, data),
    })
    return EXIT_OK


def cmd_sink_class(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    _emit({
        "command": "sink-class",
        "layer": args.layer,
        "unit": args.unit,
        "sink_class": sink_class(model, args.layer, args.unit),
    })
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    from .experiment import run_study, write_study

    model = load_checkpoint(args.model)
    test = load_mnist_split(args.data, "test")
    result = run_study(model, test, Granularity(args.granularity), args.budget)
    paths = write_study(result, args.out_dir, figures=not args.no_figures)
    _emit({
        "command": "experiment",
        **result.summary(),
        "files": {k: str(v) for k, v in paths.items()},
    })
    n = len(result.rows)
    ok = result.detected == n and result.localized == n
    return EXIT_OK if ok else EXIT_TAMPERED


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="merkleguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the MNIST classifier and save an NTCK checkpoint")
    p.add_argument("--data", required=True, help="directory with the four MNIST IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument("--hidden", type=_hidden_list, default=TrainConfig.hidden_sizes,
                   help="comma-separated hidden layer sizes (default 128,64)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("commit", help="write a Merkle manifest for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.NEURON.value)
    p.set_defaults(func=cmd_commit)

    p = sub.add_parser("verify", help="check a checkpoint against its manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="red-team: inject a single-bias trojan on an output neuron")
    p.add_argument("--model", required=True)
    p.add_argument("--sink", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--data")
    p.add_argument("--budget", type=float, default=1.0, help="tolerated accuracy drop")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="test-set accuracy and per-class prediction rates")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sink-class", help="class a single neuron drives")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--unit", type=int, required=True)
    p.set_defaults(func=cmd_sink_class)

    p = sub.add_parser("experiment", help="attack every class, verify each, write CSV/JSON and figures")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.NEURON.value)
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, CheckpointFormatError, IdxFormatError, ManifestError, UsageError, ValueError) as exc:
        print(f"merkleguard {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
