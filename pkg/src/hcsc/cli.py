"""Command-line entry point.

Subcommands: generate, train, eval, inspect-tree, export. Every flag has a
default; a key=value config file can supply values, and explicit flags win
over the file. Exit codes: 0 success, 1 usage/configuration error (usage
text on stderr), 2 runtime failure (diagnostic on stderr). Outputs are
written atomically (temp file + rename).
"""

import argparse
import os
import shutil
import sys

from ._binio import write_bytes_atomic
from .data import GeneratorSpec, generate_hierarchical_mixture, load_dataset, save_dataset
from .errors import ConfigurationError, HcscError
from .evaluation import EvalConfig, knn_evaluate, linear_probe, prototype_label_ami
from .hierarchy import HierarchyOptions, TreeBuilder, dump_tree
from .trainer import (
    TrainingConfig,
    encode_all,
    evaluation_split,
    load_checkpoint,
    run_training,
)


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors instead of exiting with code 2."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message, self.format_usage())


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_tuple(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}") from exc


def _read_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _merge_options(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """defaults < config file < explicit flags."""
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    file_kv = _read_config_file(config_path)
    sub = parser.subparser_map[args.command]
    known = {a.dest: a for a in sub._actions if a.dest != "help"}
    flag_tokens = {t.split("=", 1)[0] for t in argv if t.startswith("-")}
    explicit = {
        a.dest
        for a in sub._actions
        if any(opt in flag_tokens for opt in a.option_strings)
    }
    for key, raw in file_kv.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r} in {config_path}")
        if key in explicit:
            continue  # explicit flag wins
        action = known[key]
        if action.type is not None:
            value = action.type(raw)
        elif isinstance(action.default, bool):
            value = raw in ("1", "true", "yes")
        else:
            value = raw
        setattr(args, key, value)
    return args


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--config", type=str, default=None, help="key=value config file; flags win")
    p.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("HCSC_THREADS", "0")),
        help="worker threads, 0 = available cores (recorded; compute is sequential)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="hcsc", description="Hierarchical contrastive selective coding lab")
    sub = parser.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("generate", parents=[], help="generate a synthetic dataset", add_help=True)
    g.add_argument("--depth", type=int, default=3, help="hierarchy depth (default 3)")
    g.add_argument("--branching", type=_int_tuple, default=(2, 3, 4), help="per-level branching, coarse to fine (default 2,3,4)")
    g.add_argument("--per-leaf", dest="per_leaf", type=int, default=50, help="samples per leaf (default 50)")
    g.add_argument("--dim", type=int, default=32, help="raw feature dimension (default 32)")
    g.add_argument("--radius", type=float, default=10.0, help="root center radius (default 10)")
    g.add_argument("--child-scales", dest="child_scales", type=_float_tuple, default=None, help="offset stds per non-root level (default: 0.1*radius tapering by 0.35)")
    g.add_argument("--leaf-noise", dest="leaf_noise", type=float, default=0.05, help="sample noise std (default 0.05)")
    g.add_argument("--out", type=str, required=True, help="output dataset path")
    _add_common(g)

    t = sub.add_parser("train", help="train an encoder on a dataset")
    t.add_argument("--data", type=str, required=True, help="dataset file")
    t.add_argument("--out", type=str, required=True, help="run directory for checkpoints + metrics")
    t.add_argument("--resume", type=str, default=None, help="checkpoint to resume; training params come from it")
    t.add_argument("--levels", dest="level_sizes", type=_int_tuple, default=(24, 6, 2), help="prototype counts per level, fine to coarse (default 24,6,2)")
    t.add_argument("--epochs", type=int, default=60, help="training epochs (default 60)")
    t.add_argument("--warmup", dest="warmup_epochs", type=int, default=6, help="instance-only warmup epochs (default 6)")
    t.add_argument("--warmup-mode", dest="warmup_mode", type=str, default="icsc", choices=("icsc", "plain_infonce"), help="warmup objective (default icsc)")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=64, help="batch size (default 64)")
    t.add_argument("--lr", dest="lr_init", type=float, default=0.06, help="initial learning rate (default 0.06)")
    t.add_argument("--sgd-momentum", dest="sgd_momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    t.add_argument("--weight-decay", dest="weight_decay", type=float, default=1e-4, help="weight decay (default 1e-4)")
    t.add_argument("--queue", dest="queue_capacity", type=int, default=512, help="negative queue capacity (default 512)")
    t.add_argument("--ema", dest="ema_m", type=float, default=0.999, help="momentum-encoder EMA coefficient (default 0.999)")
    t.add_argument("--hidden", dest="hidden_sizes", type=_int_tuple, default=(64,), help="encoder hidden sizes (default 64)")
    t.add_argument("--embed-dim", dest="embed_dim", type=int, default=32, help="embedding dimension (default 32)")
    t.add_argument("--tau", dest="base_tau", type=float, default=0.2, help="instance temperature / per-level tau mean (default 0.2)")
    t.add_argument("--epsilon", type=float, default=10.0, help="concentration smoothing (default 10)")
    t.add_argument("--min-cluster-size", dest="min_cluster_size", type=int, default=10, help="prune prototypes below this many members (default 10)")
    t.add_argument("--aug-sigma", dest="noise_sigma", type=float, default=0.1, help="augmentation noise std (default 0.1)")
    t.add_argument("--aug-drop", dest="drop_prob", type=float, default=0.0, help="augmentation drop probability (default 0)")
    t.add_argument("--aug-scale", dest="aug_scale", type=_float_tuple, default=(0.9, 1.1), help="augmentation scale range (default 0.9,1.1)")
    t.add_argument("--eval-fraction", dest="eval_fraction", type=float, default=0.2, help="held-out fraction for the per-epoch KNN metric (default 0.2)")
    t.add_argument("--knn-grid", dest="knn_k_grid", type=_int_tuple, default=(10, 20, 100, 200), help="k grid for the KNN metric (default 10,20,100,200)")
    t.add_argument("--knn-temperature", dest="knn_temperature", type=float, default=0.07, help="KNN vote temperature (default 0.07)")
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0, help="checkpoint cadence in epochs, 0 = final only")
    t.add_argument("--no-hierarchy", dest="use_hierarchy", action="store_false", help="disable hierarchical prototypes (plain instance contrast)")
    t.add_argument("--no-instance-loss", dest="instance_loss", action="store_false", help="disable the instance-wise loss")
    t.add_argument("--no-proto-loss", dest="proto_loss", action="store_false", help="disable the prototypical loss")
    t.add_argument("--no-instance-selection", dest="instance_selection", action="store_false", help="contrast against the full queue")
    t.add_argument("--no-proto-selection", dest="proto_selection", action="store_false", help="contrast against all non-positive prototypes")
    t.add_argument("--no-diagnostics", dest="diagnostics", action="store_false", help="skip per-step selection diagnostics")
    t.add_argument("--diagnostics-rate", dest="diagnostics_rate", type=float, default=0.0, help="fraction of queries whose selection reports go to diagnostics.csv (default 0)")
    _add_common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--data", type=str, required=True)
    e.add_argument("--out", type=str, default=None, help="output CSV (default: stdout)")
    e.add_argument("--knn", action="store_true", help="KNN accuracy over the k grid")
    e.add_argument("--ami", action="store_true", help="per-level prototype/label agreement")
    e.add_argument("--probe", action="store_true", help="linear probe accuracy")
    e.add_argument("--levels", dest="level_sizes", type=_int_tuple, default=(24, 6, 2), help="tree level sizes for --ami (default 24,6,2)")
    e.add_argument("--k-grid", dest="knn_k_grid", type=_int_tuple, default=(10, 20, 100, 200), help="KNN k grid (default 10,20,100,200)")
    e.add_argument("--knn-temperature", dest="knn_temperature", type=float, default=0.07, help="KNN vote temperature (default 0.07)")
    e.add_argument("--eval-fraction", dest="eval_fraction", type=float, default=0.2, help="held-out fraction (default 0.2)")
    e.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=300, help="probe GD epochs (default 300)")
    e.add_argument("--probe-lr", dest="probe_lr", type=float, default=0.5, help="probe learning rate (default 0.5)")
    e.add_argument("--min-cluster-size", dest="min_cluster_size", type=int, default=10, help="tree pruning threshold (default 10)")
    e.add_argument("--epsilon", type=float, default=10.0, help="concentration smoothing (default 10)")
    e.add_argument("--tau", dest="base_tau", type=float, default=0.2, help="per-level tau mean (default 0.2)")
    _add_common(e)

    i = sub.add_parser("inspect-tree", help="print a prototype tree built from a checkpoint")
    i.add_argument("--checkpoint", type=str, required=True)
    i.add_argument("--data", type=str, required=True)
    i.add_argument("--levels", dest="level_sizes", type=_int_tuple, default=(24, 6, 2), help="tree level sizes (default 24,6,2)")
    i.add_argument("--min-cluster-size", dest="min_cluster_size", type=int, default=10, help="pruning threshold (default 10)")
    i.add_argument("--epsilon", type=float, default=10.0, help="concentration smoothing (default 10)")
    i.add_argument("--tau", dest="base_tau", type=float, default=0.2, help="per-level tau mean (default 0.2)")
    i.add_argument("--out", type=str, default=None, help="write to file instead of stdout")
    _add_common(i)

    x = sub.add_parser("export", help="bundle a run's metrics, config and tree dump")
    x.add_argument("--run", type=str, required=True, help="training run directory")
    x.add_argument("--data", type=str, required=True, help="dataset used for the run")
    x.add_argument("--out", type=str, required=True, help="export directory")
    x.add_argument("--levels", dest="level_sizes", type=_int_tuple, default=None, help="tree level sizes (default: from run config)")
    _add_common(x)

    parser.subparser_map = {
        "generate": g,
        "train": t,
        "eval": e,
        "inspect-tree": i,
        "export": x,
    }
    return parser


def _cmd_generate(args) -> int:
    depth = args.depth
    if args.child_scales is None:
        # Offset norms must stay well below the root separation, which in
        # high dimension means scales an order of magnitude under the
        # radius, tapering toward the leaves.
        child_scales = tuple(0.1 * args.radius * (0.35**i) for i in range(depth - 1))
    else:
        child_scales = args.child_scales
    spec = GeneratorSpec(
        depth=depth,
        branching=args.branching,
        samples_per_leaf=args.per_leaf,
        dim=args.dim,
        radius=args.radius,
        child_scales=child_scales,
        leaf_noise=args.leaf_noise,
    )
    ds = generate_hierarchical_mixture(spec, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _training_config_from_args(args) -> TrainingConfig:
    scale = args.aug_scale
    if len(scale) != 2:
        raise ConfigurationError("--aug-scale needs exactly two values: lo,hi")
    return TrainingConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        batch_size=args.batch_size,
        lr_init=args.lr_init,
        sgd_momentum=args.sgd_momentum,
        weight_decay=args.weight_decay,
        queue_capacity=args.queue_capacity,
        ema_m=args.ema_m,
        hidden_sizes=args.hidden_sizes,
        embed_dim=args.embed_dim,
        level_sizes=args.level_sizes,
        min_cluster_size=args.min_cluster_size,
        epsilon=args.epsilon,
        base_tau=args.base_tau,
        seed=args.seed,
        use_hierarchy=args.use_hierarchy,
        instance_loss=args.instance_loss,
        proto_loss=args.proto_loss,
        instance_selection=args.instance_selection,
        proto_selection=args.proto_selection,
        warmup_mode=args.warmup_mode,
        noise_sigma=args.noise_sigma,
        drop_prob=args.drop_prob,
        scale_lo=scale[0],
        scale_hi=scale[1],
        eval_fraction=args.eval_fraction,
        knn_k_grid=args.knn_k_grid,
        knn_temperature=args.knn_temperature,
        checkpoint_every=args.checkpoint_every,
        diagnostics=args.diagnostics,
        diagnostics_rate=args.diagnostics_rate,
        threads=args.threads,
    )


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    if args.resume:
        config = load_checkpoint(args.resume).config
    else:
        config = _training_config_from_args(args)
    final, metrics = run_training(config, dataset, args.out, resume_from=args.resume)
    print(f"checkpoint: {final}")
    print(f"metrics: {metrics}")
    return 0


def _rebuild_tree(args, dataset, state):
    opts = HierarchyOptions(
        min_cluster_size=args.min_cluster_size,
        epsilon=args.epsilon,
        base_tau=args.base_tau,
    )
    builder = TreeBuilder(level_sizes=args.level_sizes, opts=opts, seed=args.seed)
    emb = encode_all(state.momentum.params, dataset.features)
    return builder.refresh(emb, epoch=state.epoch)


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    run_knn, run_ami, run_probe = args.knn, args.ami, args.probe
    if not (run_knn or run_ami or run_probe):
        run_knn = run_ami = True

    emb = encode_all(state.params, dataset.features)
    fine = dataset.labels_at_level(1)
    rows = [("metric", "level_or_k", "value", "seed", "epoch")]
    seed, epoch = args.seed, state.epoch

    if run_knn:
        cfg = EvalConfig(knn_temperature=args.knn_temperature, knn_k_grid=args.knn_k_grid)
        train_idx, held_idx = evaluation_split(seed, len(dataset), args.eval_fraction)
        res = knn_evaluate(emb[train_idx], fine[train_idx], emb[held_idx], fine[held_idx], cfg)
        for k, acc in res.accuracy_per_k.items():
            rows.append(("knn_accuracy", str(k), repr(acc), str(seed), str(epoch)))
        rows.append(("knn_best_accuracy", str(res.best_k), repr(res.best_accuracy), str(seed), str(epoch)))
    if run_ami:
        tree = _rebuild_tree(args, dataset, state)
        ami = prototype_label_ami(tree, dataset.labels)
        for l in range(1, tree.num_levels + 1):
            for m in range(1, dataset.depth + 1):
                rows.append(
                    (f"prototype_label_ami_l{l}", str(m), repr(float(ami[l - 1, m - 1])), str(seed), str(epoch))
                )
    if run_probe:
        cfg = EvalConfig(probe_epochs=args.probe_epochs, probe_lr=args.probe_lr)
        acc = linear_probe(emb, fine, cfg, seed)
        rows.append(("linear_probe_accuracy", "1", repr(acc), str(seed), str(epoch)))

    text = "\n".join(",".join(r) for r in rows) + "\n"
    if args.out:
        write_bytes_atomic(args.out, text.encode("utf-8"))
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_inspect_tree(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    tree = _rebuild_tree(args, dataset, state)
    text = dump_tree(tree)
    if args.out:
        write_bytes_atomic(args.out, text.encode("utf-8"))
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_export(args) -> int:
    run_dir = args.run
    metrics = os.path.join(run_dir, "metrics.csv")
    config_txt = os.path.join(run_dir, "config.txt")
    final = os.path.join(run_dir, "final.ckpt")
    for path in (metrics, config_txt, final):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing run artifact: {path}")
    state = load_checkpoint(final)
    dataset = load_dataset(args.data)
    level_sizes = args.level_sizes or state.config.level_sizes
    opts = state.config.hierarchy_options
    builder = TreeBuilder(level_sizes=level_sizes, opts=opts, seed=state.config.seed)
    emb = encode_all(state.momentum.params, dataset.features)
    tree = builder.refresh(emb, epoch=state.epoch)

    os.makedirs(args.out, exist_ok=True)
    shutil.copyfile(metrics, os.path.join(args.out, "metrics.csv"))
    shutil.copyfile(config_txt, os.path.join(args.out, "config.txt"))
    write_bytes_atomic(os.path.join(args.out, "tree.txt"), dump_tree(tree).encode("utf-8"))
    print(f"exported run to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "inspect-tree": _cmd_inspect_tree,
    "export": _cmd_export,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("a subcommand is required", parser.format_usage())
        args = _merge_options(parser, argv)
        if getattr(args, "command", None) is None:
            raise UsageError("a subcommand is required", parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(exc.usage, file=sys.stderr, end="")
        return 1
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (HcscError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
