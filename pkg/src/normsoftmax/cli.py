"""
Command-line interface: ``normsoftmax {gen,train,embed,eval,sweep,gradcheck}``.

Every command accepts ``--seed``, ``--out`` and ``--config FILE`` (``key=value``
lines using the long option names; command-line flags win).  Exit codes: 0 ok,
1 gradient check failed, 2 usage or input error, 3 numerical failure.
"""
import argparse
import csv
import hashlib
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import formats
from .errors import InvalidInput, NonFiniteLoss
from .experiments import split, train_and_evaluate
from .losses import LossConfig, LossVariant, init_proxies
from .retrieval import CUB_KS, SOP_KS, EmbeddingSet, binarize, evaluate
from .sampling import (
    RNG_ALGORITHM,
    BatchSpec,
    generate_synthetic,
    make_rng,
    read_dataset_csv,
    subsample_classes,
    write_dataset_csv,
)
from .trainer import EmbeddingModel, TrainConfig, embed, fit, grad_check, initial_model

log = logging.getLogger("normsoftmax")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def _int_list(s):
    return [int(v) for v in str(s).split(",") if v.strip()]


def _float_list(s):
    return [float(v) for v in str(s).split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="64-bit seed for every random stream")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--config", help="key=value file of defaults")


def _add_train_opts(p):
    g = p.add_argument_group("training")
    g.add_argument("--embed-dim", type=int, default=128)
    g.add_argument("--hidden-dim", type=int, default=0, help="0 = identity trunk")
    g.add_argument("--no-layer-norm", action="store_true")
    g.add_argument("--layer-norm-eps", type=float, default=1e-5)
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=75)
    g.add_argument("--samples-per-class", type=int, default=25,
                   help="S; classes per batch is batch-size // S; 0 = sequential batches")
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--lr-step", type=_int_list, default="15", help="comma-separated epochs")
    g.add_argument("--lr-gamma", type=float, default=0.1)
    g.add_argument("--loss", choices=[v.value for v in LossVariant], default="norm_softmax")
    g.add_argument("--temperature", type=float, default=0.05)
    g.add_argument("--scale", type=float, default=30.0, help="LMCL scale s")
    g.add_argument("--margin", type=float, default=0.35, help="LMCL margin m")
    g.add_argument("--subsample", type=float, default=1.0, help="active class ratio")
    g.add_argument("--warmstart-epochs", type=int, default=1)


def _add_ks(p):
    p.add_argument("--ks", type=_int_list, help="Recall@K list, e.g. 1,10,100")
    p.add_argument("--style", choices=["cub", "sop"], default="cub",
                   help="default K set: cub=1,2,4,8  sop=1,10,100")


def build_parser():
    parser = argparse.ArgumentParser(prog="normsoftmax", description=__doc__.split("\n")[1])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset CSV")
    _add_common(p)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--center-scale", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("-o", "--output", help="CSV path (default OUT/data.csv)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model; writes checkpoint.pxe, history.csv")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset; writes embeddings.emb, labels.txt")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--binary", action="store_true", help="also write codes.bin")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="Recall@K and NMI of an embedding file")
    _add_common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--binary", action="store_true", help="add the binarized twin")
    p.add_argument("--nmi-average", choices=["arithmetic", "geometric"], default="arithmetic")
    _add_ks(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate across one axis; writes sweep.csv")
    _add_common(p)
    p.add_argument("--data", help="dataset CSV (default: desk-scale synthetic data)")
    p.add_argument("--axis", choices=["dim", "subsample", "samples-per-class"], required=True)
    p.add_argument("--values", type=_float_list, required=True)
    p.add_argument("--split", choices=["holdout", "open"], default="holdout")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    _add_train_opts(p)
    _add_ks(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss variant")
    _add_common(p)
    p.add_argument("--loss", action="append",
                   choices=[v.value for v in LossVariant] + ["subsampled"],
                   help="restrict to these variants (repeatable)")
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    parser.commands = sub.choices
    return parser


# -- config files ---------------------------------------------------------------

def read_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file, if any."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or known.command not in parser.commands:
        return parser.parse_args(argv)

    subparser = parser.commands[known.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in read_config_file(known.config).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{known.config}: unknown option {key!r} for {known.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v for v in raw.split(",") if v] or None
        elif raw == "None":
            defaults[key] = None
        else:
            defaults[key] = action.type(raw) if action.type else raw
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _format_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_resolved_config(args, out_dir):
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w") as fh:
        fh.write(f"# normsoftmax {args.command}; rng={RNG_ALGORITHM}\n")
        for key, value in sorted(vars(args).items()):
            if key in ("func", "config", "command", "verbose"):
                continue
            fh.write(f"{key}={_format_value(value)}\n")
    return path


# -- helpers ----------------------------------------------------------------------

def train_config_from_args(args, seed=None):
    spc = args.samples_per_class
    batch_spec = None
    if spc:
        if spc > args.batch_size:
            raise UsageError("samples-per-class exceeds batch-size")
        batch_spec = BatchSpec(args.batch_size // spc, spc)
    return TrainConfig(
        epochs=args.epochs, batch_spec=batch_spec, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay, lr_steps=tuple(args.lr_step),
        lr_gamma=args.lr_gamma,
        loss=LossConfig(args.loss, args.temperature, args.scale, args.margin),
        subsample_ratio=args.subsample, warmstart_epochs=args.warmstart_epochs,
        seed=args.seed if seed is None else seed,
    )


def _ks(args):
    if args.ks:
        return args.ks
    return list(SOP_KS if args.style == "sop" else CUB_KS)


def _fmt(x):
    return f"{x:.6f}"


def point_seed(seed, value):
    digest = hashlib.blake2b(f"{seed}:{value!r}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def report_rows(reports, Ks):
    header = ["mode", *(f"R@{k}" for k in Ks), "NMI"]
    rows = [[r.mode.value, *(_fmt(r.recall_at[k]) for k in Ks), _fmt(r.nmi)] for r in reports]
    return header, rows


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- commands -----------------------------------------------------------------------

def cmd_gen(args):
    ds = generate_synthetic(args.classes, args.per_class, args.dim, args.center_scale,
                            args.noise, make_rng(args.seed))
    path = args.output or os.path.join(args.out, "data.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_dataset_csv(path, ds)
    print(f"N={len(ds)} F={ds.feature_dim} classes={ds.class_count}")
    return EXIT_OK


def cmd_train(args):
    ds, _ = read_dataset_csv(args.data)
    config = train_config_from_args(args)
    model, proxies = initial_model(ds, args.embed_dim, config, args.hidden_dim or None,
                                   not args.no_layer_norm, args.layer_norm_eps)
    model, proxies, history = fit(ds, model, proxies, config)
    os.makedirs(args.out, exist_ok=True)
    formats.save_checkpoint(os.path.join(args.out, "checkpoint.pxe"), model, proxies)
    rows = [[e, repr(l), repr(lr)] for e, (l, lr) in enumerate(zip(history.epoch_losses, history.lrs))]
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write(_csv_text(["epoch", "loss", "lr"], rows))
    write_resolved_config(args, args.out)
    final = history.epoch_losses[-1] if len(history) else float("nan")
    print(f"trained {len(history)} epochs; final loss {final:.6f}")
    return EXIT_OK


def cmd_embed(args):
    model, _ = formats.load_checkpoint(args.checkpoint)
    ds, _ = read_dataset_csv(args.data)
    X = embed(model, ds.features)
    os.makedirs(args.out, exist_ok=True)
    formats.write_embeddings(os.path.join(args.out, "embeddings.emb"), X)
    formats.write_labels(os.path.join(args.out, "labels.txt"), ds.labels)
    if args.binary:
        formats.write_codes(os.path.join(args.out, "codes.bin"), binarize(X))
    write_resolved_config(args, args.out)
    print(f"embedded N={X.shape[0]} D={X.shape[1]}")
    return EXIT_OK


def cmd_eval(args):
    X = formats.read_embeddings(args.embeddings)
    labels = formats.read_labels(args.labels)
    eset = EmbeddingSet(X, labels)
    Ks = _ks(args)
    reports = evaluate(eset, Ks, with_binary=args.binary, rng=make_rng(args.seed),
                       nmi_average=args.nmi_average)
    text = _csv_text(*report_rows(reports, Ks))
    sys.stdout.write(text)
    if args.out != ".":
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w") as fh:
            fh.write(text)
        write_resolved_config(args, args.out)
    return EXIT_OK


def _sweep_point(args, train, test, value):
    seed = point_seed(args.seed, value)
    point_args = argparse.Namespace(**vars(args))
    embed_dim = args.embed_dim
    if args.axis == "dim":
        embed_dim = int(value)
    elif args.axis == "subsample":
        point_args.subsample = float(value)
    else:
        point_args.samples_per_class = int(value)
    config = train_config_from_args(point_args, seed=seed)
    return train_and_evaluate(train, test, embed_dim, config, _ks(args), True,
                              args.hidden_dim or None, not args.no_layer_norm)


def _sweep_worker(payload):
    args, train, test, value = payload
    try:
        res = _sweep_point(args, train, test, value)
        return res.float_report, res.binary_report, res.wall_time, ""
    except (InvalidInput, NonFiniteLoss, UsageError) as exc:
        return None, None, 0.0, f"{type(exc).__name__}: {exc}"


def cmd_sweep(args):
    if args.data:
        ds, _ = read_dataset_csv(args.data)
    else:
        from .experiments import desk_scale_dataset
        ds = desk_scale_dataset(args.seed)
    train, test = split(ds, args.split, args.seed, args.test_fraction)
    Ks = _ks(args)
    payloads = [(args, train, test, v) for v in args.values]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]

    header = ["axis", "value", *(f"R@{k}" for k in Ks), "NMI", "binary_R@1", "wall_time", "error"]
    rows = []
    for value, (fr, br, wall, err) in zip(args.values, results):
        shown = int(value) if args.axis != "subsample" else value
        if err:
            rows.append([args.axis, shown, *([""] * (len(Ks) + 2)), "", err])
            log.warning("sweep point %s failed: %s", value, err)
            continue
        rows.append([args.axis, shown, *(_fmt(fr.recall_at[k]) for k in Ks), _fmt(fr.nmi),
                     _fmt(br.recall_at[1]), f"{wall:.3f}", ""])
    text = _csv_text(header, rows)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
        fh.write(text)
    write_resolved_config(args, args.out)
    sys.stdout.write(text)
    return EXIT_OK


GRADCHECK_CASES = {
    "nca": LossConfig(LossVariant.NCA, temperature=1.0),
    "proxy_nca": LossConfig(LossVariant.PROXY_NCA, temperature=1.0),
    "norm_softmax": LossConfig(LossVariant.NORM_SOFTMAX, temperature=0.05),
    "lmcl": LossConfig(LossVariant.LMCL, scale=30.0, margin=0.35),
    "subsampled": LossConfig(LossVariant.NORM_SOFTMAX, temperature=0.05),
}


def gradcheck_instance(name, layer_norm, rng, h=1e-5):
    """One random small pipeline (hidden trunk, F=6, H=5, D=4, 6 classes)."""
    n_classes, batch = 6, 5
    model = EmbeddingModel.create(6, 4, rng, hidden_dim=5, layer_norm=layer_norm)
    model.hidden_bias[:] = 0.1 * rng.standard_normal(5)
    proxies = init_proxies(n_classes, 4, rng) * rng.uniform(0.5, 2.0, size=(n_classes, 1))
    features = rng.standard_normal((batch, 6))
    labels = rng.integers(0, n_classes, size=batch)
    active = None
    if name == "subsampled":
        active = subsample_classes(labels, n_classes, 0.5, rng)
    return grad_check(model, proxies, features, labels, GRADCHECK_CASES[name], h=h,
                      active=active)


def cmd_gradcheck(args):
    names = args.loss or list(GRADCHECK_CASES)
    rng = make_rng(args.seed)
    failed = False
    for name in names:
        for layer_norm in (True, False):
            worst = None
            for _ in range(args.instances):
                res = gradcheck_instance(name, layer_norm, rng, args.h)
                if worst is None or res.max_rel_error > worst.max_rel_error:
                    worst = res
            ok = worst.max_rel_error < GRADCHECK_TOL
            failed |= not ok
            tag = "layer_norm" if layer_norm else "no_layer_norm"
            print(f"{'PASS' if ok else 'FAIL'} {name:<13} {tag:<14} max_rel_err={worst.max_rel_error:.3e} "
                  f"worst={worst.worst_param}{list(worst.worst_index)} "
                  f"analytic={worst.analytic:.6e} numeric={worst.numeric:.6e}")
    print("FAIL" if failed else "PASS")
    return EXIT_FAIL if failed else EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except (UsageError, OSError, ValueError) as exc:
        print(f"normsoftmax: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"normsoftmax: numerical failure: {exc} (iteration {exc.iteration})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInput, UsageError, OSError) as exc:
        print(f"normsoftmax: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
