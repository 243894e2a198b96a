"""fcnlab command line: data generation, training, evaluation and geometry reports.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure (divergence or a failed equivalence check).
"""

import os

# single-threaded BLAS unless the caller already chose; needed for bit-exact reruns
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from concurrent.futures import ThreadPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import dataio, geometry, metrics, stitch, training, zoo  # noqa: E402
from .geometry import GeometryError, fmt_frac  # noqa: E402
from .net import Net, NetError, load_net  # noqa: E402
from .tensor import TensorFormatError, check_labels, read_checkpoint, write_checkpoint, write_pgm  # noqa: E402

log = logging.getLogger("fcnlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STITCH_TOL = 1e-5


class CliError(Exception):
    def __init__(self, msg, code=EXIT_USAGE):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers

def run_root():
    return Path(os.environ.get("FCN_RUN_DIR", "runs"))


def out_dir(args, default_name):
    d = Path(args.out) if args.out else run_root() / default_name
    d.mkdir(parents=True, exist_ok=True)
    return d


def echo_config(path, items):
    """Write the resolved settings as ``key = value`` lines before any work starts."""
    with open(path, "w") as f:
        for k, v in items:
            f.write(f"{k} = {'' if v is None else v}\n")


def parse_size(text):
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise CliError(f"bad size {text!r}; expected N or HxW")


def parse_factors(text):
    try:
        fs = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"bad factor list {text!r}") from None
    if not fs or min(fs) < 1:
        raise CliError("factors must be positive integers")
    return fs


def resolve_net_spec(name, classes=None):
    """A net description file, or the name of a zoo net (built with `classes` classes)."""
    p = Path(name)
    if p.exists():
        return load_net(p), p.stem
    stem = p.name[:-4] if p.name.endswith(".net") else p.name
    if stem in zoo.ZOO_NOTES:
        return zoo.build_family(classes or 5)[stem].spec, stem
    raise CliError(f"{name}: no such net file", EXIT_DATA)


def build_net(args, seed=0):
    spec, stem = resolve_net_spec(args.net, getattr(args, "classes", None))
    dtype = np.float64 if getattr(args, "f64", False) else np.float32
    return Net(spec, seed=seed, dtype=dtype), stem


def load_init(net, path):
    """Copy learnable parameters from a checkpoint; fixed layers keep their own init.

    Entries the net does not have are skipped, which is what staged skip
    training needs (the coarser net's fixed upsampling differs in size).
    """
    try:
        ckpt = read_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"{path}: checkpoint not found", EXIT_DATA) from None
    use = {k: v for k, v in ckpt.items() if k in net.params and net.learnable.get(k, True)}
    if not use:
        raise CliError(f"{path}: no checkpoint entry matches a learnable parameter of the net", EXIT_DATA)
    net.load_state(use)
    log.info("initialized %d tensors from %s (%d skipped)", len(use), path, len(ckpt) - len(use))
    return sorted(use)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def print_table(header, rows):
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


def figure_path(csv_path):
    return Path(csv_path).with_suffix(".png")


def check_split_labels(samples, n_cl, where):
    for i, s in enumerate(samples):
        try:
            check_labels(s.labels, n_cl)
        except ValueError as e:
            raise CliError(f"{where} sample {i}: {e}", EXIT_DATA) from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    h, w = parse_size(args.size)
    val_n = args.n // 4 if args.val_n is None else args.val_n
    try:
        zoo.gen_synth_dataset(0, h, w, args.classes, args.seed)  # validate before touching the disk
    except ValueError as e:
        raise CliError(str(e)) from None
    out = out_dir(args, f"synth-k{args.classes}-s{args.seed}")
    echo_config(out / "dataset.txt", [
        ("n", args.n), ("val_n", val_n), ("height", h), ("width", w),
        ("classes", args.classes), ("seed", args.seed),
    ])

    def make(start, count):
        return zoo.gen_synth_dataset(count, h, w, args.classes, args.seed, start=start)

    def chunks(start, count):
        step = max(1, -(-count // args.threads))
        return [(s, min(step, start + count - s)) for s in range(start, start + count, step)]

    try:
        for split, start, count in (("train", 0, args.n), ("val", args.n, val_n)):
            if args.threads > 1 and count:
                with ThreadPoolExecutor(args.threads) as ex:
                    parts = list(ex.map(lambda c: make(*c), chunks(start, count)))
                samples = [s for part in parts for s in part]
            else:
                samples = make(start, count)
            dataio.write_split(samples, out / split)
    except ValueError as e:
        raise CliError(str(e)) from None
    print(f"wrote {args.n} train and {val_n} val samples to {out}")
    return EXIT_OK


def train_config(args):
    values = {}
    if args.config:
        try:
            values.update(training.parse_kv(Path(args.config).read_text(), args.config))
        except FileNotFoundError:
            raise CliError(f"{args.config}: config file not found") from None
    flags = {
        "seed": args.seed, "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
        "weight_decay": args.weight_decay, "batch_size": args.batch, "sample_p": args.sample_p,
        "init_checkpoint": args.init, "lr_drop_factor": args.lr_drop, "max_iter": args.max_iter,
        "trainable": args.trainable,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return training.TrainConfig.from_dict(values)


def cmd_train(args):
    cfg = train_config(args)
    init_seed, _, _ = training.seed_streams(cfg.seed)
    net, stem = build_net(args, seed=init_seed)
    out = out_dir(args, f"train-{stem}-s{cfg.seed}")
    echo_config(out / "config.txt", [
        ("# net", args.net), ("# data", args.data), ("# dtype", net.dtype.name),
    ])
    with open(out / "config.txt", "a") as f:
        f.write(cfg.to_text())
    if cfg.init_checkpoint:
        load_init(net, cfg.init_checkpoint)

    root = Path(args.data)
    train_set = dataio.load_split(dataio.resolve_split(root, "train"))
    val_dir = root / "val"
    val_set = dataio.load_split(val_dir) if (val_dir / "images").is_dir() else None
    n_cl = net.spec.n_classes
    check_split_labels(train_set, n_cl, "train")
    if val_set:
        check_split_labels(val_set, n_cl, "val")

    def progress(it, epoch, loss):
        if it % 10 == 0:
            log.info("iter %d epoch %d loss %.4f", it, epoch, loss)

    res = training.train(net, train_set, cfg, val_set, history_path=out / "history.csv", progress=progress)
    write_checkpoint(net.state(), out / "checkpoint.fcnz")
    if res.history:
        from .plotting import plot_history

        plot_history(res.history, out / "history.png", title=stem)
    if res.final_metrics:
        m = {k: float(res.final_metrics[k]) for k in metrics.METRIC_NAMES}
        write_csv(out / "metrics.csv", metrics.METRIC_NAMES, [[f"{m[k]:.9g}" for k in metrics.METRIC_NAMES]])
        print_table(metrics.METRIC_NAMES, [[m[k] for k in metrics.METRIC_NAMES]])
    print(f"{res.iterations} iterations in {res.wall_time:.1f}s; outputs in {out}")
    return EXIT_OK


def _predict_split(net, samples, batch=8):
    preds = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x, _ = training.assemble_batch(chunk)
        p = training.predict(net, x)
        preds += [p[j, : s.labels.shape[0], : s.labels.shape[1]].astype(np.uint8) for j, s in enumerate(chunk)]
    return preds


def cmd_predict(args):
    net, stem = build_net(args)
    out = out_dir(args, f"predict-{stem}")
    echo_config(out / "config.txt", [("net", args.net), ("init", args.init), ("data", args.data),
                                     ("dtype", net.dtype.name)])
    if args.init:
        load_init(net, args.init)
    samples = dataio.load_split(dataio.resolve_split(args.data, "val"))
    preds = _predict_split(net, samples)
    (out / "pred").mkdir(exist_ok=True)
    for i, p in enumerate(preds):
        write_pgm(p, out / "pred" / f"{i:04d}.pgm")
    from .plotting import plot_predictions

    plot_predictions([s.image for s in samples], preds, [s.labels for s in samples], zoo.PALETTE,
                     out / "preview.png")
    print(f"wrote {len(preds)} predictions to {out / 'pred'}")
    return EXIT_OK


def _truth_dir(path):
    p = Path(path)
    for cand in (p / "labels", p / "val" / "labels", p):
        if cand.is_dir() and any(cand.glob("*.pgm")):
            return cand
    raise CliError(f"{path}: no label maps found", EXIT_DATA)


def cmd_eval(args):
    if args.pred:
        truth = dataio.read_label_dir(_truth_dir(args.data))
        pred = dataio.read_label_dir(args.pred)
        if set(truth) != set(pred):
            missing = sorted(set(truth) ^ set(pred))[:5]
            raise CliError(f"prediction and truth files differ, e.g. {missing}", EXIT_DATA)
        n_cl = args.classes or 1 + max(
            int(max(m[m != 255].max(initial=0), pred[k].max(initial=0))) for k, m in truth.items())
        pairs = [(pred[k], truth[k]) for k in sorted(truth)]
    else:
        if not args.net:
            raise CliError("eval needs --pred or --net")
        net, _ = build_net(args)
        if args.init:
            load_init(net, args.init)
        samples = dataio.load_split(dataio.resolve_split(args.data, "val"))
        n_cl = net.spec.n_classes
        check_split_labels(samples, n_cl, "eval")
        pairs = list(zip(_predict_split(net, samples), [s.labels for s in samples]))

    def one(pair):
        return metrics.ConfusionMatrix(n_cl).accumulate(*pair)

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as ex:
            cms = list(ex.map(one, pairs))
    else:
        cms = [one(p) for p in pairs]
    cm = metrics.ConfusionMatrix(n_cl)
    for c in cms:
        cm = cm + c
    m = metrics.compute_metrics(cm)
    row = [float(m[k]) for k in metrics.METRIC_NAMES]
    print_table(metrics.METRIC_NAMES, [row])
    if args.csv:
        write_csv(args.csv, metrics.METRIC_NAMES, [[f"{v:.9g}" for v in row]])
        from .plotting import plot_confusion

        plot_confusion(cm.counts, figure_path(args.csv))
    return EXIT_OK


STACKS = {"alexnet": geometry.ALEXNET_STACK, "vgg16": geometry.VGG16_STACK}


def rf_rows(name, classes=None):
    """(node, kind, k, s, p, rf, stride, center) rows plus the total stride."""
    rows = []
    if name.lower() in STACKS:
        summ = geometry.GeomSummary.identity()
        for node, g in STACKS[name.lower()]:
            summ = geometry.compose(g, summ)
            rows.append((node, g.kind, g.k, g.s, g.p, summ.rf, fmt_frac(summ.stride), fmt_frac(summ.center)))
        return rows, summ.stride
    spec, _ = resolve_net_spec(name, classes)
    summaries = spec.summaries()
    for n in spec.nodes:
        s = summaries[n.name]
        geom = n.kind in ("conv", "pool", "deconv", "fc")
        k = f"{n.k}@{n.dilation}" if n.dilation != 1 else n.k
        rows.append((n.name, n.kind, k if geom else "-", n.s if geom else "-", n.p if geom else "-",
                     s.rf, fmt_frac(s.stride), fmt_frac(s.center)))
    return rows, spec.total_stride()


def cmd_rf(args):
    name = args.net_pos or args.net
    if not name:
        raise CliError("rf needs a net file, a zoo net name, or alexnet/vgg16")
    rows, total = rf_rows(name, args.classes)
    header = ("node", "kind", "k", "s", "p", "rf", "stride", "center")
    print_table(header, rows)
    print(f"total stride {fmt_frac(total)}")
    if args.csv:
        write_csv(args.csv, header, rows)
    return EXIT_OK


def cmd_stitch_check(args):
    net, _ = build_net(args, seed=args.seed)
    net = net.astype(np.float64)
    # random biases so relus clip somewhere in the test input
    rng = training.make_rng(np.random.SeedSequence([args.seed, 1]))
    for k in sorted(net.params):
        if k.endswith(".b"):
            net.params[k] = rng.normal(0, 0.1, net.params[k].shape)
    f = args.factor or int(net.spec.total_stride())
    rf = int(net.spec.summaries()[net.outputs[0]].rf)
    size = args.size or max(rf + 2 * f, 16)
    x = rng.standard_normal((1, net.spec.input_node.out_ch, size, size))
    diff = stitch.stitch_check(net, x, f)
    ok = diff <= STITCH_TOL
    print(f"factor {f}  input {size}x{size}  max abs difference {diff:.3e}  {'OK' if ok else 'FAIL'}")
    if args.csv:
        write_csv(args.csv, ("factor", "size", "max_abs_diff", "ok"), [(f, size, f"{diff:.9g}", int(ok))])
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_iu_bound(args):
    factors = parse_factors(args.factors)
    maps = list(dataio.read_label_dir(_truth_dir(args.data)).values())
    n_cl = args.classes or 1 + max(int(m[m != 255].max(initial=0)) for m in maps)
    rows = []
    for f in factors:
        cm = metrics.ConfusionMatrix(n_cl)
        for m in maps:
            try:
                cm = cm + metrics.iu_bound_matrix(m, f, n_cl, args.method)
            except ValueError as e:
                raise CliError(str(e), EXIT_DATA) from None
        res = metrics.compute_metrics(cm)
        rows.append([f] + [float(res[k]) for k in metrics.METRIC_NAMES])
    header = ("factor",) + metrics.METRIC_NAMES
    print_table(header, rows)
    if args.csv:
        write_csv(args.csv, header, [[r[0]] + [f"{v:.9g}" for v in r[1:]] for r in rows])
        from .plotting import plot_iu_bound

        plot_iu_bound(factors, [r[3] for r in rows], figure_path(args.csv))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="fcnlab", description=__doc__.splitlines()[0])
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, threads=False, f64=False, seed=0):
        sp.add_argument("--seed", type=int, default=seed, help="master seed (default 0)")
        if threads:
            sp.add_argument("--threads", type=int, default=1,
                            help="per-image worker threads (results do not depend on it)")
        if f64:
            sp.add_argument("--f64", action="store_true", help="run the net in double precision")

    g = sub.add_parser("gen-data", parents=[base], help="write a synthetic segmentation dataset")
    g.add_argument("--out", help="dataset root (default $FCN_RUN_DIR/synth-k<K>-s<seed>)")
    g.add_argument("--n", type=int, default=160, help="training images (default 160)")
    g.add_argument("--val-n", type=int, help="validation images (default n/4)")
    g.add_argument("--size", default="48", help="image size, N or HxW (default 48)")
    g.add_argument("--classes", type=int, default=5, help="classes including background (default 5)")
    common(g, threads=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[base], help="train a net with SGD")
    t.add_argument("--net", required=True, help="net description file or zoo net name")
    t.add_argument("--data", required=True, help="dataset root with train/ (and optional val/)")
    t.add_argument("--out", help="run directory (default $FCN_RUN_DIR/train-<net>-s<seed>)")
    t.add_argument("--config", help="key = value training config; flags override it")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="base learning rate")
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--batch", type=int, help="contributing images per batch before 1/p scaling")
    t.add_argument("--sample-p", type=float, help="loss sampling keep probability")
    t.add_argument("--init", help="checkpoint to initialize learnable layers from")
    t.add_argument("--lr-drop", type=float, help="divide the learning rate by this factor")
    t.add_argument("--max-iter", type=int, help="stop after this many iterations (0: no limit)")
    t.add_argument("--trainable", help="comma-separated glob patterns of parameters to update")
    t.add_argument("--classes", type=int, help="classes when --net names a zoo net (default 5)")
    common(t, f64=True, seed=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[base], help="write predicted label maps for a split")
    pr.add_argument("--net", required=True, help="net description file or zoo net name")
    pr.add_argument("--init", help="checkpoint with trained parameters")
    pr.add_argument("--data", required=True, help="dataset root (uses val/) or split directory")
    pr.add_argument("--out", help="output directory (default $FCN_RUN_DIR/predict-<net>)")
    pr.add_argument("--classes", type=int, help="classes when --net names a zoo net")
    common(pr, f64=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[base], help="segmentation metrics of predictions against truth")
    e.add_argument("--data", required=True, help="truth labels: a PGM directory, split, or dataset root")
    e.add_argument("--pred", help="directory of predicted PGMs (same file names as truth)")
    e.add_argument("--net", help="evaluate this net instead of --pred")
    e.add_argument("--init", help="checkpoint for --net")
    e.add_argument("--classes", type=int, help="number of classes (default: inferred)")
    e.add_argument("--csv", help="write the metrics row here, plus a confusion-matrix PNG")
    common(e, threads=True, f64=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rf", parents=[base], help="receptive field and stride report")
    r.add_argument("net_pos", nargs="?", metavar="net", help="net file, zoo net name, alexnet or vgg16")
    r.add_argument("--net", help="same as the positional argument")
    r.add_argument("--classes", type=int, help="classes when naming a zoo net")
    r.add_argument("--csv", help="write the table here")
    r.set_defaults(func=cmd_rf)

    s = sub.add_parser("stitch-check", parents=[base], help="shift-and-stitch vs rarefied dense net on random input")
    s.add_argument("--net", required=True, help="chain net file or zoo net name")
    s.add_argument("--factor", type=int, help="shift-and-stitch factor (default: the net's stride)")
    s.add_argument("--size", type=int, help="input extent (default: rf + 2f, at least 16)")
    s.add_argument("--classes", type=int, help="classes when naming a zoo net")
    s.add_argument("--csv", help="write the result row here")
    common(s)
    s.set_defaults(func=cmd_stitch_check)

    b = sub.add_parser("iu-bound", parents=[base], help="mean IU upper bound of down/up-sampled ground truth")
    b.add_argument("--data", required=True, help="truth labels: a PGM directory, split, or dataset root")
    b.add_argument("--factors", default="1,2,4,8", help="comma-separated factors (default 1,2,4,8)")
    b.add_argument("--method", choices=("nearest", "majority"), default="nearest")
    b.add_argument("--classes", type=int, help="number of classes (default: inferred)")
    b.add_argument("--csv", help="write the sweep here, plus a PNG curve")
    b.set_defaults(func=cmd_iu_bound)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"fcnlab {args.command}: {e}", file=sys.stderr)
        return e.code
    except training.DivergenceError as e:
        print(f"fcnlab {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except training.ConfigError as e:
        print(f"fcnlab {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.DataError, TensorFormatError, NetError, GeometryError,
            metrics.MetricsError, FileNotFoundError) as e:
        print(f"fcnlab {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
