"""``grain-graph`` command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error, 3 numeric
error.  Every run logs one ``config fingerprint`` line to stderr.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from .baselines import baseline_loocv, descriptors
from .errors import NumericError, ValidationError
from .graph_build import DiscretizationConfig, build_graph, export_graph, fit_discretization
from .microsynth import DatasetRanges, OracleConfig, gen_dataset
from .model import HeteroGAT, ModelConfig
from .pipeline import build_dataset_graphs, load_dataset
from .plot import loss_svg, plot
from .scan_ingest import DEFAULT_THRESHOLD_DEG, ingest_scan, load_grain_table, save_grain_table
from .train_eval import EvalReport, TrainConfig, fingerprint, loocv, loss_trace_csv, read_loss_trace, train

log = logging.getLogger("grain_graph")
EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _grid(text):
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be N or RxC, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"grid must be N or RxC, got {text!r}")
    return dims


def _add_disc(p):
    p.add_argument("--n-size", type=int, default=10)
    p.add_argument("--n-phi", type=int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2)
    p.add_argument("--phi-range", choices=("fitted", "fixed"), default="fitted")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD_DEG,
                   help="misorientation threshold in degrees for segmentation")
    p.add_argument("--symmetry", choices=("none", "hexagonal"), default="none")


def _add_model(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--head-hidden", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=1)


def build_parser():
    parser = _Parser(prog="grain-graph", description="Grain knowledge graphs and property prediction.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset of scans plus manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--grid", type=_grid, default=(48, 48))
    p.add_argument("--grains-min", type=int, default=10)
    p.add_argument("--grains-max", type=int, default=100)
    p.add_argument("--fiber-fraction", type=float, default=0.6)
    p.add_argument("--orientation-noise", type=float, default=0.5)
    p.add_argument("--noise-sd", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="segment a scan into grains.csv and adjacency.csv")
    p.add_argument("--scan", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD_DEG)
    p.add_argument("--symmetry", choices=("none", "hexagonal"), default="none")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("graph", help="build a grain graph from a grain table")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--grains")
    src.add_argument("--scan")
    p.add_argument("--adjacency")
    p.add_argument("--discretization", help="JSON discretization to reuse instead of fitting")
    p.add_argument("--label", type=float)
    _add_disc(p)
    p.add_argument("--out", required=True)

    for name, text in (("train", "train on a whole dataset"), ("eval", "cross-validate on a dataset")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--dataset", required=True)
        _add_disc(p)
        _add_model(p)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int)
        if name == "train":
            p.add_argument("--out", required=True, help="model checkpoint JSON")
            p.add_argument("--loss-out", help="loss trace CSV")
        else:
            p.add_argument("--loocv", action="store_true", help="leave-one-out (the default protocol)")
            p.add_argument("--folds", type=int, help="k-fold instead of leave-one-out")
            p.add_argument("--report", required=True)

    p = sub.add_parser("predict", help="predict the property of one scan or grain table")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scan")
    src.add_argument("--grains")
    p.add_argument("--adjacency")
    p.add_argument("--out", help="prediction JSON (stdout when omitted)")

    p = sub.add_parser("baseline", help="descriptor baselines (ridge, knn) under leave-one-out")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=("ridge", "knn"), default="ridge")
    p.add_argument("--alpha", type=float, help="fixed ridge alpha (selected per fold when omitted)")
    p.add_argument("--k", type=int, default=5)
    _add_disc(p)
    p.add_argument("--report", required=True)

    p = sub.add_parser("plot", help="SVG figure of a report or loss trace")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--report")
    src.add_argument("--loss", help="loss trace CSV")
    p.add_argument("--kind", choices=("scatter", "loss"), default="scatter")
    p.add_argument("--out", required=True)

    for p in sub.choices.values():
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return parser


def _require_inputs(*paths):
    for path in paths:
        if path is not None and not os.path.exists(path):
            raise FileNotFoundError(f"input not found: {path}")


def _write(path, text):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _threads(args):
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        n = int(os.environ.get("GRAIN_GRAPH_THREADS", "1"))
    if n < 1:
        raise ValidationError("threads must be >= 1")
    return n


def _configs(args):
    model_cfg = ModelConfig(layers=args.layers, hidden_dim=args.hidden, head_hidden=args.head_hidden,
                            dropout_p=args.dropout, seed=args.seed)
    train_cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, optimizer=args.optimizer,
                            momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
                            early_stop_patience=args.patience, batch_size=args.batch_size)
    return model_cfg, train_cfg


def _dataset_graphs(args):
    _require_inputs(args.dataset)
    samples = load_dataset(args.dataset, args.threshold, args.symmetry)
    disc, graphs = build_dataset_graphs(samples, args.n_size, args.n_phi, args.lam, args.phi_range)
    return samples, disc, graphs


def _ingest_settings(args):
    return {"threshold_deg": args.threshold, "symmetry": args.symmetry}


def cmd_synth(args):
    ranges = DatasetRanges(grid=args.grid, n_grains=(args.grains_min, args.grains_max),
                           fiber_fraction=args.fiber_fraction, orientation_noise_deg=args.orientation_noise,
                           seed=args.seed)
    oracle = OracleConfig(noise_sd=args.noise_sd, seed=args.seed)
    _log_fingerprint({"ranges": asdict(ranges), "oracle": asdict(oracle)})
    manifest = gen_dataset(args.n, ranges, oracle, args.out)
    log.info("wrote %d scans to %s", len(manifest), args.out)


def cmd_ingest(args):
    _require_inputs(args.scan)
    _log_fingerprint(_ingest_settings(args))
    table = ingest_scan(args.scan, args.threshold, args.symmetry)
    os.makedirs(args.out, exist_ok=True)
    save_grain_table(table, os.path.join(args.out, "grains.csv"), os.path.join(args.out, "adjacency.csv"))
    log.info("%d grains, %d adjacencies", len(table), len(table.adjacency))


def _load_table(args):
    if getattr(args, "scan", None):
        _require_inputs(args.scan)
        return ingest_scan(args.scan, getattr(args, "threshold", DEFAULT_THRESHOLD_DEG),
                           getattr(args, "symmetry", "none"))
    if not args.adjacency:
        raise ValidationError("--grains needs --adjacency")
    _require_inputs(args.grains, args.adjacency)
    return load_grain_table(args.grains, args.adjacency)


def cmd_graph(args):
    _require_inputs(args.discretization)
    table = _load_table(args)
    if args.discretization:
        disc = DiscretizationConfig.load(args.discretization)
    else:
        disc = fit_discretization([table], args.n_size, args.n_phi, args.lam, args.phi_range)
    _log_fingerprint(disc.to_dict())
    g = build_graph(table, disc, args.label, source_id=os.path.basename(args.grains or args.scan))
    g.meta["discretization_config"] = disc.to_dict()
    _write(args.out, export_graph(g) + "\n")
    log.info("graph: %s", {t: g.node_count(t) for t in g.features})


def cmd_train(args):
    model_cfg, train_cfg = _configs(args)
    _, disc, graphs = _dataset_graphs(args)
    settings = {"model": asdict(model_cfg), "train": asdict(train_cfg), "discretization": disc.to_dict(),
                "ingest": _ingest_settings(args)}
    _log_fingerprint(settings)
    result = train([g for _, g in sorted(graphs, key=lambda item: item[0])], model_cfg, train_cfg)
    model = result.model
    model.meta.update({"train": asdict(train_cfg), "discretization": disc.to_dict(),
                       "ingest": _ingest_settings(args), "fingerprint": fingerprint(settings)})
    _write(args.out, model.to_json() + "\n")
    if args.loss_out:
        _write(args.loss_out, loss_trace_csv(result.loss_trace))
    log.info("best epoch %d, loss %.4f", result.best_epoch, result.loss_trace[result.best_epoch - 1])


def cmd_eval(args):
    model_cfg, train_cfg = _configs(args)
    _, disc, graphs = _dataset_graphs(args)
    extra = {"discretization": disc.to_dict(), "ingest": _ingest_settings(args)}
    _log_fingerprint({"model": asdict(model_cfg), "train": asdict(train_cfg), **extra})
    report = loocv(graphs, model_cfg, train_cfg, threads=_threads(args), config_extra=extra, k_folds=args.folds)
    _write(args.report, report.to_json())
    log.info("r2=%.4f mse=%.4f mae=%.4f wall=%.1fs", report.metrics["r2"], report.metrics["mse"],
             report.metrics["mae"], report.wall_time)


def cmd_predict(args):
    _require_inputs(args.model)
    with open(args.model, encoding="utf-8") as fh:
        model = HeteroGAT.from_json(fh.read())
    if "discretization" not in model.meta:
        raise ValidationError("checkpoint lacks the discretization it was trained with")
    disc = DiscretizationConfig(**model.meta["discretization"])
    ingest = model.meta.get("ingest", {})
    _log_fingerprint({"model": model.meta.get("fingerprint"), "discretization": disc.to_dict()})
    if args.scan:
        _require_inputs(args.scan)
        table = ingest_scan(args.scan, ingest.get("threshold_deg", DEFAULT_THRESHOLD_DEG),
                            ingest.get("symmetry", "none"))
    else:
        table = _load_table(args)
    value = model.predict(build_graph(table, disc))
    text = json.dumps({"prediction": value, "grains": len(table)}, sort_keys=True) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_baseline(args):
    samples, disc, _ = _dataset_graphs(args)
    _log_fingerprint({"method": args.method, "alpha": args.alpha, "k": args.k, "discretization": disc.to_dict()})
    rows = [(sid, descriptors(table, disc), label) for sid, table, label in samples]
    report = baseline_loocv(rows, args.method, alpha=args.alpha, k=args.k)
    report.config.update({"discretization": disc.to_dict(), "ingest": _ingest_settings(args)})
    _write(args.report, report.to_json())
    log.info("%s r2=%.4f mse=%.4f", args.method, report.metrics["r2"], report.metrics["mse"])


def cmd_plot(args):
    if args.loss:
        _require_inputs(args.loss)
        _log_fingerprint({"loss": os.path.basename(args.loss)})
        svg = loss_svg(read_loss_trace(args.loss))
    else:
        _require_inputs(args.report)
        with open(args.report, encoding="utf-8") as fh:
            report = EvalReport.from_json(fh.read())
        _log_fingerprint(report.config)
        svg = plot(report, args.kind)
    _write(args.out, svg)


def _log_fingerprint(settings):
    log.info("config fingerprint %s", fingerprint(settings))


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "graph": cmd_graph, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "baseline": cmd_baseline, "plot": cmd_plot,
}


def run(argv=None):
    """Parse ``argv``, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        COMMANDS[args.command](args)
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
