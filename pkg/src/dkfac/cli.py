"""``dkfac`` command line: train, verify, bench-comm, placement-report."""
import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from . import data, nn, report, trainer, verify
from .errors import ConfigError, ConsistencyError, FormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

# flag dest -> (config key, value transform)
FLAG_KEYS = {
    "workers": ("world_size", str),
    "model": ("model", str),
    "dataset": ("data.source", str),
    "epochs": ("epochs", str),
    "global_batch": ("global_batch", str),
    "lr": ("lr", str),
    "kfac": ("optimizer", lambda v: "kfac+sgd" if v == "on" else "sgd"),
    "kfac_update_freq": ("kfac.decomp_interval", str),
    "damping": ("kfac.damping", str),
    "seed": ("seed", str),
    "metrics_out": ("metrics_out", str),
    "placement": ("kfac.placement", str),
    "iterations": ("bench.iterations", str),
}


def _common(parser):
    parser.add_argument("--config", metavar="PATH", help="flat key = value config file")
    parser.add_argument("--workers", metavar="N", help="world_size")
    parser.add_argument("--model", choices=["mlp", "smallconv"], help="model")
    parser.add_argument("--dataset", metavar="{synthetic,idx:IMAGES:LABELS}", help="data.source")
    parser.add_argument("--epochs", metavar="N", help="epochs")
    parser.add_argument("--global-batch", metavar="N", help="global_batch")
    parser.add_argument("--lr", metavar="F", help="lr")
    parser.add_argument("--kfac", choices=["on", "off"], help="optimizer (on: kfac+sgd, off: sgd)")
    parser.add_argument("--kfac-update-freq", metavar="N", help="kfac.decomp_interval")
    parser.add_argument("--damping", metavar="F", help="kfac.damping")
    parser.add_argument("--seed", metavar="N", help="seed")
    parser.add_argument("--metrics-out", metavar="PATH", help="metrics_out")
    parser.add_argument("--placement", choices=["roundrobin", "sized"], help="kfac.placement")
    parser.add_argument("--iterations", metavar="N", help="bench.iterations")


def build_parser():
    epilog = "config keys (flat 'key = value' lines, '#' comments):\n" + cfgmod.defaults_help()
    parser = argparse.ArgumentParser(
        prog="dkfac",
        description="Distributed K-FAC preconditioner on a simulated data-parallel cluster.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model and write per-iteration metrics",
        "verify": "run the oracle parity checks and print pass/fail",
        "bench-comm": "count collectives on a model with 2x2 factors and compare to the closed form",
        "placement-report": "round-robin vs size-balanced factor placement tables",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
    return parser


def load_run_config(args):
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
    overrides = {}
    for dest, (key, transform) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = transform(value)
    run = cfgmod.parse_config(text, overrides)
    if run.metrics_out:
        parent = Path(run.metrics_out).resolve().parent
        if not parent.is_dir():
            raise ConfigError(f"metrics_out directory {parent} does not exist")
    return run


def load_datasets(run):
    dc = run.data
    seed = run.train.seed
    if dc.source == "synthetic":
        return data.synthetic_splits(seed, dc.n_train, dc.n_val, dc.n_features, dc.n_classes, dc.difficulty)
    _, images, labels = dc.source.split(":")
    for p in (images, labels):
        if not Path(p).is_file():
            raise FormatError(f"dataset file {p} does not exist")
    full = data.load_idx(images, labels)
    if dc.n_val >= len(full):
        raise FormatError(f"data.n_val={dc.n_val} leaves no training samples out of {len(full)}")
    return data.train_val_split(full, dc.n_val)


def cmd_train(run, out):
    train_set, val_set = load_datasets(run)
    t = trainer.Trainer(run.train, train_set, val_set)
    sink = report.CsvSink(run.metrics_out) if run.metrics_out else None

    def on_row(row):
        if sink is not None:
            sink(row)
        if row.val_acc == row.val_acc:
            out(
                f"epoch {row.epoch:3d}  iter {row.iteration:6d}  loss {row.train_loss:.4f}  "
                f"val_acc {row.val_acc:.4f}  lr {row.lr:.4g}  allreduce {row.allreduce_calls}  "
                f"allgather {row.allgather_calls}"
            )

    try:
        t.run(on_row)
    finally:
        if sink is not None:
            sink.close()
    return EXIT_OK


def bench_model(n_layers):
    """Bias-free 2->2 linear layers: every Kronecker factor is 2x2."""
    layers = []
    for i in range(n_layers):
        layers.append(nn.LayerSpec.linear(2, 2, bias=False))
        if i < n_layers - 1:
            layers.append(nn.LayerSpec.relu())
    return nn.Model(layers, (2,), 0)


def cmd_bench_comm(run, out):
    tc = run.train
    n_layers = len(tc.hidden) + 1
    iterations = run.bench_iterations
    n = tc.global_batch * iterations
    ds = data.gen_synthetic(tc.seed, n, 2, 2, 1.0)
    cfg = trainer.TrainConfig(
        epochs=1,
        global_batch=tc.global_batch,
        base_lr=tc.base_lr,
        warmup_epochs=0,
        lr_milestones=(),
        seed=tc.seed,
        optimizer="kfac+sgd",
        world_size=tc.world_size,
        mode=tc.mode,
        kfac=tc.kfac,
    )
    t = trainer.Trainer(cfg, ds, model=bench_model(n_layers))
    rows = t.run()
    if run.metrics_out:
        report.emit_report(rows, run.metrics_out)
    sched = trainer.kfac.apply_schedules(tc.kfac, 0)
    want = trainer.expected_traffic(
        t.factors, t.model.n_params, iterations, sched.factor_interval, sched.decomp_interval
    )
    c = t.cluster.counters
    got = {
        "grad_allreduce": c.tagged_calls["allreduce", "grad"],
        "factor_allreduce": c.tagged_calls["allreduce", "factor"],
        "eig_allgather": c.tagged_calls["allgather", "eig"],
        "allreduce_calls": rows[-1].allreduce_calls,
        "allgather_calls": rows[-1].allgather_calls,
        "element_volume": rows[-1].element_volume,
    }
    out(
        f"bench-comm: T={iterations} W={tc.world_size} L={n_layers} "
        f"decomp_interval={sched.decomp_interval} factor_interval={sched.factor_interval}"
    )
    ok = True
    for key in got:
        match = got[key] == want[key]
        ok &= match
        out(f"  {key:<17} measured {got[key]:>10}  closed-form {want[key]:>10}  {'ok' if match else 'MISMATCH'}")
    return EXIT_OK if ok else EXIT_INTERNAL


def cmd_placement_report(run, out):
    sizes = report.heavy_tailed_sizes(run.train.seed, run.report_factors)
    factors = report.sizes_to_factors(sizes)
    out(f"placement-report: {len(factors)} factors, dims {sorted(sizes, reverse=True)}")
    out("speedup = single-worker decomposition cost / this worker's cost (cost ~ n^3)")
    out(report.format_placement_table(report.placement_table(factors, run.report_workers)))
    return EXIT_OK


def cmd_verify(run, out):
    return EXIT_OK if verify.run_all(out) else EXIT_INTERNAL


COMMANDS = {
    "train": cmd_train,
    "verify": cmd_verify,
    "bench-comm": cmd_bench_comm,
    "placement-report": cmd_placement_report,
}


def main(argv=None, out=print):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = load_run_config(args)
        return COMMANDS[args.command](run, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConsistencyError as exc:
        print(f"consistency error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
