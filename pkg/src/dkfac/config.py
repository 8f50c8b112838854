"""Flat ``section.key = value`` run configuration.

Lines are ``key = value`` pairs; ``#`` starts a comment.  Keys without a
section configure training, ``kfac.*`` the preconditioner and ``data.*``
the dataset.  Absent keys take the defaults listed in :data:`KEYS`.
"""
from dataclasses import dataclass, field

from .errors import ConfigError
from .kfac import KfacConfig
from .trainer import TrainConfig


# ---------------------------------------------------------- value parsers --

def _int(text):
    return int(text)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be a non-negative integer")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise ValueError("must be non-negative")
    return v


def _unit_interval(text):
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise ValueError("must lie in [0, 1)")
    return v


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be a boolean")


def _int_list(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _positive_int_list(text):
    vals = _int_list(text)
    if any(v < 1 for v in vals):
        raise ValueError("entries must be positive integers")
    return vals


def _milestones(text):
    """``epoch:multiplier`` pairs separated by commas."""
    out = []
    for item in text.replace(",", " ").split():
        epoch, _, mult = item.partition(":")
        if not mult:
            raise ValueError(f"expected epoch:multiplier, got {item!r}")
        out.append((int(epoch), float(mult)))
    return tuple(out)


def _running_avg(text):
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise ValueError("must lie in (0, 1]")
    return v


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text

    return parse


def _source(text):
    if text == "synthetic":
        return text
    if text.startswith("idx:") and len(text.split(":")) == 3 and all(text.split(":")[1:]):
        return text
    raise ValueError("must be 'synthetic' or 'idx:IMAGES:LABELS'")


def _fmt_list(values):
    return ", ".join(str(v) for v in values)


def _fmt_milestones(values):
    return ", ".join(f"{e}:{m!r}" for e, m in values)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str
    fmt: object = str


KEYS = {
    k.name: k
    for k in [
        Key("epochs", _positive_int, 10, "training epochs"),
        Key("global_batch", _positive_int, 100, "samples per iteration across all workers"),
        Key("lr", _positive_float, 0.05, "base learning rate"),
        Key("scale_lr", _bool, False, "multiply lr by world_size", lambda v: str(v).lower()),
        Key("warmup_epochs", _nonneg_int, 5, "linear warmup length in epochs"),
        Key("lr_milestones", _int_list, (25, 35, 40, 45, 50), "epochs at which lr decays", _fmt_list),
        Key("lr_decay", _positive_float, 0.1, "lr multiplier per milestone"),
        Key("momentum", _unit_interval, 0.9, "SGD momentum"),
        Key("label_smoothing", _unit_interval, 0.1, "label smoothing factor"),
        Key("seed", _int, 0, "seed for data, init and sharding"),
        Key("optimizer", _choice("sgd", "kfac+sgd"), "kfac+sgd", "sgd or kfac+sgd"),
        Key("world_size", _positive_int, 1, "number of simulated workers"),
        Key("model", _choice("mlp", "smallconv"), "mlp", "model family"),
        Key("hidden", _positive_int_list, (64, 64), "mlp hidden widths", _fmt_list),
        Key("mode", _choice("threads", "lockstep"), "threads", "worker execution mode"),
        Key("metrics_out", str, "", "CSV metrics path (empty: none)"),
        Key("bench.iterations", _positive_int, 100, "iterations for bench-comm"),
        Key("report.workers", _positive_int_list, (1, 2, 4, 8), "worker counts for placement-report", _fmt_list),
        Key("report.factors", _positive_int, 32, "synthetic factor count for placement-report"),
        Key("kfac.damping", _positive_float, 0.001, "Tikhonov damping"),
        Key("kfac.running_avg", _running_avg, 0.95, "weight of the newest batch factor"),
        Key("kfac.kl_clip", _positive_float, 1e-3, "kl-clip constant for gradient scaling"),
        Key("kfac.decomp_interval", _positive_int, 10, "iterations between eigendecompositions"),
        Key("kfac.factor_interval", _nonneg_int, 0, "iterations between factor updates (0: decomp_interval/10)"),
        Key("kfac.damping_decay", _milestones, (), "epoch:multiplier damping schedule", _fmt_milestones),
        Key("kfac.interval_decay", _milestones, (), "epoch:multiplier decomposition-interval schedule", _fmt_milestones),
        Key("kfac.method", _choice("eigen", "inverse"), "eigen", "preconditioning path"),
        Key("kfac.placement", _choice("roundrobin", "sized"), "roundrobin", "factor placement policy"),
        Key("data.source", _source, "synthetic", "synthetic or idx:IMAGES:LABELS"),
        Key("data.n_train", _positive_int, 2000, "synthetic training samples"),
        Key("data.n_val", _positive_int, 500, "validation samples (held out from the tail)"),
        Key("data.n_features", _positive_int, 20, "synthetic feature count"),
        Key("data.n_classes", _positive_int, 5, "synthetic class count"),
        Key("data.difficulty", _nonneg_float, 3.0, "synthetic class-center radius"),
    ]
}


@dataclass
class DataConfig:
    source: str = "synthetic"
    n_train: int = 2000
    n_val: int = 500
    n_features: int = 20
    n_classes: int = 5
    difficulty: float = 3.0


@dataclass
class RunConfig:
    train: TrainConfig
    data: DataConfig = field(default_factory=DataConfig)
    metrics_out: str = ""
    bench_iterations: int = 100
    report_workers: tuple = (1, 2, 4, 8)
    report_factors: int = 32
    values: dict = field(default_factory=dict)

    @property
    def kfac(self):
        return self.train.kfac


def parse_lines(text, values=None, lines=None):
    """Parse config text into ``{key: value}``, recording each key's line number."""
    values = {} if values is None else values
    lines = {} if lines is None else lines
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        set_value(values, key, value, lineno)
        lines[key] = lineno
    return values, lines


def set_value(values, key, text, line=None):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", line)
    try:
        values[key] = KEYS[key].parse(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", line) from None
    return values


def build(values, lines=None):
    lines = lines or {}
    v = {name: k.default for name, k in KEYS.items()}
    v.update(values)

    def blame(*keys):
        found = [lines[k] for k in keys if k in lines]
        return max(found) if found else None

    try:
        kc = KfacConfig(
            damping=v["kfac.damping"],
            running_avg=v["kfac.running_avg"],
            kl_clip=v["kfac.kl_clip"],
            decomp_interval=v["kfac.decomp_interval"],
            factor_interval=v["kfac.factor_interval"] or None,
            damping_decay=v["kfac.damping_decay"],
            interval_decay=v["kfac.interval_decay"],
            method=v["kfac.method"],
            placement=v["kfac.placement"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc), blame(*[k for k in KEYS if k.startswith("kfac.")])) from None
    try:
        tc = TrainConfig(
            epochs=v["epochs"],
            global_batch=v["global_batch"],
            base_lr=v["lr"],
            scale_lr=v["scale_lr"],
            warmup_epochs=v["warmup_epochs"],
            lr_milestones=v["lr_milestones"],
            lr_decay=v["lr_decay"],
            momentum=v["momentum"],
            label_smoothing=v["label_smoothing"],
            seed=v["seed"],
            optimizer=v["optimizer"],
            world_size=v["world_size"],
            model=v["model"],
            hidden=v["hidden"],
            mode=v["mode"],
            kfac=kc,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), blame(*[k for k in KEYS if "." not in k])) from None
    dc = DataConfig(
        source=v["data.source"],
        n_train=v["data.n_train"],
        n_val=v["data.n_val"],
        n_features=v["data.n_features"],
        n_classes=v["data.n_classes"],
        difficulty=v["data.difficulty"],
    )
    return RunConfig(
        train=tc,
        data=dc,
        metrics_out=v["metrics_out"],
        bench_iterations=v["bench.iterations"],
        report_workers=v["report.workers"],
        report_factors=v["report.factors"],
        values=v,
    )


def parse_config(text, overrides=None):
    """Parse config text; ``overrides`` (``{key: text}``) win over file values."""
    values, lines = parse_lines(text)
    for key, value in (overrides or {}).items():
        set_value(values, key, value)
        lines.pop(key, None)
    return build(values, lines)


def serialize(config):
    """Render every key of a :class:`RunConfig` in the same flat grammar."""
    out = []
    for name, key in KEYS.items():
        out.append(f"{name} = {key.fmt(config.values[name])}")
    return "\n".join(out) + "\n"


def defaults_help():
    width = max(len(k) for k in KEYS)
    rows = []
    for name, key in KEYS.items():
        rows.append(f"  {name:<{width}}  default: {key.fmt(key.default) or '(empty)'}  {key.help}")
    return "\n".join(rows)
