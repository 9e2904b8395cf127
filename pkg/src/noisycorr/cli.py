"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``plotdata``.

Exit codes: 0 success, 2 configuration or parse error, 3 training divergence,
4 checkpoint missing, corrupt or incompatible with the dataset.

Run configuration file (JSON), every section optional::

    {"data":    {SyntheticSpec fields},
     "train":   {TrainConfig fields},
     "outputs": {"dataset": path, "run_dir": path}}

Unknown keys are rejected; missing keys take the documented defaults. The
fully resolved configuration is echoed into every output.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace

from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .data import SyntheticSpec, build_dataset, load_dataset, save_dataset
from .evaluation import evaluate_split
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetParseError,
    DatasetVersionError,
    InvalidSpecError,
    TrainingDivergenceError,
)
from .trainer import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4

METRIC_COLUMNS = (
    "epoch",
    "loss_c",
    "loss_n",
    "loss_pse",
    "loss_ent",
    "clean_count",
    "noisy_count",
    "val_rsum",
    "seconds",
)
CHECKPOINT_NAMES = {"A": "net_a.ckpt", "B": "net_b.ckpt"}
OUTPUT_KEYS = ("dataset", "run_dir")
_FIELD_RE = re.compile(r"\w+")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    outputs: dict = field(default_factory=dict)

    def to_dict(self):
        return {"data": asdict(self.data), "train": asdict(self.train), "outputs": dict(self.outputs)}

    def with_seed(self, seed):
        if seed is None:
            return self
        return RunConfig(replace(self.data, seed=seed), replace(self.train, seed=seed), self.outputs)


def _typed(value, default, path):
    # the default's type decides what a field accepts
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _section(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(prefix, "must be a JSON object")
    base = cls()
    known = {f.name: getattr(base, f.name) for f in fields(cls)}
    out = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        out[key] = _typed(value, known[key], f"{prefix}.{key}")
    return replace(base, **out)


def resolve_config(doc):
    """Turn a parsed run-config document into a validated ``RunConfig``."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "must be a JSON object")
    for key in doc:
        if key not in ("data", "train", "outputs"):
            raise ConfigError(key, "unknown key")
    data = _section(SyntheticSpec, doc.get("data", {}), "data")
    cfg = _section(TrainConfig, doc.get("train", {}), "train")
    outputs = doc.get("outputs", {})
    if not isinstance(outputs, dict):
        raise ConfigError("outputs", "must be a JSON object")
    for key, value in outputs.items():
        if key not in OUTPUT_KEYS:
            raise ConfigError(f"outputs.{key}", "unknown key")
        if not isinstance(value, str):
            raise ConfigError(f"outputs.{key}", "must be a path string")
    validate_run_config(RunConfig(data, cfg, dict(outputs)))
    return RunConfig(data, cfg, dict(outputs))


def validate_run_config(rc):
    try:
        rc.data.validate()
    except InvalidSpecError as exc:
        # spec messages start with the offending field name
        name = _FIELD_RE.match(str(exc)).group()
        raise ConfigError(f"data.{name}", str(exc)) from None
    try:
        rc.train.validate()
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    return rc


def read_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return resolve_config(doc)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------
def _write_atomic(path, text):
    """Write ``text`` to ``path`` so readers never see a half-written file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fmt(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def metrics_csv(history, log_wallclock=False):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in history:
        row = [getattr(r, c) for c in METRIC_COLUMNS[:-1]]
        row.append(r.seconds if log_wallclock else "")
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def division_csv(record):
    """Rows (index, loss, w, w_o_or_blank, assigned_clean) of one division record."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("index", "loss", "w", "w_o", "assigned_clean"))
    for i, (loss, w, w_o, clean) in enumerate(
        zip(record["loss"], record["w"], record["w_o"], record["clean"])
    ):
        writer.writerow((i, repr(float(loss)), repr(float(w)), _fmt(float(w_o)), int(clean)))
    return buf.getvalue()


def summary_dict(rc, result, bundle, wallclock):
    best = result.history[result.best_epoch]
    return {
        "status": "ok",
        "best_epoch": result.best_epoch,
        "best_val_rsum": best.val_rsum,
        "test": result.test_report.to_dict(),
        "split_quality_at_best": best.split_quality,
        "realized_noise_ratio": bundle.realized_noise_ratio,
        "config": rc.to_dict(),
        "wallclock_seconds": round(wallclock, 3),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen(args):
    rc = read_config(args.config).with_seed(args.seed)
    validate_run_config(rc)
    out = args.out or rc.outputs.get("dataset")
    if not out:
        raise ConfigError("--out", "no dataset path given")
    bundle = build_dataset(rc.data)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_dataset(bundle, out)
    print(f"realized_noise_ratio {bundle.realized_noise_ratio:.4f}")
    return EXIT_OK


def _load_bundle(path):
    if not path:
        raise ConfigError("--data", "no dataset path given")
    try:
        return load_dataset(path)
    except OSError as exc:
        raise ConfigError("--data", f"cannot read {path}: {exc.strerror}") from None


def cmd_train(args):
    rc = read_config(args.config).with_seed(args.seed)
    if args.jobs is not None:
        rc = RunConfig(rc.data, replace(rc.train, n_jobs=args.jobs), rc.outputs)
    validate_run_config(rc)
    run_dir = args.out or rc.outputs.get("run_dir")
    if not run_dir:
        raise ConfigError("--out", "no run directory given")
    bundle = _load_bundle(args.data or rc.outputs.get("dataset"))
    os.makedirs(run_dir, exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.csv")
    summary_path = os.path.join(run_dir, "summary.json")

    t0 = time.perf_counter()
    try:
        result = train(bundle, rc.train)
    except TrainingDivergenceError as exc:
        history = getattr(exc, "history", [])
        _write_atomic(metrics_path, metrics_csv(history, rc.train.log_wallclock))
        summary = {
            "status": "diverged",
            "diverged": {"epoch": exc.epoch, "step": exc.step, "message": str(exc)},
            "epochs_completed": len(history),
            "config": rc.to_dict(),
            "wallclock_seconds": round(time.perf_counter() - t0, 3),
        }
        _write_atomic(summary_path, _dump_json(summary))
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    wallclock = time.perf_counter() - t0

    cfg_echo = rc.to_dict()
    for (name, fname), params in zip(CHECKPOINT_NAMES.items(), result.best_params):
        save_checkpoint(os.path.join(run_dir, fname), params, cfg_echo, name)
    _write_atomic(metrics_path, metrics_csv(result.history, rc.train.log_wallclock))
    if args.dump_divisions:
        for epoch, records in result.divisions.items():
            for name, record in records.items():
                path = os.path.join(run_dir, "divisions", f"epoch{epoch:03d}_{name}.csv")
                _write_atomic(path, division_csv(record))
    _write_atomic(summary_path, _dump_json(summary_dict(rc, result, bundle, wallclock)))
    print(f"best_epoch {result.best_epoch} test_rsum {result.test_report.rsum:.2f}")
    return EXIT_OK


def evaluate_checkpoints(ckpt_dir, bundle):
    nets = []
    for fname in CHECKPOINT_NAMES.values():
        params, _ = load_checkpoint(os.path.join(ckpt_dir, fname))
        check_compatible(params, bundle.dims)
        nets.append(params)
    if nets[0].dims != nets[1].dims:
        raise CheckpointError("the two checkpoints have different architectures")
    return evaluate_split(nets[0], nets[1], bundle.test)


def cmd_eval(args):
    bundle = _load_bundle(args.data)
    report = evaluate_checkpoints(args.ckpt, bundle)
    text = _dump_json({"split": "test", "report": report.to_dict()})
    if args.out:
        _write_atomic(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def long_format(metrics_text):
    """(epoch, series, value) rows for every fully numeric metrics column.

    Values are copied verbatim; series follow the column order of the input.
    """
    rows = list(csv.reader(io.StringIO(metrics_text)))
    if not rows or "epoch" not in rows[0]:
        raise DatasetParseError(1, "metrics CSV needs a header with an 'epoch' column")
    header = rows[0]
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatasetParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
    e_col = header.index("epoch")

    def numeric(v):
        try:
            float(v)
            return True
        except ValueError:
            return False

    series = []
    for j, name in enumerate(header):
        if j == e_col:
            continue
        values = [(i + 2, row[j]) for i, row in enumerate(body)]
        if all(v == "" for _, v in values):
            continue  # column left blank on purpose (e.g. wall-clock off)
        for lineno, v in values:
            if not numeric(v):
                raise DatasetParseError(lineno, f"non-numeric value {v!r} in column {name!r}")
        series.append(j)
    for lineno, row in enumerate(body, start=2):
        if not numeric(row[e_col]):
            raise DatasetParseError(lineno, f"non-numeric epoch {row[e_col]!r}")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("epoch", "series", "value"))
    for j in series:
        for row in body:
            writer.writerow((row[e_col], header[j], row[j]))
    return buf.getvalue()


def cmd_plotdata(args):
    try:
        with open(args.metrics, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("--metrics", f"cannot read {args.metrics}: {exc.strerror}") from None
    out = long_format(text)
    if args.out:
        _write_atomic(args.out, out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="noisycorr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset file")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="dataset path (.jsonl)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network pair")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset path (.jsonl)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--jobs", type=int, choices=(1, 2), help="threads for the co-teaching phases")
    t.add_argument(
        "--dump-divisions",
        action="store_true",
        help="write per-epoch division diagnostics to <out>/divisions/",
    )
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-split retrieval metrics of a trained pair")
    e.add_argument("--ckpt", required=True, help="run directory holding net_a.ckpt and net_b.ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pd = sub.add_parser("plotdata", help="long-format CSV of a metrics file")
    pd.add_argument("--metrics", required=True)
    pd.add_argument("--out")
    pd.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError, DatasetParseError, DatasetVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
