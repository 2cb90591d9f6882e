"""Command-line front end: discover, train, sample, transmute, hybrid,
extend, eval, bench, plot.

Configuration is a flat JSON object with dotted keys; every key has a
default, a config file (``--config`` or ``$BRANCHDIFF_CONFIG``) overrides
defaults, and a mirrored command-line flag (``--train-epochs`` for
``train.epochs``) overrides both. Exit codes: 0 success, 2 input or
validation error, 3 numeric failure; errors go to stderr as one JSON line.
All randomness flows from the single ``seed`` key through named substreams,
so reruns with equal inputs produce byte-identical output files.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import TabularDataset, load_csv
from .diffusion import DdpmSchedule, VpSde
from .errors import BranchDiffError, DataError, DomainError, NumericError
from .evaluation import metrics_report_json, transmutation_correlation
from .hierarchy import BranchHierarchy, discover_hierarchy, format_branch_table
from .models import LabelGuidedDenoiser, MultiTaskDenoiser
from .rng import substream
from .sampling import (
    SampleBatch,
    SampleConfig,
    cached_step_ledger,
    ddpm_sample_class,
    hybrid,
    sample_all_cached,
    sample_class,
    transmute,
)
from .training import TrainConfig, extend, loss_records_to_csv, train

CONFIG_ENV = "BRANCHDIFF_CONFIG"

DEFAULTS = {
    "seed": 0,
    "diffusion.kind": "sde",
    "diffusion.steps": 1000,
    "model.width": 0,  # 0 = library default (and capacity-matched baseline)
    "train.epochs": 10,
    "train.batch_size": 128,
    "train.lr": 1e-3,
    "train.t_floor": 1e-4,
    "train.weighting": "sigma2",
    "sample.steps": 1000,
    "sample.snr": 0.16,
    "discover.n_per_class": 500,
    "discover.grid": 1000,
    "discover.epsilon": 0.005,
    "discover.smoothing": 3.0,
    "data.path": "",
    "data.label_column": "label",
    "hierarchy.path": "",
}


class _Parser(argparse.ArgumentParser):
    # argparse would print its own two-line message; route through the
    # structured error path instead so exit code and stderr shape match
    def error(self, message):
        raise DomainError(message)


def _coerce(key: str, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, str):
            return str(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(value, bool):
            raise ValueError("boolean")
        return int(value)
    except (TypeError, ValueError) as exc:
        raise DataError(f"config key {key!r}: cannot read {value!r}") from exc


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("config must be a JSON object of dotted keys")
    out = {}
    for key, value in doc.items():
        if key not in DEFAULTS:
            raise DataError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        cfg.update(load_config(path))
    flags = vars(args)
    for key in DEFAULTS:
        if flags.get(key) is not None:
            cfg[key] = _coerce(key, flags[key])
    if cfg["diffusion.kind"] not in ("sde", "ddpm"):
        raise DomainError(f"diffusion.kind must be sde or ddpm, "
                          f"got {cfg['diffusion.kind']!r}")
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file of dotted keys "
                                    f"(default: ${CONFIG_ENV})")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace(".", "-").replace("_", "-")
        p.add_argument(flag, dest=key, default=None, metavar=str(default),
                       help=f"override {key}")


def _process_from(cfg: dict):
    if cfg["diffusion.kind"] == "ddpm":
        return DdpmSchedule(steps=int(cfg["diffusion.steps"]))
    return VpSde()


def _load_dataset(cfg: dict) -> TabularDataset:
    if not cfg["data.path"]:
        raise DataError("no dataset given (data.path / --data)")
    return load_csv(cfg["data.path"], cfg["data.label_column"])


def _load_hierarchy(cfg: dict) -> BranchHierarchy:
    if not cfg["hierarchy.path"]:
        raise DataError("no hierarchy given (hierarchy.path / --hierarchy)")
    return BranchHierarchy.load(cfg["hierarchy.path"])


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=int(cfg["train.epochs"]),
                       batch_size=int(cfg["train.batch_size"]),
                       lr=cfg["train.lr"],
                       seed=int(cfg["seed"]),
                       t_floor=cfg["train.t_floor"],
                       weighting=cfg["train.weighting"])


def _sample_config(cfg: dict) -> SampleConfig:
    return SampleConfig(steps=int(cfg["sample.steps"]), snr=cfg["sample.snr"],
                        seed=int(cfg["seed"]))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _concat_batches(batches) -> SampleBatch:
    feats = np.concatenate([b.features for b in batches], axis=0)
    classes = [c for b in batches for c in b.classes]
    seeds = {b.seed for b in batches}
    return SampleBatch(feats, classes, t=0.0,
                       seed=seeds.pop() if len(seeds) == 1 else 0)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_discover(args) -> int:
    cfg = resolve_config(args)
    dataset = _load_dataset(cfg)
    process = _process_from(cfg)
    h, curves, _ = discover_hierarchy(
        dataset, process,
        n_per_class=int(cfg["discover.n_per_class"]),
        grid=int(cfg["discover.grid"]),
        epsilon=cfg["discover.epsilon"],
        rng=substream(int(cfg["seed"]), "discover"),
        smoothing_sigma=cfg["discover.smoothing"])
    os.makedirs(args.out, exist_ok=True)
    h.save(os.path.join(args.out, "hierarchy.json"))

    keys = [(ci, cj) for i, ci in enumerate(curves.classes)
            for cj in curves.classes[i:]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t"] + [f"{a}|{b}" for a, b in keys])
    for row, t in enumerate(curves.grid):
        writer.writerow([repr(float(t))]
                        + [repr(float(curves.curves[k][row])) for k in keys])
    _write_text(os.path.join(args.out, "curves.csv"), buf.getvalue())

    print(format_branch_table(h))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = _load_dataset(cfg)
    seed = int(cfg["seed"])
    width = int(cfg["model.width"])

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, process, hierarchy = ckpt.model, ckpt.process, ckpt.hierarchy
    else:
        process = _process_from(cfg)
        init = substream(seed, "init")
        if args.baseline:
            hierarchy = _load_hierarchy(cfg) if cfg["hierarchy.path"] else None
            tasks = hierarchy.task_count if hierarchy else None
            model = LabelGuidedDenoiser(
                dataset.dim, tuple(dataset.classes), float(process.horizon),
                init, width=width or None, match_task_count=tasks)
        else:
            hierarchy = _load_hierarchy(cfg)
            model = MultiTaskDenoiser(
                dataset.dim, hierarchy.task_count, hierarchy.horizon, init,
                **({"width": width} if width else {}))

    records = train(model, process, dataset, _train_config(cfg),
                    hierarchy=None if model.kind == "label-guided" else hierarchy)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), model, process,
                    hierarchy=hierarchy, seed=seed)
    # wall-clock column is dropped so reruns are byte-identical
    _write_text(os.path.join(args.out, "loss.csv"),
                loss_records_to_csv(records, with_seconds=False))
    last = records[-1]
    print(f"trained {len(records)} steps over {last.epoch + 1} epochs, "
          f"final loss {last.loss:.6g}")
    return 0


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    sample_cfg = _sample_config(cfg)
    if args.n < 0:
        raise DomainError("--n must be >= 0")

    if args.all:
        if ckpt.hierarchy is None:
            raise DataError("checkpoint has no hierarchy; --all needs one")
        if args.cached:
            out = sample_all_cached(ckpt.model, ckpt.hierarchy, args.n,
                                    ckpt.process, sample_cfg)
            ledger = cached_step_ledger(ckpt.hierarchy, steps=sample_cfg.steps)
            print(f"cached steps    {ledger['cached_steps']}")
            print(f"uncached steps  {ledger['uncached_steps']}")
            batch = _concat_batches([out[c] for c in ckpt.hierarchy.classes])
        else:
            batch = _concat_batches(
                [_sample_one(ckpt, c, args.n, sample_cfg)
                 for c in ckpt.hierarchy.classes])
    else:
        if not args.cls:
            raise DomainError("give --class NAME or --all")
        batch = _sample_one(ckpt, args.cls, args.n, sample_cfg)

    _write_text(args.out, batch.to_csv())
    print(f"wrote {len(batch)} samples to {args.out}")
    return 0


def _sample_one(ckpt, c: str, n: int, sample_cfg: SampleConfig) -> SampleBatch:
    if ckpt.process.kind == "ddpm":
        return ddpm_sample_class(ckpt.model, ckpt.hierarchy, c, n,
                                 ckpt.process, sample_cfg)
    return sample_class(ckpt.model, ckpt.hierarchy, c, n, ckpt.process, sample_cfg)


def _print_correlations(names, corr) -> None:
    values = np.ma.filled(corr, np.nan)
    for name, v in zip(names, values):
        print(f"corr {name} = " + ("n/a" if np.isnan(v) else f"{v:.4f}"))


def cmd_transmute(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.hierarchy is None:
        raise DataError("checkpoint has no hierarchy; transmutation needs one")
    with open(args.input, encoding="utf-8") as fh:
        before = SampleBatch.from_csv(fh.read())
    t_b = ckpt.hierarchy.lca_branch_point(args.src, args.dst)
    out = transmute(ckpt.model, ckpt.hierarchy, before.features, args.src,
                    args.dst, ckpt.process, _sample_config(cfg))
    _write_text(args.out, out.to_csv())
    print(f"branch point t_b = {t_b:g}")
    print(f"transmuted {len(out)} objects {args.src} -> {args.dst}")
    if len(out) >= 2:
        names = [f"feature_{j}" for j in range(out.dim)]
        _print_correlations(names,
                            transmutation_correlation(before.features,
                                                      out.features))
    return 0


def cmd_hybrid(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.hierarchy is None:
        raise DataError("checkpoint has no hierarchy; hybrids need one")
    parts = [c for c in args.classes.split(",") if c]
    if len(parts) != 2:
        raise DomainError("--classes wants exactly two names, like a,b")
    c1, c2 = parts
    batch = hybrid(ckpt.model, ckpt.hierarchy, c1, c2, args.n, ckpt.process,
                   _sample_config(cfg))
    _write_text(args.out, batch.to_csv())
    print(f"branch point t_b = {batch.t:g}")
    print(f"wrote {len(batch)} hybrids of {c1} and {c2} to {args.out}")
    return 0


def cmd_extend(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.hierarchy is None:
        raise DataError("checkpoint has no hierarchy; extension needs one")
    if ckpt.model.kind != "branched":
        raise DomainError("extension needs a branched checkpoint")
    dataset = _load_dataset(cfg)

    before = {name: p.value.tobytes() for name, p in ckpt.model.store.items()}
    new_h, records = extend(ckpt.model, ckpt.hierarchy, ckpt.process,
                            args.new_class, args.sibling, args.attach_time,
                            dataset, _train_config(cfg))
    same = sum(ckpt.model.store[name].value.tobytes() == blob
               for name, blob in before.items())
    print(f"pre-existing tensors byte-identical: {same}/{len(before)}")
    print(f"hierarchy: {len(ckpt.hierarchy.branches)} -> {len(new_h.branches)} branches")

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"), ckpt.model,
                    ckpt.process, hierarchy=new_h, seed=int(cfg["seed"]))
    _write_text(os.path.join(args.out, "loss.csv"),
                loss_records_to_csv(records, with_seconds=False))
    return 0


def _group_by_class(batch: SampleBatch) -> dict:
    out = {}
    for c in dict.fromkeys(batch.classes):
        rows = [i for i, ci in enumerate(batch.classes) if ci == c]
        out[c] = batch.features[rows]
    return out


def cmd_eval(args) -> int:
    with open(args.reference, encoding="utf-8") as fh:
        reference = SampleBatch.from_csv(fh.read())
    with open(args.generated, encoding="utf-8") as fh:
        generated = SampleBatch.from_csv(fh.read())
    text = metrics_report_json(_group_by_class(reference),
                               _group_by_class(generated))
    _write_text(args.out, text + "\n")
    print(f"wrote metrics for {len(set(generated.classes))} classes to {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.hierarchy is None or ckpt.model.kind != "branched":
        raise DataError("bench needs a branched checkpoint with a hierarchy")
    if args.trials < 2:
        raise DomainError("--trials must be >= 2 for a standard error")
    sample_cfg = _sample_config(cfg)
    h = ckpt.hierarchy

    def once_cached():
        sample_all_cached(ckpt.model, h, args.n, ckpt.process, sample_cfg)

    def once_per_class():
        for c in h.classes:
            sample_class(ckpt.model, h, c, args.n, ckpt.process, sample_cfg)

    def clock(fn):
        times = []
        for _ in range(args.trials):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        times = np.asarray(times)
        return times.mean(), times.std(ddof=1) / np.sqrt(len(times))

    per_mean, per_se = clock(once_per_class)
    cache_mean, cache_se = clock(once_cached)
    ledger = cached_step_ledger(h, steps=sample_cfg.steps)
    print(f"per-class  {per_mean:.4f} +/- {per_se:.4f} s  "
          f"({ledger['uncached_steps']} steps)")
    print(f"cached     {cache_mean:.4f} +/- {cache_se:.4f} s  "
          f"({ledger['cached_steps']} steps)")
    print(f"speedup    {per_mean / cache_mean:.2f}x over {args.trials} trials")
    return 0


def _read_plot_csv(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError("plot input needs a header and at least one row")
    header, body = rows[0], rows[1:]
    if any(len(r) != len(header) for r in body):
        raise DataError("plot input rows are ragged")
    columns = {}
    for j, name in enumerate(header):
        cells = [r[j] for r in body]
        try:
            columns[name] = np.array([float(v) for v in cells])
        except ValueError:
            columns[name] = cells
    return header, columns


def cmd_plot(args) -> int:
    if args.kind not in ("curve", "scatter", "hist"):
        raise DomainError(f"unknown plot kind {args.kind!r}")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, columns = _read_plot_csv(args.input)
    numeric = [n for n in header if isinstance(columns[n], np.ndarray)]
    if not numeric:
        raise DataError("plot input has no numeric columns")

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if args.kind == "curve":
        if {"step", "task", "loss"} <= set(header):
            task_col = columns["task"]  # branch indices or baseline labels
            if not isinstance(task_col, np.ndarray):
                task_col = np.array(task_col)
            for task in sorted(set(task_col.tolist()), key=str):
                rows = task_col == task
                name = f"{task:g}" if isinstance(task, float) else str(task)
                ax.plot(columns["step"][rows], columns["loss"][rows],
                        label=f"task {name}")
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.legend()
        else:
            x = columns[numeric[0]]
            for name in numeric[1:] or numeric[:1]:
                ax.plot(x, columns[name], label=name)
            ax.set_xlabel(numeric[0])
            ax.legend()
    elif args.kind == "scatter":
        if len(numeric) < 2:
            raise DataError("scatter needs two numeric columns")
        x, y = columns[numeric[0]], columns[numeric[1]]
        if "class" in header and not isinstance(columns["class"], np.ndarray):
            labels = columns["class"]
            for c in sorted(set(labels)):
                rows = [i for i, v in enumerate(labels) if v == c]
                ax.scatter(x[rows], y[rows], s=8, label=c)
            ax.legend()
        else:
            ax.scatter(x, y, s=8)
        ax.set_xlabel(numeric[0])
        ax.set_ylabel(numeric[1])
    else:
        ax.hist(columns[numeric[0]], bins=30)
        ax.set_xlabel(numeric[0])
        ax.set_ylabel("count")

    with matplotlib.rc_context({"svg.hashsalt": "branchdiff"}):
        fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.kind} plot to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="branchdiff",
                     description="hierarchically branched diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        _add_config_flags(p)
        return p

    p = command("discover", cmd_discover, help="infer a branch hierarchy from data")
    p.add_argument("--data", dest="data.path", help="labeled CSV")
    p.add_argument("--label-col", dest="data.label_column")
    p.add_argument("--eps", dest="discover.epsilon", help="merge threshold")
    p.add_argument("--n", dest="discover.n_per_class", help="objects per class")
    p.add_argument("--out", required=True, help="output directory")

    p = command("train", cmd_train, help="train a denoiser")
    p.add_argument("--data", dest="data.path")
    p.add_argument("--label-col", dest="data.label_column")
    p.add_argument("--hierarchy", dest="hierarchy.path")
    p.add_argument("--baseline", action="store_true",
                   help="label-guided model instead of branched")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--out", required=True, help="output directory")

    p = command("sample", cmd_sample, help="generate samples from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="cls")
    p.add_argument("--all", action="store_true", help="every class")
    p.add_argument("--cached", action="store_true",
                   help="share ancestor branches across classes")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--out", required=True, help="output CSV")

    p = command("transmute", cmd_transmute, help="map objects to an analog class")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--input", required=True, help="source objects CSV")
    p.add_argument("--out", required=True, help="output CSV")

    p = command("hybrid", cmd_hybrid, help="sample common ancestors of two classes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--classes", required=True, help="two names: a,b")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--out", required=True, help="output CSV")

    p = command("extend", cmd_extend, help="graft a new class onto a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--new-class", required=True)
    p.add_argument("--sibling", required=True)
    p.add_argument("--attach-time", type=float, required=True)
    p.add_argument("--data", dest="data.path", help="new-class CSV")
    p.add_argument("--label-col", dest="data.label_column")
    p.add_argument("--out", required=True, help="output directory")

    p = command("eval", cmd_eval, help="compare generated samples to a reference")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")

    p = command("bench", cmd_bench, help="time cached vs per-class sampling")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--n", type=int, default=64)

    p = command("plot", cmd_plot, help="render a CSV as an SVG figure")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", required=True, help="curve | scatter | hist")
    p.add_argument("--out", required=True, help="output SVG path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except NumericError as exc:
        return _fail(exc, 3)
    except BranchDiffError as exc:
        return _fail(exc, 2)
    except OSError as exc:
        return _fail(exc, 2)


def _fail(exc: Exception, code: int) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
