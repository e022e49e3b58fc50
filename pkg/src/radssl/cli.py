"""``radssl`` command line: one entry point, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import traceback
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_hash, describe_keys
from .errors import FormatError, GeometryError, TrainingDiverged, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int | None
    stage: str
    outputs: dict
    wall_clock: float
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write(self, out_dir):
        p = Path(out_dir) / "manifest.json"
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return p


def _code_version():
    from .kernels import BACKEND
    return f"radssl {__version__} ({BACKEND} kernels)"


def _load_cfg(path):
    return RunConfig.load(path) if path else RunConfig()


def _manifest(cfg: RunConfig | None, stage, outputs, t0, seed=None, **extra):
    d = cfg.to_dict() if cfg is not None else {}
    return RunManifest(config_hash(d), _code_version(), seed, stage,
                       {k: str(v) for k, v in outputs.items()}, round(time.time() - t0, 3), d, extra)


# --- subcommands ----------------------------------------------------------

def cmd_generate_data(args):
    from .dataio import PhantomSpec, generate_phantoms, write_dataset
    from .probe import write_manifest
    t0 = time.time()
    spec = PhantomSpec.load(args.spec)
    vols = generate_phantoms(spec)
    out = Path(args.out)
    index = write_dataset(vols, out, spec)
    files = [f"vol_{i:05d}.rvol" for i in range(len(vols))]
    n_eval = int(round(RunConfig().data.eval_fraction * len(files)))
    tasks = out / "tasks.json"
    write_manifest(tasks, files[len(files) - n_eval:])
    _manifest(None, "generate-data", {"index": index, "tasks": tasks}, t0, spec.seed,
              spec={k: list(v) if isinstance(v, tuple) else v for k, v in spec.__dict__.items()}).write(out)
    print(f"wrote {len(vols)} volumes to {out}")
    return EXIT_OK


def _split(args, cfg):
    from .dataio import read_dataset
    from .trainer import split_volumes
    vols = read_dataset(args.data)
    return split_volumes(vols, cfg.data.eval_fraction)


def _train_outputs(out, ck, log, cfg, stage, t0, data_dir):
    from .encoder import save_checkpoint
    ckpt_path = out / "checkpoint.rckp"
    log_path = out / "train_log.csv"
    save_checkpoint(ck, ckpt_path)
    log.write_csv(log_path)
    _manifest(cfg, stage, {"checkpoint": ckpt_path, "log": log_path}, t0, cfg.train.seed,
              data=str(Path(data_dir).resolve()) if data_dir else None,
              collapse_score=log.collapse_score, collapsed=log.collapsed).write(out)
    print(f"{stage}: {ck.step} steps, checkpoint {ckpt_path}")


def cmd_pretrain(args):
    from .trainer import CollapseWarning, run_pretrain
    t0 = time.time()
    cfg = _load_cfg(args.config)
    if cfg.train.steps is None:
        raise ValidationError("pretraining needs an explicit step count", field="train.steps")
    train, evals = _split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CollapseWarning)
        ck, log = run_pretrain(train, cfg, evals, ckpt_dir=out)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _train_outputs(out, ck, log, cfg, "pretrain", t0, args.data)
    return EXIT_OK


def cmd_finetune_highres(args):
    from .encoder import load_checkpoint
    from .trainer import run_highres_finetune
    t0 = time.time()
    cfg = _load_cfg(args.config)
    ck = load_checkpoint(args.ckpt)
    data = args.data
    if data is None:
        m = Path(args.ckpt).parent / "manifest.json"
        if m.exists():
            data = json.loads(m.read_text()).get("extra", {}).get("data")
    steps = int(round(0.1 * ck.step)) if cfg.train.steps is None else cfg.train.steps
    train = evals = []
    if steps > 0:
        if not data:
            raise ValidationError("no training data: pass --data", field="data")
        args.data = data
        train, evals = _split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ft, log = run_highres_finetune(ck, train, cfg, evals, ckpt_dir=out)
    _train_outputs(out, ft, log, cfg, "highres_finetune", t0, data)
    return EXIT_OK


def _probe_cfg(args):
    return _load_cfg(getattr(args, "config", None))


def cmd_probe(args):
    from .encoder import load_checkpoint
    from .probe import TaskSuite, run_benchmark
    t0 = time.time()
    cfg = _probe_cfg(args)
    model = load_checkpoint(args.ckpt).build("teacher")
    suite = TaskSuite.from_manifest(args.tasks, cfg.data)
    with warnings.catch_warnings(record=True):
        report = run_benchmark(suite.build(model, cfg.probe.pooling), cfg.probe.seeds, cfg.probe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.csv"
    report.write_csv(path)
    for name, msg in report.failures.items():
        print(f"task {name} failed: {msg}", file=sys.stderr)
    _manifest(cfg, "probe", {"report": path}, t0, None, failures=report.failures).write(out)
    for name, rep in report.reports.items():
        print(f"{name:10s} {rep.metric:7s} {rep.mean:7.2f} +- {rep.std:.2f}")
    print(f"aggregate  {report.aggregate:.2f}")
    return EXIT_OK


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def cmd_fewshot(args):
    from .encoder import load_checkpoint
    from .probe import TaskSuite, few_shot_sweep
    t0 = time.time()
    cfg = _probe_cfg(args)
    try:
        shots = [int(s) for s in args.shots.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"not a comma-separated list of integers: {args.shots!r}", field="shots") from None
    if not shots or min(shots) < 1:
        raise ValidationError("shot counts must be positive", field="shots")
    model = load_checkpoint(args.ckpt).build("teacher")
    suite = TaskSuite.from_manifest(args.tasks, cfg.data)
    tasks = suite.build(model, cfg.probe.pooling, names={args.task})
    if not tasks:
        raise ValidationError(f"no task named {args.task!r}", field="task")
    curve = few_shot_sweep(tasks[0], shots, cfg.probe.seeds, cfg.probe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out / "fewshot.csv", out / "fewshot.png"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shots", "metric", "mean", "std", "skipped", "degenerate"] + [f"seed{i}" for i in range(cfg.probe.seeds)])
        for p in curve:
            if p.skipped:
                w.writerow([p.shots, tasks[0].metric, "nan", "nan", 1, 0] + ["nan"] * cfg.probe.seeds)
            else:
                r = p.report
                w.writerow([p.shots, r.metric, repr(r.mean), repr(r.std), 0, int(p.degenerate)] + [repr(v) for v in r.values])
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pts = [p for p in curve if not p.skipped]
    ax.errorbar([p.shots for p in pts], [p.report.mean for p in pts], yerr=[p.report.std for p in pts], marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training examples per class")
    ax.set_ylabel(f"{tasks[0].name} {tasks[0].metric}")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)
    _manifest(cfg, "fewshot", {"csv": csv_path, "png": png_path}, t0).write(out)
    return EXIT_OK


def _read_image(path, data_cfg):
    from .dataio import load_volume
    from .probe import best_slice, volume_slices
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
        if img.ndim != 2:
            raise ValidationError(f"expected a 2D array, got shape {img.shape}", field=str(path))
        return img.astype(np.float32)
    if path.suffix == ".rvol":
        s = volume_slices(load_volume(path), data_cfg)
        return s[best_slice(s)]
    raise ValidationError("images must be .npy (2D, normalised) or .rvol (best slice is used)", field=str(path))


def cmd_simmap(args):
    from .encoder import load_checkpoint
    from .probe import similarity_map
    t0 = time.time()
    cfg = _probe_cfg(args)
    path, sep, idx = args.query.rpartition(":")
    if not sep or not idx.strip().lstrip("-").isdigit():
        raise ValidationError("expected IMAGE:PATCH_INDEX", field="query")
    query = _read_image(path, cfg.data)
    tdir = Path(args.targets)
    if tdir.is_dir():
        tfiles = sorted(p for p in tdir.iterdir() if p.suffix in (".npy", ".rvol"))
    else:
        tfiles = [tdir]
    if not tfiles:
        raise ValidationError("no .npy or .rvol images found", field="targets")
    targets = [_read_image(p, cfg.data) for p in tfiles]
    maps = similarity_map(load_checkpoint(args.ckpt).build("teacher"), query, int(idx), targets)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plt = _plt()
    outputs, undefined = {}, []
    for f, img, m in zip(tfiles, targets, maps):
        stem = f.stem
        if m is None:
            undefined.append(f.name)
            print(f"{f.name}: similarity undefined (zero-norm features)", file=sys.stderr)
            continue
        np.savetxt(out / f"{stem}_simmap.csv", m, delimiter=",", fmt="%.9g")
        # Pixel-exact heatmap: one pixel per patch, so the argmax is recoverable from the PNG.
        plt.imsave(out / f"{stem}_simmap.png", m, cmap="viridis", vmin=-1.0, vmax=1.0)
        outputs[stem] = out / f"{stem}_simmap.png"
    _manifest(cfg, "simmap", outputs, t0, undefined=undefined).write(out)
    return EXIT_OK


def cmd_plot(args):
    from .trainer import TrainLog
    logs = []
    for p in args.log:
        log = TrainLog.read_csv(p)
        if not log.rows:
            raise ValidationError("log has no rows", field=str(p))
        logs.append((args.names[len(logs)] if args.names and len(args.names) > len(logs) else _run_name(p), log))
    plt = _plt()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, log in logs:
        a1.plot([r["step"] for r in log.rows], [r["total"] for r in log.rows], label=name)
        pts = log.probe_points()
        if pts:
            a2.plot([s for s, _ in pts], [v for _, v in pts], marker="o", label=name)
    a1.set_xlabel("step")
    a1.set_ylabel("total loss")
    a2.set_xlabel("step")
    a2.set_ylabel("organ probe accuracy")
    for ax in (a1, a2):
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=100)
    plt.close(fig)
    return EXIT_OK


def _run_name(path):
    p = Path(path)
    return p.parent.name if p.stem == "train_log" and p.parent.name else p.stem


# --- parser ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    keys = "\n".join("  " + k for k in describe_keys())
    p = _Parser(prog="radssl", description="Self-supervised pretraining and frozen-feature probing on phantom volumes.",
                epilog="config keys (JSON file, nested by block):\n" + keys,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write phantom volumes, index.json and tasks.json")
    g.add_argument("--spec", required=True, help="phantom spec JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("pretrain", help="pretrain from scratch", epilog="config keys:\n" + keys,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune-highres", help="interpolate positions and fine-tune at train.resolution")
    f.add_argument("--config", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--data", help="dataset directory (default: the one recorded next to the checkpoint)")
    f.set_defaults(func=cmd_finetune_highres)

    pr = sub.add_parser("probe", help="5-seed frozen-feature benchmark")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--tasks", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--config")
    pr.set_defaults(func=cmd_probe)

    fs = sub.add_parser("fewshot", help="metric vs number of training shots")
    fs.add_argument("--ckpt", required=True)
    fs.add_argument("--tasks", required=True)
    fs.add_argument("--out", required=True)
    fs.add_argument("--task", default="organ")
    fs.add_argument("--shots", default="1,2,4,8,16")
    fs.add_argument("--config")
    fs.set_defaults(func=cmd_fewshot)

    s = sub.add_parser("simmap", help="patch cosine-similarity heatmaps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--query", required=True, help="IMAGE:PATCH_INDEX (.npy or .rvol)")
    s.add_argument("--targets", required=True, help="directory (or single file) of .npy / .rvol images")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_simmap)

    pl = sub.add_parser("plot", help="loss and probe curves from training logs")
    pl.add_argument("--log", required=True, nargs="+")
    pl.add_argument("--names", nargs="*")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ValidationError, GeometryError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        print(json.dumps(e.diagnostics, default=str, indent=1), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        traceback.print_exc()
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
