"""Command line entry point: prepare, pretrain, train, ablate, eval, bdrate, inspect.

Every subcommand reads one YAML config (``-c``) and accepts ``--set key.path=value``
overrides. Outputs land in a single locked directory together with a snapshot of
the resolved config.
"""

from __future__ import annotations

import csv
import functools
import logging
import sys
from collections import defaultdict
from pathlib import Path

import click
import numpy as np
import torch
from filelock import FileLock, Timeout

from .checkpoint import CheckpointError, check_architecture, load_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .data.degrade import DegraderError
from .data.manifest import ManifestError, SplitRule, build_manifest, load_manifest, read_image, source_images, write_png
from .data.tensor import to_tensor
from .evaluation.bdrate import BDRateError, RDCurve, bd_rate
from .evaluation.evaluate import evaluate_model, evaluate_pairs, restore_sequential
from .evaluation.inspect import average_feature_maps
from .evaluation.report import BDRow, ablation_csv, ablation_table, bdrate_csv, bdrate_table, emit_report
from .model import build_model
from .training import (
    TrainingError,
    convergence_csv,
    plan_arm,
    plan_pretrain,
    pretrain_sr,
    run_ablation,
    train_mtl,
)

log = logging.getLogger("mtlvqe")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TOOL = 4
EXIT_LOCKED = 5

MANIFEST_NAME = "manifest.csv"
SNAPSHOT_NAME = "config.yaml"
METRIC_COLUMNS = {"sr_psnr": "SR-PSNR", "sr_ssim": "SR-SSIM", "qe_psnr": "QE-PSNR", "qe_ssim": "QE-SSIM"}


class DataMissing(Exception):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def guarded(fn):
    """Map library failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except CheckpointError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (DataMissing, ManifestError, FileNotFoundError) as exc:
            _fail(EXIT_DATA, str(exc))
        except DegraderError as exc:
            detail = f"\n{exc.stderr.strip()}" if exc.stderr else ""
            _fail(EXIT_TOOL, f"{exc}{detail}")
        except Timeout as exc:
            _fail(EXIT_LOCKED, f"run directory is in use by another process ({exc.lock_file})")
        except (TrainingError, BDRateError) as exc:
            _fail(EXIT_DATA, str(exc))

    return wrapper


def config_options(fn):
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key, e.g. --set network.alpha=0.5")(fn)
    fn = click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False),
                      help="YAML run config.")(fn)
    return fn


def dry_run_option(fn):
    return click.option("--dry-run", is_flag=True, help="Print the resolved config and plan; run nothing.")(fn)


def _config(config_path, overrides) -> RunConfig:
    return load_config(config_path, overrides)


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if _get(cfg, k) in (None, "")]
    if missing:
        raise ConfigError([f"{k}: required by this command" for k in missing])


def _get(cfg, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = getattr(node, part)
    return node


class RunDir:
    """Create, lock and snapshot the output directory of one invocation."""

    def __init__(self, path: str | Path, cfg: RunConfig):
        self.path = Path(path)
        self.cfg = cfg
        self.lock = None

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path / ".lock"), timeout=0)
        self.lock.acquire()
        (self.path / SNAPSHOT_NAME).write_text(dump_config(self.cfg), encoding="utf-8")
        return self.path

    def __exit__(self, *exc):
        self.lock.release()
        return False


def _manifest(data_dir: str | Path):
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DataMissing(f"no manifest at {path}; run `mtlvqe prepare` first")
    return load_manifest(path)


def _pretrained(cfg: RunConfig, needed: bool):
    if not needed:
        return None
    if not cfg.paths.pretrained:
        raise ConfigError(["paths.pretrained: fine-tuning arms need an SR pretraining checkpoint"])
    path = Path(cfg.paths.pretrained)
    if not path.is_file():
        raise DataMissing(f"pretrained checkpoint not found: {path}")
    return load_checkpoint(path)


def _print_plans(plans) -> None:
    for p in plans:
        click.echo(f"plan {p.name}: qps={list(p.qps)} epochs={p.epochs} lr_step_epochs={p.step_epochs} "
                   f"updates={p.updates}")


def _write_convergence(runs, directory: Path, title: str) -> None:
    from .plots import plot_convergence

    (directory / "convergence.csv").write_text(convergence_csv(runs))
    plot_convergence(runs, directory / "convergence.png", title)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose):
    """Joint super-resolution and quality enhancement of coded frames."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# --- prepare ------------------------------------------------------------------

@main.command()
@config_options
@dry_run_option
@guarded
def prepare(config_path, overrides, dry_run):
    """Generate (HR, LR, decoded LR) triples and the dataset manifest."""
    cfg = _config(config_path, overrides)
    _require(cfg, "paths.hr_dir")
    d = cfg.degrader
    if dry_run:
        click.echo(dump_config(cfg), nl=False)
        n = len(source_images(cfg.paths.hr_dir)) if Path(cfg.paths.hr_dir).is_dir() else 0
        click.echo(f"plan prepare: {n} source images x {len(d.qps)} QPs = {n * len(d.qps)} entries")
        return
    if not Path(cfg.paths.hr_dir).is_dir():
        raise DataMissing(f"source image directory not found: {cfg.paths.hr_dir}")
    rule = SplitRule(d.val_fraction, d.test_fraction, tuple(d.val_names), tuple(d.test_names))
    with RunDir(cfg.paths.data_dir, cfg) as out:
        res = build_manifest(cfg.paths.hr_dir, out, d.qps, cfg.degrader_spec(), cfg.network.scale_factor,
                             rule, d.workers)
        res.manifest.save(out / MANIFEST_NAME)
    for src, why in res.skipped_files:
        click.echo(f"skipped {src}: {why}", err=True)
    click.echo(f"{len(res.manifest.entries)} entries ({res.new_entries} new entries) -> {out / MANIFEST_NAME}")


# --- training -----------------------------------------------------------------

@main.command()
@config_options
@dry_run_option
@click.option("--resume", is_flag=True, help="Continue from the run directory's last checkpoint.")
@guarded
def pretrain(config_path, overrides, dry_run, resume):
    """Super-resolution pretraining on uncompressed pairs."""
    cfg = _config(config_path, overrides)
    data = _manifest(cfg.paths.pretrain_data_dir or cfg.paths.data_dir)
    opt, sched, tcfg = cfg.optimizer_config(), cfg.schedule_config(), cfg.train_config()
    if dry_run:
        click.echo(dump_config(cfg), nl=False)
        _print_plans([plan_pretrain(len(data.split("train")), opt, sched, tcfg)])
        return
    torch.manual_seed(cfg.seed)
    with RunDir(cfg.paths.run_dir, cfg) as out:
        run = pretrain_sr(build_model(cfg.network_config()), data, opt, sched, tcfg, out, resume)
        _write_convergence([run], out, "SR pretraining")
    click.echo(f"pretraining done: {run.updates} updates; checkpoint {out / 'checkpoints' / 'best.ckpt'}")


@main.command()
@config_options
@dry_run_option
@click.option("--resume", is_flag=True, help="Continue from the run directory's last checkpoint.")
@guarded
def train(config_path, overrides, dry_run, resume):
    """Multitask training of one arm (multi-QP or one network per QP)."""
    cfg = _config(config_path, overrides)
    arm = cfg.to_arm(cfg.arm)
    data = _manifest(cfg.paths.data_dir)
    opt, sched, tcfg = cfg.optimizer_config(), cfg.schedule_config(), cfg.train_config()
    if arm.fine_tune and not cfg.paths.pretrained:
        raise ConfigError(["paths.pretrained: arm.fine_tune is set but no pretraining checkpoint is given"])
    if dry_run:
        click.echo(dump_config(cfg), nl=False)
        _print_plans(plan_arm(data, arm, opt, sched, tcfg))
        return
    init = _pretrained(cfg, arm.fine_tune)
    torch.manual_seed(cfg.seed)
    with RunDir(cfg.paths.run_dir, cfg) as out:
        runs = train_mtl(build_model(cfg.network_config()), init, data, arm, opt, sched, tcfg, out, resume)
        _write_convergence(runs, out, arm.label)
    for run in runs:
        click.echo(f"{run.name}: {run.updates} updates, best epoch {int(run.best.cursor['epoch'])}")


@main.command()
@config_options
@dry_run_option
@guarded
def ablate(config_path, overrides, dry_run):
    """Train and score every ablation arm; writes the merged table and per-arm convergence."""
    cfg = _config(config_path, overrides)
    arms = cfg.ablation_arms()
    data = _manifest(cfg.paths.data_dir)
    opt, sched, tcfg = cfg.optimizer_config(), cfg.schedule_config(), cfg.train_config()
    needs_init = any(a.fine_tune for a in arms)
    if needs_init and not cfg.paths.pretrained:
        raise ConfigError(["paths.pretrained: fine-tuned arms need a pretraining checkpoint"])
    if dry_run:
        click.echo(dump_config(cfg), nl=False)
        for arm in arms:
            _print_plans(plan_arm(data, arm, opt, sched, tcfg))
        return
    init = _pretrained(cfg, needs_init)
    torch.manual_seed(cfg.seed)
    with RunDir(cfg.paths.run_dir, cfg) as out:
        rep = run_ablation(arms, cfg.network_config(), data, opt, sched, tcfg, init, out, cfg.eval.split)
        from .plots import plot_convergence

        for label, runs in rep.runs.items():
            plot_convergence(runs, out / label.replace("/", "_") / "convergence.png", label)
        table = ablation_table(rep.columns)
        (out / "ablation.txt").write_text(table)
        (out / "ablation.csv").write_text(ablation_csv(rep.columns))
    click.echo(table, nl=False)
    for label, why in rep.failures.items():
        click.echo(f"arm {label} failed: {why}", err=True)
    if rep.failures:
        sys.exit(EXIT_FAILURE)


# --- evaluation ---------------------------------------------------------------

def _load_model(path: str | Path, cfg: RunConfig, check: bool = True):
    path = Path(path)
    if not path.is_file():
        raise DataMissing(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    if check:
        check_architecture(ck.network_config, cfg.network_config())
    model = build_model(ck.network_config)
    ck.restore(model)
    model.eval()
    return model


@main.command(name="eval")
@config_options
@guarded
def eval_(config_path, overrides):
    """Score a checkpoint on a manifest split against the bicubic / decoded anchors."""
    cfg = _config(config_path, overrides)
    _require(cfg, "paths.checkpoint")
    if cfg.eval.mode == "sequential":
        _require(cfg, "paths.qe_checkpoint")
    data = _manifest(cfg.paths.data_dir)
    entries = data.split(cfg.eval.split)
    if not entries:
        raise DataMissing(f"split {cfg.eval.split!r} of {cfg.paths.data_dir} is empty")
    e = cfg.eval
    with RunDir(cfg.paths.run_dir, cfg) as out:
        if e.mode == "joint":
            model = _load_model(cfg.paths.checkpoint, cfg)
            report = evaluate_model(model, data, e.split, use_qp_map=e.use_qp_map, dataset=e.dataset,
                                    with_ssim=e.ssim)
        else:
            sr = _load_model(cfg.paths.checkpoint, cfg, check=False)
            qe = _load_model(cfg.paths.qe_checkpoint, cfg, check=False)
            pairs = [data.load_pair(x) for x in entries]
            report = evaluate_pairs(lambda p: restore_sequential(qe, sr, p.lr_decoded, p.qp, e.use_qp_map),
                                    pairs, dataset=e.dataset, with_ssim=e.ssim)
        (out / "eval_report.txt").write_text(emit_report(report, "table-text"))
        (out / "eval_report.csv").write_text(emit_report(report, "csv"))
    click.echo(emit_report(report, e.format), nl=False)


def read_measurements(path: str | Path) -> dict[tuple[str, str], dict[str, dict[str, list]]]:
    """(dataset, sequence) -> method -> column -> values, from a per-QP measurements CSV."""
    path = Path(path)
    if not path.is_file():
        raise DataMissing(f"measurements file not found: {path}")
    out: dict = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"dataset", "sequence", "method", "qp", "rate"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise DataMissing(f"{path}: missing columns {sorted(missing)}")
        metrics = [c for c in reader.fieldnames if c in METRIC_COLUMNS]
        if not metrics:
            raise DataMissing(f"{path}: no quality columns (expected some of {sorted(METRIC_COLUMNS)})")
        for row in reader:
            node = out[(row["dataset"], row["sequence"])][row["method"]]
            node["rate"].append(float(row["rate"]))
            for m in metrics:
                if row[m] != "":
                    node[m].append(float(row[m]))
    return out


@main.command()
@config_options
@guarded
def bdrate(config_path, overrides):
    """BD-rate table from measured (rate, quality) points per QP."""
    from .plots import plot_rd

    cfg = _config(config_path, overrides)
    _require(cfg, "bdrate.measurements")
    b = cfg.bdrate
    meas = read_measurements(b.measurements)
    rows = []
    with RunDir(cfg.paths.run_dir, cfg) as out:
        for (dataset, sequence), methods in sorted(meas.items()):
            for name in (b.test, b.reference):
                if name not in methods:
                    raise DataMissing(f"{dataset}/{sequence}: no measurements for method {name!r}")
            values, panels = {}, {}
            for col, key in METRIC_COLUMNS.items():
                curves = {}
                for name, m in methods.items():
                    if len(m[col]) == len(m["rate"]) and m[col]:
                        curves[name] = RDCurve(f"{name}", list(zip(m["rate"], m[col])))
                if b.test not in curves or b.reference not in curves:
                    continue
                vs_ref = bd_rate(curves[b.test], curves[b.reference])
                vs_anchor = bd_rate(curves[b.test], curves[b.anchor]) if b.anchor in curves else None
                values[key] = (vs_ref, vs_anchor)
                panels[key] = list(curves.values())
            rows.append(BDRow(dataset, sequence, values))
            if panels:
                plot_rd(panels, out / f"rd_{dataset}_{sequence}.png", f"{dataset} {sequence}")
        table = bdrate_table(rows)
        (out / "bdrate.txt").write_text(table)
        (out / "bdrate.csv").write_text(bdrate_csv(rows))
    click.echo(table, nl=False)


@main.command()
@config_options
@guarded
def inspect(config_path, overrides):
    """Channel-averaged activation maps at chosen layers, saved as grayscale PNGs."""
    cfg = _config(config_path, overrides)
    _require(cfg, "paths.checkpoint")
    model = _load_model(cfg.paths.checkpoint, cfg)
    ins = cfg.inspect
    inputs = []
    if ins.images:
        qp = ins.qp if ins.qp is not None else cfg.degrader.qps[0]
        for p in ins.images:
            if not Path(p).is_file():
                raise DataMissing(f"inspect image not found: {p}")
            inputs.append((Path(p).stem, read_image(p), qp))
    else:
        data = _manifest(cfg.paths.data_dir)
        entries = data.split(cfg.eval.split)[:ins.count]
        if not entries:
            raise DataMissing(f"split {cfg.eval.split!r} of {cfg.paths.data_dir} is empty")
        for e in entries:
            inputs.append((e.id, read_image(data.root / e.lr_decoded_path), ins.qp if ins.qp is not None else e.qp))
    with RunDir(cfg.paths.run_dir, cfg) as out:
        written = []
        for stem, img, qp in inputs:
            try:
                maps = average_feature_maps(model, to_tensor(img), qp, ins.layers, cfg.eval.use_qp_map)
            except KeyError as exc:
                raise ConfigError([f"inspect.layers: {exc.args[0]}"]) from None
            for m in maps:
                path = out / "inspect" / f"{stem}_{m.layer_id}.png"
                write_png(path, m.image)
                np.save(path.with_suffix(".npy"), m.mean)
                written.append(path)
    for p in written:
        click.echo(str(p))


if __name__ == "__main__":
    main()
