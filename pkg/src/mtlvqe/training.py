"""Pretraining, multitask training and the multi-QP ablation runner."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint
from .data.manifest import DatasetManifest, ManifestEntry
from .data.patches import SamplePair, patch_offsets
from .data.tensor import to_batch
from .evaluation.evaluate import evaluate_pairs, restore
from .evaluation.report import ArmColumn
from .model import QE, SR, MTLNet, build_model, reinit_head
from .priors import l1_loss, mtl_loss, prior_batch

log = logging.getLogger(__name__)

PAPER_QPS = (22, 27, 32, 37)
METRIC_FIELDS = ("epoch", "lr", "updates", "loss_sr", "loss_qe", "loss_mtl", "val_psnr_sr", "val_psnr_qe")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8


@dataclass(frozen=True)
class ScheduleConfig:
    gamma: float = 0.5
    step_epochs: int = 75
    total_epochs: int = 250
    epoch_multiplier: int = 1


@dataclass(frozen=True)
class AblationArm:
    multi_qp: bool = True
    use_qp_map: bool = True
    fine_tune: bool = True
    qps: tuple[int, ...] = PAPER_QPS
    name: str = ""

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"mqp{int(self.multi_qp)}-map{int(self.use_qp_map)}-ft{int(self.fine_tune)}"


# the four columns pairs of the multi-QP ablation table, in table order
TABLE1_ARMS = (
    AblationArm(multi_qp=True, use_qp_map=True, fine_tune=True, name="multiqp"),
    AblationArm(multi_qp=False, use_qp_map=True, fine_tune=True, name="per-qp"),
    AblationArm(multi_qp=True, use_qp_map=False, fine_tune=True, name="no-qpmap"),
    AblationArm(multi_qp=True, use_qp_map=True, fine_tune=False, name="scratch"),
)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs the training recipe leaves open: patch size, epoch size, seeding, validation."""

    patch_size: int = 64
    patches_per_image: int = 1
    seed: int = 0
    validate: bool = True
    max_val_images: int | None = None


def lr_at(epoch: int, sched: ScheduleConfig, lr0: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    step = sched.step_epochs * sched.epoch_multiplier
    return lr0 * sched.gamma ** (epoch // step)


def epoch_steps(total_updates: int, epochs: int) -> list[int]:
    """Spread `total_updates` over `epochs` as evenly as integers allow (sums exactly)."""
    return [(e + 1) * total_updates // epochs - e * total_updates // epochs for e in range(epochs)]


@dataclass(frozen=True)
class RunPlan:
    name: str
    qps: tuple[int, ...]
    epochs: int
    step_epochs: int
    steps_per_epoch: tuple[int, ...]

    @property
    def updates(self) -> int:
        return sum(self.steps_per_epoch)


def plan_runs(n_images: int, arm: AblationArm, opt: OptimizerConfig, sched: ScheduleConfig,
              cfg: TrainConfig) -> list[RunPlan]:
    """Update budget per run. Per-QP runs get |qps| times the epochs and the same number of
    parameter updates as the multi-QP run (each epoch sees one QP's share of the data)."""
    q = len(arm.qps)
    per_epoch = math.ceil(n_images * q * cfg.patches_per_image / opt.batch_size)
    total = per_epoch * sched.total_epochs
    if arm.multi_qp:
        return [RunPlan(arm.label, tuple(arm.qps), sched.total_epochs, sched.step_epochs * sched.epoch_multiplier,
                        tuple(epoch_steps(total, sched.total_epochs)))]
    epochs = sched.total_epochs * q
    step = sched.step_epochs * sched.epoch_multiplier * q
    return [RunPlan(f"{arm.label}/qp{qp}", (qp,), epochs, step, tuple(epoch_steps(total, epochs)))
            for qp in arm.qps]


def plan_pretrain(n_train: int, opt: OptimizerConfig, sched: ScheduleConfig, cfg: TrainConfig) -> RunPlan:
    per_epoch = math.ceil(n_train * cfg.patches_per_image / opt.batch_size)
    return RunPlan("pretrain", (0,), sched.total_epochs, sched.step_epochs * sched.epoch_multiplier,
                   tuple(epoch_steps(per_epoch * sched.total_epochs, sched.total_epochs)))


def plan_arm(data: DatasetManifest, arm: AblationArm, opt: OptimizerConfig, sched: ScheduleConfig,
             cfg: TrainConfig) -> list[RunPlan]:
    """Plans for an arm over the training split of a manifest (images counted once across QPs)."""
    n_images = len({e.hr_path for e in data.split("train") if e.qp in arm.qps})
    return plan_runs(n_images, arm, opt, sched, cfg)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    updates: int
    loss_sr: float | None
    loss_qe: float | None
    loss_mtl: float
    val_psnr_sr: float | None = None
    val_psnr_qe: float | None = None


@dataclass
class TrainedRun:
    name: str
    qps: tuple[int, ...]
    use_qp_map: bool
    history: list[EpochRecord]
    final: Checkpoint
    best: Checkpoint
    updates: int
    run_dir: Path | None = None

    def model(self, which: str = "best") -> MTLNet:
        ckpt = self.best if which == "best" else self.final
        m = build_model(ckpt.network_config)
        ckpt.restore(m)
        return m


class PairPool:
    """Training pairs held in memory, with per-epoch seeded patch batches."""

    def __init__(self, pairs: list[SamplePair]):
        if not pairs:
            raise TrainingError("no training pairs")
        self.pairs = pairs

    def batches(self, rng: np.random.Generator, steps: int, batch: int, patch: int):
        need = steps * batch
        if need == 0:
            return
        order = np.concatenate([rng.permutation(len(self.pairs)) for _ in range(-(-need // len(self.pairs)))])
        order = order[:need]
        for s in range(steps):
            hr, lr, dec, qps = [], [], [], []
            for i in order[s * batch:(s + 1) * batch]:
                p = self.pairs[i]
                h, w = p.lr.shape[:2]
                ps = min(patch, h, w)
                (x, y), = patch_offsets(h, w, ps, 1, rng)
                r = p.scale_factor
                hr.append(p.hr[r * y:r * (y + ps), r * x:r * (x + ps)])
                lr.append(p.lr[y:y + ps, x:x + ps])
                dec.append(p.lr_decoded[y:y + ps, x:x + ps])
                qps.append(p.qp)
            yield to_batch(hr), to_batch(lr), to_batch(dec), qps


def _make_optimizer(model: MTLNet, opt: OptimizerConfig, lr0: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr0, betas=(opt.beta1, opt.beta2), eps=opt.epsilon)


def _epoch_rng(seed: int, run_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, run_index, epoch])


def _validate(model: MTLNet, pairs: list[SamplePair], use_qp_map: bool, zero_prior: bool):
    if not pairs:
        return None, None
    report = evaluate_pairs(lambda p: restore(model, p.lr_decoded, 0 if zero_prior else p.qp,
                                              use_qp_map and not zero_prior),
                            pairs, with_ssim=False)
    return report.mean(SR), report.mean(QE)


def _score(rec: EpochRecord, alpha: float) -> float:
    if rec.val_psnr_sr is None and rec.val_psnr_qe is None:
        return -rec.loss_mtl
    sr = rec.val_psnr_sr if rec.val_psnr_sr is not None else 0.0
    qe = rec.val_psnr_qe if rec.val_psnr_qe is not None else 0.0
    if rec.val_psnr_sr is None:
        return qe
    if rec.val_psnr_qe is None:
        return sr
    return alpha * sr + (1 - alpha) * qe


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_history(path: Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in history:
            w.writerow([r.epoch, _fmt(r.lr), r.updates, _fmt(r.loss_sr), _fmt(r.loss_qe), _fmt(r.loss_mtl),
                        _fmt(r.val_psnr_sr), _fmt(r.val_psnr_qe)])


def read_history(path: str | os.PathLike) -> list[EpochRecord]:
    def num(s):
        return None if s == "" else float(s)

    with open(path, newline="") as f:
        return [EpochRecord(int(r["epoch"]), float(r["lr"]), int(r["updates"]), num(r["loss_sr"]),
                            num(r["loss_qe"]), float(r["loss_mtl"]), num(r["val_psnr_sr"]),
                            num(r["val_psnr_qe"]))
                for r in csv.DictReader(f)]


def _train_loop(model: MTLNet, pool: PairPool, val_pairs: list[SamplePair], plan: RunPlan,
                opt: OptimizerConfig, lr0: float, sched: ScheduleConfig, cfg: TrainConfig,
                use_qp_map: bool, zero_prior: bool, run_index: int, run_dir: Path | None,
                resume: bool = False) -> TrainedRun:
    """One logical sequence of parameter updates with per-epoch validation and checkpoints."""
    alpha = model.config.effective_alpha
    heads = model.config.heads
    optimizer = _make_optimizer(model, opt, lr0)
    run_sched = replace(sched, step_epochs=plan.step_epochs, epoch_multiplier=1)
    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    start = 0
    updates = 0

    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        last_path = run_dir / "checkpoints" / "last.ckpt"
        if resume and last_path.exists():
            last = load_checkpoint(last_path)
            last.restore(model, optimizer)
            start = int(last.cursor["epoch"])
            updates = int(last.cursor["updates"])
            history = read_history(run_dir / "metrics.csv")[:start]
            best_path = run_dir / "checkpoints" / "best.ckpt"
            best = load_checkpoint(best_path) if best_path.exists() else None
            log.info("%s: resumed at epoch %d", plan.name, start)

    for epoch in range(start, plan.epochs):
        lr = lr_at(epoch, run_sched, lr0)
        for g in optimizer.param_groups:
            g["lr"] = lr
        model.train()
        sums = {"sr": 0.0, "qe": 0.0, "mtl": 0.0}
        steps = plan.steps_per_epoch[epoch]
        rng = _epoch_rng(cfg.seed, run_index, epoch)
        for hr, lr_img, dec, qps in pool.batches(rng, steps, opt.batch_size, cfg.patch_size):
            n, _, h, w = dec.shape
            prior = prior_batch([0] * n if zero_prior else qps, h, w, use_qp_map and not zero_prior)
            out = model(torch.cat([dec, prior], dim=1))
            loss_sr = l1_loss(out[SR], hr) if SR in heads else torch.zeros(())
            loss_qe = l1_loss(out[QE], lr_img) if QE in heads else torch.zeros(())
            loss = mtl_loss(loss_sr, loss_qe, alpha)
            optimizer.zero_grad(set_to_none=False)
            loss.backward()
            optimizer.step()
            updates += 1
            sums["sr"] += loss_sr.item()
            sums["qe"] += loss_qe.item()
            sums["mtl"] += loss.item()
        # an epoch can get zero updates when the budget is spread over many short epochs
        k = steps if steps else math.nan
        val_sr = val_qe = None
        if cfg.validate:
            val_sr, val_qe = _validate(model, val_pairs, use_qp_map, zero_prior)
        rec = EpochRecord(epoch, lr, updates,
                          sums["sr"] / k if SR in heads else None,
                          sums["qe"] / k if QE in heads else None,
                          sums["mtl"] / k, val_sr, val_qe)
        history.append(rec)
        log.info("%s epoch %d lr %.3g loss %.5f val SR %s QE %s", plan.name, epoch, lr, rec.loss_mtl,
                 val_sr, val_qe)

        cursor = {"epoch": epoch + 1, "updates": updates}
        if best is None or _score(rec, alpha) > _score(_best_record(history, best), alpha):
            best = Checkpoint.from_model(model, None, cursor, {"run": plan.name})
        if run_dir is not None:
            Checkpoint.from_model(model, optimizer, cursor, {"run": plan.name}).save(
                run_dir / "checkpoints" / "last.ckpt")
            best.save(run_dir / "checkpoints" / "best.ckpt")
            _write_history(run_dir / "metrics.csv", history)

    final = Checkpoint.from_model(model, optimizer, {"epoch": plan.epochs, "updates": updates},
                                  {"run": plan.name})
    if best is None:
        best = final
    return TrainedRun(plan.name, plan.qps, use_qp_map, history, final, best, updates, run_dir)


def _best_record(history: list[EpochRecord], best: Checkpoint) -> EpochRecord:
    return history[int(best.cursor["epoch"]) - 1]


def _load_pairs(manifest: DatasetManifest, entries: list[ManifestEntry], limit: int | None = None):
    if limit is not None:
        entries = entries[:limit]
    return [manifest.load_pair(e) for e in entries]


def _val_entries(manifest: DatasetManifest) -> list[ManifestEntry]:
    return manifest.split("val")


def pretrain_sr(model: MTLNet, data: DatasetManifest, opt: OptimizerConfig = OptimizerConfig(),
                sched: ScheduleConfig = ScheduleConfig(total_epochs=1000), cfg: TrainConfig = TrainConfig(),
                run_dir: str | os.PathLike | None = None, resume: bool = False) -> TrainedRun:
    """Super-resolution on uncompressed pairs; the prior channel is held at zero (no coding)."""
    if model.head_sr is None:
        raise TrainingError("pretraining needs a model with an SR head")
    degraded = sorted(d for d in data.degrader_ids if d != "null")
    if degraded:
        raise TrainingError(f"pretraining expects uncompressed pairs (null degrader), manifest has {degraded}")
    if model.head_qe is not None:
        # only the trunk and SR head are optimised here
        model = _sr_only_copy(model)
    train = data.split("train")
    pool = PairPool(_load_pairs(data, train))
    val_pairs = _load_pairs(data, _val_entries(data), cfg.max_val_images)
    plan = plan_pretrain(len(train), opt, sched, cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    return _train_loop(model, pool, val_pairs, plan, opt, opt.lr0, sched, cfg, use_qp_map=False,
                       zero_prior=True, run_index=0, run_dir=run_dir, resume=resume)


def _sr_only_copy(model: MTLNet) -> MTLNet:
    cfg = replace(model.config, heads=(SR,))
    sr = build_model(cfg)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("head_qe.")}
    sr.load_state_dict(state)
    return sr


def init_from_pretrained(model: MTLNet, pretrained: Checkpoint, qe_seed: int) -> None:
    """Copy trunk and SR-head weights from a pretraining checkpoint; draw a fresh QE head."""
    own = model.state_dict()
    missing = [k for k in own if group_of_key(k) in ("trunk", "head_sr") and k not in pretrained.params]
    if missing:
        raise TrainingError(f"pretrained checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    with torch.no_grad():
        for k, v in own.items():
            if group_of_key(k) == "head_sr" or group_of_key(k) == "trunk":
                if v.shape != pretrained.params[k].shape:
                    raise TrainingError(f"shape mismatch for {k}: {tuple(v.shape)} vs "
                                        f"{tuple(pretrained.params[k].shape)}")
                v.copy_(pretrained.params[k])
    if model.head_qe is not None:
        reinit_head(model, QE, qe_seed)


def group_of_key(key: str) -> str:
    return key.split(".", 1)[0]


def train_mtl(model: MTLNet, init: Checkpoint | None, data: DatasetManifest, arm: AblationArm,
              opt: OptimizerConfig = OptimizerConfig(), sched: ScheduleConfig = ScheduleConfig(),
              cfg: TrainConfig = TrainConfig(), run_dir: str | os.PathLike | None = None,
              resume: bool = False) -> list[TrainedRun]:
    """Train with the weighted multitask loss; one run for multi-QP arms, one per QP otherwise."""
    missing = sorted(set(arm.qps) - set(data.qps))
    if missing:
        raise TrainingError(f"arm {arm.label} wants QPs {missing} that the manifest does not declare")
    if arm.fine_tune and init is None:
        raise TrainingError(f"arm {arm.label} fine-tunes but no pretrained checkpoint was given")

    base = copy.deepcopy(model)
    lr0 = opt.lr0
    if arm.fine_tune:
        init_from_pretrained(base, init, qe_seed=model.config.init_seed + 1)
        lr0 = opt.lr0 / 2

    train = [e for e in data.split("train") if e.qp in arm.qps]
    val = [e for e in _val_entries(data) if e.qp in arm.qps]
    plans = plan_arm(data, arm, opt, sched, cfg)
    all_train = _load_pairs(data, train)
    all_val = _load_pairs(data, val, None)
    root = Path(run_dir) if run_dir is not None else None

    runs = []
    for i, plan in enumerate(plans):
        pool = PairPool([p for p in all_train if p.qp in plan.qps])
        vpairs = [p for p in all_val if p.qp in plan.qps]
        if cfg.max_val_images is not None:
            vpairs = vpairs[:cfg.max_val_images * len(plan.qps)]
        sub = None
        if root is not None:
            sub = root if len(plans) == 1 else root / f"qp{plan.qps[0]}"
        runs.append(_train_loop(copy.deepcopy(base), pool, vpairs, plan, opt, lr0, sched, cfg,
                                use_qp_map=arm.use_qp_map, zero_prior=False, run_index=i,
                                run_dir=sub, resume=resume))
    return runs


@dataclass
class AblationReport:
    columns: list[ArmColumn]
    runs: dict[str, list[TrainedRun]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


def _arm_results(runs: list[TrainedRun], data: DatasetManifest, split: str) -> dict[int, dict[str, tuple]]:
    entries = data.split(split) or data.split("val")
    results: dict[int, dict[str, tuple]] = {}
    for run in runs:
        model = run.model("best")
        for qp in run.qps:
            pairs = [data.load_pair(e) for e in entries if e.qp == qp]
            rep = evaluate_pairs(lambda p: restore(model, p.lr_decoded, p.qp, run.use_qp_map), pairs,
                                 with_ssim=False)
            results[qp] = {t: (rep.mean(t), rep.mean(t, metric="d_psnr")) for t in model.config.heads}
    return results


def convergence_csv(runs: list[TrainedRun]) -> str:
    lines = ["run,epoch,lr,updates,loss_sr,loss_qe,loss_mtl,val_psnr_sr,val_psnr_qe"]
    for run in runs:
        for r in run.history:
            lines.append(",".join([run.name, str(r.epoch), _fmt(r.lr), str(r.updates), _fmt(r.loss_sr),
                                   _fmt(r.loss_qe), _fmt(r.loss_mtl), _fmt(r.val_psnr_sr),
                                   _fmt(r.val_psnr_qe)]))
    return "\n".join(lines) + "\n"


def run_ablation(arms: list[AblationArm], base_config, data: DatasetManifest,
                 opt: OptimizerConfig = OptimizerConfig(), sched: ScheduleConfig = ScheduleConfig(),
                 cfg: TrainConfig = TrainConfig(), pretrained: Checkpoint | None = None,
                 run_dir: str | os.PathLike | None = None, eval_split: str = "test") -> AblationReport:
    """Train and score every arm; a failing arm is recorded and the others still run."""
    report = AblationReport(columns=[])
    root = Path(run_dir) if run_dir is not None else None
    for arm in arms:
        try:
            model = build_model(base_config)
            sub = root / arm.label.replace("/", "_") if root is not None else None
            runs = train_mtl(model, pretrained if arm.fine_tune else None, data, arm, opt, sched, cfg, sub)
            results = _arm_results(runs, data, eval_split)
        except Exception as exc:  # noqa: BLE001 - one bad arm must not sink the matrix
            log.exception("ablation arm %s failed", arm.label)
            report.failures[arm.label] = f"{type(exc).__name__}: {exc}"
            continue
        report.runs[arm.label] = runs
        report.columns.append(ArmColumn(arm.label, arm.multi_qp, arm.use_qp_map, arm.fine_tune, results))
        if sub is not None:
            (sub / "convergence.csv").write_text(convergence_csv(runs))
    return report


def config_snapshot(**parts) -> str:
    def enc(v):
        if hasattr(v, "to_dict"):
            return v.to_dict()
        if hasattr(v, "__dataclass_fields__"):
            return asdict(v)
        return v

    return json.dumps({k: enc(v) for k, v in parts.items()}, indent=2, sort_keys=True, default=str)

