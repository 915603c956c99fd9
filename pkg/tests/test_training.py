import copy
import math
from dataclasses import replace

import pytest
import torch

from mtlvqe.checkpoint import load_checkpoint
from mtlvqe.data import DegraderSpec, SplitRule, build_manifest
from mtlvqe.model import QE, SR, NetworkConfig, build_model, init_parameters, param_groups
from mtlvqe.training import (
    TABLE1_ARMS,
    AblationArm,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
    TrainingError,
    _make_optimizer,
    epoch_steps,
    init_from_pretrained,
    lr_at,
    plan_runs,
    pretrain_sr,
    read_history,
    run_ablation,
    train_mtl,
)

TINY = NetworkConfig(num_blocks=1, trunk_width=8)
OPT = OptimizerConfig(lr0=1e-3, batch_size=4)
CFG = TrainConfig(patch_size=16, patches_per_image=2, seed=3)
QPS = (22, 32)


@pytest.fixture
def manifest(corpus, tmp_path):
    rule = SplitRule(val_names=("img04",))
    return build_manifest(corpus, tmp_path / "data", list(QPS), DegraderSpec("synthetic"), split_rule=rule).manifest


@pytest.fixture
def clean_manifest(corpus, tmp_path):
    rule = SplitRule(val_names=("img04",))
    return build_manifest(corpus, tmp_path / "clean", [0], DegraderSpec("null"), split_rule=rule).manifest


# --- schedule and budget ------------------------------------------------

def test_lr_schedule_examples():
    s = ScheduleConfig()
    assert lr_at(0, s, 1e-4) == 1e-4
    assert lr_at(74, s, 1e-4) == 1e-4
    assert lr_at(75, s, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(150, s, 1e-4) == pytest.approx(2.5e-5, rel=1e-12)
    s4 = replace(s, epoch_multiplier=4)
    assert lr_at(299, s4, 1e-4) == 1e-4
    assert lr_at(300, s4, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, s, 1e-4)


@pytest.mark.parametrize("total,epochs", [(10, 3), (1000, 1000), (7, 10), (12345, 250)])
def test_epoch_steps_sum_exactly(total, epochs):
    steps = epoch_steps(total, epochs)
    assert len(steps) == epochs and sum(steps) == total
    assert max(steps) - min(steps) <= 1


def test_per_qp_budget_equalisation():
    multi = plan_runs(900, TABLE1_ARMS[0], OptimizerConfig(), ScheduleConfig(), TrainConfig())
    per = plan_runs(900, TABLE1_ARMS[1], OptimizerConfig(), ScheduleConfig(), TrainConfig())
    assert len(multi) == 1 and len(per) == 4
    assert multi[0].epochs == 250
    assert [p.epochs for p in per] == [1000] * 4
    assert [p.step_epochs for p in per] == [300] * 4
    assert all(p.updates == multi[0].updates for p in per)
    assert multi[0].updates == math.ceil(900 * 4 / 8) * 250


def test_adam_matches_hand_formula():
    torch.manual_seed(1)
    w = torch.randn(5, dtype=torch.float64, requires_grad=True)
    model = torch.nn.Module()
    model.w = torch.nn.Parameter(w.detach().clone())
    cfg = OptimizerConfig(lr0=1e-2, beta1=0.9, beta2=0.999, epsilon=1e-8)
    opt = _make_optimizer(model, cfg, cfg.lr0)
    ref = [float(x) for x in w.detach()]
    m = [0.0] * 5
    v = [0.0] * 5
    for t in range(1, 6):
        target = torch.linspace(-1, 1, 5, dtype=torch.float64) * t
        loss = ((model.w - target) ** 3).abs().sum()
        opt.zero_grad()
        loss.backward()
        g = [float(x) for x in model.w.grad]
        opt.step()
        for i in range(5):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh = m[i] / (1 - 0.9 ** t)
            vh = v[i] / (1 - 0.999 ** t)
            ref[i] -= 1e-2 * mh / (math.sqrt(vh) + 1e-8)
        for i in range(5):
            assert abs(model.w[i].item() - ref[i]) <= 1e-10


# --- training runs ------------------------------------------------------

def sched(epochs):
    return ScheduleConfig(gamma=0.5, step_epochs=3, total_epochs=epochs)


def scratch(**kw):
    return AblationArm(**{"fine_tune": False, "qps": QPS, **kw})


def losses(run):
    return [(r.loss_sr, r.loss_qe, r.loss_mtl) for r in run.history]


def test_seeded_runs_identical(manifest):
    a = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(2), CFG)
    b = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(2), CFG)
    assert losses(a[0]) == losses(b[0])


def test_resume_reproduces_loss_curve(manifest, tmp_path):
    full = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(5), CFG, tmp_path / "full")[0]
    train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(2), CFG, tmp_path / "part")
    resumed = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(5), CFG, tmp_path / "part",
                        resume=True)[0]
    assert losses(resumed) == losses(full)
    assert [r.lr for r in resumed.history] == [r.lr for r in full.history]
    assert read_history(tmp_path / "part" / "metrics.csv") == resumed.history
    for k, v in full.final.params.items():
        assert torch.equal(v, resumed.final.params[k]), k


def test_run_writes_artifacts(manifest, tmp_path):
    run = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(2), CFG, tmp_path / "r")[0]
    assert (tmp_path / "r" / "checkpoints" / "last.ckpt").is_file()
    best = load_checkpoint(tmp_path / "r" / "checkpoints" / "best.ckpt")
    assert 1 <= best.cursor["epoch"] <= 2
    assert len(run.history) == 2 and run.history[-1].val_psnr_sr is not None
    assert run.updates == run.history[-1].updates


def test_tiny_run_decreases_loss(manifest):
    cfg = replace(CFG, patches_per_image=4, validate=False)  # 16 patches per epoch
    arm = AblationArm(fine_tune=False, qps=(22,))
    run = train_mtl(build_model(TINY), None, manifest, arm, OPT, ScheduleConfig(step_epochs=1000, total_epochs=50),
                    cfg)[0]
    assert run.history[-1].loss_sr < run.history[0].loss_sr


def test_per_qp_arm_trains_each_qp(manifest, tmp_path):
    runs = train_mtl(build_model(TINY), None, manifest, scratch(multi_qp=False), OPT, sched(1), CFG, tmp_path)
    multi = train_mtl(build_model(TINY), None, manifest, scratch(), OPT, sched(1), CFG)
    assert [r.qps for r in runs] == [(22,), (32,)]
    assert [len(r.history) for r in runs] == [2, 2]
    assert all(r.updates == multi[0].updates for r in runs)
    assert (tmp_path / "qp22" / "metrics.csv").is_file()


def test_alpha_one_leaves_qe_head_untouched(manifest):
    model = build_model(replace(TINY, alpha=1.0))
    before = {k: v.clone() for k, v in param_groups(model)["head_qe"].items()}
    run = train_mtl(model, None, manifest, scratch(), OPT, sched(1), replace(CFG, validate=False))[0]
    trained = run.model("final")
    after = param_groups(trained)["head_qe"]
    for k, v in before.items():
        assert torch.equal(v, after[k]), k
    assert any(not torch.equal(v, param_groups(trained)["trunk"][k])
               for k, v in param_groups(model)["trunk"].items())


def test_pretrain_then_fine_tune_init(clean_manifest, manifest):
    pre = pretrain_sr(build_model(TINY), clean_manifest, OPT, sched(1), CFG)
    assert pre.final.network_config.heads == (SR,)
    assert pre.history[0].loss_qe is None
    model = build_model(TINY)
    init_from_pretrained(model, pre.final, qe_seed=TINY.init_seed + 1)
    for k, v in model.state_dict().items():
        if not k.startswith("head_qe."):
            assert torch.equal(v, pre.final.params[k]), k
    # fresh QE head: a seeded redraw, not the scratch model's head
    head = copy.deepcopy(build_model(TINY).head_qe)
    original = {k: v.clone() for k, v in head.state_dict().items()}
    init_parameters(head, TINY.init_seed + 1)
    for k, v in head.state_dict().items():
        assert torch.equal(model.head_qe.state_dict()[k], v), k
        assert not torch.equal(original[k], v), k
    # the fine-tune arm runs at half the base rate
    run = train_mtl(build_model(TINY), pre.final, manifest, AblationArm(qps=QPS), OPT, sched(1), CFG)[0]
    assert run.history[0].lr == OPT.lr0 / 2


def test_pretrain_rejects_coded_data(manifest):
    with pytest.raises(TrainingError, match="uncompressed"):
        pretrain_sr(build_model(TINY), manifest, OPT, sched(1), CFG)


def test_train_errors(manifest):
    with pytest.raises(TrainingError, match="QPs"):
        train_mtl(build_model(TINY), None, manifest, scratch(qps=(22, 37)), OPT, sched(1), CFG)
    with pytest.raises(TrainingError, match="pretrained"):
        train_mtl(build_model(TINY), None, manifest, AblationArm(qps=QPS), OPT, sched(1), CFG)


def test_ablation_isolates_failing_arm(manifest, tmp_path):
    arms = [scratch(name="ok"), AblationArm(fine_tune=False, qps=(22, 37), name="bad")]
    rep = run_ablation(arms, TINY, manifest, OPT, sched(1), replace(CFG, validate=False), run_dir=tmp_path,
                       eval_split="val")
    assert [c.name for c in rep.columns] == ["ok"]
    assert "bad" in rep.failures and "37" in rep.failures["bad"]
    assert (tmp_path / "ok" / "convergence.csv").is_file()
    assert set(rep.columns[0].results) == set(QPS)
    assert set(rep.columns[0].results[22]) == {SR, QE}
