import json
import math

import numpy as np
import pytest
import torch

from fidip.core import ConfigError
from fidip.data import DatasetIndex, SampleLoader
from fidip.model import PoseModelBundle, checksums
from fidip.train import FiDIPTrainer, TrainConfig, cycle_schedule, domain_loss, \
    init_domain_classifier, pose_loss, run_fidip, total_loss, train_stage1, train_stage2

from conftest import make_toy_bundle
from oracles import bce_ref, pose_loss_ref


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_domain_loss_examples():
    assert domain_loss(t([0.0]), t([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert domain_loss(t([0.0, 0.0]), t([1.0, 0.0])).item() == pytest.approx(math.log(2),
                                                                              abs=1e-15)
    v = domain_loss(t([20.0]), t([1.0])).item()
    assert v == pytest.approx(math.log1p(math.exp(-20)), rel=1e-12)
    assert v == pytest.approx(2.06e-9, rel=1e-2)
    big = domain_loss(t([1000.0, -1000.0]), t([0.0, 1.0])).item()
    assert math.isfinite(big) and big == pytest.approx(1000.0)


def test_domain_loss_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        s = rng.normal(0, 10, n)
        d = rng.integers(0, 2, n).astype(float)
        assert domain_loss(t(s), t(d)).item() == pytest.approx(bce_ref(s, d), abs=1e-9)


def _pose_batch(rng, n, k=3, h=4, w=5):
    pred = rng.normal(size=(n, k, h, w))
    target = rng.uniform(size=(n, k, h, w))
    weights = (rng.random((n, k)) < 0.7).astype(float)
    domains = rng.integers(0, 2, n).astype(float)
    return pred, target, weights, domains


def test_pose_loss_examples():
    y = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    w = torch.ones(2, 3, dtype=torch.float64)
    assert pose_loss(y, y, w, t([0, 1]), 5.0).item() == 0.0
    eps = 0.3
    assert pose_loss(y[:1] + eps, y[:1], w[:1], t([1]), 5.0).item() == pytest.approx(eps ** 2)
    a = 0.04
    err = math.sqrt(a)
    mixed = pose_loss(y + err, y, w, t([0, 1]), 5.0).item()
    assert mixed == pytest.approx(3 * a, abs=1e-12)


def test_pose_loss_zero_weight_sample_contributes_nothing():
    y = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
    pred = y + 1.0
    w = t([[0.0, 0.0], [1.0, 1.0]])
    assert pose_loss(pred, y, w, t([0, 1]), 5.0).item() == pytest.approx(0.5)


def test_pose_loss_linear_in_real_weight():
    rng = np.random.default_rng(1)
    pred, target, weights, _ = _pose_batch(rng, 4)
    real = np.zeros(4)
    a = pose_loss(t(pred), t(target), t(weights), t(real), 1.5).item()
    b = pose_loss(t(pred), t(target), t(weights), t(real), 3.0).item()
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_pose_loss_matches_reference():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(1, 9))
        pred, target, weights, domains = _pose_batch(rng, n)
        wr = float(rng.uniform(1, 6))
        got = pose_loss(t(pred), t(target), t(weights), t(domains), wr).item()
        ref = pose_loss_ref(pred.tolist(), target.tolist(), weights.tolist(), domains.tolist(), wr)
        assert got == pytest.approx(ref, abs=1e-9)


def test_pose_loss_shape_mismatch():
    with pytest.raises(ValueError):
        pose_loss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4), torch.ones(1, 2),
                  torch.zeros(1), 1.0)


def test_total_loss_arithmetic():
    assert total_loss(1.0, 0.5, 0.0005) == pytest.approx(0.99975, abs=1e-15)
    assert total_loss(1.0, 0.5, 0.0) == 1.0


def _tiny_double_bundle():
    torch.manual_seed(3)
    b = PoseModelBundle(2, (32, 32), "reference", widths=(2, 2, 2, 2, 4), head_width=2,
                        batch_norm=False, domain_hidden=(4, 3)).double()
    return b


@pytest.mark.parametrize("lam", [0.0, 0.0005, 1.0])
def test_stage2_gradient_is_pose_minus_lambda_domain(lam):
    b = _tiny_double_bundle()
    rng = np.random.default_rng(4)
    x = t(rng.normal(size=(3, 3, 32, 32)))
    target = t(rng.uniform(size=(3, 2, 8, 8)))
    w = torch.ones(3, 2, dtype=torch.float64)
    dom = t([0.0, 1.0, 1.0])
    param = b.extractor["res4"][0].weight

    def losses():
        f = b.forward_features(x)
        lp = pose_loss(b.forward_pose(f), target, w, dom, 2.0)
        ld = domain_loss(b.forward_domain(f, lam), dom)
        return lp, ld

    lp, ld = losses()
    (lp + ld).backward()  # what Stage II backpropagates
    grad = param.grad.clone()

    fd = torch.zeros_like(param)
    h = 1e-6
    with torch.no_grad():
        for i in range(param.numel()):
            orig = param.view(-1)[i].item()
            param.view(-1)[i] = orig + h
            lp1, ld1 = losses()
            param.view(-1)[i] = orig - h
            lp0, ld0 = losses()
            param.view(-1)[i] = orig
            fd.view(-1)[i] = (total_loss(lp1, ld1, lam) - total_loss(lp0, ld0, lam)) / (2 * h)
    np.testing.assert_allclose(grad.numpy(), fd.numpy(), rtol=1e-4, atol=1e-9)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="lambda_grl"):
        TrainConfig(lambda_grl=-1)
    with pytest.raises(ConfigError, match="unknown train config keys"):
        TrainConfig.from_dict({"lr": 0.1, "momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig(mode="joint")
    cfg = TrainConfig()
    assert (cfg.lr, cfg.init_batch_size, cfg.init_epochs, cfg.batch_size, cfg.epochs,
            cfg.lambda_grl) == (0.001, 128, 1, 64, 100, 0.0005)


def test_schedule_per_epoch_and_per_batches(toy_loader, toy_bundle):
    cfg = TrainConfig(epochs=2, batch_size=8, frozen_blocks=())
    _, res = run_fidip(toy_bundle, toy_loader, cfg)
    assert res["stages"] == ["STAGE1", "STAGE2", "STAGE1", "STAGE2"]
    cfg = TrainConfig(epochs=2, batch_size=8, stage_granularity="per_n_batches",
                      stage_n_batches=3)
    assert [e for e, _ in cycle_schedule(32, cfg)] == [0, 0, 1, 1]
    assert [len(b) for _, b in cycle_schedule(32, cfg)] == [3, 1, 3, 1]


def test_init_freezes_pose_network_and_counts_steps(toy_loader, toy_bundle):
    recs = toy_loader.index.records
    big = DatasetIndex([recs[i % len(recs)] for i in range(2560)])
    loader = SampleLoader(big, toy_loader.cfg)
    before = checksums(toy_bundle)
    hist = []
    init_domain_classifier(toy_bundle, loader, DatasetIndex([]), TrainConfig(), history=hist)
    after = checksums(toy_bundle)
    assert len(hist) == 20
    assert before["theta_f"] == after["theta_f"] and before["theta_y"] == after["theta_y"]
    assert before["theta_d"] != after["theta_d"]


def test_init_empty_is_config_error(toy_bundle):
    with pytest.raises(ConfigError):
        init_domain_classifier(toy_bundle, DatasetIndex([]), DatasetIndex([]), TrainConfig())


def _domain_accuracy(bundle, loader):
    bundle.eval()
    batch = loader.collate(np.arange(len(loader.index)))
    with torch.no_grad():
        logits = bundle.domain_head(bundle.pooled(bundle.forward_features(batch["images"])))
    return float(((logits > 0).float() == batch["domains"]).float().mean())


def test_init_learns_separable_domains(toy_loader, toy_bundle):
    # dark vs bright backgrounds make the pooled features separable
    cfg = TrainConfig(init_epochs=150, init_batch_size=32, lr=0.01)
    init_domain_classifier(toy_bundle, toy_loader, DatasetIndex([]), cfg)
    assert _domain_accuracy(toy_bundle, toy_loader) >= 0.95


def test_stage_isolation(toy_loader, toy_bundle):
    cfg = TrainConfig(batch_size=8, frozen_blocks=("res1", "res2", "res3"), lambda_grl=0.5)
    batches = [toy_loader.collate(np.arange(i, i + 8)) for i in range(0, 32, 8)]
    c0 = checksums(toy_bundle)
    _, h1 = train_stage1(toy_bundle, batches, cfg)
    c1 = checksums(toy_bundle)
    assert c0["theta_f"] == c1["theta_f"] and c0["theta_y"] == c1["theta_y"]
    assert c0["theta_d"] != c1["theta_d"]
    assert all(h.L_D is not None for h in h1)
    _, h2 = train_stage2(toy_bundle, batches, cfg, real_weight=3.0)
    c2 = checksums(toy_bundle)
    assert c1["theta_d"] == c2["theta_d"]
    for blk in ("res1", "res2", "res3"):
        assert c1[f"theta_f.{blk}"] == c2[f"theta_f.{blk}"]
    assert c1["theta_f.res5"] != c2["theta_f.res5"] and c1["theta_y"] != c2["theta_y"]
    for h in h2:
        assert h.L_total == pytest.approx(h.L_P - 0.5 * h.L_D, abs=1e-9)


def test_stage1_lowers_domain_loss(toy_loader, toy_bundle):
    cfg = TrainConfig(lr=0.01)
    idx = np.arange(len(toy_loader.index))
    held = toy_loader.collate(idx[::2])
    train = [toy_loader.collate(idx[1::2])] * 30

    def ld():
        toy_bundle.eval()
        with torch.no_grad():
            f = toy_bundle.pooled(toy_bundle.forward_features(held["images"]))
            return domain_loss(toy_bundle.domain_head(f), held["domains"]).item()

    before = ld()
    train_stage1(toy_bundle, train, cfg)
    assert ld() < before


def test_stage2_lowers_pose_loss(toy_loader, toy_bundle):
    cfg = TrainConfig(lr=0.003, frozen_blocks=())
    batches = [toy_loader.collate(np.arange(i, i + 16)) for i in (0, 16)]
    full = toy_loader.collate(np.arange(32))

    def lp():
        toy_bundle.eval()
        with torch.no_grad():
            return pose_loss(toy_bundle(full["images"]), full["heatmaps"], full["weights"],
                             full["domains"], 3.0).item()

    before = lp()
    for _ in range(3):  # three epochs
        train_stage2(toy_bundle, batches, cfg, real_weight=3.0)
    assert lp() <= before


def test_default_real_weight_is_inverse_frequency(toy_loader, toy_bundle):
    tr = FiDIPTrainer(toy_bundle, toy_loader, TrainConfig(epochs=1, batch_size=8))
    assert tr.real_weight == 24 / 8


def test_fixed_seed_is_deterministic(toy_loader):
    cfg = TrainConfig(epochs=2, batch_size=8, lambda_grl=0.1, frozen_blocks=())
    _, r1 = run_fidip(make_toy_bundle(), toy_loader, cfg)
    _, r2 = run_fidip(make_toy_bundle(), toy_loader, cfg)
    assert [(x.get("L_P"), x.get("L_D")) for x in r1["report"]] == \
        [(x.get("L_P"), x.get("L_D")) for x in r2["report"]]


def test_lambda_zero_matches_finetune(toy_loader):
    base = dict(epochs=2, batch_size=8, frozen_blocks=("res1",), seed=5)
    a, _ = run_fidip(make_toy_bundle(), toy_loader, TrainConfig(mode="fidip", lambda_grl=0.0,
                                                                **base))
    b, _ = run_fidip(make_toy_bundle(), toy_loader, TrainConfig(mode="finetune", **base))
    ca, cb = checksums(a), checksums(b)
    assert ca["theta_f"] == cb["theta_f"] and ca["theta_y"] == cb["theta_y"]


def test_resume_matches_uninterrupted_run(toy_loader, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=8, lambda_grl=0.1, frozen_blocks=("res1",))
    full, _ = run_fidip(make_toy_bundle(), toy_loader, cfg, out_dir=tmp_path / "a")
    _, part = run_fidip(make_toy_bundle(), toy_loader, cfg, out_dir=tmp_path / "b",
                        stop_after_cycles=1)
    assert not part["finished"] and part["cycles"] == 1
    resumed, res = run_fidip(make_toy_bundle(seed=9), toy_loader, cfg, out_dir=tmp_path / "b",
                             resume=True)
    assert res["finished"]
    assert checksums(resumed) == checksums(full)
    lines = (tmp_path / "b" / "report.jsonl").read_text().splitlines()
    recs = [json.loads(x) for x in lines]
    assert [r["stage"] for r in recs] == ["INIT"] + ["STAGE1", "STAGE2"] * 3
    assert {"cycle", "stage", "L_P", "L_D", "L_total", "lr", "checksums"} <= set(recs[-1])
    assert (tmp_path / "b" / "final.pt").is_file()


def test_resume_with_other_config_refuses(toy_loader, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8)
    run_fidip(make_toy_bundle(), toy_loader, cfg, out_dir=tmp_path, stop_after_cycles=1)
    other = TrainConfig(epochs=2, batch_size=8, lambda_grl=0.01)
    with pytest.raises(ConfigError, match="lambda_grl: 0.0005 != 0.01"):
        run_fidip(make_toy_bundle(), toy_loader, other, out_dir=tmp_path, resume=True)
