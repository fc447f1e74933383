import warnings

import numpy as np
import pytest

from secantlab.data import preset
from secantlab.errors import ConfigError, IntegrityError, NumericalError
from secantlab.net import NetSpec, SecantNet
from secantlab.trainer import (Checkpoint, OptimizerState, TrainConfig, ema_update, load_checkpoint,
                               optimizer_step, save_checkpoint, train)

SMALL = dict(hidden_dims=(16, 16), num_frequencies=4, embed_dim=8, batch_size=32)


def test_adam_zero_grad_keeps_params():
    new, p = optimizer_step(OptimizerState.zeros(2), np.array([1.0, 2.0]), np.zeros(2), 0.1)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_adam_zero_grad_moments_decay():
    st = OptimizerState(np.array([0.5]), np.array([0.25]), 3)
    new, _ = optimizer_step(st, np.array([1.0]), np.array([0.0]), 0.1)
    assert new.m[0] == pytest.approx(0.45) and new.v[0] == pytest.approx(0.24975)
    assert new.k == 4


def test_adam_first_step_magnitude_is_lr():
    for g in (3.7, -0.02):
        _, p = optimizer_step(OptimizerState.zeros(1), np.array([0.0]), np.array([g]), 0.01)
        assert abs(p[0]) == pytest.approx(0.01, rel=1e-6)


def test_adam_second_step_not_larger():
    st, p1 = optimizer_step(OptimizerState.zeros(1), np.array([0.0]), np.array([1.0]), 0.01)
    _, p2 = optimizer_step(st, p1, np.array([1.0]), 0.01)
    assert abs(p2[0] - p1[0]) <= 0.01 + 1e-15


def test_ema_examples():
    assert ema_update(np.array([0.0]), np.array([1.0]), 0.5)[0] == 0.5
    np.testing.assert_array_equal(ema_update(np.array([3.0]), np.array([1.0]), 0.0), [1.0])
    ema = np.array([0.0])
    for _ in range(200):
        ema = ema_update(ema, np.array([1.0]), 0.9)
    assert abs(ema[0] - 1.0) == pytest.approx(0.9**200)
    with pytest.raises(ConfigError):
        ema_update(ema, ema, 1.0)


def test_zero_iterations_returns_initial_params():
    cfg = TrainConfig(iterations=0, **SMALL)
    res = train(cfg)
    spec = res.checkpoint.spec
    np.testing.assert_array_equal(res.checkpoint.params, SecantNet(spec, seed=cfg.seed).params)
    assert res.metrics.rows == []


def test_determinism_and_metrics(tmp_path):
    cfg = TrainConfig(loss="sdei", teacher="analytic", iterations=15, **SMALL)
    a = train(cfg, run_dir=tmp_path / "a")
    train(cfg, run_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "ckpt-final.bin").read_bytes() == (tmp_path / "b" / "ckpt-final.bin").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "iteration,loss,target_std,n_forward,n_backward,wall_ms"
    assert set(a.metrics.column("n_forward")) == {3.0}


def test_snapshot_freshness_each_iteration():
    seen = []
    cfg = TrainConfig(loss="stee", bidirectional=True, iterations=4, **SMALL)

    def cb(it, out):
        seen.append(out.value)

    res = train(cfg, callback=cb, keep_outputs=True)
    assert len(res.outputs) == 4
    # Iteration 0 uses the initial parameters as both student and snapshot.
    from secantlab.losses import compute_loss, sample_loss_times
    from secantlab.data import make_rng, sample_batch
    net = SecantNet(res.checkpoint.spec, seed=cfg.seed)
    batch = sample_batch(preset("ring8"), 32, 0.0, (cfg.seed, 1, 0))
    times = sample_loss_times(cfg.loss_kind, cfg.policy, cfg.ip, cfg.r_sampling, make_rng((cfg.seed, 2, 0)), 32)
    out = compute_loss(cfg.loss_kind, net, net.snapshot(), None, batch, cfg.ip, times)
    assert out.value == seen[0]


@pytest.mark.xfail(strict=True, reason="target -x/(1-t) is singular at the data end; a smooth "
                   "net does not reach 1e-3 in 2k steps (see decisions ledger)")
def test_point_mass_diffusion_reaches_1e3_in_2k_iterations():
    res = train(TrainConfig(loss="diff", dataset="point", iterations=2000))
    assert np.mean(res.metrics.column("loss")[-100:]) < 1e-3


def test_point_mass_diffusion_loss_decreases():
    res = train(TrainConfig(loss="diff", dataset="point", iterations=600, lr=1e-3, **SMALL))
    loss = res.metrics.column("loss")
    assert loss[-100:].mean() < 0.2 * loss[:20].mean()


def test_non_finite_loss_dumps_batch(tmp_path):
    cfg = TrainConfig(iterations=3, lr=1e300, **SMALL)
    with pytest.raises(NumericalError, match="iteration"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train(cfg, run_dir=tmp_path)
    assert list(tmp_path.glob("nonfinite-*.npz"))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(loss="sdei")  # needs a teacher
    with pytest.raises(ConfigError):
        TrainConfig(loss="stee", teacher="analytic")
    with pytest.raises(ConfigError):
        TrainConfig(loss="sdee", teacher="analytic", t_mode="discrete")
    with pytest.raises(ConfigError):
        TrainConfig(ema_rate=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(loss="stei", t_mode="discrete", bidirectional=True)


def _ckpt():
    spec = NetSpec(2, (8,), num_frequencies=2, embed_dim=4)
    net = SecantNet(spec, seed=0)
    opt = OptimizerState(np.arange(spec.num_params, dtype=float), np.ones(spec.num_params), 5)
    return Checkpoint(spec, net.params, net.params * 0.5, opt, 5, {"lr": 0.1}, {"seed": 0}, {"bidirectional": True})


def test_checkpoint_round_trip(tmp_path):
    ck = _ckpt()
    save_checkpoint(ck, tmp_path / "a.bin")
    back = load_checkpoint(tmp_path / "a.bin")
    np.testing.assert_array_equal(back.params, ck.params)
    np.testing.assert_array_equal(back.opt.m, ck.opt.m)
    assert back.spec == ck.spec and back.iteration == 5 and back.bidirectional
    save_checkpoint(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert [p.name for p in tmp_path.iterdir()] and not list(tmp_path.glob(".*"))


def test_checkpoint_integrity(tmp_path):
    data = _ckpt().to_bytes()
    path = tmp_path / "c.bin"
    path.write_bytes(data[:-40])
    with pytest.raises(IntegrityError, match="offset"):
        load_checkpoint(path)
    bad = bytearray(data)
    bad[-50] ^= 0xFF
    path.write_bytes(bytes(bad))
    with pytest.raises(IntegrityError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"XX" + data[2:])
    with pytest.raises(IntegrityError, match="offset 0"):
        load_checkpoint(path)
    ver = bytearray(data)
    ver[8] = 9
    path.write_bytes(bytes(ver))
    with pytest.raises(IntegrityError, match="version"):
        load_checkpoint(path)


def test_checkpoint_architecture_warning(tmp_path):
    save_checkpoint(_ckpt(), tmp_path / "d.bin")
    with pytest.warns(UserWarning, match="architecture"):
        load_checkpoint(tmp_path / "d.bin", NetSpec(2, (16,), num_frequencies=2, embed_dim=4))


def test_distill_from_tangent_checkpoint(tmp_path):
    tan = train(TrainConfig(iterations=5, **SMALL), run_dir=tmp_path / "tan")
    path = str(tmp_path / "tan" / "ckpt-final.bin")
    cfg = TrainConfig(loss="sdei", teacher=path, init=path, iterations=0, **SMALL)
    res = train(cfg)
    net = res.checkpoint.net()
    tnet = tan.checkpoint.net(use_ema=True)
    x, t = np.random.default_rng(0).normal(size=(20, 2)), np.linspace(0, 1, 20)
    np.testing.assert_array_equal(net(x, t, t), tnet(x, t))
    train(TrainConfig(loss="sdei", teacher=path, init=path, iterations=3, **SMALL))
