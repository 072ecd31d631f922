import json
import math

import numpy as np
import pytest

from cifvi import autodiff as ad
from cifvi.autodiff import Parameter
from cifvi.bijections import Compose
from cifvi.cif import CifStack, FlowPosterior, GaussianBase, NonFiniteError
from cifvi.distributions import make_rng
from cifvi.targets import GaussianTarget
from cifvi.train import (AdamState, Config, ConfigError, EarlyStopping, Experiment, adam_step, build_model,
                         clip_global_norm, global_norm, matched_flow_width, posterior_parameter_count,
                         restore, train)


def small_mog(**overrides) -> Config:
    raw = {"seed": 3, "flow": {"layers": 2, "hidden": [8, 8]},
           "optim": {"max_epochs": 5, "samples_per_step": 50}}
    for key, value in overrides.items():
        raw.setdefault(key, {}).update(value) if isinstance(value, dict) else raw.__setitem__(key, value)
    return Config.from_dict(raw)


def test_adam_examples():
    p = Parameter(np.zeros(1))
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.ones(1)], 1e-3)
    assert abs(p.data[0] - (-1e-3 / (1 + 1e-8))) < 1e-15
    assert abs(p.data[0] - (-0.000999999990)) < 1e-12
    after_one = abs(p.data[0])
    adam_step(state, [p], [-np.ones(1)], 1e-3)
    assert abs(p.data[0]) < after_one

    q = Parameter(np.array([0.5, -2.0]))
    state = AdamState.for_params([q])
    state.m[0][:] = 1.0
    state.v[0][:] = 4.0
    adam_step(state, [q], [np.zeros(2)], 1e-3)
    assert np.allclose(state.m[0], 0.9) and np.allclose(state.v[0], 4 * 0.999)
    z = Parameter(np.array([0.5, -2.0]))
    fresh = AdamState.for_params([z])
    adam_step(fresh, [z], [np.zeros(2)], 1e-3)
    assert np.array_equal(z.data, [0.5, -2.0])


def test_adam_skips_non_finite_gradients():
    p = Parameter(np.ones(2))
    state = AdamState.for_params([p])
    assert not adam_step(state, [p], [np.array([1.0, np.nan])], 1e-3)
    assert np.array_equal(p.data, np.ones(2)) and state.step == 0 and state.aborted == 1
    assert adam_step(state, [p], [np.ones(2)], 1e-3) and state.consecutive_aborts == 0
    with pytest.raises(ad.ShapeError):
        adam_step(state, [p], [np.ones(3)], 1e-3)


def test_clipping():
    g = [np.array([6.0, 0.0]), np.array([[8.0]])]
    clipped = clip_global_norm(g, 5.0)
    assert abs(global_norm(clipped) - 5.0) < 1e-12
    assert np.allclose(clipped[0], [3.0, 0.0]) and np.allclose(clipped[1], [[4.0]])
    small = [np.array([3.0])]
    assert clip_global_norm(small, 5.0)[0] is small[0]
    with pytest.raises(ValueError):
        clip_global_norm(g, 0.0)


def test_early_stopping_patience():
    stopper = EarlyStopping(50)
    halted = None
    for epoch in range(1, 200):
        metric = -abs(epoch - 10)
        if stopper.update(epoch, metric):
            halted = epoch
            break
    assert halted == 60 and stopper.best_epoch == 10 and stopper.best_metric == 0


def test_config_is_strict(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        Config.from_dict({"sede": 1})
    with pytest.raises(ConfigError, match="unknown keys in 'optim'"):
        Config.from_dict({"optim": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError, match="batch norm"):
        Config.from_dict({"cif": {"enabled": True}, "flow": {"batch_norm": True}})
    with pytest.raises(ConfigError, match="optim.lr"):
        Config.from_dict({"optim": {"lr": 0}})
    with pytest.raises(ConfigError, match="data_dir"):
        Config.from_dict({"kind": "image"})
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        Config.from_json(path)
    config = small_mog(cif={"enabled": True})
    assert Config.from_dict(json.loads(json.dumps(config.to_dict()))) == config


def test_gaussian_posterior_reaches_zero_kl():
    config = Config.from_dict({"seed": 1, "flow": {"layers": 0},
                               "optim": {"max_epochs": 2000, "samples_per_step": 200, "lr": 1e-2}})
    base = GaussianBase(2, 0.0, trainable_std=True, trainable_mean=True, isotropic=False)
    posterior = FlowPosterior(base, Compose([], dim=2))
    exp = Experiment(config, posterior, GaussianTarget([1.0, -0.5], [0.7, 1.3]))
    result = train(config, experiment=exp)
    final = np.mean([m["elbo_mean"] for m in result.metrics[-50:]])
    assert abs(final) < 0.02


def test_training_is_deterministic_and_logged(tmp_path):
    config = small_mog(cif={"enabled": True})
    a = train(config, tmp_path / "a")
    b = train(config, tmp_path / "b")
    strip = lambda ms: [{k: v for k, v in m.items() if k != "wall_s"} for m in ms]  # noqa: E731
    assert strip(a.metrics) == strip(b.metrics)
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2, 3, 4, 5]
    assert set(json.loads(lines[0])) == {"epoch", "elbo_mean", "elbo_se", "wall_s"}


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    config = small_mog(cif={"enabled": True}, target={"sigma0_trainable": True})
    result = train(config, tmp_path)
    exp, doc = restore(tmp_path / "checkpoint.json")
    assert doc["epoch"] == 5 and doc["optimizer"]["step"] == 5
    for name, value in result.experiment.state_dict().items():
        assert np.array_equal(exp.state_dict()[name], value)
    v1 = result.experiment.posterior.elbo(result.experiment.target, rng=make_rng(7), n=100).data
    v2 = exp.posterior.elbo(exp.target, rng=make_rng(7), n=100).data
    assert np.array_equal(v1, v2)
    m = doc["optimizer"]["m"]
    assert set(m) == set(result.experiment.named_parameters(include_frozen=False))


def test_clip_norm_bounds_every_step(monkeypatch):
    import cifvi.train as tr
    seen = []
    real = tr.adam_step

    def spy(state, params, grads, lr):
        seen.append(global_norm(grads))
        return real(state, params, grads, lr)

    monkeypatch.setattr(tr, "adam_step", spy)
    train(small_mog(optim={"clip_norm": 0.05}))
    assert len(seen) == 5 and max(seen) <= 0.05 + 1e-9


def test_persistent_failures_terminate(monkeypatch):
    import cifvi.train as tr
    monkeypatch.setattr(tr, "MAX_CONSECUTIVE_ABORTS", 3)
    config = small_mog(optim={"max_epochs": 50})
    exp = build_model(config)

    class Broken:
        def log_joint(self, x, z):
            return ad.log(ad.sum(ad.as_tensor(z), axis=-1) * 0.0)

    exp.target = Broken()
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        train(config, experiment=exp)


def test_builders():
    cif = small_mog(cif={"enabled": True})
    assert isinstance(build_model(cif).posterior, CifStack)
    baseline = small_mog(flow={"batch_norm": True})
    width = matched_flow_width(cif, baseline)
    assert posterior_parameter_count(baseline, [width] * 2) >= posterior_parameter_count(cif)
    assert posterior_parameter_count(baseline, [width - 1] * 2) < posterior_parameter_count(cif)
    assert math.isclose(build_model(cif).posterior.base.log_std.data[0], 0.0)


def test_image_training_uses_early_stopping(tmp_path, rng):
    from cifvi.data import write_idx
    images = (rng.random((40, 28, 28)) * 255).astype(np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", images)
    write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", images[:10])
    config = Config.from_dict({
        "kind": "image", "target": {"data_dir": str(tmp_path), "n_z": 2, "decoder_hidden": [8]},
        "flow": {"layers": 1, "hidden": [8], "encoder_hidden": [8]},
        "cif": {"enabled": True, "u_dim": 2, "hidden": [6], "r_feature_dim": 3},
        "optim": {"max_epochs": 40, "batch_size": 12, "patience": 3}})
    result = train(config, tmp_path / "run")
    vals = [m["val_elbo"] for m in result.metrics]
    assert result.best_metric == max(vals)
    assert len(vals) - 1 - int(np.argmax(vals)) <= 3
    exp, _ = restore(tmp_path / "run" / "checkpoint.json")
    assert exp.dataset.dim == 49 and len(exp.dataset.val) == 4
