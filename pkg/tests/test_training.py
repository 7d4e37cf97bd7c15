import pytest
import torch

from demorph.data_pipeline import build_training_set
from demorph.denoiser import DenoiserConfig, build
from demorph.diffusion import linear_schedule
from demorph.morph_engine import ContractError
from demorph.synthetic import synthetic_pool
from demorph.training import (OptimizerConfig, TrainState, inference_model_from_checkpoint, load_checkpoint,
                              restore_state, save_checkpoint, train_loop)

SMALL = DenoiserConfig(base_width=8, depth=2, time_embed_dim=16, resolution=16)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return build_training_set(synthetic_pool(6, 16, seed=0), 4, seed=0, out_dir=tmp_path_factory.mktemp("d"))


def _state(**optim):
    return TrainState(build(SMALL, 0), OptimizerConfig(**{"batch_size": 2, **optim}), seed=0)


def test_loss_decreases(manifest):
    state = _state(lr=3e-3)
    log = train_loop(state, manifest, linear_schedule(), 40)
    assert len(log) == 40 and state.epoch == 40
    first = sum(r["mean_loss"] for r in log[:5]) / 5
    last = sum(r["mean_loss"] for r in log[-5:]) / 5
    assert last < 0.5 * first


def test_deterministic(manifest):
    a, b = _state(), _state()
    train_loop(a, manifest, linear_schedule(), 2)
    train_loop(b, manifest, linear_schedule(), 2)
    assert [r["mean_loss"] for r in a.log] == [r["mean_loss"] for r in b.log]


def test_checkpoint_round_trip(manifest, tmp_path):
    state = _state(ema_decay=0.9, noise_draws=2)
    sched = linear_schedule()
    train_loop(state, manifest, sched, 2)
    save_checkpoint(tmp_path / "c.pt", state, sched, {"note": 1})
    payload = load_checkpoint(tmp_path / "c.pt")
    assert payload["epoch"] == 2 and payload["schedule_hash"] == sched.digest()
    assert payload["extra"] == {"note": 1}
    restored = restore_state(payload)
    assert restored.optim_config == state.optim_config
    for k, v in state.model.state_dict().items():
        assert torch.equal(v, restored.model.state_dict()[k])
    infer = inference_model_from_checkpoint(payload)
    for k, v in state.ema.state_dict().items():
        assert torch.equal(v, infer.state_dict()[k])
    train_loop(state, manifest, sched, 1)
    train_loop(restored, manifest, sched, 1)
    assert state.log[-1]["mean_loss"] == restored.log[-1]["mean_loss"]


def test_ema_tracks_slowly(manifest):
    state = _state(ema_decay=0.99)
    before = [p.clone() for p in state.ema.parameters()]
    train_loop(state, manifest, linear_schedule(), 1)
    moved_model = sum((p - b).abs().sum() for p, b in zip(state.model.parameters(), before))
    moved_ema = sum((p - b).abs().sum() for p, b in zip(state.ema.parameters(), before))
    assert 0 < moved_ema < moved_model


def test_rejects_bad_settings(manifest, tmp_path):
    with pytest.raises(ContractError):
        train_loop(_state(noise_draws=0), manifest, linear_schedule(), 1)
    with pytest.raises(ContractError):
        train_loop(_state(), manifest, linear_schedule(500), 1)
    with pytest.raises(ContractError):
        train_loop(_state(), manifest, linear_schedule(), -1)
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.pt")
