import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from demorph.data_pipeline import build_training_set
from demorph.denoiser import DenoiserConfig, build
from demorph.diffusion import linear_schedule, to_model_range
from demorph.morph_engine import ContractError
from demorph.sampler import demorph_batch, make_timestep_subsequence, record_seed, sample, sample_batch
from demorph.synthetic import synthetic_pool


class Cheater(torch.nn.Module):
    """Returns the exact noise that explains the current state given a known clean pair."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0 = x0
        self.schedule = schedule

    def forward(self, x, t):
        ab = torch.as_tensor(self.schedule.alpha_bar[t.numpy()], dtype=x.dtype).view(-1, 1, 1, 1)
        return (x[:, :6] - ab.sqrt() * self.x0) / (1 - ab).sqrt()


@pytest.fixture(scope="module")
def sched():
    return linear_schedule()


@pytest.mark.parametrize("T, steps", [(1000, 100), (1000, 1000), (1000, 2), (10, 7), (1, 1)])
def test_subsequence(T, steps):
    seq = make_timestep_subsequence(T, steps)
    assert len(seq) == steps
    assert seq[0] == T and seq[-1] == 1
    assert all(a > b for a, b in zip(seq, seq[1:]))


@settings(max_examples=50)
@given(st.integers(2, 2000), st.data())
def test_subsequence_property(T, data):
    steps = data.draw(st.integers(2, T))
    seq = make_timestep_subsequence(T, steps)
    assert len(set(seq)) == steps and seq[0] == T and seq[-1] == 1


@pytest.mark.parametrize("T, steps", [(10, 11), (10, 1), (10, 0), (0, 1)])
def test_subsequence_contract(T, steps):
    with pytest.raises(ContractError):
        make_timestep_subsequence(T, steps)


def test_record_seed_distinct():
    seeds = {record_seed(0, k) for k in range(1000)}
    assert len(seeds) == 1000
    assert record_seed(5, 3) == record_seed(5, 3)


@pytest.mark.parametrize("steps", [1000, 100, 10])
def test_cheating_denoiser_recovers_pair(sched, steps):
    g = torch.Generator().manual_seed(0)
    pair = torch.rand(2, 6, 16, 16, generator=g)
    morph = 0.5 * (pair[:, :3] + pair[:, 3:])
    out = sample_batch(Cheater(to_model_range(pair), sched), morph, sched, steps, [1, 2])
    assert torch.max(torch.abs(out - pair)).item() <= 0.05


def test_determinism_and_batch_independence(sched):
    model = build(DenoiserConfig(base_width=8, depth=2, time_embed_dim=16, resolution=16), 0).eval()
    morphs = torch.rand(3, 3, 16, 16, generator=torch.Generator().manual_seed(1))
    a = sample_batch(model, morphs, sched, 5, [7, 8, 9])
    b = sample_batch(model, morphs, sched, 5, [7, 8, 9])
    assert torch.equal(a, b)
    solo = sample_batch(model, morphs[1:2], sched, 5, [8])
    torch.testing.assert_close(solo[0], a[1], rtol=1e-5, atol=1e-5)
    c = sample_batch(model, morphs, sched, 5, [7, 8, 10])
    assert not torch.equal(a[2], c[2])
    assert a.min() >= 0 and a.max() <= 1
    beta = sample_batch(model, morphs, sched, 5, [7, 8, 9], variance="beta")
    assert beta.shape == a.shape


def test_sample_contracts(sched):
    model = build(DenoiserConfig(base_width=8, depth=2, time_embed_dim=16, resolution=16), 0).eval()
    with pytest.raises(ContractError):
        sample(model, np.zeros((3, 32, 32), dtype=np.float32), sched, 5)
    with pytest.raises(ContractError):
        sample_batch(model, torch.zeros(2, 3, 16, 16), sched, 5, [1])
    with pytest.raises(ContractError):
        sample_batch(model, torch.zeros(1, 3, 16, 16), sched, 5, [1], variance="other")
    o1, o2 = sample(model, np.zeros((3, 16, 16), dtype=np.float32), sched, 3)
    assert o1.shape == o2.shape == (3, 16, 16)


def test_demorph_batch_skips_bad_records(tmp_path, sched, caplog):
    manifest = build_training_set(synthetic_pool(4, 16, seed=0), 3, seed=0, out_dir=tmp_path / "data")
    bad = manifest.resolve(manifest.records[1].morph_path)
    bad.write_bytes(b"corrupt")
    model = build(DenoiserConfig(base_width=8, depth=2, time_embed_dim=16, resolution=16), 0).eval()
    out = tmp_path / "out"
    results = demorph_batch(model, manifest, sched, 4, seed=3, out_dir=out, split="train", batch_size=2)
    assert len(results) == 2
    assert "skipping" in caplog.text
    rows = [json.loads(line) for line in (out / "index.jsonl").read_text().splitlines()]
    assert [r["morph_path"] for r in rows] == [manifest.records[0].morph_path, manifest.records[2].morph_path]
    assert rows[1]["seed"] == record_seed(3, 2) and rows[0]["steps"] == 4
    assert (out / rows[0]["out1_path"]).is_file()
    again = demorph_batch(model, manifest, sched, 4, seed=3, split="train", batch_size=1)
    for (_, a1, a2), (_, b1, b2) in zip(results, again):
        np.testing.assert_allclose(a1, b1, atol=1e-5)
        np.testing.assert_allclose(a2, b2, atol=1e-5)

