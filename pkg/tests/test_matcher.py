import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from demorph.matcher import (ConfigurationError, ToyBackend, external_embed, get_backend, similarity,
                             toy_embed, write_scores_csv)
from demorph.morph_engine import ContractError


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_similarity_basics():
    e = unit([1, 2, 3])
    assert similarity(e, e) == pytest.approx(1.0)
    assert similarity(e, -e) == pytest.approx(-1.0)
    assert similarity([1, 0, 0], [0, 1, 0]) == 0.0
    with pytest.raises(ContractError):
        similarity([1, 0], [1, 0, 0])


@settings(max_examples=50)
@given(arrays(np.float64, 16, elements=st.floats(-5, 5)), arrays(np.float64, 16, elements=st.floats(-5, 5)))
def test_similarity_symmetric_and_bounded(a, b):
    from demorph.matcher import normalize
    ea, eb = normalize(a), normalize(b)
    s = similarity(ea, eb)
    assert s == similarity(eb, ea)
    assert -1.0 <= s <= 1.0


def test_toy_embed_unit_and_deterministic(faces64):
    img = faces64[0][0]
    e = toy_embed(img)
    assert e.shape == (64,)
    assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_array_equal(e, toy_embed(img.copy()))
    assert similarity(e, toy_embed(img)) == pytest.approx(1.0)


def test_toy_embed_small_perturbation(faces64):
    img = faces64[1][0].copy()
    bumped = img.copy()
    bumped[0, 10, 10] = min(1.0, bumped[0, 10, 10] + 1 / 255)
    # a one-level bump barely moves the embedding (about 0.99999999 here)
    assert similarity(toy_embed(img), toy_embed(bumped)) > 0.99


def test_toy_embed_constant_image():
    e = toy_embed(np.full((3, 32, 32), 0.5, dtype=np.float32))
    assert np.all(np.isfinite(e))
    assert e[0] == 1.0 and np.count_nonzero(e) == 1


def test_distinct_faces_are_separable(faces64):
    embs = [toy_embed(f[0]) for f in faces64]
    sims = [similarity(embs[i], embs[j]) for i in range(len(embs)) for j in range(i + 1, len(embs))]
    assert max(sims) < 0.99


def test_external_path_matches_toy(faces64):
    img = faces64[2][0]
    backend = get_backend("toy")
    assert isinstance(backend, ToyBackend)
    np.testing.assert_allclose(external_embed(img, backend), toy_embed(img), atol=1e-12)


def test_external_embed_normalises():
    class Raw:
        name, dimension = "raw", 3

        def embed(self, image):
            return np.array([3.0, 4.0, 0.0])

    e = external_embed(np.zeros((3, 4, 4), dtype=np.float32), Raw())
    np.testing.assert_allclose(e, [0.6, 0.8, 0.0])


def test_missing_model_file_is_config_error(tmp_path):
    with pytest.raises(ConfigurationError):
        get_backend("arcface", model_path=str(tmp_path / "nope.pt"))
    with pytest.raises(ConfigurationError):
        get_backend("adaface")
    with pytest.raises(ConfigurationError):
        get_backend("unknown")


def test_torchscript_backend(tmp_path, faces64):
    class Net(torch.nn.Module):
        def forward(self, x):
            return x.mean(dim=(2, 3)) * 10

    path = tmp_path / "m.pt"
    torch.jit.script(Net()).save(str(path))
    backend = get_backend("torchscript", model_path=str(path), dimension=3)
    e = external_embed(faces64[0][0], backend)
    assert e.shape == (3,)
    assert np.linalg.norm(e) == pytest.approx(1.0)
    wrong = get_backend("torchscript", model_path=str(path), dimension=5)
    with pytest.raises(ContractError):
        wrong.embed(faces64[0][0])


def test_scores_csv(tmp_path):
    write_scores_csv(tmp_path / "s.csv", [("p1", 0.5, "genuine"), ("p1", 0.1, "impostor")])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "pair_id,score,label"
    assert lines[1] == "p1,0.50000000,genuine"
    with pytest.raises(ContractError):
        write_scores_csv(tmp_path / "t.csv", [("p", 0.1, "other")])
