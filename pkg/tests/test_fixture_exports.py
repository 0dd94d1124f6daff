import filecmp
import logging

import numpy as np
import pytest

from gea.errors import ValidationError
from gea.exports import omega_sweep, pca_2d, project_2d, read_csv, write_csv
from gea.fixture import make_fixture
from gea.model import GEAModel, ModelConfig
from gea.retrieval_eval import evaluate


def test_noise_free_fixture_is_perfectly_separable(tmp_path):
    m = make_fixture(tmp_path, num_identities=5, texts_per_identity=2, dim=16, noise=0.0)
    for rec in m["test"].records:
        f = m["test"].features[rec.sample_id]
        np.testing.assert_array_equal(f.image.global_token, f.text.global_token)
    model = GEAModel(ModelConfig(embed_dim=16, heads=2, fusion_layers=1)).double()
    assert evaluate(m["test"], model).rank1 == 100.0


def test_fixture_size_and_determinism(tmp_path):
    a = make_fixture(tmp_path / "a", seed=4, dim=32)
    make_fixture(tmp_path / "b", seed=4, dim=32)
    assert len(a["train"]) == 128 and a["train"].num_identities == 32
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("features",):
        inner = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub,
                                               inner.common_files, shallow=False)
        assert not mismatch and not errors


def test_generated_features_lean_toward_text(tmp_path):
    m = make_fixture(tmp_path, num_identities=16, texts_per_identity=4, dim=64, nuisance_scale=0.5)["train"]
    glob = lambda kind: np.stack([getattr(m.features[r.sample_id], kind).global_token
                                  for r in m.records]).astype(float)
    ids = m.identities

    def within(x):
        # deviation of each sample from its identity mean
        means = np.stack([x[ids == i].mean(axis=0) for i in range(m.num_identities)])
        return (x - means[ids]).ravel()

    g, t, v = within(glob("generated")), within(glob("text")), within(glob("image"))
    assert np.corrcoef(g, t)[0, 1] > np.corrcoef(g, v)[0, 1] + 0.05


def test_pca_on_planar_points_preserves_distances():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((10, 2))
    out = pca_2d(pts)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-12)
    np.testing.assert_array_equal(pca_2d(pts), out)


def test_pca_collinear_and_degenerate(caplog):
    line = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0], [2.0, 4.0, 4.0]])
    with caplog.at_level(logging.WARNING):
        out = pca_2d(line)
    np.testing.assert_allclose(out[:, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(out[:, 0]), [3.0, 0.0, 3.0], atol=1e-12)
    with caplog.at_level(logging.WARNING):
        same = pca_2d(np.ones((4, 3)))
    assert "degenerate" in caplog.text
    np.testing.assert_array_equal(same, np.zeros((4, 2)))
    with pytest.raises(ValidationError):
        pca_2d(np.ones((2, 3)))


def test_noise_free_mixed_points_sit_on_the_text_image_segment(tmp_path):
    m = make_fixture(tmp_path, num_identities=4, texts_per_identity=2, dim=16, noise=0.0)["test"]
    rows = project_2d(m, omega=0.5)
    pts = {(r[0], r[1]): np.array(r[3:]) for r in rows}
    for rec in m.records:
        t, v, mix = (pts[(rec.sample_id, k)] for k in ("text", "image", "fused"))
        np.testing.assert_allclose(mix, 0.5 * t + 0.5 * v, atol=1e-9)
    assert {r[1] for r in rows} == {"image", "text", "fused"}


def test_convexity_is_preserved_by_projection():
    rng = np.random.default_rng(1)
    t, v = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    w = 0.3
    mix = (1 - w) * t + w * v
    out = pca_2d(np.vstack([t, v, mix]))
    np.testing.assert_allclose(out[12:], (1 - w) * out[:6] + w * out[6:12], atol=1e-12)


def test_omega_sweep_rows(small_fixture):
    _, manifests = small_fixture
    model = GEAModel(ModelConfig(embed_dim=16, heads=2, fusion_layers=1)).double()
    rows = omega_sweep(manifests["val"], model, [0.3, 0.45, 0.6])
    assert [r[0] for r in rows] == [0.3, 0.45, 0.6]
    base = evaluate(manifests["val"], model, 0.0)
    assert omega_sweep(manifests["val"], model, [0.0])[0][1:] == (base.rank1, base.rank5, base.rank10, base.map)
    with pytest.raises(ValidationError):
        omega_sweep(manifests["val"], model, [1.5])


def test_csv_has_schema_column(tmp_path):
    write_csv(tmp_path / "x.csv", ("a", "b"), [(1, 2)])
    assert read_csv(tmp_path / "x.csv") == [{"schema_version": "1", "a": "1", "b": "2"}]
