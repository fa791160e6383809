import struct

import numpy as np
import pytest

from openclinical import backbone, io, openmax, recommender
from openclinical.backbone import BackboneConfig
from openclinical.domain import ExamKind
from openclinical.model import OpenClinicalModel
from openclinical.recommender import RecommenderConfig


def test_param_container_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"b.W": rng.standard_normal((3, 4)), "a.b": rng.standard_normal(4), "s": np.array(2.5)}
    io.save_params(tmp_path / "p.bin", params, kind="test", seed=4)
    back, head = io.load_params(tmp_path / "p.bin")
    assert list(back) == list(params)
    assert all(back[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes() for k in params)
    assert head["kind"] == "test" and head["seed"] == 4


def test_param_container_layout(tmp_path):
    io.save_params(tmp_path / "p.bin", {"x": np.array([1.0, -2.0])})
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:8] == io.MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 + n :] == struct.pack("<2d", 1.0, -2.0)


def test_param_container_rejects_damage(tmp_path):
    io.save_params(tmp_path / "p.bin", {"x": np.zeros(4)})
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        io.load_params(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        io.load_params(tmp_path / "x.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ValueError, match="not a parameter"):
        io.load_params(tmp_path / "m.bin")


def small_model(width=3):
    d = 13 * width + 13
    bcfg = BackboneConfig(input_dim=d, encoder_widths=(6, 4), classifier_widths=(4, 3), seed=2)
    m = OpenClinicalModel(width, bcfg, backbone.init_params(bcfg))
    rng = np.random.default_rng(0)
    X = rng.standard_normal((60, d))
    emb = m.outputs(X).embedding
    m.calibration = openmax.calibrate([emb[:30], emb[30:]], n_centers=2, tail_size=5, seed=0)
    m.recommender_cfg = RecommenderConfig(width=width, hidden=3, lstm_layers=1, predictor_widths=(5,))
    m.recommender_params = recommender.init_params(m.recommender_cfg)
    return m


def test_model_directory_roundtrip(tmp_path):
    m = small_model()
    m.save(tmp_path)
    back = OpenClinicalModel.load(tmp_path)
    assert back.backbone_cfg == m.backbone_cfg and back.recommender_cfg == m.recommender_cfg
    rows = {ExamKind.Base: np.ones(3), ExamKind.MRI: np.linspace(0, 1, 3)}
    p1, a1 = m.predict(rows)
    p2, a2 = back.predict(rows)
    assert p1.tobytes() == p2.tobytes() and a1.tobytes() == a2.tobytes()
    assert abs(p1.sum() - 1.0) < 1e-12 and a1.shape == (12,)
    m.save(tmp_path / "again")
    for f in ("backbone.bin", "openmax.json", "recommender.bin"):
        assert (tmp_path / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_model_without_later_stages(tmp_path):
    m = small_model()
    m.calibration = None
    m.recommender_params = None
    m.save(tmp_path)
    back = OpenClinicalModel.load(tmp_path)
    assert back.calibration is None and back.recommend({ExamKind.Base: np.ones(3)}, [0.2, 0.3, 0.5]).tolist() == [0.0] * 12
    with pytest.raises(RuntimeError):
        back.predict({ExamKind.Base: np.ones(3)})
