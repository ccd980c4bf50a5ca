import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psfkit.config import ConfigError, ExperimentConfig, advdiff_defaults


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.psf.tau == 3.0 and cfg.psf.eps_V == 1e-5 and 1 / cfg.psf.eps_Sigma == pytest.approx(20)
    assert cfg.spdfix.eps_flip == -0.1 and cfg.psf.k_n == 10 and cfg.psf.c_rbf == 0.5
    assert advdiff_defaults().psf.c_rbf == 3.0
    assert (cfg.grid.nx, cfg.grid.ny) == (33, 33)
    cfg.validate()


def test_round_trip(tmp_path):
    cfg = advdiff_defaults()
    cfg.sweep.taus = [2.0, 5.0]
    cfg.advdiff.noise = 12.5
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json(indent=1))
    assert ExperimentConfig.load(path) == cfg


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 10), st.integers(2, 100), st.integers(0, 50), st.floats(-0.99, 0.0))
def test_round_trip_property(tau, nx, n_b, eps_flip):
    cfg = ExperimentConfig()
    cfg.psf.tau, cfg.grid.nx, cfg.psf.n_b, cfg.spdfix.eps_flip = tau, nx, n_b, eps_flip
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    b.solver.seed = 1
    assert a.config_hash() != b.config_hash()


@pytest.mark.parametrize("patch,path", [
    ({"grid": {"nx": 1}}, "grid.nx"),
    ({"psf": {"tau": -1}}, "psf.tau"),
    ({"psf": {"n_b": 2.5}}, "psf.n_b"),
    ({"spdfix": {"eps_flip": 0.2}}, "spdfix.eps_flip"),
    ({"operator": "heat"}, "operator"),
    ({"hmatrix": {"colour": 1}}, "hmatrix.colour"),
    ({"sweep": {"tolerances": [0.1, 2.0]}}, "sweep.tolerances"),
    ({"blur": {"L": "wide"}}, "blur.L"),
    ({"grid": 3}, "grid"),
])
def test_validation_names_field(patch, path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(patch)
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_bad_json():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_partial_dict_keeps_defaults():
    cfg = ExperimentConfig.from_dict({"psf": {"n_b": 7}})
    assert cfg.psf.n_b == 7 and cfg.psf.tau == 3.0
    assert json.loads(cfg.to_json())["psf"]["n_b"] == 7
