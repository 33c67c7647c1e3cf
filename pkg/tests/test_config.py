import math

import pytest

from stfmm.config import ConfigError, RunConfig


def test_roundtrip(tmp_path):
    cfg = RunConfig(ranks=2, workers=3, threshold=float("inf"), slices=4, restart=20)
    p = tmp_path / "c.json"
    cfg.save(p)
    back = RunConfig.load(p)
    assert back == cfg and math.isinf(back.threshold)
    assert '"inf"' in cfg.dumps()


@pytest.mark.parametrize("kw", [
    {"n_max": 0}, {"timesteps": 1.5}, {"tol": -1.0}, {"alpha": float("nan")},
    {"transport": "mpi"}, {"slices": 99}, {"slices": 2, "ranks": 4}, {"threshold": -1.0},
    {"workers": 0, "threshold": float("inf")}, {"quadrature": {"identical": 0}}, {"restart": 0},
])
def test_invalid(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_unknown_key_and_bad_json():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nmax": 3})
    with pytest.raises(ConfigError):
        RunConfig.loads("{not json")
    with pytest.raises(ConfigError):
        RunConfig.loads("[1, 2]")


def test_override_and_derived():
    cfg = RunConfig().override(m_t=4, ranks=None, slices=4)
    assert cfg.m_t == 4 and cfg.ranks == 1
    assert cfg.slice_bounds() == (0, 4, 8, 12, 16)
    assert cfg.expansion_orders().m_t == 4
    assert cfg.quadrature_spec().identical == 8
    assert cfg.build_mesh().n_dofs == 3072
