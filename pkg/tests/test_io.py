import json

import numpy as np
import pytest

from quasijac.io import (
    ConfigError,
    PipelineConfig,
    SpaceConfig,
    build_problem,
    config_hash,
    parse_config,
    read_csv_rows,
    read_dataset_csv,
    wall_clock,
    write_csv,
    write_dataset_csv,
    write_json,
)
from quasijac.models import Dataset


def test_space_bounds_exclusive():
    with pytest.raises(ValueError):
        SpaceConfig(lower=[0, 0], upper=[1, 1], halfwidth=1.0)
    with pytest.raises(ValueError):
        SpaceConfig()
    assert SpaceConfig(halfwidth=0.5).halfwidth == 0.5


def test_pipeline_needs_one_source():
    with pytest.raises(ConfigError):
        parse_config(PipelineConfig, {"model": "nls_weak"})
    with pytest.raises(ConfigError):
        parse_config(PipelineConfig, {"dataset": "x.csv", "dgp": {}, "space": {"lower": [0, 0], "upper": [1, 1]}})
    with pytest.raises(ConfigError):
        parse_config(PipelineConfig, {"dataset": "x.csv", "space": {"halfwidth": 1.0}})


def test_config_hash_stable_and_sensitive():
    a = parse_config(PipelineConfig, {"dgp": {"seed": 1}, "space": {"halfwidth": 1.0}})
    b = parse_config(PipelineConfig, {"space": {"halfwidth": 1.0}, "dgp": {"seed": 1}})
    c = parse_config(PipelineConfig, {"dgp": {"seed": 2}, "space": {"halfwidth": 1.0}})
    assert config_hash(a) == config_hash(b) != config_hash(c)
    assert len(config_hash(a)) == 16


def test_build_problem_errors(tmp_path):
    cfg = parse_config(PipelineConfig, {"model": "nope", "dgp": {}, "space": {"halfwidth": 1.0}})
    with pytest.raises(ConfigError):
        build_problem(cfg)
    cfg = parse_config(PipelineConfig, {"dgp": {}, "space": {"lower": [0, 0, 0], "upper": [1, 1, 1], "nuisance_indices": [1, 2]}})
    with pytest.raises(ConfigError):
        build_problem(cfg)
    path = tmp_path / "d.csv"
    path.write_text("y,x1\n1,2\n3,4\n")
    cfg = parse_config(PipelineConfig, {"dataset": str(path), "space": {"lower": [0, 0], "upper": [1, 1]}})
    with pytest.raises(ConfigError, match="x2"):
        build_problem(cfg)


def test_dataset_round_trip(tmp_path):
    data = Dataset({"a": np.array([0.1, 1 / 3, -2e-17]), "b": np.array([1.0, 2.0, 3.0])})
    write_dataset_csv(tmp_path / "d.csv", data)
    back = read_dataset_csv(tmp_path / "d.csv")
    for k in ("a", "b"):
        np.testing.assert_array_equal(back[k], data[k])


@pytest.mark.parametrize("text", ["a,b\n", "a,b\n1,x\n", "a,b\n1\n", "a,b\n1,2\n"])
def test_dataset_malformed(tmp_path, text):
    (tmp_path / "d.csv").write_text(text)
    with pytest.raises(ConfigError):
        read_dataset_csv(tmp_path / "d.csv")


def test_csv_and_json_stamps(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert wall_clock() == "1970-01-01T00:00:00+00:00"
    prov = {"tool": "quasijac", "seed": 1, "wall_clock": wall_clock(), "config": {}}
    write_csv(tmp_path / "t.csv", ["x", "flag", "missing"], [[0.5, True, None], [float("nan"), False, 2]], prov)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("# provenance: ") and "wall_clock" not in lines[0]
    assert lines[1] == "# wall_clock: 1970-01-01T00:00:00+00:00"
    header, rows = read_csv_rows(tmp_path / "t.csv")
    assert header == ["x", "flag", "missing"] and rows == [["0.5", "true", ""], ["nan", "false", "2"]]
    write_json(tmp_path / "t.json", {"m": np.eye(2), "k": np.int64(3)}, prov)
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["m"] == [[1.0, 0.0], [0.0, 1.0]] and doc["k"] == 3 and doc["provenance"]["seed"] == 1
