import os
import pathlib
import sys

os.environ["DATABASE_URL"] = "sqlite:///./test_energy_lab.db"
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import json

import pytest

from app.config import (
    GraphKind,
    LabConfig,
    config_digest,
    config_schema,
    default_output_dir,
    default_workers,
    load_config,
    parse_config,
)
from app.errors import ConfigError
from app.lab.assembly import build_graph, build_model, comparison_sde_config, micro_run_config, sde_run_config

ROOT = pathlib.Path(__file__).resolve().parents[1]


def test_empty_document_gives_defaults():
    config = parse_config({})
    assert config == LabConfig()
    assert config.graph.kind is GraphKind.COMPLETE
    assert config.sde.initial_energies == [1.0, 1.0]
    assert config.verify.hitting_deltas == [1e-1, 1e-2, 1e-3, 1e-4]


def test_camel_case_keys_are_accepted():
    config = parse_config({"sde": {"tEnd": 2.5, "deltaStop": 0.1}, "micro": {"epsilonLadder": [0.1, 0.3]}})
    assert config.sde.t_end == 2.5
    assert config.sde.delta_stop == 0.1


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="tEnds"):
        parse_config({"sde": {"tEnds": 1.0}})
    with pytest.raises(ConfigError):
        parse_config({"colour": "blue"})


def test_energies_must_be_positive():
    with pytest.raises(ConfigError, match="E_x > 0"):
        parse_config({"sde": {"initialEnergies": [1.0, 0.0]}})
    with pytest.raises(ConfigError):
        parse_config({"micro": {"initialEnergies": []}})


def test_micro_bounds():
    with pytest.raises(ConfigError, match="micro.delta"):
        parse_config({"micro": {"delta": 1.5}})
    with pytest.raises(ConfigError):
        parse_config({"micro": {"epsilon": 0.0}})
    with pytest.raises(ConfigError, match="epsilonMax"):
        parse_config({"micro": {"epsilon": 0.6, "epsilonMax": 0.5}})


def test_graph_kind_requirements():
    with pytest.raises(ConfigError):
        parse_config({"graph": {"kind": "file"}})
    with pytest.raises(ConfigError):
        parse_config({"graph": {"kind": "lattice"}})
    with pytest.raises(ConfigError):
        parse_config({"greenkubo": {"tauMin": 2.0, "tauMax": 1.0}})


def test_hitting_deltas_are_sorted_descending():
    config = parse_config({"verify": {"hittingDeltas": [0.001, 0.1, 0.01]}})
    assert config.verify.hitting_deltas == [0.1, 0.01, 0.001]


def test_digest_is_stable_and_tracks_content():
    first = config_digest(parse_config({"seed": 5}))
    assert first == config_digest(parse_config({"seed": 5}))
    assert first != config_digest(parse_config({"seed": 6}))
    assert len(first) == 64


def test_with_seed_overrides_only_when_given():
    config = parse_config({"seed": 5})
    assert config.with_seed(None) is config
    assert config.with_seed(7).seed == 7
    with pytest.raises(ConfigError):
        config.with_seed(-1)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listed)
    assert load_config(None) == LabConfig()


def test_shipped_default_config_is_valid():
    config = load_config(ROOT / "configs" / "default.json")
    assert not config.verify.slow


def test_shipped_schema_matches_models():
    shipped = json.loads((ROOT / "schemas" / "config.schema.json").read_text())
    generated = config_schema()
    assert set(shipped["properties"]) == set(generated["properties"])


def test_environment_defaults(monkeypatch):
    monkeypatch.setenv("ENERGY_LAB_OUTPUT_DIR", "/tmp/lab-out")
    monkeypatch.setenv("ENERGY_LAB_WORKERS", "4")
    assert default_output_dir() == pathlib.Path("/tmp/lab-out")
    assert default_workers() == 4
    monkeypatch.setenv("ENERGY_LAB_WORKERS", "many")
    assert default_workers() == 1
    monkeypatch.delenv("ENERGY_LAB_OUTPUT_DIR")
    assert default_output_dir() == pathlib.Path("runs")


def test_assembly_builds_lab_objects(tmp_path):
    config = parse_config({"graph": {"kind": "lattice", "latticeDim": 2, "box": [[0, 1], [0, 2]]}, "sde": {"initialEnergies": [1.0] * 6, "tEnd": 0.5}})
    graph = build_graph(config.graph)
    assert graph.n_vertices == 6
    run = sde_run_config(config, graph=graph)
    assert run.config_digest == config_digest(config)
    assert build_model(config.coefficients).is_analytic


def test_assembly_reports_mismatched_energies_as_config_errors():
    config = parse_config({"graph": {"kind": "chain", "n": 3}})
    with pytest.raises(ConfigError, match="sde:"):
        sde_run_config(config)
    with pytest.raises(ConfigError, match="micro:"):
        micro_run_config(config)


def test_comparison_sde_follows_micro_section():
    config = parse_config({"micro": {"tSlow": 0.25, "initialEnergies": [2.0, 0.5]}, "sde": {"dt": 1e-3}})
    graph = build_graph(config.graph)
    run = comparison_sde_config(config, graph=graph, model=build_model(config.coefficients).with_dimension(2))
    assert run.t_end == 0.25
    assert run.initial_energies == (2.0, 0.5)
    assert run.model.d == 2
    with pytest.raises(ConfigError, match="compare:"):
        comparison_sde_config(parse_config({"sde": {"dt": 0.6}, "micro": {"tSlow": 0.5}}), graph=graph, model=build_model(config.coefficients))
