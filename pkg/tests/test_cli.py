import json
import logging

import numpy as np
import pytest

from sectflow.cache import Cache
from sectflow.calibration import CalibrationFile, CalibrationSettings, calibrate
from sectflow.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from sectflow.config import OUT_ENV, RunConfig, load_config, parse_config
from sectflow.errors import ConfigurationError, DependencyError
from sectflow.flow import lorenz63
from sectflow.parallel import parallel_map
from sectflow.scenarios import cached_pressure
from sectflow.pressure import shift_bundle
from sectflow.shift import ShiftSystem

SMALL_CAL = """
[calibration]
pool = 120
norm_pool = 200
cone_trials = 2000
segments = 30
segment_length = 20
"""


# ---------------------------------------------------------------- config

def test_roundtrip_ini():
    cfg = RunConfig()
    back = parse_config(cfg.to_ini())
    assert back.to_dict() == cfg.to_dict()
    assert back.hash == cfg.hash


def test_unknown_keys_and_sections_are_reported():
    with pytest.raises(ConfigurationError, match="unknown key 'poool'"):
        parse_config("[pressure]\npoool = 3\n")
    with pytest.raises(ConfigurationError, match="unknown section"):
        parse_config("[presure]\npool = 3\n")
    with pytest.raises(ConfigurationError, match="bad value"):
        parse_config("[pressure]\npool = many\n")
    with pytest.raises(ConfigurationError, match="schema"):
        parse_config("[run]\nschema = 7\n")


def test_hash_tracks_results_not_locations():
    a = parse_config("[run]\nout = /tmp/a\nworkers = 3\n")
    b = parse_config("[run]\nout = /tmp/b\n")
    c = parse_config("[system]\nh = 0.0025\n")
    assert a.hash == b.hash != c.hash


def test_out_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert load_config().out_dir == tmp_path


def test_missing_config_file():
    with pytest.raises(ConfigurationError):
        load_config("/nonexistent/run.ini")


# ---------------------------------------------------------------- cache

def test_store_then_lookup_identical(tmp_path):
    c = Cache(tmp_path)
    key = {"kind": "orbit", "h": 0.005, "seed": 1}
    arr = {"x": np.arange(12.0).reshape(4, 3), "i": np.arange(5)}
    p = c.store(key, arr, {"note": 1})
    got, cert = c.lookup(key)
    assert cert == {"note": 1}
    for k in arr:
        assert got[k].tobytes() == arr[k].tobytes() and got[k].dtype == arr[k].dtype
    assert p.read_bytes() == c.path(key).read_bytes()


def test_changed_h_misses(tmp_path):
    c = Cache(tmp_path)
    c.store({"kind": "orbit", "h": 0.005}, {"x": np.zeros(3)})
    assert c.lookup({"kind": "orbit", "h": 0.0025}) is None
    assert c.misses == 1 and c.evictions == 0


def test_corrupt_file_is_evicted(tmp_path, caplog):
    c = Cache(tmp_path)
    key = {"k": 1}
    p = c.store(key, {"x": np.ones(4)})
    p.write_bytes(p.read_bytes()[:40])
    with caplog.at_level(logging.WARNING):
        assert c.lookup(key) is None
    assert c.evictions == 1 and not p.exists()
    assert "evicted" in caplog.text


def test_corrupted_separation_certificate_triggers_recompute(tmp_path, caplog):
    system = ShiftSystem(8)
    words = system.random_words(3000, 20, seed=0)
    bundle = shift_bundle(system, words, 8)
    c = Cache(tmp_path)
    key = {"kind": "toy", "n": 3000}
    est = cached_pressure(c, key, bundle, [2, 4, 6, 8], [0.25])
    assert c.misses == 1
    again = cached_pressure(c, key, bundle, [2, 4, 6, 8], [0.25])
    assert c.hits == 1 and np.array_equal(again.log_lambda, est.log_lambda)

    # swap one separated set for a set that is not separated, keeping the stored checksum valid
    arrays, cert = c.lookup(key)
    arrays["set_0"] = np.array([0, 0], np.int64) if len(arrays["set_0"]) < 2 else arrays["set_0"][[0, 0]]
    c.store(key, arrays, cert)
    with caplog.at_level(logging.WARNING):
        fixed = cached_pressure(c, key, bundle, [2, 4, 6, 8], [0.25])
    assert c.evictions == 1
    assert "certificate" in caplog.text
    assert np.array_equal(fixed.log_lambda, est.log_lambda)
    assert c.lookup(key) is not None  # the recomputed entry is valid again


def test_parallel_map_keeps_order():
    assert parallel_map(abs, [-3, 1, -2, 5], workers=2) == [3, 1, 2, 5]
    assert parallel_map(abs, [-1], workers=4) == [1]


# ---------------------------------------------------------------- calibration file

def test_calibration_file_validation(tmp_path):
    with pytest.raises(DependencyError, match="calibrate"):
        CalibrationFile.read(tmp_path / "missing.json")
    good = dict(c=1.0, lam_bar=1.2, C_tau=3.0, K0=2.0, L0=1.1, L1=0.01, L2=2.0, N0=3, N1=2,
                theta0={}, alpha=0.01, coverage={}, provenance={}, spec={}, settings={})
    (tmp_path / "c.json").write_text(CalibrationFile(**good).to_json())
    assert CalibrationFile.read(tmp_path / "c.json").K0 == 2.0
    bad = dict(good, K0=float("nan"))
    with pytest.raises(ConfigurationError):
        CalibrationFile(**bad).validate()
    d = json.loads(CalibrationFile(**good).to_json())
    d["schema"] = 99
    (tmp_path / "s.json").write_text(json.dumps(d))
    with pytest.raises(ConfigurationError, match="schema"):
        CalibrationFile.read(tmp_path / "s.json")


@pytest.mark.slow
def test_calibration_is_deterministic():
    s = CalibrationSettings(pool=120, norm_pool=200, cone_trials=2000, segments=30, segment_length=20)
    a = calibrate(lorenz63(), s)
    b = calibrate(lorenz63(), s)
    assert a.to_json() == b.to_json()
    assert a.c >= 1 and a.lam_bar > 1 and a.K0 > 1


# ---------------------------------------------------------------- command line

def test_toyshift_default_passes(tmp_path, capsys):
    assert main(["toyshift", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "toyshift.json").read_text())
    assert 0.59 <= doc["result"]["P"] <= 0.79
    assert doc["checks"]["slope_near_log2"]
    assert doc["config_hash"] == RunConfig().hash and doc["calibration_hash"] is None
    csv = (tmp_path / "toyshift_pressure.csv").read_text().splitlines()
    assert csv[0].startswith("# config_hash=" + doc["config_hash"])
    assert (tmp_path / "toyshift.gp").exists()
    assert "check slope_near_log2: PASS" in capsys.readouterr().out


def test_toyshift_results_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["toyshift", "--out", str(a)]) == EXIT_OK
    assert main(["toyshift", "--out", str(b), "--workers", "2"]) == EXIT_OK
    for name in ("toyshift.json", "toyshift_pressure.csv", "toyshift.gp"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_failed_check_exit_code(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[toyshift]\nwords = 40\nlength = 20\nt_grid = 1, 2, 3, 4, 5, 6, 7, 8\n")
    assert main(["toyshift", "--config", str(ini), "--out", str(tmp_path)]) == EXIT_CHECK


def test_pressure_without_calibration(tmp_path, capsys):
    assert main(["pressure", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "calibrate" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[system]\nfamily = duffing\n")
    assert main(["simulate", "--config", str(ini), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "duffing" in capsys.readouterr().err


def test_print_config(capsys):
    assert main(["pliss", "--print-config", "--seed", "9"]) == EXIT_OK
    text = capsys.readouterr().out
    cfg = parse_config(text)
    assert cfg.run.seed == 9 and cfg.run.scenario == "pliss"


@pytest.mark.slow
def test_calibrate_twice_is_byte_identical(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(SMALL_CAL)
    for d in ("a", "b"):
        assert main(["calibrate", "--config", str(ini), "--out", str(tmp_path / d), "--seed", "5"]) == EXIT_OK
    a = (tmp_path / "a" / "calibration.json").read_bytes()
    assert a == (tmp_path / "b" / "calibration.json").read_bytes()
    assert json.loads(a)["settings"]["seed"] == 5
