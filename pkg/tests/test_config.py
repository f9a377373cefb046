import math

import pytest

from ionphoton import config as C
from ionphoton.dynamics import TWO_PI


def test_sample_config_parses_and_round_trips():
    doc = C.parse(C.SAMPLE_CONFIG)
    again = C.parse(C.dump(doc))
    assert again == doc
    assert C.config_hash(again) == C.config_hash(doc)


def test_empty_document_gives_defaults():
    doc = C.parse("")
    assert doc["system"] == C.DEFAULTS["system"]
    assert doc["sweep"] is None


def test_hash_changes_with_content():
    a = C.parse("seed: 1\n")
    b = C.parse("seed: 2\n")
    assert C.config_hash(a) != C.config_hash(b)


def test_unknown_key_reports_line():
    text = "schema_version: 1\nsystem:\n  g0_mhz_over_2pi: 0.7\n  bogus: 3\n"
    with pytest.raises(C.ConfigError) as exc:
        C.parse(text, source="x.yaml")
    assert exc.value.line == 4
    assert "x.yaml:4" in str(exc.value)


def test_wrong_type_reports_line():
    with pytest.raises(C.ConfigError) as exc:
        C.parse("seed: 1\ntoggles:\n  drift: maybe\n")
    assert exc.value.line == 3


def test_bad_choice_and_range():
    with pytest.raises(C.ConfigError):
        C.parse("tomography:\n  target: phi+\n")
    with pytest.raises(C.ConfigError):
        C.parse("sequence:\n  init_fidelity: 1.5\n")
    with pytest.raises(C.ConfigError):
        C.parse("schema_version: 2\n")


def test_yaml_syntax_error_has_line():
    with pytest.raises(C.ConfigError) as exc:
        C.parse("seed: 1\nsystem: [\n")
    assert exc.value.line is not None


def test_experiment_config_converts_units():
    doc = C.parse(C.SAMPLE_CONFIG)
    cfg = C.experiment_config(doc)
    d1 = cfg.stage(1).drive
    assert d1.tone_a.rabi == pytest.approx(TWO_PI * doc["sequence"]["stage1"]["rabi_mhz_over_2pi"])
    assert cfg.params.kappa == pytest.approx(TWO_PI * 0.27)
    assert cfg.secular_cutoff == pytest.approx(TWO_PI * 5.0)
    assert cfg.stage(2).window == 3.0


def test_phase_lock_target():
    doc = C.parse("")
    assert C.phase_lock_target(doc) == "psi+"
    assert C.phase_lock_target(C.parse("sequence:\n  phase_lock: none\n")) is None
    assert C.phase_lock_target(C.parse("sequence:\n  phase_lock: psi-\n")) == "psi-"
    doc = C.parse("tomography:\n  target: psi-\n")
    assert C.phase_lock_target(doc) == "psi-"


def test_env_overrides():
    o = C.env_overrides({"IONPHOTON_SEED": "7", "IONPHOTON_THREADS": "", "OTHER": "1"})
    assert o.seed == 7 and o.threads is None and o.shots is None
    with pytest.raises(C.ConfigError):
        C.env_overrides({"IONPHOTON_SHOTS": "many"})


def test_set_path_keeps_types_and_copies():
    doc = C.parse("")
    out = C.set_path(doc, "system.n_max", "2")
    assert out["system"]["n_max"] == 2 and doc["system"]["n_max"] == 1
    out = C.set_path(doc, "phase_scan.offset_rad", math.pi)
    assert out["phase_scan"]["offset_rad"] == pytest.approx(math.pi)
