"""
Tests for configuration models and the config file reader.
"""

import pytest
from pydantic import ValidationError

from core.config import (
    AttackSpec,
    DetectorSettings,
    PlantConfig,
    RunConfig,
    SensorProcess,
    VerifierConfig,
    build_run_config,
    parse_address,
    parse_model_kinds,
    parse_verifier_sources,
    read_config_file,
)


class TestVerifierConfig:
    """Test verifier settings validation"""

    def test_defaults(self):
        """Test local mode with three samples"""
        config = VerifierConfig()
        assert config.mode == "local"
        assert config.samples == 3
        assert config.staleness == 1.0

    @pytest.mark.parametrize("samples", [0, 2, 4])
    def test_samples_must_be_odd(self, samples):
        """Test even or zero sample counts are rejected"""
        with pytest.raises(ValidationError):
            VerifierConfig(samples=samples)

    def test_positive_timeout(self):
        """Test a zero timeout is rejected"""
        with pytest.raises(ValidationError):
            VerifierConfig(timeout=0)

    def test_distributed_needs_neighbors(self):
        """Test distributed mode without neighbors"""
        with pytest.raises(ValidationError):
            VerifierConfig(mode="distributed")

    def test_bad_neighbor_address(self):
        """Test neighbor addresses must be host:port"""
        with pytest.raises(ValidationError):
            VerifierConfig(mode="distributed", neighbors=["localhost"])


class TestDetectorSettings:
    """Test detector settings"""

    def test_tolerance_for(self):
        """Test per-loop tolerances fall back to the default"""
        settings = DetectorSettings(tolerance=2.0, loop_tolerances={"push_syringe:1": 5.0})
        assert settings.tolerance_for("push_syringe:1") == 5.0
        assert settings.tolerance_for("other:1") == 2.0

    def test_negative_tolerance(self):
        """Test tolerances cannot be negative"""
        with pytest.raises(ValidationError):
            DetectorSettings(tolerance=-1)


class TestPlantModels:
    """Test sensor processes, attacks and plants"""

    def test_band_needs_bounds(self):
        """Test a band needs low <= high"""
        with pytest.raises(ValidationError):
            SensorProcess(kind="band", low=38.0, high=34.0)

    def test_levels_need_values(self):
        """Test a levels process needs levels"""
        with pytest.raises(ValidationError):
            SensorProcess(kind="levels")

    def test_attack_needs_one_value(self):
        """Test exactly one of value and value_range"""
        with pytest.raises(ValidationError):
            AttackSpec(kind="branch_spoof", sensor="humidity")
        with pytest.raises(ValidationError):
            AttackSpec(kind="branch_spoof", sensor="humidity", value=48.0, value_range=(40.0, 45.0))

    def test_attack_values_finite(self):
        """Test spoofed values must be finite"""
        with pytest.raises(ValidationError):
            AttackSpec(kind="branch_spoof", sensor="humidity", value=float("inf"))

    def test_attack_window(self):
        """Test activation by cycle"""
        attack = AttackSpec(kind="branch_spoof", sensor="humidity", value=48.56, start_cycle=10, end_cycle=19)
        assert not attack.active(9)
        assert attack.active(10)
        assert attack.active(19)
        assert not attack.active(20)
        assert AttackSpec(kind="branch_spoof", sensor="humidity", value=1.0, start_cycle=3).active(1000)

    def test_attack_window_order(self):
        """Test the window may not end before it starts"""
        with pytest.raises(ValidationError):
            AttackSpec(kind="branch_spoof", sensor="humidity", value=1.0, start_cycle=5, end_cycle=4)

    def test_plant_bounds(self):
        """Test cycle count and period bounds"""
        sensors = {"humidity": SensorProcess(base=36.0)}
        with pytest.raises(ValidationError):
            PlantConfig(program="syringe_pump", sensors=sensors, cycles=0)
        with pytest.raises(ValidationError):
            PlantConfig(program="syringe_pump", sensors=sensors, period=0)


class TestAddresses:
    """Test host:port parsing"""

    def test_parse(self):
        """Test host and port"""
        assert parse_address("127.0.0.1:7401") == ("127.0.0.1", 7401)
        assert parse_address("::1:7401") == ("::1", 7401)

    @pytest.mark.parametrize("text", ["7401", ":7401", "host:", "host:port"])
    def test_bad(self, text):
        """Test malformed addresses"""
        with pytest.raises(ValueError):
            parse_address(text)


class TestSourceSpecs:
    """Test verifier source and model kind strings"""

    def test_verifier_sources(self):
        """Test local and remote items"""
        assert parse_verifier_sources("local:runs/a.sensors.log") == ("runs/a.sensors.log", [])
        assert parse_verifier_sources("remote:10.0.0.2:7700, remote:10.0.0.3:7700") == (
            None, ["10.0.0.2:7700", "10.0.0.3:7700"])
        assert parse_verifier_sources("local:s.log,10.0.0.2:7700") == ("s.log", ["10.0.0.2:7700"])

    @pytest.mark.parametrize("text", ["", "local:", "local:a,local:b", "remote:nohost", "s.log"])
    def test_bad_verifier_sources(self, text):
        """Test empty, duplicate and malformed sources"""
        with pytest.raises(ValueError):
            parse_verifier_sources(text)

    def test_run_config_expands_verifier(self):
        """Test --verifier fills the sensor log and neighbors, explicit flags win"""
        run = build_run_config({"verifier": "local:s.log,remote:h:1"}, {})
        assert (run.sensor_log, run.neighbors) == ("s.log", ["h:1"])
        run = build_run_config({}, {"verifier": "local:s.log", "sensor_log": "other.log"})
        assert run.sensor_log == "other.log"
        with pytest.raises(ValidationError):
            build_run_config({}, {"verifier": "local:"})

    def test_model_kinds(self):
        """Test efsa, ngram and scfd selections"""
        assert parse_model_kinds(None) == (None, None)
        assert parse_model_kinds(["efsa"]) == (None, None)
        assert parse_model_kinds(["ngram:4", "scfd:auto"]) == (4, "auto")
        assert parse_model_kinds(["scfd:3"]) == (None, "3")

    @pytest.mark.parametrize("value", ["ngram", "ngram:x", "scfd:", "hmm", "efsa:2"])
    def test_bad_model_kinds(self, value):
        """Test unknown kinds and arguments"""
        with pytest.raises(ValueError):
            parse_model_kinds([value])


class TestRunConfig:
    """Test config files and flag precedence"""

    def test_read_file(self, tmp_path):
        """Test comments, blanks and dashed keys"""
        path = tmp_path / "aulos.conf"
        path.write_text("# monitor settings\n\ntolerance = 2.5\nfail-open = false  # strict\nneighbors = a:1, b:2\n")
        assert read_config_file(path) == {"tolerance": "2.5", "fail_open": "false", "neighbors": "a:1, b:2"}

    def test_bad_line(self, tmp_path):
        """Test a line without '=' names its line number"""
        path = tmp_path / "aulos.conf"
        path.write_text("tolerance = 2\nverbose\n")
        with pytest.raises(ValueError, match="line 2"):
            read_config_file(path)

    def test_file_values(self):
        """Test values from the file are typed"""
        config = build_run_config({"tolerance": "2.5", "fail_open": "false", "neighbors": "a:1, b:2"}, {})
        assert config.tolerance == 2.5
        assert config.fail_open is False
        assert config.neighbors == ["a:1", "b:2"]

    def test_flags_override_file(self):
        """Test explicit flags win and None flags are ignored"""
        config = build_run_config({"tolerance": "2.5", "samples": "5"}, {"tolerance": 4.0, "samples": None})
        assert config.tolerance == 4.0
        assert config.samples == 5

    def test_unknown_key(self):
        """Test unknown keys are rejected"""
        with pytest.raises(ValueError, match="unknown config key"):
            build_run_config({"tolerence": "2"}, {})

    def test_derived_settings(self):
        """Test the verifier and detector views"""
        config = RunConfig(verifier_mode="both", neighbors=["127.0.0.1:7401"], tolerance=1.5, fail_open=False)
        verifier = config.verifier_config()
        assert verifier.mode == "both"
        assert verifier.neighbors == ["127.0.0.1:7401"]
        detector = config.detector_settings()
        assert detector.tolerance == 1.5
        assert detector.fail_open is False
