import os

import pytest

from umcmc.config import ConfigError, load_config, parse_config_text

TOY = """\
[problem]
kind = gmm_toy
sigma_y = 0.3

[model]
L = 4

[training]
sd_threshold = 1.0
total_steps = 2
"""


class TestParsing:
    def test_defaults(self):
        rc = parse_config_text(TOY, base_dir="/tmp")
        assert rc.model["L0"] == 1
        assert rc.model["kernel"] == "sgs"
        assert rc.training.total_steps == 2 and rc.training.w1 == 1.0
        assert rc.seed == 0
        assert rc.output_dir == os.path.join("/tmp", "run")

    def test_case_sensitive_keys(self):
        rc = parse_config_text(TOY.replace("L = 4", "L = 8\nL0 = 8"), base_dir="/tmp")
        assert rc.model["L"] == 8 and rc.model["L0"] == 8

    def test_bool_values(self):
        rc = parse_config_text(TOY + "calibrate_direction = no\n", base_dir="/tmp")
        assert rc.training.calibrate_direction is False

    def test_inline_comments(self):
        rc = parse_config_text(TOY.replace("sigma_y = 0.3", "sigma_y = 0.2  # noise"), base_dir="/tmp")
        assert rc.problem["sigma_y"] == 0.2

    def test_to_dict_roundtrip_types(self):
        d = parse_config_text(TOY, base_dir="/tmp").to_dict()
        assert d["training"]["sd_threshold"] == 1.0 and d["model"]["L"] == 4


class TestErrors:
    def test_unknown_key_line(self):
        with pytest.raises(ConfigError, match=r"line 6: unknown key 'depth'"):
            parse_config_text(TOY.replace("L = 4", "depth = 4\nL = 4"), base_dir="/tmp")

    def test_unknown_section_line(self):
        with pytest.raises(ConfigError, match=r"line 12: unknown section \[extra\]"):
            parse_config_text(TOY + "\n[extra]\nx = 1\n", base_dir="/tmp")

    def test_bad_type_line(self):
        with pytest.raises(ConfigError, match=r"line 3: .*sigma_y.*not a valid float"):
            parse_config_text(TOY.replace("0.3", "abc"), base_dir="/tmp")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match=r"line 8: missing required key 'sd_threshold'"):
            parse_config_text(TOY.replace("sd_threshold = 1.0\n", ""), base_dir="/tmp")

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="missing required key 'L'"):
            parse_config_text(TOY.replace("[model]\nL = 4\n", ""), base_dir="/tmp")

    def test_burn_in_longer_than_chain(self):
        with pytest.raises(ConfigError, match=r"line 7: need 0 <= L0 <= L"):
            parse_config_text(TOY.replace("L = 4", "L = 4\nL0 = 5"), base_dir="/tmp")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text(TOY.replace("gmm_toy", "radio"), base_dir="/tmp")

    def test_missing_images(self, tmp_path):
        text = TOY.replace("gmm_toy", "blur") + "[data]\nimages = nothing.idx\n"
        with pytest.raises(ConfigError, match=r"line 12: no such file"):
            parse_config_text(text, base_dir=str(tmp_path))

    def test_images_required_for_image_kinds(self):
        with pytest.raises(ConfigError, match="images is required"):
            parse_config_text(TOY.replace("gmm_toy", "mask"), base_dir="/tmp")

    def test_invalid_training_value(self):
        with pytest.raises(ConfigError, match=r"\[training\]"):
            parse_config_text(TOY.replace("sd_threshold = 1.0", "sd_threshold = -1"), base_dir="/tmp")

    def test_duplicate_key(self):
        with pytest.raises(ConfigError):
            parse_config_text(TOY.replace("L = 4", "L = 4\nL = 5"), base_dir="/tmp")


class TestLoad:
    def test_paths_relative_to_file(self, tmp_path):
        (tmp_path / "imgs.idx").write_bytes(b"")
        cfg = tmp_path / "run.ini"
        cfg.write_text(TOY.replace("gmm_toy", "identity") + "[data]\nimages = imgs.idx\n[run]\noutput_dir = out\n")
        rc = load_config(str(cfg))
        assert rc.data["images"] == str(tmp_path / "imgs.idx")
        assert rc.output_dir == str(tmp_path / "out")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / "none.ini"))
