import os

import pytest

from flatfed.config import parse_config, parse_config_text
from flatfed.errors import ConfigError

CONFIGS_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")

MINIMAL = """
[experiment]
rounds = 10

[dataset]
kind = "synthetic"
num_classes = 4
per_class = 20
input_dim = 3

[partition]
clients = 4
alpha = 0.5

[federation]
clients_per_round = 2

[model]
kind = "mlp"
hidden = [8]

[optimizer]
kind = "sgd"
lr = 0.1
"""


class TestParsing:
    def test_minimal_valid(self):
        cfg = parse_config_text(MINIMAL)
        assert cfg.rounds == 10
        assert cfg.dataset.kind == "synthetic"
        assert cfg.clients == 4
        assert cfg.hidden == (8,)
        assert cfg.swa is None

    def test_negative_rounds_names_key(self):
        bad = MINIMAL.replace("rounds = 10", "rounds = -3")
        with pytest.raises(ConfigError, match="rounds"):
            parse_config_text(bad)

    def test_unknown_key_rejected_with_line(self):
        bad = MINIMAL.replace("lr = 0.1", "lr = 0.1\nwarmup = 5")
        with pytest.raises(ConfigError, match=r"warmup"):
            parse_config_text(bad)
        try:
            parse_config_text(bad, path="exp.cfg")
        except ConfigError as exc:
            assert "exp.cfg:" in str(exc)

    def test_unknown_section_rejected(self):
        bad = MINIMAL + "\n[telemetry]\nenabled = true\n"
        with pytest.raises(ConfigError, match=r"telemetry"):
            parse_config_text(bad)

    def test_duplicate_key_rejected(self):
        bad = MINIMAL.replace("lr = 0.1", "lr = 0.1\nlr = 0.2")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text(bad)

    def test_type_errors_name_key(self):
        bad = MINIMAL.replace("rounds = 10", 'rounds = "ten"')
        with pytest.raises(ConfigError, match="rounds"):
            parse_config_text(bad)

    def test_key_outside_section(self):
        with pytest.raises(ConfigError, match="outside"):
            parse_config_text("rounds = 5\n")

    def test_clients_per_round_bounds(self):
        bad = MINIMAL.replace("clients_per_round = 2", "clients_per_round = 9")
        with pytest.raises(ConfigError, match="clients_per_round"):
            parse_config_text(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.cfg")

    def test_comments_and_blanks_ignored(self):
        text = "# heading\n\n" + MINIMAL + "\n# trailing\n"
        assert parse_config_text(text).rounds == 10

    def test_swa_section(self):
        text = MINIMAL + "\n[swa]\nstart_round = 8\ncycle = 2\ngamma1 = 0.1\ngamma2 = 0.01\n"
        cfg = parse_config_text(text)
        assert cfg.swa is not None
        assert cfg.swa.start_round == 8
        assert cfg.swa.cycle == 2


class TestShippedPresets:
    def test_cifar100_matches_published_defaults(self):
        cfg = parse_config(os.path.join(CONFIGS_DIR, "cifar100_fedavg.cfg"))
        assert cfg.rounds == 20000
        assert cfg.clients == 100
        assert cfg.optimizer.lr == 0.01
        assert cfg.optimizer.batch_size == 64
        assert cfg.optimizer.weight_decay == pytest.approx(4e-4)
        assert cfg.optimizer.epochs == 1
        assert cfg.optimizer.momentum == 0.0
        assert cfg.model_kind == "lenet"

    def test_cifar100_swa_preset(self):
        cfg = parse_config(os.path.join(CONFIGS_DIR, "cifar100_fedasam_swa.cfg"))
        assert cfg.swa.start_round == 15000  # 75% of 20k
        assert cfg.swa.cycle == 20
        assert cfg.swa.gamma1 == pytest.approx(1e-2)
        assert cfg.swa.gamma2 == pytest.approx(1e-4)
        assert cfg.optimizer.kind == "asam"
        assert cfg.optimizer.rho == pytest.approx(0.5)
        assert cfg.optimizer.eta == pytest.approx(0.2)

    def test_cutout_sizes_per_dataset(self):
        c10 = parse_config(os.path.join(CONFIGS_DIR, "cifar10_cutout.cfg"))
        c100 = parse_config(os.path.join(CONFIGS_DIR, "cifar100_cutout.cfg"))
        assert c10.augment.cutout == 16
        assert c100.augment.cutout == 8

    def test_all_presets_parse(self):
        for name in os.listdir(CONFIGS_DIR):
            parse_config(os.path.join(CONFIGS_DIR, name))
