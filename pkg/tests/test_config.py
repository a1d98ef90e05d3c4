from __future__ import annotations

import pytest
import yaml

from raredistill.config import (
    ConfigError,
    RunConfig,
    apply_mapping,
    desk_profile,
    load_config,
    paper_profile,
    profile_config,
    save_resolved,
)


class TestProfiles:
    def test_desk_defaults(self):
        cfg = desk_profile()
        assert cfg.profile == "desk"
        assert cfg.encoder.input_size == 32
        assert cfg.pretrain.epochs == 30
        assert cfg.pretrain.queue_size == 64
        assert cfg.eval.n_way == 3 and cfg.eval.k_shot == 5 and cfg.eval.n_tasks == 3

    def test_paper_hyperparameters(self):
        cfg = paper_profile()
        assert cfg.pretrain.epochs == 200
        assert cfg.pretrain.batch_size == 16
        assert cfg.pretrain.lr == 0.03
        assert cfg.pretrain.temperature == 0.07
        assert cfg.pretrain.queue_size == 1280
        assert cfg.pretrain.encoder_momentum == 0.999
        assert cfg.encoder.embed_dim == 128
        assert cfg.encoder.input_size == 224
        # decay points land on epochs 120 and 160
        assert [round(p * 200) for p in cfg.pretrain.lr_decay_points] == [120, 160]

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            profile_config("cluster")


class TestApplyMapping:
    def test_section_override(self):
        cfg = apply_mapping(desk_profile(), {"pretrain": {"epochs": 5}})
        assert cfg.pretrain.epochs == 5
        # untouched keys keep the profile values
        assert cfg.pretrain.queue_size == 64

    def test_top_level_scalars(self):
        cfg = apply_mapping(desk_profile(), {"seed": 9, "output_dir": "elsewhere"})
        assert cfg.seed == 9 and cfg.output_dir == "elsewhere"

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            apply_mapping(desk_profile(), {"pertrain": {"epochs": 5}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            apply_mapping(desk_profile(), {"pretrain": {"epohcs": 5}})

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError, match="invalid value"):
            apply_mapping(desk_profile(), {"pretrain": {"temperature": -1.0}})

    def test_lists_become_tuples(self):
        cfg = apply_mapping(desk_profile(), {"pretrain": {"lr_decay_points": [0.5, 0.75]}})
        assert cfg.pretrain.lr_decay_points == (0.5, 0.75)


class TestLoadConfig:
    def test_precedence_flags_over_file_over_profile(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump({"pretrain": {"epochs": 7, "batch_size": 8}}))
        cfg = load_config(p, overrides={"pretrain": {"epochs": 3}})
        assert cfg.pretrain.epochs == 3  # override wins
        assert cfg.pretrain.batch_size == 8  # file wins over profile
        assert cfg.pretrain.lr == 0.03  # profile default survives

    def test_profile_from_file(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump({"profile": "paper"}))
        assert load_config(p).pretrain.epochs == 200

    def test_explicit_profile_beats_file(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump({"profile": "paper"}))
        cfg = load_config(p, profile="desk")
        assert cfg.profile == "desk"

    def test_non_mapping_file(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("- just\n- a list\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_with_seed_propagates(self):
        cfg = desk_profile().with_seed(11)
        assert cfg.seed == 11
        assert cfg.pretrain.seed == 11
        assert cfg.distill.seed == 11

    def test_save_resolved_roundtrip(self, tmp_path):
        cfg = desk_profile().with_seed(4)
        p = save_resolved(cfg, tmp_path / "resolved.yaml")
        payload = yaml.safe_load(p.read_text())
        again = load_config(None, profile=payload["profile"], overrides=payload)
        assert again.pretrain.seed == 4
        assert again.to_dict() == cfg.to_dict()
