import pytest
import yaml

from medk2n.config import (AblationConfig, ConfigValidationError, LossWeights, architecture_hash,
                           build_config, load_config)


def test_desk_and_paper_profiles():
    desk = build_config("desk").validate()
    assert (desk.model.image_size, desk.model.dim, desk.optim.epochs, desk.data.n_cases) == (64, 32, 5, 16)
    paper = build_config("paper").validate()
    assert (paper.model.image_size, paper.model.dim, paper.optim.batch_size, paper.optim.epochs) == (256, 64, 48, 100)
    assert paper.curriculum.boundaries() == (20, 40, 70, 100)
    assert desk.optim.betas == (0.9, 0.999)


def test_default_loss_weights():
    assert LossWeights().as_tuple() == (1.0, 1.0, 0.1, 0.1)
    with pytest.raises(ConfigValidationError):
        LossWeights(l1=-1).validate()
    with pytest.raises(ConfigValidationError):
        LossWeights(0, 0, 0, 0).validate()


def test_ablation_stages():
    assert AblationConfig.stage("B0") == AblationConfig(False, False, False, False, False)
    assert AblationConfig.stage("B0").baseline_fusion
    assert AblationConfig.stage("B3") == AblationConfig(True, True, True, False, False)
    assert AblationConfig.stage("B5") == AblationConfig()
    for name in ("B0", "B1", "B2", "B3", "B4", "B5"):
        assert AblationConfig.stage(name).label() == name
    with pytest.raises(ConfigValidationError):
        AblationConfig.stage("B9")


def test_unknown_key_names_exact_path():
    with pytest.raises(ConfigValidationError) as e:
        build_config("desk", {"optim": {"learning_rate": 1}})
    assert e.value.key == "optim.learning_rate"


def test_type_errors_name_key():
    with pytest.raises(ConfigValidationError) as e:
        build_config("desk", {"model": {"dim": "big"}})
    assert e.value.key == "model.dim"
    with pytest.raises(ConfigValidationError) as e:
        build_config("desk", {"data": {"augment": 1}})
    assert e.value.key == "data.augment"


def test_validation_errors():
    with pytest.raises(ConfigValidationError) as e:
        build_config("desk", {"model": {"image_size": 40}}).validate()
    assert e.value.key == "model.image_size"
    with pytest.raises(ConfigValidationError) as e:
        build_config("desk", {"curriculum": {"ratios": [0.5, 0.5, 0.5, 0.5]}}).validate()
    assert e.value.key == "curriculum.ratios"
    with pytest.raises(ConfigValidationError):
        build_config("nope")


def test_yaml_curriculum_block(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"profile": "desk", "optim": {"epochs": 10},
                                 "CURRICULUM": {"RATIOS": [0.1, 0.2, 0.3, 0.4]}}))
    cfg = load_config(p).validate()
    assert cfg.curriculum.ratios == (0.1, 0.2, 0.3, 0.4)
    assert cfg.curriculum.total_epochs == 10
    assert cfg.curriculum.boundaries() == (1, 3, 6, 10)


def test_cli_overrides_beat_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"ablation": "B2", "optim": {"epochs": 4, "lr": 0.01}}))
    cfg = load_config(p, overrides={"ablation": "B4", "optim": {"epochs": 6}})
    assert cfg.ablation == "B4" and cfg.optim.epochs == 6 and cfg.optim.lr == 0.01


def test_architecture_hash_tracks_shapes_only():
    a = build_config("desk")
    b = build_config("desk", {"optim": {"lr": 0.5}, "seed": 9})
    c = build_config("desk", {"model": {"dim": 16}})
    assert architecture_hash(a.architecture()) == architecture_hash(b.architecture())
    assert architecture_hash(a.architecture()) != architecture_hash(c.architecture())
    assert len(architecture_hash(a.architecture())) == 32
