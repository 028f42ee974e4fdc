import pytest

from gsreg.config import ConfigError, RunConfig, build_config, dump_config, load_config, parse_config_text


def test_defaults_follow_preset():
    desk = build_config()
    assert (desk.batch_size, desk.epochs, desk.image_size, desk.lr) == (8, 100, 64, 5e-3)
    paper = build_config(preset="paper")
    assert (paper.batch_size, paper.epochs, paper.image_size) == (32, 500, 128)


def test_explicit_values_beat_preset_defaults():
    cfg = build_config({"epochs": 3}, preset="paper")
    assert cfg.epochs == 3 and cfg.batch_size == 32


def test_parse_comments_aliases_and_types():
    text = """
    # a comment
    strategy = WeightedSum   # trailing comment
    lambda = 0.1
    sigma = auto
    epochs = 7
    """
    v = parse_config_text(text)
    assert v == {"strategy": "WeightedSum", "lam": 0.1, "sigma": None, "epochs": 7}
    assert build_config(v).label == "WeightedSum(0.1)"


@pytest.mark.parametrize("text", ["bogus = 1", "epochs = many", "no equals sign", "window = 4",
                                  "strategy = Nope", "lambda = -1", "preset = huge", "lr = 0",
                                  "image_size = 30"])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        build_config(parse_config_text(text))


def test_dump_and_reload_round_trip(tmp_path):
    cfg = build_config({"strategy": "AgrRandom", "sigma": 0.5, "seed": 9})
    (tmp_path / "c.txt").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.txt") == cfg


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        build_config(nonsense=1)


def test_direct_construction_validates():
    with pytest.raises(ConfigError):
        RunConfig(granularity="per-pixel")
