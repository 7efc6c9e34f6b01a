import pytest

from freewayes.config import Config, ConfigError, dump_config, from_dict, load_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert cfg == Config() and cfg.hash() == Config().hash()
    assert cfg.es.sigma == 0.1 and cfg.control.rm_cycle == 3.0 and cfg.demand.scale == 0.5


def test_unknown_key_is_named(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("es:\n  sigmaa: 0.2\n")
    with pytest.raises(ConfigError, match="es.sigmaa"):
        load_config(p)
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})


def test_cycle_must_be_multiple_of_dt():
    with pytest.raises(ConfigError, match="rm_cycle"):
        from_dict({"control": {"rm_cycle": 3.2}})
    with pytest.raises(ConfigError, match="episode_length"):
        from_dict({"control": {"episode_length": 3601.0}})


@pytest.mark.parametrize("section", [{"es": {"workers": 1}}, {"es": {"w0": 1.5}},
                                     {"es": {"shaping": "nope"}},
                                     {"geometry": {"merge_start": 900.0}},
                                     {"demand": {"rates": [1, 2]}}])
def test_invalid_values(section):
    with pytest.raises(ConfigError):
        from_dict(section)


def test_dump_round_trip(tmp_path):
    cfg = Config().replace(es={"workers": 20}, demand={"scale": 0.25})
    p = tmp_path / "resolved.yaml"
    dump_config(cfg, p)
    assert p.read_text().splitlines()[0] == f"# config_hash={cfg.hash()}"
    assert load_config(p) == cfg


def test_hash_tracks_content():
    a = Config()
    assert a.hash() == Config().hash()
    assert a.replace(es={"sigma": 0.2}).hash() != a.hash()
