import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvaformer import config as cfgmod
from mvaformer import kv
from mvaformer.errors import ConfigError
from mvaformer.model import Mode


def test_defaults_follow_desk_preset():
    run = cfgmod.resolve({})
    assert run.model.channels == int(cfgmod.DESK_PRESET["model.channels"])
    assert run.train.lr0 == float(cfgmod.DESK_PRESET["train.lr0"])
    assert run.model.views == run.scene.views and run.model.classes == run.scene.classes
    bare = cfgmod.resolve({}, preset=None)
    assert (bare.train.batch_size, bare.train.lr0, bare.model.channels) == (128, 1e-4, 64)


def test_layers_override_in_order(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed=3\nmodel.layers = 3  # trailing\ntrain.lr0=1e-3\n")
    run = cfgmod.resolve(cfgmod.read_config_file(path), {"train.lr0": "5e-4"})
    assert run.seed == run.scene.seed == run.train.seed == 3
    assert run.model.layers == 3 and run.train.lr0 == 5e-4


@pytest.mark.parametrize("layer, message", [
    ({"model.nope": "1"}, "unknown config key"),
    ({"scene.seed": "1"}, "unknown config key"),
    ({"model.layers": "two"}, "model.layers"),
    ({"train.eval_every_epoch": "maybe"}, "train.eval_every_epoch"),
    ({"model.mode": "cubist"}, "model.mode"),
    ({"model.heads": "3"}, "heads"),
    ({"train.lr0": "1e-9"}, "lr0"),
])
def test_invalid_values_are_config_errors(layer, message):
    with pytest.raises(ConfigError, match=message):
        cfgmod.resolve(layer)


def test_parse_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("seed=1\njust words\n")
    with pytest.raises(ConfigError, match=r"bad.cfg:2:"):
        cfgmod.read_config_file(path)
    with pytest.raises(ConfigError, match="cannot read"):
        cfgmod.read_config_file(tmp_path / "absent.cfg")


@given(st.integers(0, 10 ** 6), st.sampled_from(list(Mode)), st.integers(1, 6), st.booleans(),
       st.floats(1e-5, 1e-2))
def test_dump_round_trip(seed, mode, layers, flag, lr):
    run = cfgmod.resolve({"seed": str(seed), "model.mode": mode.value, "model.layers": str(layers),
                          "train.eval_every_epoch": kv.format_value(flag), "train.lr0": repr(lr)})
    again = cfgmod.resolve(kv.parse_lines(run.dumps()))
    assert again == run


def test_every_schema_key_is_dumped():
    keys = [k for k, _ in cfgmod.resolve({}).items()]
    assert keys == list(cfgmod.schema())


def test_with_seed_moves_every_seed():
    run = cfgmod.with_seed(cfgmod.resolve({}), 9)
    assert (run.seed, run.scene.seed, run.train.seed) == (9, 9, 9)


@pytest.mark.parametrize("text, value", [("yes", True), ("OFF", False), ("1", True), ("false", False)])
def test_boolean_spellings(text, value):
    assert kv.parse_value("k", text, True) is value
