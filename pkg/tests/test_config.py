import pytest
from hypothesis import given, settings, strategies as st

from eqnmc.config import (
    ConfigError,
    dump_studies,
    load_config,
    parse_config,
    parse_studies,
)

BASIC = """\
[run]
name = demo
iterations = 50
walkers = 8
seed = 3

[target]
kind = gaussian
covariance = 1, 4

[sampler a]
stepsize = 0.1
mode = local
mu = 5
lambda = 1.5

[sampler b]
kind = hmc
stepsize = 0.2
steps_per_iteration = 4
"""


def test_parse_typed_values_and_defaults():
    cfg = parse_config(BASIC)
    assert cfg.name == "demo"
    assert cfg.run["iterations"] == 50 and cfg.run["groups"] == 2
    assert cfg.target["covariance"] == (1.0, 4.0)
    assert cfg.init["kind"] == "ball"
    roster = cfg.roster()
    assert list(roster) == ["a", "b"]
    assert roster["a"][0].values["lambda"] == 1.5
    assert roster["a"][0].values["metropolize"] is False
    assert roster["b"][0].values["kind"] == "hmc"


def test_roundtrip_of_basic_and_presets():
    from eqnmc.experiments import get_preset, list_presets

    cfg = parse_config(BASIC)
    assert parse_config(cfg.to_text()) == cfg
    for name in list_presets():
        studies = get_preset(name)
        assert parse_studies(dump_studies(studies)) == studies


finite = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    groups = draw(st.integers(2, 4))
    lines = [
        "[run]",
        f"name = {draw(st.from_regex(r'[a-z][a-z0-9_]{0,8}', fullmatch=True))}",
        f"iterations = {draw(st.integers(1, 10**6))}",
        f"walkers = {groups * draw(st.integers(1, 16))}",
        f"groups = {groups}",
        f"seed = {draw(st.integers(0, 2**31))}",
        f"burn_in = {draw(st.floats(0.0, 0.99))!r}",
        f"record = {draw(st.sampled_from(['mean', 'walkers']))}",
        "",
        "[target]",
        "kind = ring",
        f"radius = {draw(finite)!r}",
        f"dim = {draw(st.integers(1, 5))}",
        "",
        "[init]",
        f"scale = {', '.join(repr(x) for x in draw(st.lists(finite, min_size=1, max_size=3)))}",
        "",
    ]
    for k in range(draw(st.integers(1, 3))):
        lines += [
            f"[sampler s{k}]",
            f"kind = {draw(st.sampled_from(['eqn', 'hmc', 'mala', 'overdamped']))}",
            f"stepsize = {draw(finite)!r}",
            f"friction = {draw(st.floats(0, 10))!r}",
            f"metropolize = {draw(st.sampled_from(['true', 'false', 'yes', '0']))}",
            f"mode = {draw(st.sampled_from(['identity', 'blended', 'local', 'global']))}",
            f"mu = {draw(st.floats(0, 1000))!r}",
            f"weight_coords = {', '.join(str(i) for i in draw(st.lists(st.integers(0, 4), max_size=3)))}",
            "",
        ]
    return "\n".join(lines)


@settings(max_examples=60, deadline=None)
@given(text=configs())
def test_parse_serialize_parse_is_identity(text):
    cfg = parse_config(text)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_multi_study_files():
    text = BASIC.replace("[run]", "[run@x]").replace("[target]", "[target@x]")
    text = text.replace("[sampler a]", "[sampler a@x]").replace("[sampler b]", "[sampler b@x]")
    studies = parse_studies(text + "\n" + text.replace("@x", "@y"))
    assert list(studies) == ["x", "y"]
    with pytest.raises(ConfigError, match="single study"):
        parse_config(text + "\n" + text.replace("@x", "@y"))
    with pytest.raises(ConfigError, match="suffix"):
        parse_studies(text + "\n" + BASIC)


@pytest.mark.parametrize(
    "edit,match,line",
    [
        (("iterations = 50", "iterations = fifty"), "bad value for 'iterations'", 3),
        (("seed = 3", "sede = 3"), "unknown key 'sede'", 5),
        (("kind = gaussian", "kind = banana"), "bad value for 'kind'", 8),
        (("stepsize = 0.1\n", ""), "missing required key 'stepsize'", 11),
        (("[sampler b]", "[sampler b]\nmode = sideways"), "bad value for 'mode'", 18),
        (("[run]", "[runn]"), "unknown section", 1),
    ],
)
def test_errors_name_key_and_line(edit, match, line):
    with pytest.raises(ConfigError, match=match) as exc:
        parse_config(BASIC.replace(*edit))
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


@pytest.mark.parametrize(
    "edit,match",
    [
        (("walkers = 8", "walkers = 9"), "equal groups"),
        (("walkers = 8", "walkers = 8\ngroups = 1"), "equal groups"),
        (("seed = 3", "burn_in = 1.5"), "burn_in"),
        (("stepsize = 0.1", "stepsize = -1"), "positive"),
        (("seed = 3", "reference = zz"), "reference"),
        (("stepsize = 0.1", "stepsize = 0.1\nband = 0.9, 0.8"), "band"),
    ],
)
def test_validation(edit, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(BASIC.replace(*edit))


def test_structural_errors():
    with pytest.raises(ConfigError, match="target"):
        parse_config("[run]\nname = x\n[sampler a]\nstepsize = 1\n")
    with pytest.raises(ConfigError, match="sampler"):
        parse_config("[target]\nkind = ring\n")
    with pytest.raises(ConfigError):
        parse_config("[target\nkind = ring\n")
    mixed = BASIC + "\n[sampler a.x]\nstepsize = 1\n"
    with pytest.raises(ConfigError, match="mixes"):
        parse_config(mixed)


def test_environment_overrides():
    env = {
        "EQN_RUN__ITERATIONS": "7",
        "EQN_SAMPLER_A__MU": "9",
        "EQN_SAMPLER__FRICTION": "0.5",
        "EQN_INIT__SPREAD": "2",
        "OTHER": "ignored",
    }
    cfg = parse_config(BASIC, env=env)
    assert cfg.run["iterations"] == 7
    assert cfg.roster()["a"][0].values["mu"] == 9.0
    assert all(s.values["friction"] == 0.5 for s in cfg.samplers)
    assert cfg.init["spread"] == 2.0
    with pytest.raises(ConfigError, match="iterations"):
        parse_config(BASIC, env={"EQN_RUN__ITERATIONS": "many"})


def test_overrides_are_validated():
    cfg = parse_config(BASIC)
    assert cfg.with_run(iterations=3).run["iterations"] == 3
    assert cfg.run["iterations"] == 50
    with pytest.raises(ConfigError):
        cfg.with_run(walkers=9)
    with pytest.raises(ConfigError):
        cfg.with_run(nope=1)
    with pytest.raises(ConfigError):
        cfg.with_target(nope=1)
    only = cfg.with_samplers(["b"], friction=2.0)
    assert list(only.roster()) == ["b"] and only.samplers[0].values["friction"] == 2.0
    with pytest.raises(ConfigError, match="unknown samplers"):
        cfg.with_samplers(["zz"])


def test_load_config(tmp_path):
    (tmp_path / "c.ini").write_text(BASIC)
    assert load_config(tmp_path / "c.ini", env={}) == parse_config(BASIC)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")
