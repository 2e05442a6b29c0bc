from pathlib import Path

import pytest

from dyncfg.config import ConfigError, build_schedule, build_world, load_config, parse_config, serialize

DATA = Path(__file__).parent / "data"

FULL = """
[world]
preset = "hard"

[schedule]
family = "linear"
T = 100

[experiment]
n_seeds = 64
seed = 9
baseline = "fixed"
conds = [0, 1, 1]

[filter]
B = 4
K = 2
evaluators = ["alignment-oracle", "align"]
policy = "fixed"

[policy.fixed]
kind = "fixed"
scale = 7.5

[policy.dyn]
kind = "dynamic"
evaluators = ["alignment-oracle", "quality-oracle"]
candidates = [1, 2.5, 7.5, 12]
weighting = "linear"
coefficients = [0.7, 0.3]

[policy.replay]
kind = "lookup"
source = "dyn"
stat = "median"

[evaluator.align]
kind = "alignment-learned"
artifact = "evals/align.dcfg"
hidden = [32, 32]
"""


def test_minimal_golden_file():
    cfg = load_config(DATA / "minimal.cfg")
    assert cfg.world["preset"] == "default"
    assert cfg.schedule == {"family": "cosine", "T": 200}
    assert cfg.experiment["n_seeds"] == 500 and cfg.seed == 0
    assert cfg.filter is None
    assert cfg.policy("fixed").params == {"scale": 7.5}
    assert build_world(cfg.world).name == "default"
    assert build_schedule(cfg.schedule).T == 200


def test_full_config_values():
    cfg = parse_config(FULL)
    dyn = cfg.policy("dyn")
    assert dyn.params["candidates"] == (1.0, 2.5, 7.5, 12.0)
    assert dyn.params["coefficients"] == (0.7, 0.3)
    assert cfg.filter["K"] == 2 and cfg.filter["fraction"] == 0.25
    assert cfg.evaluator("align").params["hidden"] == (32, 32)
    assert cfg.experiment["conds"] == (0, 1, 1)


def test_serialize_round_trip():
    cfg = parse_config(FULL)
    again = parse_config(serialize(cfg))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    assert parse_config(FULL.replace("seed = 9", "seed = 10")).config_hash() != cfg.config_hash()


def test_k_exceeding_b_is_one_error():
    text = '[world]\npreset = "default"\n[filter]\nB = 4\nK = 8\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    issues = exc.value.issues
    assert len(issues) == 1
    assert issues[0].line == 5
    assert "K" in issues[0].message and "B" in issues[0].message


def test_all_errors_are_collected_with_lines():
    text = "\n".join([
        "[world]",                       # 1
        'preset = "nowhere"',            # 2
        "[schedule]",                    # 3
        "T = 0",                         # 4
        "colour = 3",                    # 5
        "[experiment]",                  # 6
        "seed = not-json",               # 7
        "seed = 4",                      # 8
        "[bogus]",                       # 9
        "[policy.p]",                    # 10
        'kind = "dynamic"',              # 11
        'evaluators = ["ghost"]',        # 12
        "candidates = [3, 1]",           # 13
    ])
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    lines = [i.line for i in exc.value.issues]
    assert lines == sorted(lines)
    assert {2, 4, 5, 7, 9, 12, 13} <= set(lines)
    msg = str(exc.value)
    assert "line 5: unknown key 'colour'" in msg
    assert "line 9: unknown section [bogus]" in msg
    assert "ghost" in msg


def test_duplicates_and_malformed_lines():
    text = '[world]\npreset = "default"\n[world]\nthis is not a pair\n[policy.a]\nkind = "fixed"\nkind = "fixed"\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    msgs = [str(i) for i in exc.value.issues]
    assert any("line 3: duplicate section" in m for m in msgs)
    assert any(m.startswith("line 4:") for m in msgs)
    assert any("line 7: duplicate key 'kind'" in m for m in msgs)


@pytest.mark.parametrize("snippet, fragment", [
    ('[policy.d]\nkind = "dynamic"\n', "missing required key 'evaluators'"),
    ('[policy.l]\nkind = "lookup"\n', "exactly one of 'source' or 'table'"),
    ('[policy.l]\nkind = "lookup"\nsource = "f"\n[policy.f]\nkind = "fixed"\n', "not a dynamic policy"),
    ('[policy.i]\nkind = "interval"\nt_lo = 100\nt_hi = 50\n', "t_lo < t_hi"),
    ('[experiment]\nbaseline = "nope"\n', "unknown policy 'nope'"),
    ('[evaluator.alignment-oracle]\nkind = "alignment-learned"\n', "reserved"),
    ('[policy.x]\nkind = "warp"\n', "kind: must be one of"),
])
def test_cross_checks(snippet, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config('[world]\npreset = "default"\n' + snippet)
    assert fragment in str(exc.value)


def test_world_needs_exactly_one_source():
    with pytest.raises(ConfigError, match="either 'preset' or 'classes'"):
        parse_config("[schedule]\nT = 10\n")


def test_inline_world():
    text = """
[world]
classes = [{"weights": [1.0], "means": [[-1, 0]], "covs": [[[1, 0], [0, 1]]]}, {"weights": [1.0], "means": [[1, 0]], "covs": [[[1, 0], [0, 1]]]}]
priors = [0.3, 0.7]
"""
    w = build_world(parse_config(text).world)
    assert w.n_classes == 2 and w.priors.tolist() == [0.3, 0.7]
