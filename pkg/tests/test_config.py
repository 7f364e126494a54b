import json

import pytest

from dmfd.agent import AgentConfig
from dmfd.config import ConfigError, RunConfig, dump_config, dumps_config, load_config, parse_config, with_overrides


def test_empty_document_gives_defaults():
    cfg = parse_config({})
    assert cfg == RunConfig()
    assert cfg.agent.gamma == 0.9 and cfg.agent.w_E == 0.1 and cfg.agent.c_ent == 0.5
    assert parse_config("") == cfg and parse_config(None) == cfg


def test_p_eta_out_of_range_names_key():
    with pytest.raises(ConfigError, match="p_eta") as err:
        parse_config({"agent": {"p_eta": 1.5}})
    assert err.value.path == "agent"


def test_round_trip():
    cfg = parse_config({"agent": {"obs_mode": "image", "gamma": 0.8}, "seeds": [1, 2], "env": {"task": "cloth_fold"}})
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dumps_config(cfg)) == cfg


def test_resolved_dump_lists_every_field():
    doc = dump_config(parse_config({}))
    assert set(doc["agent"]) == set(AgentConfig().to_dict())
    assert doc["agent"]["p_eta"] == 0.2 and doc["agent"]["critic_input"] == "state"


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError, match=r"agent\.gama") as err:
        parse_config({"agent": {"gama": 0.5}})
    assert err.value.path == "agent.gama"
    assert "gamma" in str(err.value)


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"budget_steps": "ten"}, "budget_steps"),
        ({"agent": {"rsi_enabled": 1}}, "agent.rsi_enabled"),
        ({"seeds": [0, "a"]}, "seeds[1]"),
        ({"env": []}, "env"),
        ({"env": {"grid": [3]}}, "env.grid"),
    ],
)
def test_type_errors_name_path(doc, path):
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert err.value.path == path


def test_constraint_errors():
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"seeds": []})
    with pytest.raises(ConfigError, match="baseline"):
        parse_config({"baseline": "planet"})
    with pytest.raises(ConfigError, match="JSON"):
        parse_config("{not json")


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"eval_every": 500}))
    assert load_config(p).eval_every == 500


def test_obs_override_moves_mode_defaults():
    cfg = with_overrides(parse_config({}), obs="image")
    assert cfg.agent.critic_input == "state_plus_image" and cfg.agent.p_eta == 0.3 and cfg.agent.batch_size == 64
    custom = with_overrides(parse_config({"agent": {"p_eta": 0.5}}), obs="image")
    assert custom.agent.p_eta == 0.5


def test_other_overrides():
    cfg = with_overrides(parse_config({}), task="cloth_fold", dataset="d.bin", output_dir="o", budget_steps=10)
    assert cfg.env.task == "cloth_fold" and cfg.paths.dataset == "d.bin" and cfg.paths.output_dir == "o"
    assert cfg.budget_steps == 10
    with pytest.raises(ConfigError):
        with_overrides(cfg, baseline="nope")


def test_task_override_rederives_spring_model():
    cloth = with_overrides(parse_config({}), task="cloth_fold_diag_unpinned")
    assert cloth.env.compression_ratio == parse_config({"env": {"task": "cloth_fold_diag_unpinned"}}).env.compression_ratio == 0.0
    assert with_overrides(cloth, task="straighten_rope").env.compression_ratio == 1.0
    custom = with_overrides(parse_config({"env": {"compression_ratio": 0.5}}), task="cloth_fold")
    assert custom.env.compression_ratio == 0.5
    with pytest.raises(ConfigError, match="env.task"):
        with_overrides(parse_config({}), task="origami")


def test_task_override_keeps_expert_working():
    from dmfd.env import DeformableEnv
    from dmfd.expert import rollout_expert

    env = DeformableEnv(with_overrides(parse_config({}), task="cloth_fold_diag_unpinned").env)
    assert min(rollout_expert(env, s).p_hat_final for s in range(3)) > 0.7
