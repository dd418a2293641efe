import json

import pytest

from accent_units.config import PipelineConfig, load_config, with_overrides
from accent_units.exceptions import ContractError


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.json").write_text("")
    cfg = load_config(tmp_path / "c.json")
    assert cfg.quantizer.V == 500
    assert cfg.mlm.span.span_len == 10
    assert cfg.mlm.span.p_mask == 0.2
    assert cfg.corrector.K == 10 and cfg.corrector.p_mask == 0.2
    assert cfg.adapt.bottleneck == 1024
    assert cfg.adapt.schedule.steps == 30000 and cfg.adapt.schedule.warmup_steps == 5000
    assert cfg.adapt.schedule.peak_lr == 1.5e-3 and cfg.adapt.schedule.batch_size == 32


def test_zero_iterations_names_the_field(tmp_path):
    (tmp_path / "c.json").write_text('{"corrector": {"K": 0}}')
    with pytest.raises(ContractError, match=r"corrector\.K"):
        load_config(tmp_path / "c.json")


@pytest.mark.parametrize("body, field", [
    ('{"corrector": {"p_mask": 1.0}}', "corrector.p_mask"),
    ('{"mlm": {"encoder": {"model_dim": 10, "heads": 4}}}', "mlm.encoder"),
    ('{"quantizer": {"bogus": 1}}', "quantizer.bogus"),
    ('{"extra": {}}', "extra"),
])
def test_invalid_configs(tmp_path, body, field):
    (tmp_path / "c.json").write_text(body)
    with pytest.raises(ContractError, match=field.replace(".", r"\.")):
        load_config(tmp_path / "c.json")


def test_parse_error_and_missing_file(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ContractError, match="line 1"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ContractError):
        load_config(tmp_path / "absent.json")


def test_roundtrip_is_canonical(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": 3, "corrector": {"K": 5, "variant": "phone-groups"}}')
    cfg = load_config(tmp_path / "c.json")
    text = cfg.to_json()
    (tmp_path / "d.json").write_text(text)
    assert load_config(tmp_path / "d.json").to_json() == text
    data = json.loads(text)
    assert data["seed"] == 3 and data["corrector"]["K"] == 5 and data["quantizer"]["V"] == 500


def test_overrides_take_precedence():
    cfg = with_overrides(PipelineConfig(), {"corrector.K": 5, "seed": None, "adapt.schedule.steps": 6000})
    assert cfg.corrector.K == 5 and cfg.seed == 0 and cfg.adapt.schedule.steps == 6000
    with pytest.raises(ContractError, match=r"corrector\.K"):
        with_overrides(cfg, {"corrector.K": 0})
