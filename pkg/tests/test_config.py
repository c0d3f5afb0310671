import pytest
from hypothesis import given, settings, strategies as st

from protofg3d.config import TrainConfig, config_from_text, dump_config, load_config, parse_overrides
from protofg3d.errors import ContractError, IoFailure, ParseError, UnknownKey


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("")
    cfg = load_config(tmp_path / "c.txt")
    assert cfg == TrainConfig()
    assert (cfg.K, cfg.tau, cfg.alpha, cfg.eta0, cfg.epochs, cfg.batch_size, cfg.lr0) == (20, 0.1, 0.2, 0.999, 100, 32, 0.005)
    assert (cfg.momentum, cfg.weight_decay, cfg.warmup_epochs) == (0.9, 0.001, 5)


def test_single_key_keeps_other_defaults(tmp_path):
    (tmp_path / "c.txt").write_text("alpha=0.2\n")
    assert load_config(tmp_path / "c.txt") == TrainConfig()
    assert config_from_text("alpha = 0.5  # stronger") == TrainConfig(alpha=0.5)


def test_bad_value_names_line():
    with pytest.raises(ParseError) as info:
        config_from_text("alpha=abc")
    assert info.value.line == 1
    assert str(info.value).startswith("<config>:1:")


def test_unknown_key_names_line():
    with pytest.raises(UnknownKey) as info:
        config_from_text("# header\nK=10\nbeta=3\n", source="cfg.txt")
    assert info.value.line == 3 and "beta" in str(info.value) and "cfg.txt" in str(info.value)


def test_missing_equals():
    with pytest.raises(ParseError):
        parse_overrides([(4, "epochs 10")])


def test_out_of_range_value_is_parse_error():
    with pytest.raises(ParseError):
        config_from_text("eta0=1.5")


def test_booleans_and_strings():
    cfg = config_from_text("snap_final_epoch=true\nsolver_kind=apdagd\naggregation=mean_embedding")
    assert cfg.snap_final_epoch is True and cfg.solver_kind == "apdagd" and cfg.aggregation == "mean_embedding"
    with pytest.raises(ParseError):
        config_from_text("renormalize=maybe")


def test_validation_rejects_bad_enum():
    with pytest.raises(ContractError):
        TrainConfig(solver_kind="lp")


def test_missing_file():
    with pytest.raises(IoFailure):
        load_config("/nonexistent/cfg.txt")


@settings(max_examples=50, deadline=None)
@given(
    K=st.integers(1, 64),
    kappa=st.floats(1e-4, 10),
    alpha=st.floats(0, 5),
    eta0=st.floats(0.01, 0.99999),
    snap=st.booleans(),
    solver=st.sampled_from(["sinkhorn", "apdagd"]),
)
def test_dump_reparses_identically(K, kappa, alpha, eta0, snap, solver):
    cfg = TrainConfig(K=K, kappa=kappa, alpha=alpha, eta0=eta0, snap_final_epoch=snap, solver_kind=solver)
    text = dump_config(cfg)
    assert config_from_text(text) == cfg
    assert dump_config(config_from_text(text)) == text
