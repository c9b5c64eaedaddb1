import pytest

from senc.config import RunConfig
from senc.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.K, cfg.n, cfg.c) == (4, 18, 64)
    assert (cfg.rnn_layers, cfg.rnn_hidden, cfg.gnn_layers, cfg.gnn_hidden) == (2, 128, 2, 64)
    assert cfg.focal_gamma == 2.0 and cfg.lr == 1e-4 and cfg.adam_betas == (0.9, 0.99)
    assert cfg.epochs == 100 and cfg.use_gnn and cfg.use_edge_feat and cfg.use_psl


def test_text_round_trip():
    cfg = RunConfig(K=6, lr=3.5e-4, adam_betas=(0.8, 0.95), use_gnn=False, seed=17)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert RunConfig.from_text(RunConfig().to_text()).to_text() == RunConfig().to_text()


def test_comments_and_blank_lines(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# header\n\nK = 2  # fewer neighbours\nuse_psl=off\n")
    cfg = RunConfig.load(p)
    assert cfg.K == 2 and cfg.use_psl is False and cfg.n == 18


@pytest.mark.parametrize("text", ["bogus=1\n", "K\n", "K=two\n", "use_gnn=maybe\n", "adam_betas=0.9\n", "c=30\n"])
def test_bad_text_is_config_error(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_overrides_and_diff():
    a = RunConfig()
    b = a.with_overrides(K=8, use_edge_feat=False)
    assert b.K == 8 and a.K == 4
    assert a.diff(b) == ["K: 4 != 8", "use_edge_feat: True != False"]
    assert a.diff(a) == []
    with pytest.raises(ConfigError):
        a.with_overrides(k=3)


@pytest.mark.parametrize("kw", [dict(K=0), dict(lr=0.0), dict(focal_gamma=-1.0), dict(epochs=-1), dict(c=62)])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)
