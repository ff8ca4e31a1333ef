import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lmalign import config as cfgmod
from lmalign.config import ConfigError, RunConfig


def test_default_roundtrip_is_byte_identical():
    text = cfgmod.dumps(RunConfig())
    assert cfgmod.dumps(cfgmod.loads(text)) == text


@given(
    st.integers(1, 10_000),
    st.floats(1e-6, 1.0, allow_nan=False),
    st.booleans(),
    st.sampled_from(["attention", "mean"]),
    st.text("abcdef/_-", min_size=1, max_size=20),
)
def test_roundtrip_property(steps, lr, rpo, pool, path):
    rc = RunConfig()
    rc.train.total_steps = steps
    rc.train.warmup_steps = min(steps, 10)
    rc.train.peak_lr = lr
    rc.encoder.rpo_enabled = rpo
    rc.encoder.pooling_mode = pool
    rc.data.dataset_dir = path
    text = cfgmod.dumps(rc)
    back = cfgmod.loads(text)
    assert back == rc
    assert cfgmod.dumps(back) == text


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.loads("[train]\nbatch_sise = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        cfgmod.loads("[optimizer]\nlr = 3\n")
    with pytest.raises(ConfigError, match="bad value"):
        cfgmod.loads("[train]\nbatch_size = many\n")
    with pytest.raises(ConfigError, match="true or false"):
        cfgmod.loads("[encoder]\nrpo_enabled = maybe\n")


def test_partial_file_keeps_defaults():
    rc = cfgmod.loads("# comment\n[train]\ntotal_steps = 7\n")
    assert rc.train.total_steps == 7 and rc.train.batch_size == 64


FLAGS = ["no_rpo", "mean_pool", "no_lora", "no_distill", "ln_prefix"]


@pytest.mark.parametrize("subset", [s for k in range(6) for s in itertools.combinations(FLAGS, k)])
def test_ablation_flags_compose(subset, tokenizer):
    rc = RunConfig().apply_ablations(**{f: True for f in subset})
    cfg = rc.encoder_config(tokenizer.vocab_size, 32)
    assert cfg.rpo_enabled == ("no_rpo" not in subset)
    assert (cfg.pooling_mode == "mean") == ("mean_pool" in subset)
    assert (cfg.lora is None) == ("no_lora" in subset or "ln_prefix" in subset)
    assert (cfg.ln_prefix is not None) == ("ln_prefix" in subset)
    assert (rc.loss_config().distill_weight == 0) == ("no_distill" in subset)
    rc.train_config()
