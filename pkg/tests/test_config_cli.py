import json

import pytest

from hwtrigger import cli, config
from hwtrigger.config import ConfigError, ExperimentConfig

SMALL = """
seed = 3
[attack]
runs = 3
m_perm = 64
m_flip = 64
[defense]
ulps = [0, 10]
trials = 2
batch_sizes = [1, 2]
finetune_steps = [0, 1]
"""


def test_defaults_follow_architecture():
    cfg = ExperimentConfig()
    assert cfg.data.kind == "blobs" and cfg.dims == 16 and cfg.model.lr == 0.05
    cnn = config.from_dict({"model": {"arch": "cnn"}})
    assert cnn.data.kind == "images" and cnn.dims == (1, 8, 8)
    assert cnn.model.options["pool"] == "flatten"


def test_from_dict_rejects_unknown_keys():
    for raw in ({"bogus": 1}, {"data": {"bogus": 1}}, {"attack": {"bogus": 1}}, {"model": {"arch": "rnn"}},
                {"attack": {"h1": "nope"}}, {"defense": {"formats": ["fp8"]}}, {"attack": {"rho": 2.0}}):
        with pytest.raises(ConfigError):
            config.from_dict(raw)


def test_attack_section_maps_onto_params():
    cfg = config.from_dict({"attack": {"runs": 7, "num_targets": 2, "k_bits": 3, "h2": ["seq32"]}})
    assert cfg.attack.runs == 7 and cfg.attack.num_targets == 2
    assert cfg.attack.params.k_bits == 3 and cfg.attack.params.h2 == ("seq32",)


def test_custom_profiles():
    cfg = config.from_dict({"profiles": {"blk32x": {"tree": "blocked", "block_size": 32, "fma": True}},
                            "attack": {"h2": ["blk32x"]}})
    assert cfg.attack.params.h2 == ("blk32x",)
    with pytest.raises(ConfigError):
        config.from_dict({"profiles": {"blk4": {"tree": "sequential"}}})
    with pytest.raises(ConfigError):
        config.from_dict({"profiles": {"bad": {"tree": "spiral"}}})


def test_hash_and_seeds():
    a, b = ExperimentConfig(), ExperimentConfig(out="elsewhere")
    assert a.hash() == b.hash()
    assert a.hash() != ExperimentConfig(seed=1).hash()
    assert a.derive_seed("x", 1) == b.derive_seed("x", 1)
    assert a.derive_seed("x", 1) != a.derive_seed("x", 2)


def test_load_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL)
    cfg = config.load(p)
    assert cfg.seed == 3 and cfg.attack.runs == 3 and cfg.defense.ulps == [0, 10]
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("seed = [")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.toml")


# ---------------------------------------------------------------- CLI


def test_demo_frobenius(capsys):
    assert cli.main(["demo-frobenius"]) == 0
    out = capsys.readouterr().out
    n = int(out.strip().splitlines()[-1].split()[-1])
    assert n >= 2
    assert cli.main(["demo-frobenius", "--profiles", "seq32,nope"]) == cli.EXIT_CONFIG


def test_exit_codes(tmp_path):
    assert cli.main(["attack", "--out", str(tmp_path / "empty")]) == cli.EXIT_MISSING
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_MISSING
    assert cli.main(["train", "--config", str(tmp_path / "none.toml")]) == cli.EXIT_CONFIG
    assert cli.main(["attack", "--layer-mask", "a,b"]) == cli.EXIT_CONFIG
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["train", "--out", str(blocker / "sub")]) == cli.EXIT_OUTPUT
    with pytest.raises(SystemExit) as e:
        cli.main(["launch"])
    assert e.value.code == 2


def _pipeline(cfg_path, out):
    for cmd in ("train", "attack", "patch", "defend", "report"):
        assert cli.main([cmd, "--config", str(cfg_path), "--out", str(out)]) == 0, cmd


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.toml"
    cfg.write_text(SMALL)
    _pipeline(cfg, root / "a")
    _pipeline(cfg, root / "b")
    return root / "a", root / "b"


def test_pipeline_outputs(pipeline_dirs):
    a, _ = pipeline_dirs
    summary = json.loads((a / "attack" / "summary.json").read_text())
    assert summary["runs"] == 3 and summary["seed"] == 3
    rows = (a / "attack" / "results.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].endswith("seed,config_hash")
    for run in summary["successful_runs"]:
        assert (a / "attack" / f"run_{run:04d}.json").exists()
    for name in ("input_perturbation", "batch_size", "downcast", "finetune"):
        assert (a / "defense" / f"{name}.csv").exists()
    report = json.loads((a / "report.json").read_text())
    assert set(report) >= {"train", "attack", "patch", "defense", "seed", "config_hash"}


def test_pipeline_is_byte_deterministic(pipeline_dirs):
    a, b = pipeline_dirs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_cli_overrides(tmp_path):
    args = cli.build_parser().parse_args(["attack", "--seed", "9", "--runs", "2", "--variant", "perm",
                                          "--mode", "one-vs-rest", "--layer-mask", "4", "--out", str(tmp_path)])
    cfg = cli.resolve_config(args)
    p = cfg.attack.params
    assert (cfg.seed, cfg.attack.runs, p.variant, p.mode, p.layer_mask) == (9, 2, "perm", "one-vs-rest", (4,))
