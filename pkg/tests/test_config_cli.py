from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndwp_atlas import cli
from ndwp_atlas.config import ConfigError, PipelineConfig
from ndwp_atlas.dataset import ParameterKey, row_id
from ndwp_atlas.floquet import PHASES
from ndwp_atlas.phase_portrait import Space
from ndwp_atlas.repr import EmbeddingVector, write_embeddings

TINY_TOML = """
seed = 5
output_root = "{out}"

[grid]
n_points = 128
n_time_steps = 256

[resonance]
n_periods = 10
section_seeds = 6

[sweep]
omega_values = [1.065]
F_values = [0.02]
F_st_values = [0.0]
n_states_per_point = 3

[training]
batch_size = 6
epochs = 2
embedding_dim = 3

[clustering]
k = 2
n_restarts = 2
"""


def write_config(tmp_path: Path, text: str = TINY_TOML, name: str = "cfg.toml") -> Path:
    p = tmp_path / name
    p.write_text(text.format(out=(tmp_path / "out").as_posix()))
    return p


@pytest.fixture(autouse=True)
def no_atlas_out(monkeypatch):
    monkeypatch.delenv("ATLAS_OUT", raising=False)


# ---------------------------------------------------------------- config

def test_defaults_validate_and_digest_stable():
    a, b = PipelineConfig(), PipelineConfig()
    a.validate()
    assert a.digest() == b.digest() and len(a.digest()) == 16


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        PipelineConfig.from_dict({"sweep": {"omegas": [1.0]}})
    with pytest.raises(ConfigError, match="top-level"):
        PipelineConfig.from_dict({"extra": 1})


@pytest.mark.parametrize("bad", [
    {"sweep": {"F_values": []}},
    {"sweep": {"phases": ["T8"]}},
    {"sweep": {"omega_range": [1.0, 0.5, 0.1]}},
    {"training": {"batch_size": 1}},
    {"clustering": {"k_min": 1}},
])
def test_invalid_sections(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        PipelineConfig.load(tmp_path / "nope.toml")
    (tmp_path / "bad.toml").write_text("seed = = 1")
    with pytest.raises(ConfigError, match="invalid TOML"):
        PipelineConfig.load(tmp_path / "bad.toml")


def test_stage_digests_only_see_their_sections():
    base = PipelineConfig()
    changed = PipelineConfig.from_dict({"report": {"mass_threshold": 0.6}})
    for stage in ("poincare", "generate", "train", "embed", "cluster"):
        assert base.digest(stage) == changed.digest(stage)
    assert base.digest("report") != changed.digest("report")
    assert base.replace(output_root="elsewhere").digest() == base.digest()
    assert base.replace(seed=1).digest("train") != base.digest("train")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_sub_seeds_distinct_per_stream(seed):
    cfg = PipelineConfig(seed=seed)
    assert cfg.sub_seed("train") != cfg.sub_seed("cluster")
    assert cfg.sub_seed("train") == PipelineConfig(seed=seed).sub_seed("train")


def test_shipped_desk_config_loads():
    from importlib import resources
    path = resources.files("ndwp_atlas").joinpath("configs", "desk.toml")
    cfg = PipelineConfig.load(Path(str(path)))
    assert cfg.seed == 7 and cfg.training.epochs == 30


# ---------------------------------------------------------------- CLI plumbing

def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run_subcommand(["frobnicate"]) == 1
    assert cli.run_subcommand(["poincare", "--config", str(tmp_path / "x.toml")]) == 1
    assert "config file not found" in capsys.readouterr().err
    cfg = write_config(tmp_path)
    assert cli.run_subcommand(["poincare", "--config", str(cfg), "--bogus"]) == 1


def test_cluster_before_embed(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.run_subcommand(["cluster", "--config", str(cfg)]) == 1
    assert "missing embeddings" in capsys.readouterr().err


def test_train_before_generate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.run_subcommand(["train", "--config", str(cfg)]) == 1
    assert "missing dataset" in capsys.readouterr().err


def fake_embeddings(tmp_path: Path, n_per_space: int = 20) -> PipelineConfig:
    """Embeddings plus upstream stamps, as if generate/train/embed had run."""
    cfg = PipelineConfig.load(write_config(tmp_path))
    paths = cli.Paths(cfg.out_root())
    for stage in ("generate", "train", "embed"):
        cli._stamp(paths.stage_dir(stage), stage, cfg)
    rng = np.random.default_rng(0)
    vecs = []
    for sp in (Space.CS, Space.PS):
        for s in range(n_per_space):
            k = ParameterKey(row_id(0, s, PHASES[0], sp), sp, PHASES[0], 1.0, 0.02, 0.0, -0.1, 0.0)
            vecs.append(EmbeddingVector(rng.normal(size=3) + 5 * (s % 3), k))
    write_embeddings(paths.embeddings / "embeddings.csv", vecs, cfg.digest("embed"))
    return cfg


def test_select_k_table_rows(tmp_path, capsys):
    fake_embeddings(tmp_path)
    cfgp = tmp_path / "cfg.toml"
    assert cli.run_subcommand(["select-k", "--config", str(cfgp), "--min", "2", "--max", "12"]) == 0
    for sp in ("CS", "PS"):
        with (tmp_path / "out" / "clusters" / f"silhouette_{sp}.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["K", "mean_silhouette", "min_cluster_size"]
        assert [int(r[0]) for r in rows[1:]] == list(range(2, 13))
    assert "recommended K = 3" in capsys.readouterr().out


def test_stale_upstream_refused_unless_forced(tmp_path, capsys):
    fake_embeddings(tmp_path)
    text = TINY_TOML.replace("epochs = 2", "epochs = 3")
    changed = write_config(tmp_path, text, "changed.toml")
    assert cli.run_subcommand(["cluster", "--config", str(changed)]) == 1
    assert "stale" in capsys.readouterr().err
    assert cli.run_subcommand(["cluster", "--config", str(changed), "--force"]) == 0
    labels = (tmp_path / "out" / "clusters" / "labels.csv").read_text().splitlines()
    assert len(labels) == 41


def test_atlas_out_overrides_output_root(tmp_path, monkeypatch):
    fake_embeddings(tmp_path)
    other = tmp_path / "other"
    monkeypatch.setenv("ATLAS_OUT", str(other))
    # The stamps live under the configured root, so the override root has no embeddings.
    assert cli.run_subcommand(["cluster", "--config", str(tmp_path / "cfg.toml")]) == 1
    monkeypatch.setenv("ATLAS_OUT", str(tmp_path / "out"))
    assert cli.run_subcommand(["cluster", "--config", str(tmp_path / "cfg.toml"),
                               "--out", str(other)]) == 0


def test_every_artifact_references_config_hash(tmp_path):
    cfg = fake_embeddings(tmp_path)
    assert cli.run_subcommand(["cluster", "--config", str(tmp_path / "cfg.toml")]) == 0
    stamp = json.loads((tmp_path / "out" / "clusters" / "stage.json").read_text())
    assert stamp["config_hash"] == cfg.digest("cluster")


# ---------------------------------------------------------------- end to end

@pytest.mark.slow
def test_all_twice_identical_flags(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert cli.run_subcommand(["all", "--config", str(cfg), "--deterministic"]) == 0
    out = tmp_path / "out"
    first = (out / "report" / "flags.csv").read_bytes()
    listed = capsys.readouterr().out.splitlines()
    assert str(out / "report" / "report.md") in listed
    assert first.startswith(b"label,verdict,coherence,min_mass,dispersion_ratio\n")
    # Second run in a fresh root from scratch.
    text = TINY_TOML.replace("{out}", (tmp_path / "out2").as_posix())
    cfg2 = tmp_path / "cfg2.toml"
    cfg2.write_text(text)
    assert cli.run_subcommand(["all", "--config", str(cfg2), "--deterministic"]) == 0
    assert (tmp_path / "out2" / "report" / "flags.csv").read_bytes() == first
    rows = (out / "dataset" / "manifest.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 3 * 2
    # Report refuses a manifest with mixed config hashes.
    lines = rows[:-1] + [rows[-1].rsplit(",", 1)[0] + ",deadbeef"]
    (out / "dataset" / "manifest.csv").write_text("\n".join(lines) + "\n")
    assert cli.run_subcommand(["report", "--config", str(cfg)]) == 1
    assert "mixes config hashes" in capsys.readouterr().err
    assert cli.run_subcommand(["report", "--config", str(cfg), "--force"]) == 0


@pytest.mark.slow
def test_augment_preview(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.run_subcommand(["generate", "--config", str(cfg)]) == 0
    assert cli.run_subcommand(["augment-preview", "--config", str(cfg), "--n", "2",
                               "--variants", "3"]) == 0
    from PIL import Image
    files = sorted((tmp_path / "out" / "augment_preview").glob("*.png"))
    assert len(files) == 2
    with Image.open(files[0]) as im:
        assert im.size == (600, 150)
