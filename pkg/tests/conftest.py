from pathlib import Path

import pytest
import yaml

from t2avc.synthetic import ATYPICAL, TYPICAL, write_corpus

# Small enough that every stage finishes in seconds; only wiring is under test.
TINY_CONFIG = {
    "preset": "desk",
    "seed": 0,
    "encoder": {"d_model": 16, "n_heads": 2, "n_blocks": 1, "d_ff": 32, "head_channels": 16,
                "batch_size": 4, "max_steps": 3},
    "decoder": {"base_width": 8, "dim_mults": [1, 2], "crop_frames": 16, "cond_frames": 16, "batch_size": 2,
                "max_steps": 2},
    "finetune": {"batch_size": 2, "max_steps": 2},
    "sampler": {"n_steps": 3},
    "vocoder": {"n_iters": 4},
}


def make_project(root: Path, n: int = 4, extra: dict | None = None) -> Path:
    typ = write_corpus(root / "typical", [TYPICAL], n, seed=0, group="control")
    aty = write_corpus(root / "atypical", [ATYPICAL], n, seed=1, group="VL")
    cfg = {**TINY_CONFIG, **(extra or {}),
           "paths": {"typical_manifest": str(typ.relative_to(root)), "atypical_manifest": str(aty.relative_to(root)),
                     "work_dir": "artifacts"}}
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="session")
def trained_project(tmp_path_factory):
    """A toy corpus with every stage run once through the library API."""
    from t2avc.pipeline import finetune_stage, load_config, prepare_stats, train_decoder_stage, train_encoder_stage

    root = tmp_path_factory.mktemp("project")
    cfg_path = make_project(root)
    cfg = load_config(cfg_path)
    prepare_stats(cfg)
    train_encoder_stage(cfg)
    train_decoder_stage(cfg)
    finetune_stage(cfg)
    return cfg_path


@pytest.fixture
def pin_ratio(monkeypatch):
    """Make the target's mean duration a fixed multiple of the source's, whatever the encoder predicts.

    The toy encoder is trained for a handful of steps, so its segmentation says nothing about durations.
    """
    import t2avc.pipeline as pl

    def pin(ratio):
        seen = {}
        real_query = pl.source_duration_query

        def spy(out):
            q = real_query(out)
            seen["t_s"] = q.t_s
            return q
        monkeypatch.setattr(pl, "source_duration_query", spy)
        monkeypatch.setattr(pl, "target_mean_duration", lambda phones, stats, target: seen["t_s"] * ratio)
    return pin


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
