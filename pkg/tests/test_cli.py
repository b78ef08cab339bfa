import json
import subprocess
import sys

import pytest

from t2avc.audio import load_wav
from t2avc.cli import main
from t2avc.manifest import read_manifest

from conftest import make_project


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["transmogrify"])
        assert info.value.code == 2

    def test_missing_required_flag_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["convert", "--target", "X"])
        assert info.value.code == 2

    def test_bad_config_exits_1(self, tmp_path, caplog):
        (tmp_path / "c.yaml").write_text("nonsense_key: 1\n")
        assert main(["prepare-stats", "--config", str(tmp_path / "c.yaml")]) == 1
        assert "prepare-stats failed" in caplog.text and "nonsense_key" in caplog.text

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "t2avc", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and "t2avc" in out.stdout


class TestToyCorpus:
    def test_writes_manifests_and_config(self, tmp_path):
        assert main(["toy-corpus", "--out", str(tmp_path / "toy"), "--n", "3"]) == 0
        for group in ("typical", "atypical"):
            rows = read_manifest(tmp_path / "toy" / group / "manifest.jsonl")
            assert len(rows) == 3 and all(r.alignment_path for r in rows)
        assert (tmp_path / "toy" / "config.yaml").exists()


class TestStages:
    def test_prepare_stats_out_overrides_work_dir(self, tmp_path):
        cfg = make_project(tmp_path, n=3)
        assert main(["prepare-stats", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")]) == 0
        assert (tmp_path / "elsewhere" / "sims.bin").exists()
        assert not (tmp_path / "artifacts").exists()

    def test_prepare_stats_is_deterministic(self, tmp_path):
        cfg = make_project(tmp_path, n=3)
        for name in ("a", "b"):
            assert main(["prepare-stats", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys() and all(a[k] == b[k] for k in a if k.parts[0] != "logs")


class TestConvert:
    def test_convert_writes_wav(self, trained_project, pin_ratio, tmp_path):
        pin_ratio(1.2)
        m = trained_project.parent / "typical" / "manifest.jsonl"
        src = read_manifest(m)[0].resolve(m.parent)
        out = tmp_path / "g.wav"
        assert main(["convert", "--config", str(trained_project), "--source", str(src), "--target", "DYS01",
                     "--out", str(out), "--seed", "2"]) == 0
        g, s = load_wav(out), load_wav(src)
        assert abs(len(g) - 1.2 * len(s)) <= 0.05 * 1.2 * len(s)

    def test_augment_twice_is_byte_identical(self, trained_project, pin_ratio, tmp_path):
        pin_ratio(1.0)
        m = trained_project.parent / "typical" / "manifest.jsonl"
        for name in ("a", "b"):
            assert main(["augment", "--config", str(trained_project), "--manifest", str(m),
                         "--out", str(tmp_path / name), "--seed", "5"]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a and a == b
        assert len(read_manifest(tmp_path / "a" / "manifest.jsonl")) == len(read_manifest(m))

    def test_evaluate_writes_reports(self, trained_project, tmp_path):
        root = trained_project.parent
        prefix = tmp_path / "report"
        assert main(["evaluate", "--config", str(trained_project),
                     "--control", str(root / "typical" / "manifest.jsonl"),
                     "--test", f"Real={root / 'atypical' / 'manifest.jsonl'}", "--out", str(prefix)]) == 0
        payload = json.loads(prefix.with_suffix(".json").read_text())
        assert "Real" in payload
        assert prefix.with_suffix(".tsv").read_text().startswith("metric\t")
