import json

import numpy as np
import pytest

from t2avc.audio import Waveform, save_wav
from t2avc.evaluation import Utterance, generate_augmentation_set, p_metric_report, write_reports
from t2avc.manifest import ManifestError, ManifestRow, read_manifest, write_manifest
from t2avc.synthetic import ATYPICAL, TYPICAL, WORDS, synth_utterance


def corpus(speaker, words, seed, group=None, snr_db=None):
    rng = np.random.default_rng(seed)
    out = []
    for w in words:
        wav, _ = synth_utterance(WORDS[w] + WORDS[w], speaker, rng)
        if snr_db is not None:
            n = rng.normal(size=len(wav))
            n *= np.sqrt(np.mean(wav.samples ** 2) / np.mean(n ** 2)) * 10 ** (-snr_db / 20)
            wav = Waveform(wav.samples + n)
        out.append(Utterance(f"{speaker.speaker_id}_{w}_{seed}", speaker.speaker_id, w, wav, group))
    return out


WORDS_USED = ["MAS", "SIM", "MUSE"]


class TestReport:
    def test_control_against_itself(self):
        control = corpus(TYPICAL, WORDS_USED, 0)
        rep = p_metric_report(control, control, {TYPICAL.speaker_id: "H"})
        for v in rep.per_speaker[TYPICAL.speaker_id].values():
            assert v == pytest.approx(1.0, abs=1e-3)
        assert rep.per_group["H"]["P-STOI"] == pytest.approx(1.0, abs=1e-3)

    def test_corrupted_group_scores_lower(self):
        control = corpus(TYPICAL, WORDS_USED, 0)
        clean = [Utterance(u.id + "c", "A", u.word, u.audio, "H") for u in corpus(TYPICAL, WORDS_USED, 1)]
        noisy = [Utterance(u.id + "n", "B", u.word, u.audio, "VL") for u in corpus(TYPICAL, WORDS_USED, 2, snr_db=-5)]
        rep = p_metric_report(control, clean + noisy)
        for m in ("P-STOI", "P-ESTOI"):
            assert rep.per_group["VL"][m] < rep.per_group["H"][m]

    def test_brute_force_aggregation_and_order(self):
        control = corpus(TYPICAL, WORDS_USED, 0) + corpus(TYPICAL, WORDS_USED, 5)
        test = corpus(ATYPICAL, WORDS_USED, 3, group="VL")
        rep = p_metric_report(control, test)
        again = p_metric_report(control[::-1], test[::-1])
        assert rep.per_speaker == again.per_speaker
        from t2avc.evaluation import pair_scores
        per_utt = [np.mean([pair_scores(c, u)[0] for c in control if c.word == u.word]) for u in test]
        assert rep.per_speaker[ATYPICAL.speaker_id]["P-STOI"] == pytest.approx(np.mean(per_utt))

    def test_missing_word_reported(self):
        control = corpus(TYPICAL, ["MAS"], 0)
        rep = p_metric_report(control, corpus(ATYPICAL, ["MAS", "SIM"], 1))
        assert len(rep.missing) == 1 and rep.counts[ATYPICAL.speaker_id] == 1

    def test_write_reports(self, tmp_path):
        control = corpus(TYPICAL, ["MAS"], 0)
        rep = p_metric_report(control, corpus(ATYPICAL, ["MAS"], 1, group="L"))
        tsv, js = write_reports(tmp_path / "r", {"Real": rep}, {"S_T": 1.0})
        lines = tsv.read_text().splitlines()
        assert lines[0] == "metric\tL" and lines[1].startswith("P-STOI (Real)\t")
        payload = json.loads(js.read_text())
        assert payload["similarity"] == {"S_T": 1.0} and "per_group" in payload["Real"]


def control_manifest(tmp_path, n=3):
    rows = []
    rng = np.random.default_rng(0)
    for i, w in enumerate(WORDS_USED[:n]):
        wav, _ = synth_utterance(WORDS[w], TYPICAL, rng)
        save_wav(tmp_path / "src" / f"u{i}.wav", wav)
        rows.append(ManifestRow(f"u{i}", f"u{i}.wav", TYPICAL.speaker_id, w))
    return write_manifest(tmp_path / "src" / "manifest.jsonl", rows)


def fake_convert(wav, target, seed):
    rng = np.random.default_rng(seed)
    return Waveform(wav.samples * 0.5 + 0.001 * rng.normal(size=len(wav)), wav.sample_rate_hz)


class TestAugmentation:
    def test_counts(self, tmp_path):
        m = control_manifest(tmp_path)
        summary = generate_augmentation_set(read_manifest(m), ["T1", "T2"], fake_convert, tmp_path / "out", 0, m.parent)
        rows = read_manifest(summary.manifest)
        assert summary.written == summary.expected == 6 and len(rows) == 6
        assert len(list((tmp_path / "out" / "wav").rglob("*.wav"))) == 6
        assert {r.target_id for r in rows} == {"T1", "T2"} and all(r.source_speaker == "CTL01" for r in rows)

    def test_deterministic(self, tmp_path):
        m = control_manifest(tmp_path)
        for name in ("a", "b"):
            generate_augmentation_set(read_manifest(m), ["T1"], fake_convert, tmp_path / name, 7, m.parent)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_failures_skipped(self, tmp_path):
        m = control_manifest(tmp_path)

        def flaky(wav, target, seed):
            if target == "BAD":
                raise RuntimeError("boom")
            return wav
        summary = generate_augmentation_set(read_manifest(m), ["OK", "BAD"], flaky, tmp_path / "o", 0, m.parent)
        assert summary.written == 3 and len(summary.failures) == 3


class TestManifest:
    def test_roundtrip(self, tmp_path):
        rows = [ManifestRow("a", "x.wav", "S", "W", alignment_path="x.tsv", group="H")]
        write_manifest(tmp_path / "m.jsonl", rows)
        assert read_manifest(tmp_path / "m.jsonl") == rows
        assert rows[0].resolve(tmp_path) == tmp_path / "x.wav"

    @pytest.mark.parametrize("line,msg", [
        ('{"id": "a", "audio_path": "x", "speaker_id": "s"}', "missing"),
        ('{"id": "a", "audio_path": "x", "speaker_id": "s", "word": "w", "extra": 1}', "unknown"),
        ("not json", "invalid JSON"),
    ])
    def test_errors(self, tmp_path, line, msg):
        (tmp_path / "m.jsonl").write_text(line + "\n")
        with pytest.raises(ManifestError, match=msg):
            read_manifest(tmp_path / "m.jsonl")

    def test_duplicate_ids(self, tmp_path):
        line = '{"id": "a", "audio_path": "x", "speaker_id": "s", "word": "w"}\n'
        (tmp_path / "m.jsonl").write_text(line * 2)
        with pytest.raises(ManifestError, match="duplicate"):
            read_manifest(tmp_path / "m.jsonl")
