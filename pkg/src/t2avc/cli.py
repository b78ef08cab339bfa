"""Command-line entry point.

Exit status is 0 on success, 1 when a stage fails and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .audio import load_wav, save_wav
from .evaluation import Utterance, generate_augmentation_set, p_metric_report, write_reports
from .manifest import read_manifest
from .pipeline import (
    PipelineConfig,
    config_from_dict,
    convert_utterance,
    convert_utterance_detailed,
    finetune_stage,
    load_config,
    load_handle,
    make_provider,
    prepare_stats,
    train_decoder_stage,
    train_encoder_stage,
)
from .speaker import similarity_protocol

log = logging.getLogger("t2avc")

# stages whose --out names the artifact directory
_STAGES = {"prepare-stats", "train-encoder", "train-decoder", "finetune"}


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "work_dir", None):
        cfg.paths.work_dir = str(Path(args.work_dir).resolve())
    elif args.command in _STAGES and getattr(args, "out", None):
        cfg.paths.work_dir = str(Path(args.out).resolve())
    return cfg


def cmd_toy_corpus(args) -> int:
    from .synthetic import ATYPICAL, TYPICAL, write_corpus

    out = Path(args.out)
    typ = write_corpus(out / "typical", [TYPICAL], args.n, seed=args.seed or 0, group="control")
    aty = write_corpus(out / "atypical", [ATYPICAL], args.n, seed=(args.seed or 0) + 1, group="VL")
    cfg = {"preset": "desk", "seed": args.seed or 0,
           "paths": {"typical_manifest": str(typ.relative_to(out)), "atypical_manifest": str(aty.relative_to(out)),
                     "work_dir": "artifacts"}}
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    print(out / "config.yaml")
    return 0


def cmd_prepare_stats(args) -> int:
    prepare_stats(_config(args))
    return 0


def cmd_train_encoder(args) -> int:
    train_encoder_stage(_config(args))
    return 0


def cmd_train_decoder(args) -> int:
    train_decoder_stage(_config(args))
    return 0


def cmd_finetune(args) -> int:
    for spk, path in finetune_stage(_config(args), args.speaker or None).items():
        print(f"{spk}\t{path}")
    return 0


def cmd_convert(args) -> int:
    cfg = _config(args)
    handle = load_handle(cfg)
    res = convert_utterance_detailed(handle, load_wav(args.source), args.target, cfg.seed, args.n_steps)
    save_wav(args.out, res.waveform)
    print(json.dumps({"out": str(args.out), "t_s": res.query.t_s, "t_t": res.query.t_t, "ratio": res.ratio,
                      "frames": int(res.mel.shape[0])}))
    return 0


def cmd_augment(args) -> int:
    cfg = _config(args)
    handle = load_handle(cfg)
    manifest = Path(args.manifest)
    rows = read_manifest(manifest)
    targets = args.target or handle.targets()
    if not targets:
        raise RuntimeError("no fine-tuned target decoders found; run finetune first")

    def convert(wav, target, seed):
        return convert_utterance(handle, wav, target, seed, args.n_steps)

    summary = generate_augmentation_set(rows, targets, convert, args.out, cfg.seed, manifest.parent)
    print(f"{summary.written}/{summary.expected} utterances -> {summary.manifest}")
    return 0 if not summary.failures else 1


def _utterances(path, group=None) -> list[Utterance]:
    path = Path(path)
    return [Utterance(r.id, r.speaker_id, r.word, load_wav(r.resolve(path.parent)), r.group or group)
            for r in read_manifest(path)]


def cmd_evaluate(args) -> int:
    control = _utterances(args.control)
    reports = {}
    for spec in args.test:
        name, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--test expects NAME=MANIFEST, got {spec!r}")
        reports[name] = p_metric_report(control, _utterances(path))
    similarity = None
    if args.augmented:
        cfg = _config(args)
        provider = make_provider(cfg)
        aug_path = Path(args.augmented)
        aug = read_manifest(aug_path)
        emb = lambda wav, uid: provider.embed(wav, uid)  # noqa: E731
        sources, targets, converted = {}, {}, {}
        for u in control:
            sources.setdefault(u.speaker_id, []).append(emb(u.audio, u.id))
        if args.targets:
            for u in _utterances(args.targets):
                targets.setdefault(u.speaker_id, []).append(emb(u.audio, u.id))
        for r in aug:
            e = emb(load_wav(r.resolve(aug_path.parent)), r.id)
            converted.setdefault((r.source_speaker, r.target_id), []).append(e)
        rep = similarity_protocol(sources, targets, converted)
        similarity = {**rep.as_percent(), "n_pairs": rep.n_pairs}
    tsv, js = write_reports(args.out, reports, similarity)
    print(tsv.read_text(encoding="utf-8"), end="")
    if similarity:
        print(json.dumps(similarity))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2avc", description="Typical-to-atypical voice conversion toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", type=Path, help="pipeline YAML config")
            sp.add_argument("--work-dir", help="override paths.work_dir")
        sp.add_argument("--seed", type=int, default=None, help="root seed")
        sp.set_defaults(func=fn)
        return sp

    sp = add("toy-corpus", cmd_toy_corpus, "write a synthetic two-speaker corpus and config", config=False)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--n", type=int, default=24, help="utterances per speaker")

    for name, fn, help_ in (
            ("prepare-stats", cmd_prepare_stats, "build SIMS dictionary and duration tables"),
            ("train-encoder", cmd_train_encoder, "train the content encoder"),
            ("train-decoder", cmd_train_decoder, "pre-train the diffusion decoder on typical speech"),
            ("finetune", cmd_finetune, "fine-tune one decoder per atypical speaker")):
        sp = add(name, fn, help_)
        sp.add_argument("--out", type=Path, default=None, help="artifact directory (default: paths.work_dir)")
    sp.add_argument("--speaker", action="append", help="restrict to these speakers")

    sp = add("convert", cmd_convert, "convert one utterance")
    sp.add_argument("--source", required=True, type=Path)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--n-steps", type=int, default=None)

    sp = add("augment", cmd_augment, "convert a control manifest towards target speakers")
    sp.add_argument("--manifest", required=True, type=Path)
    sp.add_argument("--target", action="append", help="target speaker (default: all fine-tuned)")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--n-steps", type=int, default=None)

    sp = add("evaluate", cmd_evaluate, "P-STOI/P-ESTOI tables and speaker similarity")
    sp.add_argument("--control", required=True, type=Path, help="control manifest")
    sp.add_argument("--test", action="append", default=[], metavar="NAME=MANIFEST")
    sp.add_argument("--augmented", type=Path, help="augmentation manifest for the similarity protocol")
    sp.add_argument("--targets", type=Path, help="real target-speaker manifest for the similarity protocol")
    sp.add_argument("--out", required=True, type=Path, help="report prefix (.tsv and .json)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
