"""Configuration, training stages, artifact lifecycle and end-to-end conversion."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .alignment import (
    DurationStats,
    PhonemeAlignment,
    PhonemeInventory,
    SimsDictionary,
    build_duration_stats,
    build_sims_dictionary,
    frame_labels,
    frame_log_durations,
    ground_truth_sims,
    load_duration_stats,
    load_sims_dictionary,
    parse_alignment,
    read_alignment_lines,
    save_duration_stats,
    save_sims_dictionary,
)
from .audio import (
    SAMPLE_RATE,
    GriffinLimVocoder,
    MelSpectrogram,
    Waveform,
    load_wav,
    mel_spectrogram,
    resample,
)
from .checkpoint import derive_seed
from .diffusion import (
    DecoderConfig,
    DecoderItem,
    FinetuneConfig,
    ScoreNetwork,
    decode_mel,
    finetune_decoder,
    load_decoder,
    save_decoder,
    train_decoder,
)
from .duration import StretchSpec, target_mean_duration, tempo_stretch
from .encoder import (
    ContentEncoder,
    DurationQuery,
    EncoderConfig,
    EncoderItem,
    encode,
    load_encoder,
    save_encoder,
    source_duration_query,
    train_encoder,
)
from .manifest import ManifestRow, read_manifest
from .speaker import (
    FileEmbeddingProvider,
    SpeakerEmbedding,
    StatsEmbeddingProvider,
    mean_embedding,
    read_embedding_file,
    write_embedding_file,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class PathsConfig:
    typical_manifest: str | None = None
    atypical_manifest: str | None = None
    work_dir: str = "artifacts"


@dataclass
class EmbeddingConfig:
    provider: str = "mel-stats"
    dim: int = 256
    seed: int = 1234
    file: str | None = None


@dataclass
class SamplerConfig:
    n_steps: int = 100


@dataclass
class VocoderConfig:
    n_iters: int = 60
    seed: int = 0


@dataclass
class StretchConfig:
    window_s: float = 0.05
    tolerance_s: float = 0.01


_ENCODER_KEYS = {f.name for f in dataclasses.fields(EncoderConfig)} - {"n_phonemes"}

# Full-scale reference values live in the dataclass defaults; "desk" shrinks model
# widths and step budgets so every stage runs on a laptop CPU.
PRESETS: dict[str, dict[str, Any]] = {
    "reference": {},
    "desk": {
        "encoder": {"batch_size": 16, "epochs": 100000, "max_steps": 400},
        "decoder": {"base_width": 16, "attention": False, "crop_frames": 64, "cond_frames": 64,
                    "batch_size": 8, "lr": 5e-4, "epochs": 100000, "max_steps": 600},
        "finetune": {"lr": 2e-4, "batch_size": 8, "epochs": 100000, "max_steps": 1500},
    },
}


@dataclass
class PipelineConfig:
    preset: str = "desk"
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    encoder: dict = field(default_factory=dict)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    stretch: StretchConfig = field(default_factory=StretchConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work_dir(self) -> Path:
        return self.path(self.paths.work_dir)

    def encoder_config(self, n_phonemes: int) -> EncoderConfig:
        return EncoderConfig(n_phonemes=n_phonemes, **self.encoder)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["decoder"]["dim_mults"] = list(d["decoder"]["dim_mults"])
        return d


_SECTIONS = {
    "paths": PathsConfig, "embedding": EmbeddingConfig, "decoder": DecoderConfig,
    "finetune": FinetuneConfig, "sampler": SamplerConfig, "vocoder": VocoderConfig, "stretch": StretchConfig,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict | None, base_dir=".") -> PipelineConfig:
    """Validate a raw mapping (preset values first, then ``raw``)."""
    raw = dict(raw or {})
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], raw)
    top = {"preset", "seed", "encoder", *_SECTIONS}
    unknown = set(merged) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {"preset": preset, "seed": int(merged.get("seed", 0)), "base_dir": Path(base_dir)}
    enc = merged.get("encoder", {}) or {}
    bad = set(enc) - _ENCODER_KEYS
    if bad:
        raise ConfigError(f"unknown encoder keys: {sorted(bad)}")
    kwargs["encoder"] = dict(enc)
    for name, cls in _SECTIONS.items():
        section = merged.get(name, {}) or {}
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        try:
            kwargs[name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from None
    cfg = PipelineConfig(**kwargs)
    if cfg.embedding.provider not in ("mel-stats", "file"):
        raise ConfigError(f"unknown embedding provider {cfg.embedding.provider!r}")
    if cfg.embedding.provider == "file" and not cfg.embedding.file:
        raise ConfigError("embedding.file is required for the file provider")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(raw, base_dir=path.parent)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


# --------------------------------------------------------------------------
# corpus loading
# --------------------------------------------------------------------------

@dataclass
class PreparedUtterance:
    row: ManifestRow
    wav: Waveform
    mel: MelSpectrogram
    alignment: PhonemeAlignment | None = None
    labels: np.ndarray | None = None


def to_internal_rate(w: Waveform) -> Waveform:
    return w if w.sample_rate_hz == SAMPLE_RATE else resample(w, SAMPLE_RATE)


def load_rows(manifest) -> tuple[list[ManifestRow], Path]:
    manifest = Path(manifest)
    return read_manifest(manifest), manifest.parent


def prepare_utterances(rows, base_dir, inventory: PhonemeInventory | None,
                       require_alignment: bool = False) -> list[PreparedUtterance]:
    out = []
    for row in rows:
        wav = to_internal_rate(load_wav(row.resolve(base_dir)))
        mel = mel_spectrogram(wav)
        ali_path = row.resolve_alignment(base_dir)
        if ali_path is None:
            if require_alignment:
                raise ConfigError(f"utterance {row.id} has no alignment_path")
            out.append(PreparedUtterance(row, wav, mel))
            continue
        ali = parse_alignment(ali_path, inventory)
        out.append(PreparedUtterance(row, wav, mel, ali, frame_labels(ali, mel.n_frames, mel.hop_s)))
    return out


def collect_inventory(*row_sets) -> PhonemeInventory:
    labels = set()
    for rows, base in row_sets:
        for row in rows:
            p = row.resolve_alignment(base)
            if p is not None:
                labels.update(lab for lab, _, _ in read_alignment_lines(p))
    return PhonemeInventory.from_labels(labels)


def make_provider(cfg: PipelineConfig):
    if cfg.embedding.provider == "file":
        return FileEmbeddingProvider(cfg.path(cfg.embedding.file))
    return StatsEmbeddingProvider(cfg.embedding.dim, cfg.embedding.seed)


# --------------------------------------------------------------------------
# artifact layout
# --------------------------------------------------------------------------

class Artifacts:
    def __init__(self, work_dir):
        self.root = Path(work_dir)

    sims = property(lambda self: self.root / "sims.bin")
    durations = property(lambda self: self.root / "durations.bin")
    encoder = property(lambda self: self.root / "encoder.ckpt")
    decoder_base = property(lambda self: self.root / "decoder_base.ckpt")
    speakers = property(lambda self: self.root / "speakers.emb")

    def decoder(self, speaker: str) -> Path:
        return self.root / "decoders" / f"{speaker}.ckpt"

    def log(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.json"

    def write_log(self, stage: str, payload: dict) -> None:
        p = self.log(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def prepare_stats(cfg: PipelineConfig) -> tuple[SimsDictionary, DurationStats]:
    """Build the mean-mel dictionary (typical speech) and duration tables (all speakers)."""
    art = Artifacts(cfg.work_dir)
    art.root.mkdir(parents=True, exist_ok=True)
    if cfg.paths.typical_manifest is None:
        raise ConfigError("paths.typical_manifest is required")
    typ_rows, typ_base = load_rows(cfg.path(cfg.paths.typical_manifest))
    sets = [(typ_rows, typ_base)]
    if cfg.paths.atypical_manifest:
        sets.append(load_rows(cfg.path(cfg.paths.atypical_manifest)))
    inventory = collect_inventory(*sets)
    typical = prepare_utterances(typ_rows, typ_base, inventory, require_alignment=True)
    sims = build_sims_dictionary(((u.mel.frames, u.labels) for u in typical), inventory)
    timed = [(u.row.speaker_id, u.alignment) for u in typical]
    for rows, base in sets[1:]:
        for row in rows:
            p = row.resolve_alignment(base)
            if p is not None:
                timed.append((row.speaker_id, parse_alignment(p, inventory)))
    stats = build_duration_stats(timed, inventory)
    save_sims_dictionary(art.sims, sims)
    save_duration_stats(art.durations, stats)
    log.info("wrote %s and %s (%d phonemes, %d speakers)", art.sims, art.durations, len(inventory),
             len(stats.table))
    return sims, stats


def encoder_items(utts, sims: SimsDictionary) -> list[EncoderItem]:
    items = []
    for u in utts:
        log_dur, mask = frame_log_durations(u.alignment, u.mel.n_frames, u.mel.hop_s)
        items.append(EncoderItem(u.mel.frames, ground_truth_sims(u.mel.frames, u.labels, sims), u.labels,
                                 log_dur, mask))
    return items


def train_encoder_stage(cfg: PipelineConfig, seed: int | None = None) -> ContentEncoder:
    art = Artifacts(cfg.work_dir)
    sims = load_sims_dictionary(art.sims)
    rows, base = load_rows(cfg.path(cfg.paths.typical_manifest))
    utts = prepare_utterances(rows, base, sims.inventory, require_alignment=True)
    seed = derive_seed(cfg.seed if seed is None else seed, "train-encoder")
    model, log_ = train_encoder(encoder_items(utts, sims), cfg.encoder_config(len(sims.inventory)), seed)
    save_encoder(art.encoder, model, sims.inventory.digest())
    art.write_log("train-encoder", {"epoch_losses": log_.epoch_losses, "step_losses": log_.step_losses})
    return model


def _decoder_items(utts, priors, provider) -> list[DecoderItem]:
    items = []
    for u, prior in zip(utts, priors):
        if isinstance(provider, StatsEmbeddingProvider):
            items.append(DecoderItem(u.mel.frames, prior, embed_frames=provider.embed_frames))
        else:
            items.append(DecoderItem(u.mel.frames, prior, embedding=provider.embed(utterance_id=u.row.id).v))
    return items


def train_decoder_stage(cfg: PipelineConfig, seed: int | None = None) -> ScoreNetwork:
    art = Artifacts(cfg.work_dir)
    sims = load_sims_dictionary(art.sims)
    rows, base = load_rows(cfg.path(cfg.paths.typical_manifest))
    utts = prepare_utterances(rows, base, sims.inventory, require_alignment=True)
    provider = make_provider(cfg)
    priors = [ground_truth_sims(u.mel.frames, u.labels, sims) for u in utts]
    dcfg = dataclasses.replace(cfg.decoder, spk_dim=provider.dim)
    seed = derive_seed(cfg.seed if seed is None else seed, "train-decoder")
    net, log_ = train_decoder(_decoder_items(utts, priors, provider), dcfg, seed)
    save_decoder(art.decoder_base, net, meta={"inventory": sims.inventory.digest()})
    art.write_log("train-decoder", {"epoch_losses": log_.epoch_losses, "step_losses": log_.step_losses})
    return net


def finetune_stage(cfg: PipelineConfig, speakers=None, seed: int | None = None) -> dict[str, Path]:
    """Fine-tune one decoder per atypical speaker and store their mean embeddings."""
    art = Artifacts(cfg.work_dir)
    sims = load_sims_dictionary(art.sims)
    encoder, enc_meta = load_encoder(art.encoder)
    base_net, _ = load_decoder(art.decoder_base, cfg.decoder)
    if cfg.paths.atypical_manifest is None:
        raise ConfigError("paths.atypical_manifest is required for fine-tuning")
    rows, base = load_rows(cfg.path(cfg.paths.atypical_manifest))
    need_ali = cfg.finetune.prior == "ground_truth"
    utts = prepare_utterances(rows, base, sims.inventory, require_alignment=need_ali)
    by_speaker: dict[str, list[PreparedUtterance]] = {}
    for u in utts:
        by_speaker.setdefault(u.row.speaker_id, []).append(u)
    wanted = sorted(by_speaker) if not speakers else list(speakers)
    provider = make_provider(cfg)
    table = read_embedding_file(art.speakers) if art.speakers.exists() else {}
    written = {}
    for spk in wanted:
        if spk not in by_speaker:
            raise ConfigError(f"speaker {spk!r} not in the atypical manifest")
        group = by_speaker[spk]
        if need_ali:
            priors = [ground_truth_sims(u.mel.frames, u.labels, sims) for u in group]
        else:
            priors = [encode(encoder, u.mel).sims_pred for u in group]
        spk_seed = derive_seed(cfg.seed if seed is None else seed, "finetune", spk)
        tuned, log_ = finetune_decoder(base_net, _decoder_items(group, priors, provider), cfg.finetune, spk_seed)
        save_decoder(art.decoder(spk), tuned, speaker=spk,
                     meta={"inventory": sims.inventory.digest(), "encoder": enc_meta["digest"],
                           "prior": cfg.finetune.prior})
        embs = [provider.embed(u.wav, u.row.id) for u in group]
        table[spk] = mean_embedding(embs, spk).v
        art.write_log(f"finetune-{spk}", {"epoch_losses": log_.epoch_losses, "step_losses": log_.step_losses})
        written[spk] = art.decoder(spk)
    write_embedding_file(art.speakers, dict(sorted(table.items())))
    return written


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

@dataclass
class PipelineHandle:
    encoder: ContentEncoder
    sims: SimsDictionary
    stats: DurationStats
    artifacts: Artifacts
    speaker_embeddings: dict[str, np.ndarray]
    vocoder: Any
    n_steps: int = 100
    stretch: StretchConfig = field(default_factory=StretchConfig)
    encoder_digest: str = ""
    decoder_cfg: DecoderConfig | None = None
    _decoders: dict[str, ScoreNetwork] = field(default_factory=dict, repr=False)

    def decoder(self, speaker: str) -> ScoreNetwork:
        if speaker not in self._decoders:
            path = self.artifacts.decoder(speaker)
            if not path.exists():
                raise FileNotFoundError(f"no fine-tuned decoder for speaker {speaker!r} at {path}")
            net, meta = load_decoder(path, self.decoder_cfg)
            if meta.get("inventory") != self.sims.inventory.digest():
                raise PipelineError("load", ValueError(f"decoder for {speaker} uses a different phoneme inventory"))
            if meta.get("prior") == "encoder" and meta.get("encoder") != self.encoder_digest:
                raise PipelineError("load", ValueError(f"decoder for {speaker} was tuned against another encoder"))
            self._decoders[speaker] = net
        return self._decoders[speaker]

    def targets(self) -> list[str]:
        d = self.artifacts.root / "decoders"
        return sorted(p.stem for p in d.glob("*.ckpt")) if d.exists() else []


def load_handle(cfg: PipelineConfig) -> PipelineHandle:
    art = Artifacts(cfg.work_dir)
    sims = load_sims_dictionary(art.sims)
    stats = load_duration_stats(art.durations)
    encoder, meta = load_encoder(art.encoder)
    digests = {sims.inventory.digest(), stats.inventory.digest(), meta["inventory"]}
    if len(digests) != 1:
        raise PipelineError("load", ValueError("encoder, SIMS dictionary and duration stats disagree on the "
                                               "phoneme inventory; rerun prepare-stats and retrain"))
    embs = read_embedding_file(art.speakers) if art.speakers.exists() else {}
    return PipelineHandle(encoder, sims, stats, art, embs, GriffinLimVocoder(cfg.vocoder.n_iters, cfg.vocoder.seed),
                          cfg.sampler.n_steps, cfg.stretch, meta["digest"], cfg.decoder)


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class ConversionResult:
    waveform: Waveform
    mel: np.ndarray
    query: DurationQuery
    ratio: float
    stretched_samples: int


def convert_utterance(h: PipelineHandle, source: Waveform, target: str, seed: int = 0,
                      n_steps: int | None = None) -> Waveform:
    """Convert ``source`` towards ``target``; see :func:`convert_utterance_detailed`."""
    return convert_utterance_detailed(h, source, target, seed, n_steps).waveform


def convert_utterance_detailed(h: PipelineHandle, source: Waveform, target: str, seed: int = 0,
                               n_steps: int | None = None) -> ConversionResult:
    """Source waveform -> target-speaker waveform, following the inference chain.

    Encode the source, compare its mean phoneme duration with the target's,
    stretch the waveform by ``t_t / t_s``, re-encode to obtain the prior, run
    reverse diffusion with the target's decoder and embedding, then vocode.
    """
    with stage("load"):
        net = h.decoder(target)
        if target not in h.speaker_embeddings:
            raise KeyError(f"no stored embedding for target {target!r}")
        emb = h.speaker_embeddings[target]
    with stage("analysis"):
        wav = to_internal_rate(source)
        mel = mel_spectrogram(wav)
    with stage("encode-source"):
        first = encode(h.encoder, mel)
    with stage("duration-query"):
        q = source_duration_query(first)
        t_t = target_mean_duration(q.phoneme_set, h.stats, target)
        q = DurationQuery(q.phoneme_set, q.t_s, t_t)
        ratio = t_t / q.t_s
    with stage("tempo-stretch"):
        spec = StretchSpec(ratio, window_s=h.stretch.window_s, tolerance_s=h.stretch.tolerance_s)
        stretched = tempo_stretch(wav, spec)
    with stage("encode-stretched"):
        prior = encode(h.encoder, mel_spectrogram(stretched)).sims_pred
    with stage("reverse-diffusion"):
        out_mel = decode_mel(net, prior, emb, n_steps or h.n_steps, derive_seed(seed, "sample"))
    with stage("vocoder"):
        out = h.vocoder.invert(MelSpectrogram(out_mel))
    return ConversionResult(out, out_mel, q, ratio, len(stretched))
