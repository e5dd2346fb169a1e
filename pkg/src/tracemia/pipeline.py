"""End-to-end orchestration driven by a single YAML run configuration.

Output directory layout::

    axis.json                 recall-inference axis with provenance
    anchors/recall.jsonl      anchor sets actually used
    anchors/synthetic.jsonl
    scores/<attack>.jsonl     per-sequence membership scores
    metrics/<attack>.json     sequence-level metrics
    metrics/<attack>.document.json
    roc/<attack>.csv, roc/<attack>.document.csv
    pca.csv                   2-D projection of anchor and query trace vectors
    manifest.json             config hash, cache statistics, call counts, skip list
    report.txt                human-readable tables
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import baselines as bl
from .anchors import (
    LOW_INFORMATION_SYNTHETIC,
    VERBATIM_RECALL,
    AnchorSequenceSet,
    NgramValidationLM,
    RecallInferenceAxis,
    RemoteValidationLM,
    build_anchor,
    build_axis,
    generate_candidates,
    load_anchor_sequences,
    load_axis,
    save_anchor_set,
    save_axis,
    score_candidates,
    select_top_gamma,
)
from .attack import BLACKSPECTRUM, MembershipScore, collect_traces, read_scores, score_traces, write_scores
from .cache import TraceCache, canonical_json
from .dataset import (
    MEMBER,
    NON_MEMBER,
    Dataset,
    QuerySequence,
    atomic_write_text,
    load_dataset,
    save_dataset,
    segment_text,
)
from .embedding import Encoder, EncoderHandle, encode_denoised
from .errors import (
    ConfigError,
    DegenerateLabels,
    MissingReports,
    MixedLabelsWithinDocument,
    TraceMIAError,
)
from .evaluation import (
    LabeledEntry,
    LabeledScores,
    aggregate_documents,
    compute_metrics,
    write_metrics,
    write_pca_csv,
    write_roc_csv,
)
from .lm import NgramLM
from .providers import (
    COMPRESSION_LEVELS,
    DEFAULT_TEMPLATE_TEXT,
    PromptTemplate,
    Provider,
    ProviderConfig,
    ReasoningTrace,
    compress_trace,
)
from .simulator import SimulatedCompressor, SimulatedJudge, SimulatedLRM, SimulationSettings

log = logging.getLogger(__name__)

ATTACK_IDS = (
    BLACKSPECTRUM,
    bl.THINKING_TOKEN,
    bl.COMPRESSION_RATE,
    bl.TR_CONSISTENCY_CHAR,
    bl.TR_CONSISTENCY_TOKEN,
    bl.LLM_JUDGEMENT,
)
CONSISTENCY_ATTACKS = (bl.TR_CONSISTENCY_CHAR, bl.TR_CONSISTENCY_TOKEN)

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


# configuration

@dataclass
class AnchorSettings:
    recall_path: Path
    synthetic_candidates_path: Path | None = None
    generator: dict | None = None  # {provider: {...}, n: int}
    gamma: int = 50
    traces_per_sequence: int = 3
    validation_lm: dict = field(default_factory=lambda: {"kind": "ngram"})
    min_distance: float = 1e-9


@dataclass
class AttackSpec:
    attack_id: str
    settings: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    dataset_path: Path
    provider: ProviderConfig
    encoder: EncoderHandle
    anchors: AnchorSettings
    attacks: list[AttackSpec]
    output_dir: Path
    cache_root: Path
    template_path: Path | None = None
    samples_per_sequence: int = 1
    seed: int = 0
    fpr_budget: float = 0.05
    defense: dict | None = None  # {level: mild|strong, compressor: {...}}
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    offline: bool = False
    source_path: Path | None = None

    # construction

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from None
        return cls.from_dict(raw, base_dir=path.parent, source_path=path, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | os.PathLike = ".", source_path: Path | None = None,
                  cache_root=None, seed=None, offline=None, attacks=None, fpr_budget=None,
                  output_dir=None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        base = Path(base_dir)
        known = {"dataset_path", "provider", "encoder", "anchors", "attacks", "output_dir",
                 "cache_root", "template_path", "samples_per_sequence", "seed", "fpr_budget",
                 "defense", "simulation"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def path_of(value, what: str, required: bool = True) -> Path | None:
            if value is None:
                if required:
                    raise ConfigError(f"{what} is required")
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        # attack list first: an unknown attack id must fail before anything else is touched
        attack_entries = attacks if attacks is not None else raw.get("attacks", [BLACKSPECTRUM])
        specs = _parse_attacks(attack_entries)

        try:
            provider = ProviderConfig.from_dict(_require_mapping(raw, "provider"))
            encoder = EncoderHandle.from_dict(raw.get("encoder") or {})
            anchors_raw = dict(_require_mapping(raw, "anchors"))
            anchor_settings = AnchorSettings(
                recall_path=path_of(anchors_raw.pop("recall_path", None), "anchors.recall_path"),
                synthetic_candidates_path=path_of(anchors_raw.pop("synthetic_candidates_path", None),
                                                  "anchors.synthetic_candidates_path", required=False),
                **anchors_raw,
            )
            simulation = SimulationSettings(**(raw.get("simulation") or {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

        cfg = cls(
            dataset_path=path_of(raw.get("dataset_path"), "dataset_path"),
            provider=provider,
            encoder=encoder,
            anchors=anchor_settings,
            attacks=specs,
            output_dir=Path(output_dir) if output_dir else path_of(raw.get("output_dir", "out"), "output_dir"),
            cache_root=Path(cache_root) if cache_root else path_of(raw.get("cache_root", "cache"), "cache_root"),
            template_path=path_of(raw.get("template_path"), "template_path", required=False),
            samples_per_sequence=int(raw.get("samples_per_sequence", 1)),
            seed=int(seed if seed is not None else raw.get("seed", 0)),
            fpr_budget=float(fpr_budget if fpr_budget is not None else raw.get("fpr_budget", 0.05)),
            defense=raw.get("defense"),
            simulation=simulation,
            offline=bool(offline),
            source_path=source_path,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for p, what in [(self.dataset_path, "dataset_path"), (self.anchors.recall_path, "anchors.recall_path"),
                        (self.template_path, "template_path"),
                        (self.anchors.synthetic_candidates_path, "anchors.synthetic_candidates_path")]:
            if p is not None and not p.is_file():
                raise ConfigError(f"{what} does not exist: {p}")
        a = self.anchors
        if (a.synthetic_candidates_path is None) == (a.generator is None):
            raise ConfigError("give exactly one of anchors.synthetic_candidates_path and anchors.generator")
        if a.generator is not None and self.provider.backend == "simulator":
            raise ConfigError("anchors.generator needs a live provider; use a candidates file with the simulator")
        if a.gamma < 1 or a.traces_per_sequence < 1:
            raise ConfigError("anchors.gamma and anchors.traces_per_sequence must be >= 1")
        if a.validation_lm.get("kind", "ngram") not in ("ngram", "remote"):
            raise ConfigError("anchors.validation_lm.kind must be 'ngram' or 'remote'")
        if self.samples_per_sequence < 1:
            raise ConfigError("samples_per_sequence must be >= 1")
        if not 0.0 <= self.fpr_budget <= 1.0:
            raise ConfigError("fpr_budget must lie in [0, 1]")
        for spec in self.attacks:
            if spec.attack_id in CONSISTENCY_ATTACKS and int(spec.settings.get("k", 3)) < 2:
                raise ConfigError(f"{spec.attack_id} needs k >= 2")
            if spec.attack_id == bl.LLM_JUDGEMENT and self.provider.backend == "http" \
                    and "judge" not in spec.settings:
                raise ConfigError("llm_judgement needs a 'judge' provider block with a live backend")
        if self.defense is not None:
            if self.defense.get("level") not in COMPRESSION_LEVELS:
                raise ConfigError(f"defense.level must be one of {sorted(COMPRESSION_LEVELS)}")
            if self.provider.backend == "http" and "compressor" not in self.defense:
                raise ConfigError("defense needs a 'compressor' provider block with a live backend")

    # identity

    def semantic_dict(self) -> dict:
        """Everything that can change results; paths are replaced by content hashes."""
        provider = self.provider.to_dict()
        for k in ("auth", "max_in_flight", "retry", "timeout_s"):
            provider.pop(k)
        encoder = asdict(self.encoder)
        for k in ("batch_size", "max_in_flight"):
            encoder.pop(k)
        anchors = asdict(self.anchors)
        anchors["recall_path"] = _file_digest(self.anchors.recall_path)
        anchors["synthetic_candidates_path"] = _file_digest(self.anchors.synthetic_candidates_path)
        if anchors["generator"]:
            anchors["generator"] = _strip_provider_noise(anchors["generator"])
        attacks = [{"attack_id": s.attack_id, "settings": _strip_provider_noise(s.settings)} for s in self.attacks]
        return {
            "dataset": _file_digest(self.dataset_path),
            "template": hashlib.sha256(self.template().template_text.encode()).hexdigest(),
            "provider": provider,
            "encoder": encoder,
            "anchors": anchors,
            "attacks": attacks,
            "samples_per_sequence": self.samples_per_sequence,
            "seed": self.seed,
            "fpr_budget": self.fpr_budget,
            "defense": _strip_provider_noise(self.defense) if self.defense else None,
            "simulation": asdict(self.simulation) if self.provider.backend == "simulator" else None,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(_jsonable(self.semantic_dict())).encode()).hexdigest()

    def template(self) -> PromptTemplate:
        if self.template_path is None:
            return PromptTemplate(DEFAULT_TEMPLATE_TEXT)
        return PromptTemplate.from_file(self.template_path)

    def attack_ids(self) -> list[str]:
        return [s.attack_id for s in self.attacks]

    def settings_for(self, attack_id: str) -> dict:
        for s in self.attacks:
            if s.attack_id == attack_id:
                return s.settings
        return {}


def _require_mapping(raw: dict, key: str) -> dict:
    value = raw.get(key)
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be a mapping")
    return value


def _parse_attacks(entries) -> list[AttackSpec]:
    if isinstance(entries, str):
        entries = [e.strip() for e in entries.split(",") if e.strip()]
    if not entries:
        raise ConfigError("no attacks selected")
    specs = []
    for entry in entries:
        if isinstance(entry, str):
            spec = AttackSpec(entry)
        elif isinstance(entry, dict) and "id" in entry:
            settings = dict(entry)
            spec = AttackSpec(settings.pop("id"), settings)
        else:
            raise ConfigError(f"cannot read attack entry {entry!r}")
        if spec.attack_id not in ATTACK_IDS:
            raise ConfigError(f"unknown attack_id {spec.attack_id!r}; known: {', '.join(ATTACK_IDS)}")
        if spec.attack_id in (s.attack_id for s in specs):
            raise ConfigError(f"attack {spec.attack_id!r} listed twice")
        specs.append(spec)
    return specs


_NOISE_KEYS = {"auth", "max_in_flight", "retry", "timeout_s"}


def _strip_provider_noise(obj):
    if isinstance(obj, dict):
        return {k: _strip_provider_noise(v) for k, v in obj.items() if k not in _NOISE_KEYS}
    if isinstance(obj, list):
        return [_strip_provider_noise(v) for v in obj]
    return obj


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _file_digest(path: Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_fingerprint(path: str | os.PathLike) -> str:
    return _file_digest(Path(path))


# run context

class RunContext:
    """Providers, encoder and cache shared by all stages of one run."""

    def __init__(self, cfg: RunConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.cache = TraceCache(cfg.cache_root)
        self.template = cfg.template()
        self.dataset = dataset if dataset is not None else load_dataset(cfg.dataset_path)
        self.encoder = Encoder(cfg.encoder, self.cache, offline=cfg.offline)
        self.recall_set = load_anchor_sequences(cfg.anchors.recall_path, VERBATIM_RECALL)
        self._providers: list[Provider] = []
        self.target = self._make_provider(cfg.provider, self._target_backend())
        self._judge: Provider | None = None
        self._compressor: Provider | None = None

    def _simulated(self) -> bool:
        return self.cfg.provider.backend == "simulator"

    def _make_provider(self, config: ProviderConfig, backend=None) -> Provider:
        salt = None
        if config.backend == "simulator":
            salt = {"seed": self.cfg.seed, "simulation": asdict(self.cfg.simulation)}
        p = Provider(config, backend, self.cache, offline=self.cfg.offline, seed=self.cfg.seed, key_salt=salt)
        self._providers.append(p)
        return p

    def _target_backend(self):
        if not self._simulated():
            return None
        sim = self.cfg.simulation
        familiarity: dict[str, float] = {}
        for s in self.dataset.sequences:
            if s.label == MEMBER:
                familiarity[s.text] = sim.mix_member
            elif s.label == NON_MEMBER:
                familiarity[s.text] = sim.mix_non_member
        if self.cfg.anchors.synthetic_candidates_path is not None:
            for s in load_anchor_sequences(self.cfg.anchors.synthetic_candidates_path,
                                           LOW_INFORMATION_SYNTHETIC).sequences:
                familiarity[s.text] = sim.mix_synthetic_anchor
        for s in self.recall_set.sequences:
            familiarity[s.text] = sim.mix_recall_anchor
        return SimulatedLRM(familiarity, default_mix=sim.mix_non_member, seed=self.cfg.seed,
                            template=self.template, n_body=sim.n_body, n_fragments=sim.n_fragments,
                            filler_max=sim.filler_max)

    def _aux_provider(self, block: dict | None, default_id: str, simulated_backend) -> Provider:
        if self._simulated() and not block:
            config = ProviderConfig(default_id, default_id, backend="simulator",
                                    reasoning_field_path="choices.0.message.content")
            return self._make_provider(config, simulated_backend)
        try:
            config = ProviderConfig.from_dict(block)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{default_id}: {e}") from None
        backend = simulated_backend if config.backend == "simulator" else None
        return self._make_provider(config, backend)

    @property
    def judge(self) -> Provider:
        if self._judge is None:
            block = self.cfg.settings_for(bl.LLM_JUDGEMENT).get("judge")
            self._judge = self._aux_provider(
                block, "sim-judge", SimulatedJudge(self.cfg.seed, self.cfg.simulation.judge_noise_sd))
        return self._judge

    @property
    def compressor(self) -> Provider:
        if self._compressor is None:
            block = (self.cfg.defense or {}).get("compressor")
            self._compressor = self._aux_provider(block, "sim-compressor", SimulatedCompressor())
        return self._compressor

    def call_counts(self) -> dict[str, int]:
        backend = sum(p.backend_calls for p in self._providers)
        network = sum(p.backend_calls for p in self._providers if getattr(p.backend, "is_network", True))
        remote = getattr(self.encoder._impl, "calls", 0)
        return {"backend_calls": backend, "network_calls": network + remote}


@contextmanager
def output_lock(output_dir: Path):
    """Exclusive ownership of ``output_dir`` for the duration of a run."""
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = output_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = _read_pid(lock)
        if pid is not None and _alive(pid):
            raise ConfigError(f"{output_dir} is in use by process {pid}") from None
        log.warning("removing stale lock %s", lock)
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _read_pid(path: Path) -> int | None:
    try:
        return int(path.read_text().strip())
    except (OSError, ValueError):
        return None


def _alive(pid: int) -> bool:
    if pid == os.getpid():
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# stages

@dataclass
class AnchorBuild:
    axis: RecallInferenceAxis
    recall_set: AnchorSequenceSet
    synthetic_set: AnchorSequenceSet
    pca_rows: list[tuple[str, str, np.ndarray]]


def _anchor_vectors(ctx: RunContext, anchor_set: AnchorSequenceSet, group: str,
                    rows: list) -> list[np.ndarray]:
    k = ctx.cfg.anchors.traces_per_sequence
    traces, skipped = collect_traces(anchor_set.sequences, ctx.target, ctx.template, k)
    if skipped:
        # anchors define the axis; silently dropping some would change it
        first = next(iter(skipped.items()))
        raise TraceMIAError(f"anchor sequence {first[0]} failed: {first[1]}")
    vectors = []
    for seq in anchor_set.sequences:
        vs = encode_denoised(ctx.encoder, [t.trace_text for t in traces[seq.id]], seq.text)
        vectors.extend(vs)
        rows.extend((f"{seq.id}#{i}", group, v) for i, v in enumerate(vs))
    return vectors


def _validation_lm(ctx: RunContext, candidates: AnchorSequenceSet):
    spec = ctx.cfg.anchors.validation_lm
    if spec.get("kind", "ngram") == "remote":
        if ctx.cfg.offline:
            raise ConfigError("remote validation LM is unavailable offline")
        return RemoteValidationLM(spec["endpoint"], int(spec.get("top_k", 100)))
    corpus = [s.text for s in ctx.recall_set.sequences] + [s.text for s in ctx.dataset.sequences]
    lm = NgramLM.trained(corpus, order=int(spec.get("order", 2)), k=float(spec.get("k", 1.0)))
    return NgramValidationLM(lm)


def build_anchors(ctx: RunContext) -> AnchorBuild:
    cfg = ctx.cfg
    if cfg.anchors.synthetic_candidates_path is not None:
        candidates = load_anchor_sequences(cfg.anchors.synthetic_candidates_path, LOW_INFORMATION_SYNTHETIC)
    else:
        gen = cfg.anchors.generator or {}
        generator = ctx._aux_provider(gen.get("provider"), "generator", None)
        seqs = generate_candidates(generator, int(gen.get("n", 100)))
        candidates = AnchorSequenceSet(LOW_INFORMATION_SYNTHETIC, tuple(seqs))
    validation = _validation_lm(ctx, candidates)
    synthetic = select_top_gamma(score_candidates(candidates.sequences, validation), cfg.anchors.gamma)

    rows: list[tuple[str, str, np.ndarray]] = []
    recall_vecs = _anchor_vectors(ctx, ctx.recall_set, "recall_anchor", rows)
    synthetic_vecs = _anchor_vectors(ctx, synthetic, "inference_anchor", rows)
    provenance = {
        "k": ctx.recall_set.size,
        "l": candidates.size,
        "gamma": cfg.anchors.gamma,
        "traces_per_sequence": cfg.anchors.traces_per_sequence,
        "validation_lm": dict(cfg.anchors.validation_lm),
        "entropy_approximate": getattr(validation, "top_k", None) is not None,
        "model_id": cfg.provider.model_id,
    }
    axis = build_axis(build_anchor(recall_vecs), build_anchor(synthetic_vecs),
                      cfg.anchors.min_distance, ctx.encoder.encoder_id, provenance)
    return AnchorBuild(axis, ctx.recall_set, synthetic, rows)


def write_anchor_artifacts(build: AnchorBuild, out: Path) -> None:
    save_axis(build.axis, out / "axis.json")
    save_anchor_set(build.recall_set, out / "anchors" / "recall.jsonl")
    save_anchor_set(build.synthetic_set, out / "anchors" / "synthetic.jsonl")


def _traces_needed(cfg: RunConfig) -> int:
    k = cfg.samples_per_sequence
    for spec in cfg.attacks:
        if spec.attack_id in CONSISTENCY_ATTACKS:
            k = max(k, int(spec.settings.get("k", 3)))
    return k


def _mean_score(per: list[MembershipScore], seq: QuerySequence) -> MembershipScore:
    return MembershipScore(
        seq.id,
        math.fsum(p.score for p in per) / len(per),
        per[0].attack_id,
        math.fsum(p.raw_projection for p in per) / len(per),
        len(per),
        seq.label,
    )


def run_attacks(ctx: RunContext, axis: RecallInferenceAxis) -> tuple[dict[str, list[MembershipScore]],
                                                                     dict[str, dict[str, str]],
                                                                     list[tuple[str, str, np.ndarray]]]:
    """Score every dataset sequence with every configured attack.

    Returns ``(scores by attack, skip map by stage, PCA rows for query traces)``.
    """
    cfg = ctx.cfg
    seqs = list(ctx.dataset.sequences)
    transform = None
    if cfg.defense is not None:
        level = cfg.defense["level"]
        compressor = ctx.compressor
        transform = lambda t: compress_trace(compressor, t, level)  # noqa: E731
    traces, skipped_traces = collect_traces(seqs, ctx.target, ctx.template, _traces_needed(cfg), transform)
    skips: dict[str, dict[str, str]] = {}
    if skipped_traces:
        skips["traces"] = skipped_traces
    scored = [s for s in seqs if s.id in traces]
    n = cfg.samples_per_sequence
    results: dict[str, list[MembershipScore]] = {}

    def per_sequence(attack_id: str, fn) -> list[MembershipScore]:
        out, failed = [], {}
        for seq in scored:
            try:
                out.append(fn(seq))
            except (TraceMIAError, ValueError) as e:
                failed[seq.id] = f"{type(e).__name__}: {e}"
                log.warning("%s skipped %s: %s", attack_id, seq.id, failed[seq.id])
        if failed:
            skips[attack_id] = failed
        return sorted(out, key=lambda s: s.sequence_id)

    pca_rows = []
    for attack_id in cfg.attack_ids():
        settings = cfg.settings_for(attack_id)
        if attack_id == BLACKSPECTRUM:
            results[attack_id] = score_traces(scored, traces, ctx.encoder, axis, n)
            for seq in scored:
                if seq.label in (MEMBER, NON_MEMBER):
                    v = encode_denoised(ctx.encoder, [traces[seq.id][0].trace_text], seq.text)[0]
                    pca_rows.append((seq.id, seq.label, v))
        elif attack_id == bl.THINKING_TOKEN:
            delta = float(settings.get("similarity_threshold", 0.8))
            seeds = (bl.ThinkingTokenSeedSet.from_file(settings["seeds_path"], delta)
                     if "seeds_path" in settings else bl.ThinkingTokenSeedSet.default(delta))
            stop = bl.default_stopwords()
            results[attack_id] = per_sequence(attack_id, lambda s: _mean_score(
                [bl.thinking_token_score(t, seeds, ctx.encoder, stop) for t in traces[s.id][:n]], s))
        elif attack_id == bl.COMPRESSION_RATE:
            scorer = _reference_scorer(settings, traces)
            results[attack_id] = per_sequence(attack_id, lambda s: _mean_score(
                [bl.compression_rate_score(t, scorer) for t in traces[s.id][:n]], s))
        elif attack_id in CONSISTENCY_ATTACKS:
            k = int(settings.get("k", 3))
            granularity = "character" if attack_id == bl.TR_CONSISTENCY_CHAR else "token"
            results[attack_id] = per_sequence(attack_id, lambda s: replace(
                bl.trace_consistency_score(traces[s.id][:k], granularity), label=s.label))
        elif attack_id == bl.LLM_JUDGEMENT:
            judge = ctx.judge
            template = settings.get("template", bl.DEFAULT_JUDGE_TEMPLATE)
            results[attack_id] = per_sequence(attack_id, lambda s: _mean_score(
                [bl.llm_judgement_score(t, judge, template) for t in traces[s.id][:n]], s))
    return results, skips, pca_rows


def _reference_scorer(settings: dict, traces: dict[str, list[ReasoningTrace]]) -> bl.ReferenceScorer:
    if "scorer_endpoint" in settings:
        return bl.RemoteReferenceScorer(settings["scorer_endpoint"], settings.get("scorer_id", "remote"))
    pool = [t.trace_text for sid in sorted(traces) for t in traces[sid]]
    lm = NgramLM.trained(pool, order=int(settings.get("order", 2)), k=float(settings.get("k", 1.0)))
    return bl.BuiltinReferenceScorer(lm)


def labeled_scores(scores: list[MembershipScore], dataset: Dataset) -> LabeledScores:
    by_id = dataset.by_id()
    return LabeledScores(
        LabeledEntry(s.sequence_id, s.score, by_id[s.sequence_id].label, by_id[s.sequence_id].document_id)
        for s in scores
        if s.sequence_id in by_id and by_id[s.sequence_id].label in (MEMBER, NON_MEMBER)
    )


def evaluate_scores(scores_by_attack: dict[str, list[MembershipScore]], dataset: Dataset, out: Path,
                    fpr_budget: float, extra: dict) -> list[str]:
    """Write metrics and ROC files; returns notes about levels that could not be evaluated."""
    notes = []
    for attack_id, scores in sorted(scores_by_attack.items()):
        labeled = labeled_scores(scores, dataset)
        try:
            report = compute_metrics(labeled, fpr_budget)
        except DegenerateLabels as e:
            notes.append(f"{attack_id}: no sequence-level metrics ({e})")
            continue
        write_metrics(report, out / "metrics" / f"{attack_id}.json", attack_id=attack_id,
                      level="sequence", **extra)
        write_roc_csv(labeled, out / "roc" / f"{attack_id}.csv")
        try:
            docs = aggregate_documents(labeled)
            doc_report = compute_metrics(docs, fpr_budget)
        except (DegenerateLabels, MixedLabelsWithinDocument) as e:
            notes.append(f"{attack_id}: no document-level metrics ({e})")
            continue
        write_metrics(doc_report, out / "metrics" / f"{attack_id}.document.json", attack_id=attack_id,
                      level="document", **extra)
        write_roc_csv(docs, out / "roc" / f"{attack_id}.document.csv")
    return notes


def _write_manifest(ctx: RunContext, out: Path, skips: dict, notes: list[str], artifacts: list[str]) -> dict:
    cfg = ctx.cfg
    manifest = {
        "config_hash": cfg.config_hash(),
        "dataset_fingerprint": dataset_fingerprint(cfg.dataset_path),
        "attacks": cfg.attack_ids(),
        "offline": cfg.offline,
        "cache": ctx.cache.stats.as_dict(),
        **ctx.call_counts(),
        "skipped": skips,
        "notes": notes,
        "artifacts": sorted(artifacts),
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class RunResult:
    manifest: dict
    exit_code: int
    output_dir: Path


def run_pipeline(cfg: RunConfig, stages: tuple[str, ...] = ("anchors", "attack", "eval", "report")) -> RunResult:
    """Run the requested stages; later stages reuse earlier artifacts found on disk."""
    out = cfg.output_dir
    with output_lock(out):
        ctx = RunContext(cfg)
        extra = {"dataset_fingerprint": dataset_fingerprint(cfg.dataset_path), "config_hash": cfg.config_hash()}
        skips: dict = {}
        notes: list[str] = []
        artifacts: list[str] = []
        pca_rows: list = []

        axis_path = out / "axis.json"
        if "anchors" in stages or ("attack" in stages and not axis_path.exists()):
            build = build_anchors(ctx)
            write_anchor_artifacts(build, out)
            pca_rows.extend(build.pca_rows)
            artifacts += ["axis.json", "anchors/recall.jsonl", "anchors/synthetic.jsonl"]

        scores_by_attack: dict[str, list[MembershipScore]] = {}
        if "attack" in stages:
            axis = load_axis(axis_path)
            scores_by_attack, skips, query_rows = run_attacks(ctx, axis)
            for attack_id, scores in scores_by_attack.items():
                write_scores(scores, out / "scores" / f"{attack_id}.jsonl")
                artifacts.append(f"scores/{attack_id}.jsonl")
            if pca_rows and query_rows:
                rows = pca_rows + query_rows
                write_pca_csv([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], out / "pca.csv")
                artifacts.append("pca.csv")

        if "eval" in stages:
            if not scores_by_attack:
                for attack_id in cfg.attack_ids():
                    p = out / "scores" / f"{attack_id}.jsonl"
                    if p.exists():
                        scores_by_attack[attack_id] = read_scores(p)
                if not scores_by_attack:
                    raise MissingReports(f"no score files under {out / 'scores'}")
            notes += evaluate_scores(scores_by_attack, ctx.dataset, out, cfg.fpr_budget, extra)
            artifacts += [str(p.relative_to(out)) for p in sorted((out / "metrics").glob("*.json"))]
            artifacts += [str(p.relative_to(out)) for p in sorted((out / "roc").glob("*.csv"))]

        if "report" in stages:
            try:
                atomic_write_text(out / "report.txt", emit_report(out))
                artifacts.append("report.txt")
            except MissingReports as e:
                notes.append(str(e))

        manifest = _write_manifest(ctx, out, skips, notes, artifacts)
    code = EXIT_PARTIAL if skips else EXIT_OK
    return RunResult(manifest, code, out)


# reporting

_COLUMNS = ("attack", "ACC", "AUC", "TPR@FPR", "p-value", "ES", "n")


def _fmt(value, spec: str) -> str:
    return "-" if value is None else format(value, spec)


def _table(reports: list[dict]) -> str:
    reports = sorted(reports, key=lambda r: (-r["auc"], r["attack_id"]))
    budget = reports[0]["fpr_budget"]
    header = list(_COLUMNS)
    header[3] = f"TPR@{budget * 100:g}%FPR"
    rows = [[
        r["attack_id"],
        _fmt(r["balanced_acc"], ".3f"),
        _fmt(r["auc"], ".3f"),
        _fmt(r["tpr_at_fpr"], ".3f"),
        _fmt(r["p_value"], ".2e"),
        _fmt(r["effect_size"], ".3f"),
        f"{r['n_member']}/{r['n_non_member']}",
    ] for r in reports]
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines)


def emit_report(output_dir: str | os.PathLike) -> str:
    """Sequence-level and document-level tables, each sorted by AUC (highest first)."""
    metrics_dir = Path(output_dir) / "metrics"
    files = sorted(metrics_dir.glob("*.json")) if metrics_dir.is_dir() else []
    if not files:
        raise MissingReports(f"no metrics reports under {metrics_dir}")
    levels: dict[str, list[dict]] = {"sequence": [], "document": []}
    for f in files:
        with open(f, encoding="utf-8") as fh:
            r = json.load(fh)
        level = r.get("level") or ("document" if f.name.endswith(".document.json") else "sequence")
        levels[level].append(r)
    parts = []
    for level, title in (("sequence", "Sequence-level results"), ("document", "Document-level results")):
        if levels[level]:
            parts.append(f"{title}\n\n{_table(levels[level])}")
    parts.append("ACC uses the best threshold on the evaluated data itself and is optimistic.")
    return "\n\n".join(parts) + "\n"


# simulator demo workspace

_DEMO_WORDS = (
    "river stone light garden morning window letter mountain silver quiet road winter "
    "harbor lantern field voice paper candle forest bridge evening shadow market island "
    "music thread orchard meadow tower coast bell valley ember glass cloud north pocket "
    "story table summer feather lake season ribbon hill station journey kettle mirror "
    "the a of and to in with on over under near by from across toward beneath "
    "walks carries finds keeps opens remembers gathers follows watches builds turns "
    "slow bright old small golden distant gentle hidden narrow warm pale steady"
).split()


def _demo_document(rng: random.Random, n_tokens: int) -> str:
    return " ".join(rng.choice(_DEMO_WORDS) for _ in range(n_tokens))


def write_demo_workspace(directory: str | os.PathLike, seed: int = 0, n_member: int = 100,
                         n_non_member: int = 100, settings: SimulationSettings | None = None,
                         n_recall: int = 5, gamma: int = 5, attacks: list[str] | None = None,
                         defense: str | None = None, samples_per_sequence: int = 1) -> Path:
    """Create a self-contained simulator benchmark and return its config path.

    Documents of 128 tokens are segmented into 32-token sequences, so each
    document contributes four sequences.
    """
    from importlib import resources

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    settings = settings or SimulationSettings(seed=seed)
    rng = random.Random(seed)
    seqs: list[QuerySequence] = []
    for label, count, prefix in ((MEMBER, n_member, "mem"), (NON_MEMBER, n_non_member, "non")):
        n_docs = math.ceil(count / 4)
        made = 0
        for d in range(n_docs):
            doc_id = f"{prefix}-doc{d:03d}"
            for s in segment_text(_demo_document(rng, 128), doc_id, (32,)):
                if made < count:
                    seqs.append(replace(s, label=label, source="simulator-demo"))
                    made += 1
    dataset = Dataset(seqs, {"tokenizer": "whitespace", "source": "simulator demo", "seed": str(seed)})
    save_dataset(dataset, directory / "dataset.jsonl")

    data = resources.files("tracemia.data")
    proverbs = bl.parse_phrase_file(data.joinpath("proverbs.txt").read_text(encoding="utf-8"))
    if n_recall > len(proverbs):
        raise ConfigError(f"only {len(proverbs)} bundled recall sequences")
    atomic_write_text(directory / "recall.txt", "\n".join(proverbs[:n_recall]) + "\n")
    candidates = data.joinpath("synthetic_candidates.txt").read_text(encoding="utf-8")
    atomic_write_text(directory / "synthetic_candidates.txt", candidates)

    config = {
        "dataset_path": "dataset.jsonl",
        "output_dir": "out",
        "cache_root": "cache",
        "seed": seed,
        "samples_per_sequence": samples_per_sequence,
        "fpr_budget": 0.05,
        "provider": {"provider_id": "simulator", "model_id": "sim-lrm", "backend": "simulator"},
        "encoder": {"encoder_id": "hashing-trigram-384", "dim": 384, "backend": "deterministic_test_embedder"},
        "anchors": {
            "recall_path": "recall.txt",
            "synthetic_candidates_path": "synthetic_candidates.txt",
            "gamma": gamma,
            "traces_per_sequence": 3,
        },
        "attacks": attacks or list(ATTACK_IDS),
        "simulation": asdict(settings),
    }
    if defense:
        config["defense"] = {"level": defense}
    path = directory / "config.yaml"
    atomic_write_text(path, yaml.safe_dump(config, sort_keys=False))
    return path

