"""End-to-end runner: data -> autoencoder -> PC1 scores -> per-participant tests."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autoencoder as ae
from . import pca as pca_mod
from .dataio import ImageSample, SynthTrial, TrialDesign, augment, load_trial, preprocess
from .errors import ConfigError, DataError, Nof1Error, UsageError
from .stats import (
    ALTERNATIVES,
    SCHEMES,
    AssignmentScheme,
    PhaseSeries,
    TestResult,
    lm_ar1,
    paired_t_test,
    randomization_test_mc,
    scrt_exact,
)

log = logging.getLogger(__name__)

TESTS = ("t", "lm_ar1", "scrt", "mc_rt")
POLICIES = ("two_sided", "as_is", "align_with_reference")


@dataclass
class PipelineConfig:
    """Run configuration, read from a flat JSON object.

    ``design`` / ``autoencoder`` / ``synth`` are nested objects mirroring
    :class:`TrialDesign`, :class:`AEConfig` and :class:`SynthTrial`.
    Exactly one of ``data_path`` and ``synth`` must be given.
    """

    seed: int
    output_dir: str = "nof1_report"
    data_path: str | None = None
    synth: dict | None = None
    design: dict = field(default_factory=dict)
    autoencoder: dict = field(default_factory=dict)
    flip_prob: float = 0.5
    brightness_factor: float = 1.1
    pca_mode: str = "joint"
    tests: tuple[str, ...] = TESTS
    direction_policy: str = "two_sided"
    alternative: str = "less"
    scheme: str = "block_permutation"
    max_run_length: int = 2
    mc_samples: int = 10_000
    mc_support: str = "scheme"
    t_pairing: str = "chronological"
    lm_method: str = "REML"
    lm_covariates: bool = False
    figures: bool = True

    def __post_init__(self):
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if (self.data_path is None) == (self.synth is None):
            raise ConfigError("give exactly one data source: 'data_path' or 'synth'")
        self.tests = tuple(self.tests)
        if not self.tests:
            raise ConfigError("select at least one test")
        bad = [t for t in self.tests if t not in TESTS]
        if bad or len(set(self.tests)) != len(self.tests):
            raise ConfigError(f"tests must be distinct names from {TESTS}, got {list(self.tests)}")
        checks = {
            "pca_mode": (self.pca_mode, ("joint", "per_participant")),
            "direction_policy": (self.direction_policy, POLICIES),
            "alternative": (self.alternative, ALTERNATIVES),
            "scheme": (self.scheme, SCHEMES),
            "mc_support": (self.mc_support, ("scheme", "observations")),
            "t_pairing": (self.t_pairing, ("chronological", "block_means")),
            "lm_method": (self.lm_method, ("REML", "ML")),
        }
        for key, (value, allowed) in checks.items():
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if not 0 <= self.flip_prob <= 1 or self.brightness_factor <= 0:
            raise ConfigError("flip_prob must be in [0, 1] and brightness_factor > 0")
        # fail early on malformed nested sections
        self.trial_design()
        self.ae_config().geometry()
        if self.synth is not None:
            self.synth_trial()

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        if "seed" not in d:
            raise ConfigError("configuration needs a 'seed'")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: Path | str, seed: int | None = None) -> PipelineConfig:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if seed is not None and isinstance(d, dict):
            d["seed"] = seed
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tests"] = list(self.tests)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def trial_design(self) -> TrialDesign:
        keys = TrialDesign.__dataclass_fields__
        unknown = set(self.design) - set(keys)
        if unknown:
            raise ConfigError(f"unknown design keys: {sorted(unknown)}")
        return TrialDesign(**self.design)

    def ae_config(self) -> ae.AEConfig:
        d = {"seed": self.seed, **self.autoencoder}
        return ae.AEConfig.from_dict(d)

    def synth_trial(self) -> SynthTrial:
        d = dict(self.synth)
        d.setdefault("design", self.design)
        spec = dict(d.get("spec", {}))
        spec.setdefault("seed", self.seed)
        d["spec"] = spec
        return SynthTrial.from_dict(d)

    def assignment_scheme(self) -> AssignmentScheme:
        return AssignmentScheme(self.scheme, self.trial_design().n_blocks, self.max_run_length)


@dataclass
class ParticipantScores:
    participant_id: str
    series: PhaseSeries
    days: list[int]
    slots: list[int]
    reference: np.ndarray | None
    flipped: bool = False

    def to_dict(self) -> dict:
        s = self.series
        d = {
            "participant_id": self.participant_id,
            "timestamp": s.timestamps.tolist(),
            "day": list(self.days),
            "slot": list(self.slots),
            "intervention": s.intervention.astype(int).tolist(),
            "pc_score": [float(v) for v in s.values],
            "block_length": int(s.block_length),
            "flipped": self.flipped,
            "summary": _phase_summary(s.values, s.intervention),
        }
        if self.reference is not None:
            d["reference_score"] = [float(v) for v in self.reference]
            d["reference_summary"] = _phase_summary(self.reference, s.intervention)
            # never used for inference, only for orientation and side-by-side display
            d["reference_role"] = "informational"
        return d


def _phase_summary(values: np.ndarray, intervention: np.ndarray) -> dict:
    out = {}
    for name, sel in (("no", ~intervention), ("yes", intervention)):
        v = values[sel]
        out[name] = (
            {"n": int(len(v)), "min": float(v.min()), "max": float(v.max()), "mean": float(v.mean())}
            if len(v) else {"n": 0}
        )
    return out


@dataclass
class Report:
    config: dict
    config_hash: str
    design: dict
    participants: list[dict]
    tests: list[dict]
    loss_history: list[dict]
    pca: dict
    versions: dict
    test_menu: list[str]
    wall_time_s: float = 0.0  # kept out of report.json so reruns stay byte-identical

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "design": self.design,
            "participants": self.participants,
            "tests": self.tests,
            "test_menu": self.test_menu,
            "loss_history": self.loss_history,
            "pca": self.pca,
            "versions": self.versions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> Report:
        try:
            return cls(
                d["config"], d["config_hash"], d["design"], d["participants"], d["tests"],
                d["loss_history"], d["pca"], d["versions"], d["test_menu"],
            )
        except KeyError as exc:
            raise DataError(f"report is missing field {exc}") from exc

    def p_value(self, participant_id: str, test: str) -> float | None:
        for t in self.tests:
            if t["participant_id"] == participant_id and t["test"] == test:
                return t["p_value"]
        return None


# ---------------------------------------------------------------------------
# stages

class _Stage:
    """Re-raise package errors with the stage name prefixed."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, Nof1Error) and not str(exc).startswith("["):
            raise type(exc)(f"[{self.name}] {exc}") from exc
        return False


def acquire_samples(config: PipelineConfig) -> list[ImageSample]:
    if config.synth is not None:
        return config.synth_trial().generate()
    return load_trial(config.data_path, config.trial_design())


def preprocess_all(samples: Sequence[ImageSample], hw: tuple[int, int]) -> list[ImageSample]:
    return [preprocess(s, hw) for s in samples]


def training_sets(samples: Sequence[ImageSample], config: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """One augmented pass for training and an independently augmented copy for validation."""
    train_rng, val_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    train = np.stack([augment(s, config.flip_prob, config.brightness_factor, train_rng).pixels for s in samples])
    val = np.stack([augment(s, config.flip_prob, config.brightness_factor, val_rng).pixels for s in samples])
    return train, val


def pc1_scores(embeddings: ae.EmbeddingMatrix, mode: str) -> tuple[np.ndarray, dict]:
    values = embeddings.values
    pids = np.asarray(embeddings.participant_ids)
    if mode == "joint":
        model = pca_mod.fit(values)
        summary = {"mode": mode, "explained_variance_ratio": _head(model.explained_variance_ratio)}
        return pca_mod.first_component_scores(model, values), summary
    scores = np.empty(len(values))
    ratios = {}
    for pid in sorted(set(pids)):
        sel = pids == pid
        model = pca_mod.fit(values[sel])
        scores[sel] = pca_mod.first_component_scores(model, values[sel])
        ratios[pid] = _head(model.explained_variance_ratio)
    return scores, {"mode": mode, "explained_variance_ratio": ratios}


def _head(ratios: np.ndarray, k: int = 5) -> list[float]:
    return [float(r) for r in ratios[:k]]


def participant_series(
    samples: Sequence[ImageSample], scores: np.ndarray, design: TrialDesign
) -> list[ParticipantScores]:
    by_pid: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_pid.setdefault(s.record.participant_id, []).append(i)
    out = []
    for pid in sorted(by_pid):
        idx = sorted(by_pid[pid], key=lambda i: (samples[i].record.day, samples[i].record.slot))
        recs = [samples[i].record for i in idx]
        series = PhaseSeries(
            scores[idx],
            [r.intervention for r in recs],
            design.block_length,
            [design.timestamp(r.day, r.slot) for r in recs],
        )
        refs = [r.reference_score for r in recs]
        reference = None if any(v is None for v in refs) else np.asarray(refs, dtype=np.float64)
        out.append(ParticipantScores(pid, series, [r.day for r in recs], [r.slot for r in recs], reference))
    return out


@dataclass
class Oriented:
    series: PhaseSeries
    alternative: str
    flipped: bool


def resolve_direction(
    series: PhaseSeries, policy: str, reference: np.ndarray | None = None, alternative: str = "less"
) -> Oriented:
    """Fix the orientation of a PC score series before testing.

    ``as_is`` keeps the PCA sign, ``align_with_reference`` negates the
    series when it correlates negatively with ``reference``, and
    ``two_sided`` leaves the sign alone but makes every test two-sided.
    """
    if policy == "two_sided":
        return Oriented(series, "two-sided", False)
    if policy == "as_is":
        return Oriented(series, alternative, False)
    if policy != "align_with_reference":
        raise ConfigError(f"unknown direction policy {policy!r}")
    if reference is None:
        raise UsageError("direction policy align_with_reference needs a reference score column")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != series.values.shape:
        raise UsageError("reference scores do not match the series length")
    corr = np.corrcoef(series.values, reference)[0, 1] if np.std(reference) > 0 and np.std(series.values) > 0 else 0.0
    if corr < 0:
        flipped = PhaseSeries(-series.values, series.intervention, series.block_length, series.timestamps)
        return Oriented(flipped, alternative, True)
    return Oriented(series, alternative, False)


def _mc_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def run_tests(
    participant: ParticipantScores, index: int, config: PipelineConfig, covariates: np.ndarray | None = None
) -> list[TestResult]:
    oriented = resolve_direction(participant.series, config.direction_policy, participant.reference, config.alternative)
    participant.series = oriented.series
    participant.flipped = oriented.flipped
    series, alt = oriented.series, oriented.alternative
    scheme = config.assignment_scheme()
    results = []
    for name in config.tests:
        if name == "t":
            res = paired_t_test(series, alt, pairing=config.t_pairing)
        elif name == "lm_ar1":
            res = lm_ar1(series, covariates=covariates, alternative=alt, method=config.lm_method)
        elif name == "scrt":
            res = scrt_exact(series, scheme, alt)
        else:
            res = randomization_test_mc(
                series, scheme, alt, M=config.mc_samples, seed=_mc_seed(config.seed, index), support=config.mc_support
            )
        results.append(res)
    return results


def _covariates_for(samples: Sequence[ImageSample], pid: str) -> np.ndarray:
    recs = sorted((s.record for s in samples if s.record.participant_id == pid), key=lambda r: (r.day, r.slot))
    cov = np.array([[r.temperature, float(r.lotion)] for r in recs])
    if not np.all(np.isfinite(cov)):
        raise UsageError(f"participant {pid}: covariates contain missing temperatures")
    return cov


def run(config: PipelineConfig, emit: bool = True, log_epochs=None) -> Report:
    """Execute every stage and (optionally) write the report files."""
    started = time.perf_counter()
    design = config.trial_design()
    ae_cfg = config.ae_config()
    with _Stage("data"):
        raw = acquire_samples(config)
        if not raw:
            raise UsageError("no observations found")
    with _Stage("preprocess"):
        samples = preprocess_all(raw, ae_cfg.input_hw)
        train_x, val_x = training_sets(samples, config)
    with _Stage("autoencoder"):
        model = ae.build(ae_cfg)
        ae.train(model, train_x, val_x, log=log_epochs)
        emb = ae.embed(model, samples)
    with _Stage("pca"):
        scores, pca_summary = pc1_scores(emb, config.pca_mode)
    with _Stage("tests"):
        participants = participant_series(samples, scores, design)
        rows = []
        for i, p in enumerate(participants):
            try:
                cov = _covariates_for(samples, p.participant_id) if config.lm_covariates else None
                results = run_tests(p, i, config, cov)
            except Nof1Error as exc:
                raise type(exc)(f"participant {p.participant_id}: {exc}") from exc
            for name, res in zip(config.tests, results):
                rows.append({"participant_id": p.participant_id, "test": name, **res.to_dict()})
    report = Report(
        config=config.to_dict(),
        config_hash=config.config_hash(),
        design=asdict(replace(design, participant_id="")),
        participants=[p.to_dict() for p in participants],
        tests=rows,
        loss_history=model.history,
        pca=pca_summary,
        versions={"nof1embed": __version__, "numpy": np.__version__, "python": platform.python_version()},
        test_menu=list(config.tests),
    )
    report.wall_time_s = time.perf_counter() - started
    if emit:
        from .report import emit_report

        with _Stage("report"):
            emit_report(report, config.output_dir)
    return report


def fraction_significant(report: Report, test: str = "scrt", level: float = 0.05) -> float:
    ps = [t["p_value"] for t in report.tests if t["test"] == test]
    if not ps:
        return math.nan
    return float(np.mean(np.asarray(ps) < level))
