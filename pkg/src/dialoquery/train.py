"""Training loop: per-dialog gradient steps with per-context replay buffers.

Every estimator exposes an ascent direction, so the loop itself is a single
piece of code: prepare dialogs, seed buffers by systematic exploration where
the estimator uses them, take one step per dialog per epoch, track buffer
statistics, and early-stop on validation reward.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Sequence

import numpy as np

from .dialog import Dialog
from .estimators import (
    BufferPair,
    GradientEstimate,
    ReplayBuffer,
    bs_reinforce_gradient,
    mapo_gradient,
    mbmapo_gradient,
    rbs_reinforce_gradient,
    reinforce_gradient,
    supervised_gradient,
    supervised_rl_gradient,
)
from .explore import systematic_explore
from .grammar import GrammarError, max_tokens_for_clauses
from .kb import KnowledgeBase
from .metrics import MetricsReport, PreparedDialog, evaluate, prepare_dialogs
from .policy import FeatureTemplate, PolicyParameters
from .position import PositionModel

ESTIMATORS = ("reinforce", "bs", "rbs", "mapo", "mbmapo", "sl", "slrl")

# which config knobs each estimator actually reads
_RELEVANT = {
    "reinforce": {"n_samples"},
    "bs": {"beam_width"},
    "rbs": {"beam_width", "epsilon"},
    "mapo": {"alpha", "n_samples"},
    "mbmapo": {"alpha_high", "alpha_other", "n_samples"},
    "sl": set(),
    "slrl": {"alpha_high", "alpha_other", "lam", "n_samples"},
}
_TUNABLE = {"n_samples", "beam_width", "epsilon", "alpha", "alpha_high", "alpha_other", "lam"}


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


@dataclass(frozen=True)
class TrainConfig:
    estimator: str = "mbmapo"
    learning_rate: float = 0.5
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    n_samples: int = 8
    beam_width: int = 8
    epsilon: float = 0.15
    alpha: float = 0.5
    alpha_high: float = 0.5
    alpha_other: float = 0.1
    lam: float = 0.1
    max_clauses: int = 4
    feature_dim: int = 1 << 15
    position_source: str = "heuristic"

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, not {self.estimator!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be at least 1")
        if self.n_samples < 0 or self.beam_width < 1:
            raise ConfigError("n_samples must be non-negative and beam_width positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        for name in ("alpha", "alpha_high", "alpha_other"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.max_clauses < 0:
            raise ConfigError("max_clauses must be non-negative")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.position_source not in ("gold", "heuristic", "predicted"):
            raise ConfigError(f"unknown position_source {self.position_source!r}")
        defaults = {f.name: f.default for f in dataclass_fields(TrainConfig)}
        irrelevant = _TUNABLE - _RELEVANT[self.estimator]
        touched = [n for n in sorted(irrelevant) if getattr(self, n) != defaults[n]]
        if touched:
            warnings.warn(
                f"estimator {self.estimator!r} ignores {', '.join(touched)}", stacklevel=2
            )

    @property
    def max_len(self) -> int:
        return max_tokens_for_clauses(self.max_clauses)


@dataclass
class EpochRecord:
    epoch: int
    mean_pi_high: float
    mean_pi_other: float
    mean_clipped_high: float
    mean_clipped_other: float
    n_discoveries: int
    val: MetricsReport

    def csv_rows(self) -> list[tuple[int, str, str, float]]:
        rows = [
            (self.epoch, "train", "mean_pi_high", self.mean_pi_high),
            (self.epoch, "train", "mean_pi_other", self.mean_pi_other),
            (self.epoch, "train", "n_discoveries", float(self.n_discoveries)),
            (self.epoch, "val", "total_reward", self.val.total_reward),
            (self.epoch, "val", "mean_reward", self.val.mean_reward),
        ]
        if self.val.query_accuracy is not None:
            rows.append((self.epoch, "val", "query_accuracy", self.val.query_accuracy))
        if self.val.piq_ratio is not None:
            rows.append((self.epoch, "val", "piq_ratio", self.val.piq_ratio))
        return rows


@dataclass
class TrainResult:
    params: PolicyParameters
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool
    n_train_items: int
    n_skipped_no_supervision: int
    n_skipped_ungrammatical_gold: int
    estimator: str = ""
    buffers: dict = field(default_factory=dict)

    def buffer_dynamics(self) -> list[tuple[int, float, float]]:
        """(epoch, mean high-buffer prob, mean other-buffer prob) per epoch.

        Meaningful only for the two-buffer estimator; empty for every other
        run, including single-buffer ones (whose pi_other is always zero).
        """
        if self.estimator != "mbmapo":
            return []
        return [(r.epoch, r.mean_pi_high, r.mean_pi_other) for r in self.history]


def _seed_buffers(items: Sequence[PreparedDialog], kb: KnowledgeBase, config: TrainConfig):
    single = {}
    paired = {}
    for i, item in enumerate(items):
        result = systematic_explore(item.context, item.supervision, kb, config.max_clauses)
        single[i] = ReplayBuffer.from_exploration(result)
        paired[i] = BufferPair.from_exploration(result)
    return single, paired


def train(
    kb: KnowledgeBase,
    train_dialogs: Sequence[Dialog],
    val_dialogs: Sequence[Dialog],
    config: TrainConfig,
    position_model: PositionModel | None = None,
) -> TrainResult:
    """Fit a policy with the configured estimator.

    Dialogs whose supervision set is empty cannot be scored and are dropped
    from training; the supervised estimators additionally drop dialogs whose
    gold query the grammar cannot express at the chosen position. Validation
    reward on greedy decodes drives early stopping.
    """
    est = config.estimator
    all_items = prepare_dialogs(train_dialogs, kb, config.position_source, position_model)
    items = [it for it in all_items if it.supervision]
    n_skipped = len(all_items) - len(items)
    if not items:
        raise ValueError("no training dialog has a non-empty supervision set")
    if est in ("sl", "slrl") and all(it.gold_query is None for it in items):
        raise ValueError(f"estimator {est!r} needs gold queries, but no dialog has one")
    val_items = prepare_dialogs(val_dialogs, kb, config.position_source, position_model)

    template = FeatureTemplate(kb.fields, config.feature_dim)
    params = PolicyParameters.zeros(template)
    rng = np.random.default_rng(config.seed)

    single_buffers: dict = {}
    paired_buffers: dict = {}
    if est in ("mapo", "mbmapo", "slrl"):
        single_buffers, paired_buffers = _seed_buffers(items, kb, config)

    bad_gold: set[int] = set()
    history: list[EpochRecord] = []
    best_params = params.copy()
    best_epoch = 0
    best_val = -np.inf
    since_best = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        pi_h_sum = pi_o_sum = ch_sum = co_sum = 0.0
        n_buffered = 0
        n_discovered = 0
        order = rng.permutation(len(items))
        for i in order:
            item = items[int(i)]
            estimate = _step(params, item, kb, config, rng,
                             single_buffers, paired_buffers, int(i), bad_gold)
            if estimate is None:
                continue
            params.weights += config.learning_rate * estimate.gradient
            if est in ("mapo", "mbmapo", "slrl"):
                pi_h_sum += estimate.pi_high
                pi_o_sum += estimate.pi_other
                ch_sum += estimate.clipped_high
                co_sum += estimate.clipped_other
                n_buffered += 1
                n_discovered += len(estimate.discoveries)
                for q, r in estimate.discoveries:
                    if est == "mapo":
                        single_buffers[int(i)] = single_buffers[int(i)].add(q, r)
                    else:
                        paired_buffers[int(i)] = paired_buffers[int(i)].add(q, r)

        val_report = evaluate(params, val_items, kb)
        denom = max(n_buffered, 1)
        history.append(
            EpochRecord(
                epoch=epoch,
                mean_pi_high=pi_h_sum / denom,
                mean_pi_other=pi_o_sum / denom,
                mean_clipped_high=ch_sum / denom,
                mean_clipped_other=co_sum / denom,
                n_discoveries=n_discovered,
                val=val_report,
            )
        )
        score = val_report.total_reward
        if score > best_val + 1e-12:
            best_val = score
            best_params = params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break

    final_buffers = single_buffers if est == "mapo" else paired_buffers
    return TrainResult(
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
        n_train_items=len(items),
        n_skipped_no_supervision=n_skipped,
        n_skipped_ungrammatical_gold=len(bad_gold),
        estimator=est,
        buffers=dict(final_buffers),
    )


def _step(
    params: PolicyParameters,
    item: PreparedDialog,
    kb: KnowledgeBase,
    config: TrainConfig,
    rng: np.random.Generator,
    single_buffers: dict,
    paired_buffers: dict,
    index: int,
    bad_gold: set[int],
) -> GradientEstimate | None:
    est = config.estimator
    if est == "reinforce":
        return reinforce_gradient(
            params, item.context, item.supervision, kb,
            config.n_samples, rng, config.max_len,
        )
    if est == "bs":
        return bs_reinforce_gradient(
            params, item.context, item.supervision, kb, config.beam_width
        )
    if est == "rbs":
        return rbs_reinforce_gradient(
            params, item.context, item.supervision, kb,
            config.beam_width, config.epsilon, rng,
        )
    if est == "mapo":
        return mapo_gradient(
            params, item.context, item.supervision, kb,
            single_buffers[index], config.alpha,
            config.n_samples, rng, config.max_len,
        )
    if est == "mbmapo":
        return mbmapo_gradient(
            params, item.context, item.supervision, kb,
            paired_buffers[index], config.alpha_high, config.alpha_other,
            config.n_samples, rng, config.max_len,
        )
    if est == "sl":
        if item.gold_query is None or index in bad_gold:
            return None
        try:
            return supervised_gradient(params, item.context, item.gold_query)
        except GrammarError:
            bad_gold.add(index)
            return None
    # slrl: fall back to the reward term alone when the gold is unusable
    if item.gold_query is not None and index not in bad_gold:
        try:
            return supervised_rl_gradient(
                params, item.context, item.supervision, kb, item.gold_query,
                paired_buffers[index], config.alpha_high, config.alpha_other,
                config.lam, config.n_samples, rng, config.max_len,
            )
        except GrammarError:
            bad_gold.add(index)
    estimate = mbmapo_gradient(
        params, item.context, item.supervision, kb,
        paired_buffers[index], config.alpha_high, config.alpha_other,
        config.n_samples, rng, config.max_len,
    )
    estimate.gradient = config.lam * estimate.gradient
    return estimate
