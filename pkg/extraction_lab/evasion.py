"""
Adaptive adversary against PRADA at the distance level.

Given the d_min stream an attack would produce and the detector's delta, plan
dummy distances interleaved with the useful ones so that the detector's own
decide never fires. Also provides the naive dummy strategies that do not work,
as negative controls.
"""

import logging
from collections.abc import Sequence

import numpy as np

from extraction_lab.detector import decide, replay_distances
from extraction_lab.exceptions import EvasionInfeasibleError
from extraction_lab.models import DetectorConfig, EvasionPlan, PlanEntry, QueryKind

logger = logging.getLogger(__name__)

DEFAULT_CAP = 100
CANDIDATES_PER_DUMMY = 8
SHAPING_START = 20
# Envelope std is at least this fraction of the mean so a spiked stream still gets spread.
ENVELOPE_MIN_SPREAD = 0.25

NEGATIVE_CONTROLS = ("noise_far", "perturbed_natural", "band_clipped", "accept_if_w_ok")
ACCEPT_TRIES = 50


def plan_dummy_distances(
    attack_dmins: Sequence[float],
    delta: float,
    cfg: DetectorConfig,
    rng: np.random.Generator,
    cap: int = DEFAULT_CAP,
    candidates: int = CANDIDATES_PER_DUMMY,
) -> EvasionPlan:
    """
    Greedy dummy schedule keeping W(D') >= delta at every checkpoint.

    Before each useful distance d, dummies are added while decide(D + [d]) would
    fire. Shaping starts once D holds twenty values so the stream is steered
    towards normality before the warm-up window closes. Each dummy is the best of
    a few draws from a normal envelope fitted to D, scored by W(D + [dummy, d]);
    a draw is only eligible if it does not fire the detector itself.

    Args:
        attack_dmins: Useful d_min values in query order
        delta: Detector threshold the adversary knows
        cfg: Detector parameters (window, trimming); its delta is replaced
        rng: Source of dummy draws
        cap: Maximum dummy attempts per useful query

    Returns:
        EvasionPlan whose useful subsequence equals attack_dmins

    Raises:
        ValueError: If the attack stream is empty or delta is outside (0, 1)
        EvasionInfeasibleError: If a useful query needs more than `cap` attempts
    """
    if not len(attack_dmins):
        raise ValueError("The attack stream is empty")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    det = cfg.model_copy(update={"delta": delta})
    useful = [float(d) for d in attack_dmins]

    if not any(replay_distances(useful, det)):
        logger.info("Attack stream never fires the detector; no dummies needed")
        return _plan([PlanEntry(d_min=d, kind=QueryKind.USEFUL) for d in useful])

    shaping_start = min(SHAPING_START, det.window_min)
    stream: list[float] = []
    entries: list[PlanEntry] = []

    for index, d in enumerate(useful):
        attempts = 0
        while len(stream) + 1 >= shaping_start and decide(stream + [d], det).attack:
            if attempts >= cap:
                raise EvasionInfeasibleError(index, f"W stays below {delta} after {cap} dummy attempts")
            attempts += 1
            dummy = _best_dummy(stream, d, det, rng, candidates)
            if dummy is None:
                continue
            stream.append(dummy)
            entries.append(PlanEntry(d_min=dummy, kind=QueryKind.DUMMY))
        stream.append(d)
        entries.append(PlanEntry(d_min=d, kind=QueryKind.USEFUL))

    plan = _plan(entries)
    logger.info(
        f"Evasion plan: {plan.useful_count} useful + {plan.dummy_count} dummies "
        f"(overhead {plan.overhead_ratio:.0%}) at delta={delta}"
    )
    return plan


def _best_dummy(
    stream: list[float], d: float, det: DetectorConfig, rng: np.random.Generator, candidates: int
) -> float | None:
    mean = float(np.mean(stream))
    # Spread never falls below a quarter of the mean, even for a flat stream.
    spread = max(float(np.std(stream)), ENVELOPE_MIN_SPREAD * mean)
    draws = rng.normal(mean, spread, size=candidates)

    best, best_w = None, -1.0
    for c in draws[draws > 0]:
        candidate = float(c)
        # Past the warm-up a dummy is itself a checkpoint and must not fire.
        if len(stream) + 1 > det.window_min and decide(stream + [candidate], det).attack:
            continue
        # Score by the W the next useful query will see.
        w = decide(stream + [candidate, d], det).w
        if w > best_w:
            best, best_w = candidate, w
    return best


def negative_control_plan(
    attack_dmins: Sequence[float],
    strategy: str,
    delta: float,
    cfg: DetectorConfig,
    rng: np.random.Generator,
) -> EvasionPlan:
    """
    Dummy schedule from one of the naive strategies, one dummy per useful query.

    noise_far: random-noise queries, far from everything seen.
    perturbed_natural: slightly perturbed natural samples, very close to their source.
    band_clipped: envelope draws clipped to one standard deviation around the mean.
    accept_if_w_ok: up to 50 random draws, the first that keeps W(D) >= delta is kept.
    """
    if strategy not in NEGATIVE_CONTROLS:
        raise ValueError(f"Unknown negative control {strategy!r}; expected one of {NEGATIVE_CONTROLS}")
    useful = [float(d) for d in attack_dmins]
    if not useful:
        raise ValueError("The attack stream is empty")
    det = cfg.model_copy(update={"delta": delta})
    top = max(useful)

    stream: list[float] = []
    entries: list[PlanEntry] = []
    for d in useful:
        dummy: float | None
        base = stream or [d]
        mean, spread = float(np.mean(base)), float(np.std(base))
        if strategy == "noise_far":
            dummy = abs(float(rng.normal(4.0 * top, 0.05 * top)))
        elif strategy == "perturbed_natural":
            dummy = abs(float(rng.normal(0.2 * mean, 0.01 * mean)))
        elif strategy == "band_clipped":
            dummy = float(np.clip(rng.normal(mean, spread), mean - spread, mean + spread))
        else:
            dummy = None
            lo = min(base)
            for c in rng.uniform(lo, max(base) + spread, size=ACCEPT_TRIES):
                if len(stream) + 1 < 3 or decide(stream + [float(c)], det).w >= delta:
                    dummy = float(c)
                    break
        if dummy is not None:
            stream.append(dummy)
            entries.append(PlanEntry(d_min=dummy, kind=QueryKind.DUMMY))
        stream.append(d)
        entries.append(PlanEntry(d_min=d, kind=QueryKind.USEFUL))
    return _plan(entries)


def suppresses_alarm(plan: EvasionPlan, delta: float, cfg: DetectorConfig) -> bool:
    """True if replaying the planned stream never fires decide."""
    det = cfg.model_copy(update={"delta": delta})
    return not any(replay_distances(plan.distances(), det))


def _plan(entries: list[PlanEntry]) -> EvasionPlan:
    useful = sum(1 for e in entries if e.kind == QueryKind.USEFUL)
    return EvasionPlan(entries=entries, useful_count=useful, dummy_count=len(entries) - useful)
