"""Synthetic routing-trace generator with tunable statistics.

Mechanism, per sequence:
  * each layer gets a per-sequence preference vector drawn from a symmetric
    Dirichlet (concentration -> inf degenerates to exact uniform);
  * every token's true gate scores are softmax(log preference + noise * N(0,1));
  * decode tokens drift: with a calibrated per-(token, layer) probability the
    token routes from an independent distractor preference instead, which is
    what pulls the prefill/decode activation similarity down to the target;
  * predicted scores on layer l forecast layer l+1: with probability tied to
    the accuracy profile they copy the next layer's realized true scores,
    otherwise they are a renormalized complement of them (zero overlap), so
    the expected top-k overlap hits the profile entry exactly.

The drift probability is found by bisection against a Monte-Carlo estimate of
the expected row-cosine similarity. Calibration uses a fixed internal seed
(independent of the trace seed) and is cached, so every sequence of a batch
shares one calibrated value and generation stays deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import ConfigError, GeneratorTargetError
from .trace import ModelShape, RoutingTrace

_CALIBRATION_SEED = 0x0CA11B7ED
_CALIBRATION_REPS = 3072
_ENDPOINT_MARGIN = 0.005

DEFAULT_SIMILARITY_TARGET = 0.907
DEFAULT_ACCURACY_MEAN = 0.8411
PROFILE_RAMP_START = 0.60
PROFILE_RAMP_LAYERS = 5


def _ramp_weights(num_layers: int) -> list[float]:
    """Ramp fraction per predicted layer (1..L-1): 0 at layer 1, 1 at the
    plateau, which sits at layer 5 or at the last layer for shallow models."""
    span = min(PROFILE_RAMP_LAYERS - 1, num_layers - 2)
    if num_layers - 1 == 1 or span <= 0:
        return [1.0]
    return [min(l - 1, span) / span for l in range(1, num_layers)]


def ramp_profile(num_layers: int, plateau: float) -> tuple[float, ...]:
    """Per-layer accuracy profile: 0.60 at layer 1, linear to the plateau.

    Entry 0 aligns indices with layers; layer 0 is never predicted, so the
    entry is cosmetic and excluded from every mean.
    """
    if num_layers < 2:
        return (plateau,) * num_layers
    weights = _ramp_weights(num_layers)
    prof = [PROFILE_RAMP_START]
    for w in weights:
        prof.append(PROFILE_RAMP_START + (plateau - PROFILE_RAMP_START) * w)
    return tuple(prof)


def profile_for_mean(num_layers: int, mean_accuracy: float) -> tuple[float, ...]:
    """Ramp profile whose mean over the predicted layers (1..L-1) is as given."""
    if num_layers < 2:
        return (mean_accuracy,) * num_layers
    wbar = float(np.mean(_ramp_weights(num_layers)))
    if wbar == 0.0:
        if abs(mean_accuracy - PROFILE_RAMP_START) > 1e-9:
            raise GeneratorTargetError(
                f"mean accuracy {mean_accuracy} unreachable with {num_layers} layers"
            )
        return ramp_profile(num_layers, PROFILE_RAMP_START)
    plateau = PROFILE_RAMP_START + (mean_accuracy - PROFILE_RAMP_START) / wbar
    if not 0.0 <= plateau <= 1.0:
        raise GeneratorTargetError(
            f"mean accuracy {mean_accuracy} needs plateau {plateau:.4f} "
            "outside [0, 1]"
        )
    return ramp_profile(num_layers, plateau)


def default_profile(num_layers: int, mean_accuracy: float) -> tuple[float, ...]:
    """Ramped profile when the mean is reachable, otherwise flat at the mean.

    Deep models take the ramp shape; shallow ones, where pinning layer 1 to
    0.60 makes the requested mean impossible, fall back to a flat profile.
    """
    try:
        return profile_for_mean(num_layers, mean_accuracy)
    except GeneratorTargetError:
        return (mean_accuracy,) * num_layers


def applied_profile_mean(profile: tuple[float, ...]) -> float:
    """Mean of the profile over layers that actually carry predictions."""
    if len(profile) < 2:
        return float("nan")
    return float(np.mean(profile[1:]))


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for one synthetic sequence.

    routing_noise scales the per-token logit jitter; zero makes routing
    deterministic per layer, which is the only way a similarity target of
    exactly 1.0 is reachable.
    """

    shape: ModelShape
    seed: int
    preference_concentration: float = 0.5
    prefill_decode_similarity_target: float = DEFAULT_SIMILARITY_TARGET
    prediction_accuracy_profile: tuple[float, ...] = field(default=())
    num_prefill_tokens: int = 64
    num_decode_tokens: int = 64
    routing_noise: float = 1.0
    sequence_id: str = ""

    def __post_init__(self):
        l = self.shape.num_layers
        if not self.prediction_accuracy_profile:
            object.__setattr__(
                self,
                "prediction_accuracy_profile",
                default_profile(l, DEFAULT_ACCURACY_MEAN),
            )
        prof = tuple(float(p) for p in self.prediction_accuracy_profile)
        object.__setattr__(self, "prediction_accuracy_profile", prof)
        if len(prof) != l:
            raise ConfigError(
                f"prediction_accuracy_profile has {len(prof)} entries, expected {l}"
            )
        if any(not 0.0 <= p <= 1.0 for p in prof):
            raise ConfigError("prediction_accuracy_profile entries must be in [0, 1]")
        if not (self.preference_concentration > 0):
            raise ConfigError("preference_concentration must be positive")
        if not 0.0 <= self.prefill_decode_similarity_target <= 1.0:
            raise ConfigError("prefill_decode_similarity_target must be in [0, 1]")
        if self.routing_noise < 0:
            raise ConfigError("routing_noise must be >= 0")
        if self.num_prefill_tokens < 1:
            raise ConfigError("num_prefill_tokens must be >= 1")
        if self.num_decode_tokens < 0:
            raise ConfigError("num_decode_tokens must be >= 0")
        if not self.sequence_id:
            object.__setattr__(self, "sequence_id", f"gen-{self.seed}")


def _dirichlet_rows(rng: np.random.Generator, concentration: float,
                    rows: int, dim: int) -> np.ndarray:
    if math.isinf(concentration):
        return np.full((rows, dim), 1.0 / dim)
    g = rng.standard_gamma(concentration, size=(rows, dim))
    s = g.sum(axis=1, keepdims=True)
    dead = s[:, 0] <= 0.0
    if np.any(dead):  # gamma underflow safety net
        g[dead] = 1.0
        s = g.sum(axis=1, keepdims=True)
    return g / s


def _route_scores(pref: np.ndarray, gauss: np.ndarray, noise: float) -> np.ndarray:
    """softmax(log pref + noise * gauss) along the last axis."""
    logits = np.log(np.maximum(pref, 1e-300))
    if noise > 0.0:
        logits = logits + noise * gauss
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _row_cosine_mean(p: np.ndarray, d: np.ndarray) -> np.ndarray:
    num = (p * d).sum(axis=-1)
    den = np.linalg.norm(p, axis=-1) * np.linalg.norm(d, axis=-1)
    return num / den


@lru_cache(maxsize=128)
def _calibrated_drift(num_experts: int, top_k: int, concentration: float,
                      noise: float, n_prefill: int, n_decode: int,
                      target: float) -> float:
    """Drift probability whose expected prefill/decode similarity hits target.

    Layers are exchangeable under the generation mechanism, so a single-layer
    Monte-Carlo over (preference, distractor) draws estimates the expectation.
    """
    if n_decode == 0:
        return 0.0
    if target >= 1.0 - 1e-12:
        if noise == 0.0:
            return 0.0
        raise GeneratorTargetError(
            "similarity target 1.0 is unreachable with routing_noise > 0: "
            "token-level jitter keeps the two phase matrices apart"
        )
    rng = np.random.default_rng(_CALIBRATION_SEED)
    reps, e, k = _CALIBRATION_REPS, num_experts, top_k
    pref = _dirichlet_rows(rng, concentration, reps, e)
    drift_pref = _dirichlet_rows(rng, concentration, reps, e)

    gp = rng.standard_normal((reps, n_prefill, e))
    p_scores = _route_scores(pref[:, None, :], gp, noise)
    p_top = _kernels.topk_rows(p_scores.reshape(-1, e), k).reshape(reps, n_prefill, k)
    p_rows = np.zeros((reps, e))
    np.add.at(
        p_rows,
        (np.broadcast_to(np.arange(reps)[:, None, None], p_top.shape), p_top),
        1.0,
    )

    gd = rng.standard_normal((reps, n_decode, e))
    a_scores = _route_scores(pref[:, None, :], gd, noise)
    b_scores = _route_scores(drift_pref[:, None, :], gd, noise)
    a_top = _kernels.topk_rows(a_scores.reshape(-1, e), k).reshape(reps, n_decode, k)
    b_top = _kernels.topk_rows(b_scores.reshape(-1, e), k).reshape(reps, n_decode, k)
    ha = np.zeros((reps, n_decode, e))
    hb = np.zeros((reps, n_decode, e))
    np.put_along_axis(ha, a_top, 1.0, axis=2)
    np.put_along_axis(hb, b_top, 1.0, axis=2)

    u = rng.random((reps, n_decode))
    order = np.argsort(u, axis=1)
    u_sorted = np.take_along_axis(u, order, axis=1)
    delta = np.take_along_axis(ha - hb, order[:, :, None], axis=1)
    prefix = np.concatenate(
        [np.zeros((reps, 1, e)), np.cumsum(delta, axis=1)], axis=1
    )
    a_total = ha.sum(axis=1)
    rep_idx = np.arange(reps)

    def estimate(d: float) -> float:
        cnt = (u_sorted < d).sum(axis=1)
        decode_rows = a_total - prefix[rep_idx, cnt]
        return float(np.mean(_row_cosine_mean(p_rows, decode_rows)))

    ceiling = estimate(0.0)
    floor = estimate(1.0)
    if target > ceiling:
        if target <= ceiling + _ENDPOINT_MARGIN:
            return 0.0
        raise GeneratorTargetError(
            f"similarity target {target:.4f} above achievable ceiling "
            f"{ceiling:.4f} (reduce routing_noise or target)"
        )
    if target < floor:
        if target >= floor - _ENDPOINT_MARGIN:
            return 1.0
        raise GeneratorTargetError(
            f"similarity target {target:.4f} below cross-preference floor "
            f"{floor:.4f} (raise target or sharpen preferences)"
        )
    lo_d, hi_d = 0.0, 1.0
    for _ in range(48):
        mid = 0.5 * (lo_d + hi_d)
        if estimate(mid) >= target:
            lo_d = mid
        else:
            hi_d = mid
    return 0.5 * (lo_d + hi_d)


def _chance_overlap_floor(num_experts: int, top_k: int) -> float:
    return max(0, 2 * top_k - num_experts) / top_k


def generate_trace(config: GeneratorConfig) -> RoutingTrace:
    """Generate one sequence. Deterministic for a fixed config (incl. seed)."""
    shape = config.shape
    l, e, k = shape.num_layers, shape.num_experts, shape.top_k
    n_p, n_d = config.num_prefill_tokens, config.num_decode_tokens
    noise = config.routing_noise
    drift = _calibrated_drift(
        e, k, config.preference_concentration, noise, n_p, n_d,
        config.prefill_decode_similarity_target,
    )
    # validate the accuracy profile before drawing anything
    floor = _chance_overlap_floor(e, k)
    pis = np.zeros(l)
    for layer in range(1, l):
        tgt = config.prediction_accuracy_profile[layer]
        if tgt >= 1.0:
            pis[layer] = 1.0
        elif floor >= 1.0:
            raise GeneratorTargetError(
                f"layer {layer}: accuracy below 1.0 unreachable when top_k == "
                f"num_experts"
            )
        elif tgt < floor - 1e-9:
            raise GeneratorTargetError(
                f"layer {layer}: accuracy target {tgt} below the forced overlap "
                f"floor {floor:.4f} for E={e}, k={k}"
            )
        else:
            pis[layer] = (tgt - floor) / (1.0 - floor)

    rng = np.random.default_rng(config.seed)
    # draw order is part of the determinism contract; never reorder these
    pref_true = _dirichlet_rows(rng, config.preference_concentration, l, e)
    pref_drift = _dirichlet_rows(rng, config.preference_concentration, l, e)

    g_prefill = rng.standard_normal((n_p, l, e))
    prefill_true = _route_scores(pref_true[None, :, :], g_prefill, noise)

    decode_true = np.zeros((n_d, l, e))
    decode_pred = np.zeros((n_d, l, e))
    decode_mask = np.zeros((n_d, l), dtype=bool)
    if n_d:
        drift_mask = rng.random((n_d, l)) < drift
        g_decode = rng.standard_normal((n_d, l, e))
        pref_sel = np.where(
            drift_mask[:, :, None], pref_drift[None, :, :], pref_true[None, :, :]
        )
        decode_true = _route_scores(pref_sel, g_decode, noise)
        for rec in range(l - 1):
            nxt = decode_true[:, rec + 1, :]
            copy_mask = rng.random(n_d) < pis[rec + 1]
            distract = nxt.copy()
            top = _kernels.topk_rows(distract, k)
            np.put_along_axis(distract, top, 0.0, axis=1)
            mass = distract.sum(axis=1)
            empty = mass <= 0.0
            if np.any(empty):
                # all truth mass inside the top-k: fall back to a uniform
                # distribution over the complement experts
                comp = np.ones((int(empty.sum()), e))
                np.put_along_axis(comp, top[empty], 0.0, axis=1)
                distract[empty] = comp / comp.sum(axis=1, keepdims=True)
                mass[empty] = 1.0
            distract[~empty] /= mass[~empty, None]
            decode_pred[:, rec, :] = np.where(copy_mask[:, None], nxt, distract)
            decode_mask[:, rec] = True

    return RoutingTrace(
        shape,
        config.sequence_id,
        prefill_true,
        decode_true,
        decode_predicted=decode_pred,
        decode_mask=decode_mask,
    )


def generate_many(config: GeneratorConfig, count: int) -> list[RoutingTrace]:
    """Generate `count` sequences with consecutive seeds and derived ids."""
    out = []
    for i in range(count):
        cfg = GeneratorConfig(
            shape=config.shape,
            seed=config.seed + i,
            preference_concentration=config.preference_concentration,
            prefill_decode_similarity_target=config.prefill_decode_similarity_target,
            prediction_accuracy_profile=config.prediction_accuracy_profile,
            num_prefill_tokens=config.num_prefill_tokens,
            num_decode_tokens=config.num_decode_tokens,
            routing_noise=config.routing_noise,
            sequence_id=f"{config.sequence_id}-{i:04d}",
        )
        out.append(generate_trace(cfg))
    return out
