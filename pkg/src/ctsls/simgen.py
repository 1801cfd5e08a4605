"""Simulated censored IV data under the reduced-form design.

``X = alpha1'Z + alpha2'D + xi1`` and ``Y = beta1 X + beta2'D + xi2`` with
``(xi1, xi2)`` drawn from a bivariate Gaussian mixture; intercepts live in the
error means. Censoring is normal with the event-time standard deviation and a
shift calibrated on a large population to a target censoring fraction.

Random streams use numpy's Philox counter-based generator. A stream is keyed
by ``SeedSequence([master_seed, *keys])``; replicate ``r`` of a grid cell uses
keys ``(cell_key, r)``, so its data never depend on worker count or order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import CensoredSample

CALIBRATION_KEY = 0xCA1B
FRACTION_TOL = 1e-4


def rng_stream(master_seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), *map(int, keys)])))


def stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class Component:
    mean1: float
    mean2: float
    var1: float
    var2: float
    rho: float
    proportion: float


@dataclass(frozen=True)
class ErrorScenario:
    components: tuple[Component, ...]
    name: str = "custom"

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("scenario needs at least one component")
        props = np.array([c.proportion for c in comps])
        if np.any(props <= 0) or abs(props.sum() - 1.0) > 1e-12:
            raise ValueError("proportions must be positive and sum to 1")
        for c in comps:
            if not abs(c.rho) < 1 or c.var1 <= 0 or c.var2 <= 0:
                raise ValueError(f"invalid component {c}")
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_dict(cls, raw: dict) -> "ErrorScenario":
        return cls(tuple(Component(**c) for c in raw["components"]), raw.get("name", "custom"))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "components": [c.__dict__.copy() for c in self.components],
        }


SCENARIOS = {
    "1": ErrorScenario((Component(0.0, 0.0, 0.5, 1.0, -0.42, 1.0),), name="1"),
    "2": ErrorScenario(
        (
            Component(5.0, 4.0, 0.2, 1.0, 0.7, 0.5),
            Component(5.0, 1.0, 0.4, 0.5, 0.5, 0.3),
            Component(5.0, 5.0, 0.3, 2.0, -0.9, 0.2),
        ),
        name="2",
    ),
}


def get_scenario(spec) -> ErrorScenario:
    if isinstance(spec, ErrorScenario):
        return spec
    if isinstance(spec, dict):
        return ErrorScenario.from_dict(spec)
    key = str(spec)
    if key not in SCENARIOS:
        raise KeyError(f"unknown scenario {spec!r}; known: {sorted(SCENARIOS)}")
    return SCENARIOS[key]


@dataclass(frozen=True)
class TrueParams:
    alpha1: tuple[float, ...] = (0.5, 0.5)
    alpha2: tuple[float, ...] = (0.3, 0.3)
    beta1: float = 1.0
    beta2: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta2"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.alpha2) != len(self.beta2):
            raise ValueError("alpha2 and beta2 must have the same length (p)")
        if len(self.alpha1) < 1:
            raise ValueError("at least one instrument is required")


@dataclass(frozen=True)
class SimConfig:
    n: int
    censor_rate: float
    scenario: ErrorScenario = field(default_factory=lambda: SCENARIOS["1"])
    true_params: TrueParams = field(default_factory=TrueParams)
    seed: int = 0
    calibration_pop: int = 100_000

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be at least 20")
        if not 0 <= self.censor_rate < 1:
            raise ValueError("censor_rate must lie in [0, 1)")
        object.__setattr__(self, "scenario", get_scenario(self.scenario))

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        raw = dict(raw)
        if "true_params" in raw:
            raw["true_params"] = TrueParams(**raw["true_params"])
        if "scenario" in raw:
            raw["scenario"] = get_scenario(raw["scenario"])
        return cls(**raw)


@dataclass(frozen=True)
class Calibration:
    mu: float
    sigma_c: float


def draw_errors(
    scenario: ErrorScenario,
    rng: np.random.Generator,
    size: int | None = None,
    return_components: bool = False,
):
    """Draw ``(xi1, xi2)`` from the scenario's bivariate Gaussian mixture.

    With ``return_components`` the sampled component indices are returned as
    a third element.
    """
    m = 1 if size is None else int(size)
    comps = scenario.components
    props = np.array([c.proportion for c in comps])
    which = rng.choice(len(comps), size=m, p=props) if len(comps) > 1 else np.zeros(m, dtype=int)
    z = rng.standard_normal((m, 2))
    mean1 = np.array([c.mean1 for c in comps])[which]
    mean2 = np.array([c.mean2 for c in comps])[which]
    sd1 = np.sqrt([c.var1 for c in comps])[which]
    sd2 = np.sqrt([c.var2 for c in comps])[which]
    rho = np.array([c.rho for c in comps])[which]
    xi1 = mean1 + sd1 * z[:, 0]
    xi2 = mean2 + sd2 * (rho * z[:, 0] + np.sqrt(1 - rho**2) * z[:, 1])
    if size is None:
        out = (float(xi1[0]), float(xi2[0]))
        return out + (int(which[0]),) if return_components else out
    return (xi1, xi2, which) if return_components else (xi1, xi2)


def _draw_model(config: SimConfig, rng: np.random.Generator, n: int):
    tp = config.true_params
    q, p = len(tp.alpha1), len(tp.alpha2)
    Z = 0.8 * rng.standard_normal((n, q))
    D = rng.standard_normal((n, p))
    xi1, xi2 = draw_errors(config.scenario, rng, n)
    X = Z @ np.array(tp.alpha1) + D @ np.array(tp.alpha2) + xi1
    Y = tp.beta1 * X + D @ np.array(tp.beta2) + xi2
    return Z, D, X, Y


def _fraction_censored(Y, r, mu, sigma):
    return float(np.mean(Y > mu + sigma * r))


def calibrate_censoring(config: SimConfig, rng: np.random.Generator) -> Calibration:
    """Find the normal censoring shift giving censoring fraction ``config.censor_rate``.

    ``sigma_c`` is the standard deviation of a population of log event times;
    the shift is found by bisection on the population paired with independent
    standard-normal draws. ``censor_rate == 0`` disables censoring (``mu = inf``).
    """
    _, _, _, Y = _draw_model(config, rng, config.calibration_pop)
    sigma = float(np.std(Y, ddof=1))
    target = config.censor_rate
    if target == 0:
        return Calibration(np.inf, sigma)
    r = rng.standard_normal(Y.size)
    lo = float(Y.min() - 10 * sigma)
    hi = float(Y.max() + 10 * sigma)
    f_lo, f_hi = _fraction_censored(Y, r, lo, sigma), _fraction_censored(Y, r, hi, sigma)
    if not f_hi <= target <= f_lo:
        raise ValueError(f"cannot bracket censoring fraction {target} (range {f_hi}..{f_lo})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        frac = _fraction_censored(Y, r, mid, sigma)
        if abs(frac - target) < FRACTION_TOL:
            return Calibration(mid, sigma)
        if frac > target:
            lo = mid
        else:
            hi = mid
    raise ValueError(f"bisection did not reach censoring fraction {target} within {FRACTION_TOL}")


_CALIBRATIONS: dict[tuple, Calibration] = {}


def calibration_for(config: SimConfig) -> Calibration:
    """Cached calibration from the config's own seed; independent of ``n``."""
    key = (config.scenario, config.true_params, config.censor_rate, config.calibration_pop, config.seed)
    if key not in _CALIBRATIONS:
        _CALIBRATIONS[key] = calibrate_censoring(config, rng_stream(config.seed, CALIBRATION_KEY))
    return _CALIBRATIONS[key]


def generate_dataset(config: SimConfig, rng: np.random.Generator, calibration: Calibration | None = None):
    """Draw one censored sample; returns ``(sample, oracle)``.

    ``oracle`` holds the uncensored log event times, censoring times,
    ``beta1_true`` and the calibration used.
    """
    cal = calibration or calibration_for(config)
    Z, D, X, Y = _draw_model(config, rng, config.n)
    if np.isinf(cal.mu):
        C = np.full(config.n, np.inf)
    else:
        C = cal.mu + cal.sigma_c * rng.standard_normal(config.n)
    event = (Y <= C).astype(int)
    log_time = np.minimum(Y, C)
    sample = CensoredSample(log_time, event, X, D, Z)
    oracle = {"Y_true": Y, "C": C, "beta1_true": config.true_params.beta1, "calibration": cal}
    return sample, oracle
