import pytest

from toptwo.expfam import InstanceSpec, ObservationModel
from toptwo.rules import RuleConfig
from toptwo.sim import StoppingSpec, run_trial

FIVE_ARM = InstanceSpec(ObservationModel.bernoulli(), (0.1, 0.2, 0.3, 0.4, 0.5))
THREE_ARM_GAUSS = InstanceSpec(ObservationModel.gaussian(1.0), (1.0, 0.5, 0.0))

# long horizons drive alpha far below the Monte Carlo resolution, so TTTS
# falls back to drawing the challenger from the quadrature probabilities
LONG_RUN = RuleConfig(resample_cap=64, ttts_fallback="conditional")

SETUPS = {
    # five-arm Bernoulli experiment, stopped at confidence 0.999
    "five_ttts": (FIVE_ARM, "ttts", None, StoppingSpec.confidence(0.001), {}),
    "five_ttps": (FIVE_ARM, "ttps", None, StoppingSpec.confidence(0.001), {}),
    "five_ttvs": (FIVE_ARM, "ttvs", None, StoppingSpec.confidence(0.001), {}),
    "five_uniform": (FIVE_ARM, "uniform", None, StoppingSpec.confidence(0.001), {}),
    # Thompson sampling only needs to reach confidence 0.99 for the comparisons
    "five_ts": (FIVE_ARM, "ts", None, StoppingSpec.confidence(0.01), {}),
    # three-arm Gaussian runs at a fixed horizon for exponent fits
    "gauss_fixed": (THREE_ARM_GAUSS, "fixed", None, StoppingSpec.fixed(100_000), {"psi": "optimal"}),
    "gauss_uniform": (THREE_ARM_GAUSS, "uniform", None, StoppingSpec.fixed(100_000), {}),
    "gauss_ttts": (THREE_ARM_GAUSS, "ttts", LONG_RUN, StoppingSpec.fixed(100_000), {}),
    "gauss_ts": (THREE_ARM_GAUSS, "ts", None, StoppingSpec.fixed(100_000), {}),
    "gauss_ei": (THREE_ARM_GAUSS, "ei", None, StoppingSpec.fixed(100_000), {}),
}

_CACHE = {}


def experiment(name, seeds):
    """Traces for a named setup, computed once per session and seed."""
    instance, rule, cfg, stopping, kwargs = SETUPS[name]
    out = []
    for seed in seeds:
        key = (name, seed)
        if key not in _CACHE:
            _CACHE[key] = run_trial(instance, rule, cfg, stopping, seed, **kwargs)
        out.append(_CACHE[key])
    return out


@pytest.fixture(scope="session")
def runs():
    return experiment
