from dataclasses import dataclass
from typing import Dict

from .errors import ConfigurationError


@dataclass(frozen=True)
class MethodProfile:
    name: str
    description: str = ""
    federated: bool = True
    # BN segments travel to the server and are averaged
    aggregates_bn: bool = True
    uses_prox: bool = False
    uses_dp: bool = False


_REGISTRY: Dict[str, MethodProfile] = {}


def register(profile: MethodProfile) -> MethodProfile:
    if profile.name in _REGISTRY:
        raise ConfigurationError(f"method {profile.name!r} registered twice", field="methods")
    _REGISTRY[profile.name] = profile
    return profile


register(MethodProfile("fedavg", "sample-weighted average of client deltas"))
register(MethodProfile("fedprox", "FedAvg with a proximal pull towards the round's global model", uses_prox=True))
register(MethodProfile("fedbn", "FedAvg over non-BN segments, BN kept on each client", aggregates_bn=False))
register(MethodProfile("fedavg_dp", "FedAvg with clipped and noised client updates", uses_dp=True))
register(MethodProfile("centralized", "one model on the pooled client training data", federated=False))
register(MethodProfile("local_only", "one isolated model per client", federated=False))

METHOD_NAMES = tuple(_REGISTRY)


def get_method(name: str) -> MethodProfile:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"unknown method {name!r}, expected one of {', '.join(_REGISTRY)}", field="methods")
