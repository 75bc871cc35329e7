"""JSON model configuration: strict schema, canonical hashing.

A model document looks like

    {
      "alpha": 1.5, "eta": 0.5, "K": 1000,
      "kernel": {"type": "pareto"},
      "rates": {
        "r": {"form": "constant", "params": {"value": 1.0}},
        "p": {"form": "constant", "params": {"value": 0.3}},
        "U": {"form": "constant", "params": {"value": 1.0}},
        "V": {"form": "constant", "params": {"value": 0.0}},
        "b": {"form": "constant", "params": {"value": 1.0}},
        "d": {"form": "competition", "params": {"baseline": 0.0, "slope": 1.0}}
      }
    }

Unknown keys are errors everywhere.  An optional "bounds" object overrides
the envelope constants derived from the registry forms.
"""

from __future__ import annotations

import hashlib
import json

from .model import Bounds, BinaryRate, ModelParams, UnaryRate, make_kernel

__all__ = ["require_keys", "load_model", "model_to_dict", "canonical_json", "config_hash"]

_RATE_KEYS = ("r", "p", "U", "V", "b", "d")


def require_keys(d: dict, required, optional=(), where: str = "config"):
    if not isinstance(d, dict):
        raise ValueError(f"{where} must be a JSON object")
    required = set(required)
    allowed = required | set(optional)
    got = set(d)
    missing = required - got
    unknown = got - allowed
    if missing:
        raise ValueError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")


def _load_rate(d: dict, name: str, binary: bool):
    require_keys(d, ("form", "params"), where=f"rates.{name}")
    cls = BinaryRate if binary else UnaryRate
    return cls(d["form"], dict(d["params"]))


def load_model(doc: dict) -> ModelParams:
    require_keys(doc, ("alpha", "eta", "K", "kernel", "rates"),
                 optional=("bounds",), where="model")
    kern = doc["kernel"]
    require_keys(kern, ("type",), optional=("a",), where="kernel")
    kernel = make_kernel(kern["type"], float(doc["alpha"]), kern.get("a"))
    rates = doc["rates"]
    require_keys(rates, _RATE_KEYS, where="rates")
    bounds = None
    if "bounds" in doc:
        require_keys(doc["bounds"], ("r_bar", "b_bar", "d_bar", "U_bar", "V_bar"),
                     where="bounds")
        bounds = Bounds(**{k: float(v) for k, v in doc["bounds"].items()})
    return ModelParams(
        r=_load_rate(rates["r"], "r", binary=False),
        p=_load_rate(rates["p"], "p", binary=False),
        U=_load_rate(rates["U"], "U", binary=False),
        V=_load_rate(rates["V"], "V", binary=False),
        b=_load_rate(rates["b"], "b", binary=True),
        d=_load_rate(rates["d"], "d", binary=True),
        kernel=kernel,
        alpha=float(doc["alpha"]),
        eta=float(doc["eta"]),
        K=int(doc["K"]),
        bounds=bounds,
    )


def model_to_dict(params: ModelParams) -> dict:
    kern = {"type": "pareto" if params.kernel.kind == 0 else "truncated_pareto"}
    if kern["type"] == "truncated_pareto":
        kern["a"] = params.kernel.a
    return {
        "alpha": params.alpha,
        "eta": params.eta,
        "K": params.K,
        "kernel": kern,
        "rates": {name: {"form": rate.form, "params": dict(rate.params)}
                  for name, rate in (("r", params.r), ("p", params.p),
                                      ("U", params.U), ("V", params.V),
                                      ("b", params.b), ("d", params.d))},
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
