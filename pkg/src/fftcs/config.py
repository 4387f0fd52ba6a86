"""JSON run configuration: schema, loading, and conversion to a ProblemSpec.

The schema checks structure, types and unknown keys. Value ranges are left
to :class:`~fftcs.model.ProblemSpec` so each bound has one source and one
message. Every error names the offending field as a dotted path.
"""

from __future__ import annotations

import copy
import json
from importlib import resources

import jsonschema
import numpy as np

from .errors import SpecValidationError
from .model import McParams, ProblemSpec, ScpParams, make_double_integrator, uniform_mesh

__all__ = ["SCHEMA", "load_config", "spec_from_config", "bundled_config", "validate_config"]

_num = {"type": "number"}
_int = {"type": "integer"}
_vec = {"type": "array", "items": _num}
_mat = {"type": "array", "items": _vec}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_halfspace = _obj({"normal": _vec, "offset": _num}, ["normal", "offset"])

SCHEMA = _obj({
    "dynamics": _obj({
        "name": {"enum": ["double_integrator", "external"]},
        "C_D": _num, "g0": _num, "g1": _num,
        "module": {"type": "string"},
    }, ["name"]),
    "boundary": _obj({
        "mu_i": _vec, "Sigma_i": _mat, "mu_f": _vec, "Sigma_f": _mat,
        "terminal_covariance": {"enum": ["equality", "upper"]},
    }, ["mu_i", "Sigma_i", "mu_f", "Sigma_f"]),
    "constraints": _obj({
        "state_halfspaces": {"type": "array", "items": _halfspace},
        "control_halfspaces": {"type": "array", "items": _halfspace},
        "Delta_x": _num, "Delta_u": _num,
        "risk_allocation": {"enum": ["uniform", "per_constraint"]},
    }),
    "objective": _obj({
        "eta": _num, "Q": _mat, "R": _mat,
        "eps_tilde_sigma": _num, "W_tilde_sigma": _mat, "sigma_row_weight": _num,
    }),
    "mesh": _obj({"N": _int, "uniform": {"type": "boolean"}, "delta_tau": _vec}, ["N"]),
    "dilation": _obj({"sigma_min": _num, "sigma_max": _num}),
    "scp": _obj({
        **{k: _num for k in ("eps_opt", "eps_feas", "rho0", "rho1", "rho2", "alpha1", "alpha2",
                             "beta", "gamma", "w0", "w_max", "tr0", "tr_min", "tr_max")},
        "ell_max": _int,
        "tr_weights": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
    }),
    "mc": _obj({"N_mc": _int, "n_sub": _int, "seed": {"type": "integer", "minimum": 0}}),
    "mode": {"enum": ["full", "frozen"]},
    "linearization": _obj({
        "reference": {"enum": ["nodal", "flow"]},
        "sigma_sensitivity": {"type": "boolean"},
        "ode_steps": _int,
    }),
}, ["dynamics", "boundary"])


def _path(err):
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        parts += extra[:1]
        return ".".join(parts) or "<root>", f"unknown key(s) {extra}"
    if err.validator == "required":
        return ".".join(parts) or "<root>", err.message
    return ".".join(parts) or "<root>", err.message


def validate_config(doc):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        path, msg = _path(errors[0])
        raise SpecValidationError(path, msg)


def _halfspaces(rows, dim, key):
    if not rows:
        return np.zeros((0, dim)), np.zeros(0)
    normals = [r["normal"] for r in rows]
    if any(len(n) != dim for n in normals):
        raise SpecValidationError(f"constraints.{key}", f"normals must have length {dim}")
    return np.array(normals, dtype=float), np.array([r["offset"] for r in rows], dtype=float)


def spec_from_config(doc, mode=None, seed=None):
    """Build a :class:`ProblemSpec` from a parsed config document."""
    validate_config(doc)
    dyn_cfg = doc["dynamics"]
    if dyn_cfg["name"] == "external":
        raise SpecValidationError("dynamics.name",
                                  "external models are supplied through the Python API, not JSON")
    dyn = make_double_integrator(dyn_cfg.get("C_D", 0.15), dyn_cfg.get("g0", 0.2), dyn_cfg.get("g1", 0.0))
    n, m = dyn.state_dim, dyn.control_dim

    bnd = doc["boundary"]
    cons = doc.get("constraints", {})
    alpha, beta = _halfspaces(cons.get("state_halfspaces", []), n, "state_halfspaces")
    a, b = _halfspaces(cons.get("control_halfspaces", []), m, "control_halfspaces")

    mesh = doc.get("mesh", {"N": 30})
    N = mesh["N"]
    if N < 1:
        raise SpecValidationError("mesh.N", "must be >= 1")
    if mesh.get("uniform", True):
        if "delta_tau" in mesh:
            raise SpecValidationError("mesh.delta_tau", "only allowed with uniform = false")
        delta_tau = uniform_mesh(N)
    else:
        if "delta_tau" not in mesh:
            raise SpecValidationError("mesh.delta_tau", "required when uniform = false")
        delta_tau = np.asarray(mesh["delta_tau"], dtype=float)
        if delta_tau.size != N:
            raise SpecValidationError("mesh.delta_tau", f"expected {N} widths, got {delta_tau.size}")

    scp_cfg = dict(doc.get("scp", {}))
    tr_weights = tuple(scp_cfg.pop("tr_weights", (1.0, 1.0, 1.0)))
    mc_cfg = dict(doc.get("mc", {}))
    if seed is not None:
        mc_cfg["seed"] = int(seed)
    obj = doc.get("objective", {})
    dil = doc.get("dilation", {})
    lin = doc.get("linearization", {})

    kwargs = dict(
        dynamics=dyn,
        mu_i=bnd["mu_i"], Sigma_i=bnd["Sigma_i"], mu_f=bnd["mu_f"], Sigma_f=bnd["Sigma_f"],
        alpha=alpha, beta=beta, a=a, b=b,
        Delta_x=cons.get("Delta_x", 0.1), Delta_u=cons.get("Delta_u", 0.1),
        eta=obj.get("eta", 1.0), Q=obj.get("Q"), R=obj.get("R"),
        eps_tilde_sigma=obj.get("eps_tilde_sigma", 1e-4), W_tilde_sigma=obj.get("W_tilde_sigma"),
        delta_tau=delta_tau,
        sigma_min=dil.get("sigma_min", 0.4), sigma_max=dil.get("sigma_max", 1.6),
        scp=ScpParams(**scp_cfg), mc=McParams(**mc_cfg),
        mode=mode or doc.get("mode", "full"),
        tr_weights=tr_weights,
    )
    if "sigma_row_weight" in obj:
        kwargs["sigma_row_weight"] = obj["sigma_row_weight"]
    if "risk_allocation" in cons:
        kwargs["risk_allocation"] = cons["risk_allocation"]
    if "terminal_covariance" in bnd:
        kwargs["terminal_covariance"] = bnd["terminal_covariance"]
    for key in ("reference", "sigma_sensitivity", "ode_steps"):
        if key in lin:
            kwargs[key] = lin[key]
    try:
        return ProblemSpec(**kwargs)
    except TypeError as exc:
        raise SpecValidationError("scp", str(exc)) from exc


def load_config(path):
    """Read and validate a config file; returns the parsed document."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecValidationError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    validate_config(doc)
    return doc


def bundled_config(name):
    """A copy of one of the shipped configs (``"eta1"`` or ``"multiplicative"``)."""
    text = resources.files("fftcs.configs").joinpath(f"{name}.json").read_text()
    return copy.deepcopy(json.loads(text))
