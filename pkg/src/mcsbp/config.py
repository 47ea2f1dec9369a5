"""Configuration files and built-in reference setups.

Mechanisms, simulation knobs and experiment parameters are read from one
YAML (or JSON) tree.  Schema::

    mechanism:
      dimension: 2
      c: [0.5, 0.5]
      b_tilde: [[1.0, 0.5], [0.5, 1.0]]     # raw drift; or supply the
      # b: [[...], [...]]                   # effective drift directly
      measures:
        - type: atomic
          atoms:
            - {z: [1.0, 0.5], rate: 0.2}
        - type: radial
          direction: [0.5, 0.5]
          coeff: 0.5
          alpha: 1.5        # tail density ~ coeff * r^-(1+alpha) * (ln r)^-gamma
          gamma: 0.0
          r0: 1.0
          # small_coeff: 0.1                # optional small-jump part on (0, r0]
          # small_beta: 0.5
    simulation:
      dt: 1.0e-3
      horizon: 2.0
      eps_jump: 1.0e-3
      seed: 42
      extinction_threshold: 1.0e-12
      grid_stride: 100
      block_size: 512
    experiment:
      x0: [1.0, 1.0]
      f: [1.0, 1.0]
      t_list: [2.0, 4.0, 8.0]
      n_paths: 10000
      delta_excursion: [1.0e-2, 1.0e-3]

Exactly one of ``b_tilde``/``b`` must be given.  Everything under
``simulation``/``experiment`` is optional with the defaults above.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import yaml

from .mechanism import AtomicMeasure, BranchingMechanism, MechanismError, RadialMeasure, \
    ZeroMeasure
from .simulator import SimConfig

__all__ = ["load_config", "mechanism_from_config", "mechanism_to_dict",
           "sim_config_from_config", "experiment_params", "reference_mechanism",
           "xlogx_pair", "reference_config_tree", "xlogx_pair_config_tree"]


def load_config(path) -> dict:
    with open(path) as fh:
        tree = yaml.safe_load(fh)
    if not isinstance(tree, dict):
        raise MechanismError(f"config file {path} does not hold a mapping")
    return tree


def _measure_from_config(spec: dict, d: int):
    kind = spec.get("type")
    if kind == "zero":
        return ZeroMeasure(d)
    if kind == "atomic":
        atoms = np.array([a["z"] for a in spec["atoms"]], dtype=float)
        rates = np.array([a["rate"] for a in spec["atoms"]], dtype=float)
        if atoms.shape[1] != d:
            raise MechanismError("atom dimension does not match the mechanism")
        return AtomicMeasure(atoms=atoms, rates=rates)
    if kind == "radial":
        return RadialMeasure(
            direction=np.asarray(spec["direction"], dtype=float),
            coeff=float(spec.get("coeff", 1.0)),
            alpha=float(spec.get("alpha", 1.5)),
            gamma=float(spec.get("gamma", 0.0)),
            r0=float(spec.get("r0", 1.0)),
            small_coeff=float(spec.get("small_coeff", 0.0)),
            small_beta=float(spec.get("small_beta", 0.5)),
        )
    raise MechanismError(f"unknown measure type {kind!r}")


def mechanism_from_config(tree: dict) -> BranchingMechanism:
    spec = tree["mechanism"] if "mechanism" in tree else tree
    d = int(spec["dimension"])
    c = np.asarray(spec["c"], dtype=float)
    measures = [_measure_from_config(m, d) for m in spec.get("measures", [])]
    if len(measures) != d:
        raise MechanismError(f"need one measure entry per type ({d}), got {len(measures)}")
    if ("b_tilde" in spec) == ("b" in spec):
        raise MechanismError("give exactly one of b_tilde or b")
    if "b_tilde" in spec:
        return BranchingMechanism.from_b_tilde(spec["b_tilde"], c, measures)
    return BranchingMechanism.from_b(spec["b"], c, measures)


def mechanism_to_dict(mech: BranchingMechanism) -> dict:
    measures = []
    for mu in mech.measures:
        if isinstance(mu, ZeroMeasure):
            measures.append({"type": "zero"})
        elif isinstance(mu, AtomicMeasure):
            measures.append({
                "type": "atomic",
                "atoms": [{"z": z.tolist(), "rate": float(r)}
                          for z, r in zip(mu.atoms, mu.rates)],
            })
        else:
            entry = {
                "type": "radial",
                "direction": mu.direction.tolist(),
                "coeff": mu.coeff, "alpha": mu.alpha, "gamma": mu.gamma, "r0": mu.r0,
            }
            if mu.small_coeff > 0:
                entry["small_coeff"] = mu.small_coeff
                entry["small_beta"] = mu.small_beta
            measures.append(entry)
    out = {"dimension": mech.d, "c": mech.c.tolist(), "measures": measures}
    if mech.b_tilde is not None:
        out["b_tilde"] = mech.b_tilde.tolist()
    else:
        out["b"] = mech.b.tolist()
    return out


def sim_config_from_config(tree: dict, **overrides) -> SimConfig:
    spec = dict(tree.get("simulation", {}))
    spec.update({k: v for k, v in overrides.items() if v is not None})
    spec.setdefault("horizon", max(experiment_params(tree)["t_list"], default=1.0))
    known = {"dt", "horizon", "eps_jump", "seed", "extinction_threshold",
             "grid_stride", "block_size"}
    unknown = set(spec) - known
    if unknown:
        raise MechanismError(f"unknown simulation keys: {sorted(unknown)}")
    spec["seed"] = int(spec.get("seed", 0))
    return SimConfig(**spec)


def experiment_params(tree: dict) -> dict:
    spec = dict(tree.get("experiment", {}))
    out = {
        "x0": np.asarray(spec.get("x0", [1.0]), dtype=float),
        "f": np.asarray(spec.get("f", [1.0]), dtype=float),
        "t_list": [float(t) for t in spec.get("t_list", [1.0])],
        "n_paths": int(spec.get("n_paths", 10_000)),
        "delta_excursion": [float(x) for x in np.atleast_1d(
            spec.get("delta_excursion", [1e-2, 1e-3]))],
    }
    return out


# ---------------------------------------------------------------------------
# Built-in reference setups (also shipped as YAML under configs/)
# ---------------------------------------------------------------------------

def reference_config_tree() -> dict:
    """Two-type supercritical atomic reference used across the test experiments."""
    return {
        "mechanism": {
            "dimension": 2,
            "c": [0.5, 0.5],
            "b_tilde": [[1.0, 0.5], [0.5, 1.0]],
            "measures": [
                {"type": "atomic", "atoms": [{"z": [1.0, 0.5], "rate": 0.2}]},
                {"type": "atomic", "atoms": [{"z": [0.5, 1.0], "rate": 0.2}]},
            ],
        },
        "simulation": {
            "dt": 1e-3, "horizon": 4.0, "eps_jump": 1e-3, "seed": 42,
            "extinction_threshold": 1e-12, "grid_stride": 100, "block_size": 512,
        },
        "experiment": {
            "x0": [1.0, 1.0], "f": [1.0, 1.0],
            "t_list": [2.0, 4.0, 8.0], "n_paths": 10_000,
            "delta_excursion": [1e-2, 1e-3],
        },
    }


def reference_mechanism() -> BranchingMechanism:
    return mechanism_from_config(reference_config_tree())


def xlogx_pair_config_tree() -> dict:
    """Heavy-tail pair sharing drift and diffusion, differing only in the tail.

    Both radial measures have first moment 2 * coeff along (0.5, 0.5), so the
    cross-moment bound against the shared effective drift holds for both; the
    log-corrected tail keeps the first moment finite but makes the big-jump
    x log x moment diverge.
    """
    b = [[0.05, 0.55], [0.55, 0.05]]
    c = [0.1, 0.1]
    direction = [0.5, 0.5]
    coeff = 0.5

    def tree(measure):
        return {
            "mechanism": {
                "dimension": 2, "c": c, "b": b,
                "measures": [dict(measure), dict(measure)],
            },
            "simulation": {
                "dt": 1e-3, "horizon": 8.0, "eps_jump": 1e-3, "seed": 42,
                "extinction_threshold": 1e-12, "grid_stride": 100, "block_size": 512,
            },
            "experiment": {
                "x0": [1.0, 1.0], "f": [1.0, 1.0],
                "t_list": [2.0, 4.0, 8.0], "n_paths": 10_000,
            },
        }

    holds = tree({"type": "radial", "direction": direction, "coeff": coeff,
                  "alpha": 1.5, "gamma": 0.0, "r0": 1.0})
    fails = tree({"type": "radial", "direction": direction, "coeff": coeff,
                  "alpha": 1.0, "gamma": 1.5, "r0": float(math.e)})
    return {"holds": holds, "fails": fails}


def xlogx_pair() -> tuple[BranchingMechanism, BranchingMechanism]:
    trees = xlogx_pair_config_tree()
    return (mechanism_from_config(trees["holds"]),
            mechanism_from_config(trees["fails"]))


def write_reference_configs(directory) -> list[Path]:
    """Materialize the built-in setups as YAML files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    pairs = xlogx_pair_config_tree()
    for name, tree in (("reference", reference_config_tree()),
                       ("xlogx_holds", pairs["holds"]),
                       ("xlogx_fails", pairs["fails"])):
        path = directory / f"{name}.yaml"
        path.write_text(yaml.safe_dump(tree, sort_keys=False))
        written.append(path)
    return written
