"""Scenario files: a single JSON document describing a steering run.

A scenario names the system (explicit matrices or an integrator shorthand),
the cost weights, the initial and desired mixtures (inline, fitted from a
sample CSV, or fitted from a built-in synthetic sampler), the problem variant
and its budgets, and the output artifacts.  The mixture parameters behind the
journal-style experiments are not published, so the shipped scenarios use the
documented synthetic stand-ins produced by the samplers here.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .bcd import BcdConfig
from .gaussians import Gmm, fit_em
from .lti import CostWeights, LinearSystem

__all__ = ["Scenario", "ScenarioError", "load_scenario", "shape_samples", "read_samples_csv",
           "write_samples_csv"]

PROBLEMS = ("hard", "soft", "total", "step")


class ScenarioError(ValueError):
    """Scenario file is malformed or references missing inputs."""


@dataclass
class Scenario:
    system: LinearSystem
    weights: CostWeights
    initial: Gmm
    desired: Gmm
    problem: str
    kappa: float = None
    kappas: list = None
    bcd: BcdConfig = field(default_factory=BcdConfig)
    seed: int = 0
    outputs: dict = field(default_factory=dict)


def _build_system(spec):
    try:
        N = int(spec["horizon"])
    except KeyError as exc:
        raise ScenarioError("system needs a 'horizon'") from exc
    kind = spec.get("type", "explicit")
    if kind == "single_integrator":
        return LinearSystem.single_integrator(int(spec.get("dim", 2)), float(spec.get("dt", 1.0)), N)
    if kind == "double_integrator":
        return LinearSystem.double_integrator(int(spec.get("dim", 2)), float(spec.get("dt", 1.0)), N)
    if kind == "explicit":
        A = np.asarray(spec["A"], dtype=float)
        B = np.asarray(spec["B"], dtype=float)
        if A.ndim == 2:  # time-invariant shorthand
            return LinearSystem.time_invariant(A, B, N)
        return LinearSystem(A=list(A), B=list(B), n=A.shape[1], m=B.shape[2], N=N)
    raise ScenarioError(f"unknown system type {kind!r}")


def _build_weights(spec, sys):
    spec = spec or {}
    return CostWeights.uniform(
        sys,
        R=spec.get("R"),
        Q=spec.get("Q"),
        Q_terminal=spec.get("Q_terminal"),
        x_ref=spec.get("x_ref"),
    )


# ---------------------------------------------------------------------------
# synthetic samplers for the letter/box shaped experiment distributions


def _bar(rng, count, center, length, width, angle=0.0):
    pts = rng.uniform([-length / 2, -width / 2], [length / 2, width / 2], size=(count, 2))
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, s], [-s, c]]) + center


_SHAPES = {
    # axis-aligned bars: (cx, cy, length, width, angle)
    "box": [(0.0, 0.0, 1.0, 1.0, 0.0)],
    "U": [(-0.4, 0.0, 0.2, 1.0, np.pi / 2), (0.4, 0.0, 0.2, 1.0, np.pi / 2),
          (0.0, -0.4, 1.0, 0.2, 0.0)],
    "T": [(0.0, 0.4, 1.0, 0.2, 0.0), (0.0, -0.1, 0.2, 0.8, np.pi / 2)],
    "C": [(-0.4, 0.0, 0.2, 1.0, np.pi / 2), (0.0, 0.4, 1.0, 0.2, 0.0),
          (0.0, -0.4, 1.0, 0.2, 0.0)],
    "X": [(0.0, 0.0, 1.3, 0.2, np.pi / 4), (0.0, 0.0, 1.3, 0.2, -np.pi / 4)],
}


def shape_samples(shape, count, seed, center=(0.0, 0.0), scale=1.0):
    """Uniform samples over a letter-shaped union of bars in the plane.

    'UT' and similar multi-letter strings place letters side by side.
    Areas are respected so the union is sampled uniformly.
    """
    rng = np.random.default_rng(seed)
    letters = [shape] if shape in _SHAPES else list(shape)
    bars = []
    for idx, letter in enumerate(letters):
        if letter not in _SHAPES:
            raise ScenarioError(f"unknown shape {letter!r}")
        off = (idx - (len(letters) - 1) / 2) * 1.2
        for cx, cy, length, width, ang in _SHAPES[letter]:
            bars.append(((cx + off, cy), length, width, ang))
    areas = np.array([length * width for _, length, width, _ in bars])
    counts = rng.multinomial(count, areas / areas.sum())
    chunks = [
        _bar(rng, cnt, np.array(ctr), length, width, ang)
        for cnt, (ctr, length, width, ang) in zip(counts, bars)
    ]
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (2,))
    pts = np.vstack(chunks) * scale + np.asarray(center, dtype=float)
    return pts[rng.permutation(count)]


def read_samples_csv(path):
    """Sample CSV with header x0,...,x{n-1}, one row per sample."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not all(h.strip() == f"x{i}" for i, h in enumerate(header)):
            raise ScenarioError(f"{path}: expected header x0,...,x{{n-1}}, got {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows)


def write_samples_csv(path, samples):
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(samples.shape[1])])
        writer.writerows(samples.tolist())


def _pad_positions(samples, n):
    """Embed planar position samples into an n-dim state with zero velocity."""
    if samples.shape[1] == n:
        return samples
    if samples.shape[1] > n:
        raise ScenarioError(f"samples have dimension {samples.shape[1]} > state dimension {n}")
    out = np.zeros((samples.shape[0], n))
    out[:, :samples.shape[1]] = samples
    return out


def _build_gmm(spec, sys, base_dir, default_seed):
    if "gmm" in spec:
        return Gmm.from_dict(spec["gmm"])
    if "samples" in spec:
        path = spec["samples"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ScenarioError(f"sample file not found: {path}")
        samples = read_samples_csv(path)
    elif "sampler" in spec:
        samp = spec["sampler"]
        samples = shape_samples(
            samp["shape"],
            int(samp.get("count", 10000)),
            int(samp.get("seed", default_seed)),
            center=samp.get("center", (0.0, 0.0)),
            scale=float(samp.get("scale", 1.0)),
        )
    else:
        raise ScenarioError("mixture spec needs one of 'gmm', 'samples', 'sampler'")
    samples = _pad_positions(samples, sys.n)
    r = int(spec["components"])
    # zero-velocity embeddings are rank deficient; jitter those axes slightly
    flat = samples.std(axis=0) < 1e-12
    if flat.any():
        rng = np.random.default_rng(int(spec.get("em_seed", default_seed)) + 1)
        samples = samples + flat * rng.normal(scale=1e-3, size=samples.shape)
    return fit_em(samples, r, seed=int(spec.get("em_seed", default_seed)))


def load_scenario(path):
    """Parse and validate a scenario JSON file."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        problem = doc["problem"]
        if problem not in PROBLEMS:
            raise ScenarioError(f"problem must be one of {PROBLEMS}, got {problem!r}")
        sys = _build_system(doc["system"])
        weights = _build_weights(doc.get("weights"), sys)
        seed = int(doc.get("seed", 0))
        initial = _build_gmm(doc["initial"], sys, base_dir, seed)
        desired = _build_gmm(doc["desired"], sys, base_dir, seed + 1)
        kappa = doc.get("kappa")
        kappas = doc.get("kappas")
        if problem in ("soft", "total") and kappa is None:
            raise ScenarioError(f"problem {problem!r} needs 'kappa'")
        if problem == "step":
            if kappas is None:
                raise ScenarioError("problem 'step' needs 'kappas'")
            kappas = [float(k) for k in kappas]
            if len(kappas) != sys.N:
                raise ScenarioError(
                    f"'kappas' must have length N = {sys.N}, got {len(kappas)}"
                )
        bcd_doc = doc.get("bcd", {})
        cfg = BcdConfig(
            max_iter=int(bcd_doc.get("max_iter", 100)),
            eps=float(bcd_doc.get("eps", 1e-5)),
            q=bcd_doc.get("q"),
            seed=int(bcd_doc.get("seed", seed)),
            feasibility_max_iter=int(bcd_doc.get("feasibility_max_iter", 50)),
        )
        if cfg.q is not None:
            cfg.q = int(cfg.q)
        return Scenario(
            system=sys,
            weights=weights,
            initial=initial,
            desired=desired,
            problem=problem,
            kappa=None if kappa is None else float(kappa),
            kappas=kappas,
            bcd=cfg,
            seed=seed,
            outputs=doc.get("outputs", {}),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
