"""Experimental setups: two closed-form WSCS examples, an OFDM power-line
scenario with estimated moments, and a JSON config loader.

A :class:`Scenario` couples an input model and ground truth with a
trajectory generator that draws ``(x[n], d[n])`` for one Monte Carlo trial.
"""

from __future__ import annotations

import copy
import functools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from cyclo_lms.cyclolinalg import NumericalError, PeriodicSequence, SolverError, common_period, solve
from cyclo_lms.signal_models import (
    EmpiricalModel,
    GaussianMixtureModel,
    GroundTruth,
    InputModel,
    ModulatedModel,
    MomentAccumulator,
    gaussian,
    multivariate_t,
)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Scenario configuration is malformed or inconsistent."""


@dataclass(frozen=True, eq=False)
class Scenario:
    """A fully specified JWSCS adaptive-filtering experiment.

    Attributes
    ----------
    name : str
    input : InputModel
    gt : GroundTruth
    period : int
        Common period of every periodic ingredient.
    M : int
    default_mus : tuple of float
    notes : dict
        Which modelling assumptions hold (``independent_input``,
        ``independent_noise``, ``bounded_fourth_moments``).
    generator : callable
        ``generator(rng, horizon)`` returning ``x`` of shape ``(horizon, M)``
        and ``d`` of shape ``(horizon,)``.
    h0 : ndarray
        Initial filter.
    config : dict
        Normalized configuration the scenario was built from.
    """

    name: str
    input: InputModel
    gt: GroundTruth
    period: int
    M: int
    default_mus: tuple
    notes: dict
    generator: Callable[[np.random.Generator, int], tuple]
    h0: np.ndarray
    config: dict = field(default_factory=dict)
    default_seed: int = 0

    def trajectory(self, rng: np.random.Generator, horizon: int):
        return self.generator(rng, horizon)

    def to_config(self) -> dict:
        return copy.deepcopy(self.config)


def _complex(v) -> complex:
    return complex(v) if not isinstance(v, (list, tuple)) else complex(v[0], v[1])


def toeplitz_kernel(M: int, scale: float, decay: float, turns: float = 1.0) -> np.ndarray:
    """``scale * exp(-decay |k-l| + j 2 pi turns (k-l) / M)``."""
    k = np.arange(M)
    diff = k[:, None] - k[None, :]
    return scale * np.exp(-decay * np.abs(diff) + 2j * np.pi * turns * diff / M)


def _kernel(M, spec):
    return toeplitz_kernel(M, spec["scale"], spec["decay"], spec.get("turns", 1.0))


def envelope_sequence(spec: dict | None, period: int) -> PeriodicSequence:
    if spec is None:
        return PeriodicSequence([1.0])
    kind = spec["kind"]
    n = np.arange(period)
    if kind == "cosine":
        vals = spec["offset"] + spec["amplitude"] * np.cos(2 * np.pi * n / period)
    elif kind == "ramp":
        vals = spec["offset"] + spec["slope"] * n / period
    elif kind == "constant":
        vals = np.full(1, float(spec["value"]))
    else:
        raise ConfigError(f"unknown envelope kind {kind!r}")
    return PeriodicSequence([float(v) for v in vals])


def build_input(M: int, spec: dict, period: int) -> InputModel:
    kind = spec["kind"]
    if kind == "multivariate_t":
        base = multivariate_t(_kernel(M, spec["scatter"]), spec["dof"], spec.get("texture", "complex"))
    elif kind == "gaussian_mixture":
        weights = np.asarray(spec["weights"], dtype=float)
        if len(weights) != len(spec["components"]):
            raise ConfigError("model.weights and model.components differ in length")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"model.weights must sum to one, got {weights.sum()}")
        base = GaussianMixtureModel(
            weights=PeriodicSequence([weights]),
            component_covs=tuple(_kernel(M, c) for c in spec["components"]),
        )
    elif kind == "gaussian":
        base = gaussian(_kernel(M, spec["covariance"]))
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    env = spec.get("envelope")
    if env is None:
        return base
    return ModulatedModel(base, envelope_sequence(env, period))


def ground_truth_sequence(M: int, spec: dict, period: int) -> PeriodicSequence:
    kind = spec["kind"]
    if kind == "constant":
        taps = np.array([_complex(t) for t in spec["taps"]])
        if taps.size != M:
            raise ConfigError(f"ground_truth.taps has {taps.size} entries, expected M={M}")
        return PeriodicSequence([taps])
    if kind == "ramp":
        k = np.arange(M)
        taper = spec["taper"]
        if taper["kind"] == "exponential":
            shape = np.exp(-taper["rate"] * k)
        else:
            shape = 1.0 + taper["slope"] * k
        div = spec["ramp_divisor"]
        return PeriodicSequence(
            [(1.0 + n / (div * period)) * shape.astype(complex) for n in range(period)]
        )
    raise ConfigError(f"unknown ground_truth kind {kind!r}")


def noise_sequence(spec: dict, period: int) -> PeriodicSequence:
    kind = spec["kind"]
    n = np.arange(period)
    if kind == "constant":
        return PeriodicSequence([float(spec["value"])])
    if kind == "harmonic_decay":
        vals = spec["level"] * (1.0 + spec["depth"] / (n + 1.0)) ** 2
    elif kind == "sinusoid":
        vals = spec["level"] * (1.0 + spec["depth"] * np.sin(2 * np.pi * n / period)) ** 2
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    return PeriodicSequence([float(v) for v in vals])


def independent_generator(model: InputModel, gt: GroundTruth, period: int):
    """Trajectory generator for temporally independent inputs."""

    def generate(rng: np.random.Generator, horizon: int):
        x = model.sample_times(np.arange(horizon), rng)
        phases = np.arange(horizon) % period
        h = np.stack([gt.h_M[k] for k in range(period)])[phases]
        var = np.array([gt.sigma_v2[k] for k in range(period)])[phases]
        v = np.sqrt(var / 2.0) * (rng.standard_normal(horizon) + 1j * rng.standard_normal(horizon))
        d = np.einsum("nm,nm->n", h.conj(), x) + v
        return x, d

    return generate


# --------------------------------------------------------------- configs


def _load_schema(name: str) -> dict:
    with resources.files("cyclo_lms").joinpath("schemas", name).open("r", encoding="utf-8") as f:
        return json.load(f)


@functools.lru_cache(maxsize=None)
def scenario_schema() -> dict:
    return _load_schema("scenario.schema.json")


def _most_specific(err):
    """Descend into ``oneOf`` failures, following the branch whose ``kind`` matched."""
    while err.context:
        branches = {}
        for sub in err.context:
            branches.setdefault(sub.schema_path[0], []).append(sub)
        kind_ok = [
            subs for subs in branches.values()
            if not any(list(e.relative_path) == ["kind"] for e in subs)
        ]
        if len(kind_ok) != 1:
            break
        err = max(kind_ok[0], key=lambda e: len(e.relative_path))
    return err


def validate_config(cfg: dict) -> None:
    """Validate against the shipped schema; raise :class:`ConfigError` with the field path."""
    schema = scenario_schema()
    # Validate against the matching branch so errors point at real fields.
    branch = schema["oneOf"][1 if isinstance(cfg, dict) and "nbplc" in cfg else 0]
    sub = {**{k: v for k, v in schema.items() if k != "oneOf"}, **branch}
    validator = jsonschema.Draft202012Validator(sub)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(_most_specific(e) for e in errors)
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"invalid scenario config at {path}: {err.message}")


def from_config(source) -> Scenario:
    """Build a scenario from a JSON file path, a JSON string or a dict."""
    if isinstance(source, dict):
        cfg = copy.deepcopy(source)
    else:
        path = Path(source)
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read scenario config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    validate_config(cfg)
    if "nbplc" in cfg:
        return _nbplc_from_config(cfg)
    return _closed_form_from_config(cfg)


def _initial_filter(cfg, M):
    if "initial_filter" not in cfg:
        return np.zeros(M, complex)
    h0 = np.array([_complex(t) for t in cfg["initial_filter"]])
    if h0.size != M:
        raise ConfigError(f"initial_filter has {h0.size} entries, expected M={M}")
    return h0


def _closed_form_from_config(cfg: dict) -> Scenario:
    M = cfg["M"]
    p = cfg["periods"]
    model = build_input(M, cfg["model"], p["N_x"])
    h_M = ground_truth_sequence(M, cfg["ground_truth"], p["N_h"])
    sigma_v2 = noise_sequence(cfg["noise"], p["N_v"])
    gt = GroundTruth.from_model(h_M, sigma_v2, model)
    period = common_period(p["N_x"], p["N_h"], p["N_v"])
    return Scenario(
        name=cfg["name"],
        input=model,
        gt=gt,
        period=period,
        M=M,
        default_mus=tuple(cfg.get("default_mus", ())),
        notes={"independent_input": True, "independent_noise": True, "bounded_fourth_moments": True},
        generator=independent_generator(model, gt, period),
        h0=_initial_filter(cfg, M),
        config=cfg,
        default_seed=cfg.get("seeds", {}).get("simulation", 0),
    )


def example1_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "example1",
        "M": 8,
        "periods": {"N_x": 40, "N_h": 10, "N_v": 5},
        "model": {
            "kind": "multivariate_t",
            "dof": 5,
            "texture": "complex",
            "scatter": {"scale": 1.0, "decay": 1.0, "turns": 1.0},
            "envelope": {"kind": "cosine", "offset": 1.0, "amplitude": 0.5},
        },
        "ground_truth": {
            "kind": "ramp",
            "ramp_divisor": 5,
            "taper": {"kind": "exponential", "rate": 0.5},
        },
        "noise": {"kind": "harmonic_decay", "level": 1e-6, "depth": 0.1},
        "default_mus": [0.01, 0.04],
        "seeds": {"simulation": 1},
    }


def example2_config() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "example2",
        "M": 8,
        "periods": {"N_x": 40, "N_h": 10, "N_v": 5},
        "model": {
            "kind": "gaussian_mixture",
            "weights": [0.1, 0.2, 0.7],
            "components": [
                {"scale": 6.0, "decay": float(m), "turns": 1.0} for m in (1, 2, 3)
            ],
            "envelope": {"kind": "ramp", "offset": 1.0, "slope": 1.0},
        },
        "ground_truth": {
            "kind": "ramp",
            "ramp_divisor": 100,
            "taper": {"kind": "linear", "slope": 0.1},
        },
        "noise": {"kind": "sinusoid", "level": 1e-6, "depth": 0.1},
        "default_mus": [0.005, 0.01],
        "seeds": {"simulation": 2},
    }


def scalar_gaussian_config(variance: float = 1.0, noise: float = 0.01) -> dict:
    """Single-tap complex-Gaussian toy with a constant system."""
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "scalar_gaussian",
        "M": 1,
        "periods": {"N_x": 1, "N_h": 1, "N_v": 1},
        "model": {"kind": "gaussian", "covariance": {"scale": variance, "decay": 0.0}},
        "ground_truth": {"kind": "constant", "taps": [1.0]},
        "noise": {"kind": "constant", "value": noise},
        "default_mus": [0.1, 0.5],
    }


def example1() -> Scenario:
    """Modulated complex multivariate t input with a periodically ramped system."""
    return from_config(example1_config())


def example2() -> Scenario:
    """Ramp-modulated three-component Gaussian-mixture input."""
    return from_config(example2_config())


# ------------------------------------------------------------ nbplc-lite

NBPLC_DEFAULTS = {
    "n_subcarriers": 36,
    "cyclic_prefix": 12,
    "snr_db": 12.0,
    "channel": {
        "kind": "synthetic",
        "gains": [[1.0, 0.0], [0.45, 0.3], [-0.2, 0.25], [0.1, -0.12]],
        "depth": 0.05,
    },
    "noise_profile": {"kind": "sinusoid", "depth": 0.6},
    "estimation": {"second_order_draws": 1_000_000, "fourth_order_draws": 100_000, "seed": 48},
}


def nbplc_config(**overrides) -> dict:
    """Default power-line configuration; keyword overrides replace top-level ``nbplc`` keys."""
    body = copy.deepcopy(NBPLC_DEFAULTS)
    body.update(copy.deepcopy(overrides))
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "nbplc_lite",
        "M": 8,
        "nbplc": body,
        "default_mus": [0.01, 0.04],
        "seeds": {"simulation": 3},
    }


@dataclass(frozen=True)
class PowerLineLink:
    """OFDM source, LPTV channel and cyclostationary Gaussian noise.

    Attributes
    ----------
    n_subcarriers, cyclic_prefix : int
    taps : ndarray, shape (period, L)
        ``taps[n, l]`` multiplies ``d[n - l]``.
    noise_var : ndarray, shape (period,)
    M : int
        Receive window length.
    """

    n_subcarriers: int
    cyclic_prefix: int
    taps: np.ndarray
    noise_var: np.ndarray
    M: int

    @property
    def block(self) -> int:
        return self.n_subcarriers + self.cyclic_prefix

    @property
    def memory(self) -> int:
        return self.taps.shape[1] - 1 + self.M - 1

    def ofdm(self, rng: np.random.Generator, n_blocks: int) -> np.ndarray:
        """Unit-power QPSK OFDM stream of ``n_blocks`` blocks."""
        bits = rng.integers(0, 2, size=(n_blocks, self.n_subcarriers, 2))
        sym = ((2 * bits[..., 0] - 1) + 1j * (2 * bits[..., 1] - 1)) / np.sqrt(2)
        body = np.fft.ifft(sym, axis=1, norm="ortho")
        cp = body[:, self.n_subcarriers - self.cyclic_prefix :]
        return np.concatenate([cp, body], axis=1).reshape(-1)

    def stream(self, rng: np.random.Generator, n_blocks: int):
        """Aligned ``(x, d)`` over ``n_blocks`` blocks, phase 0 first.

        One extra leading block is drawn and discarded to fill the channel
        and window memory.
        """
        n = self.block
        if self.memory >= n:
            raise ConfigError("channel plus window memory must be shorter than one block")
        d = self.ofdm(rng, n_blocks + 1)
        total = d.size
        phases = np.arange(total) % n
        L = self.taps.shape[1]
        r = np.zeros(total, complex)
        for l in range(L):
            r[l:] += self.taps[phases[l:], l] * d[: total - l]
        var = self.noise_var[phases]
        r += np.sqrt(var / 2.0) * (rng.standard_normal(total) + 1j * rng.standard_normal(total))
        win = np.lib.stride_tricks.sliding_window_view(r, self.M)[:, ::-1]
        # win[i] = (r[i+M-1], ..., r[i]) belongs to time i + M - 1.
        x = win[n - (self.M - 1) :]
        return np.ascontiguousarray(x), d[n:]


def synthetic_taps(gains, depth: float, period: int) -> np.ndarray:
    """``gains[l] * (1 + depth cos(2 pi n / period + 2 pi l / L))``."""
    gains = np.array([_complex(g) for g in gains])
    L = gains.size
    n = np.arange(period)[:, None]
    l = np.arange(L)[None, :]
    return gains * (1.0 + depth * np.cos(2 * np.pi * n / period + 2 * np.pi * l / L))


def build_link(M: int, spec: dict) -> PowerLineLink:
    body = {**NBPLC_DEFAULTS, **spec}
    nsc, cp = body["n_subcarriers"], body["cyclic_prefix"]
    if cp > nsc:
        raise ConfigError("cyclic_prefix cannot exceed n_subcarriers")
    period = nsc + cp
    ch = body["channel"]
    if ch["kind"] == "synthetic":
        defaults = NBPLC_DEFAULTS["channel"]
        taps = synthetic_taps(ch.get("gains", defaults["gains"]), ch.get("depth", defaults["depth"]), period)
    else:
        rows = [[_complex(t) for t in row] for row in ch["taps"]]
        if len({len(r) for r in rows}) != 1:
            raise ConfigError("nbplc.channel.taps rows must share one length")
        taps = np.array(rows)
        if period % taps.shape[0]:
            raise ConfigError(f"channel period {taps.shape[0]} does not divide block length {period}")
        taps = np.tile(taps, (period // taps.shape[0], 1))
    prof = body["noise_profile"]
    n = np.arange(period)
    if prof["kind"] == "none":
        shape = np.zeros(period)
    elif prof["kind"] == "constant":
        shape = np.ones(period)
    else:
        shape = (1.0 + prof.get("depth", 0.6) * np.sin(2 * np.pi * n / period)) ** 2
    snr_db = body.get("snr_db")
    if prof["kind"] == "none" or snr_db is None:
        noise_var = shape
    else:
        # Channel energy over noise energy, both summed over one period.
        ratio = np.sum(np.abs(taps) ** 2) / np.sum(shape)
        noise_var = shape * ratio / 10 ** (snr_db / 10.0)
    return PowerLineLink(nsc, cp, taps, noise_var, M)


def estimate_link_moments(link: PowerLineLink, second_draws: int, fourth_draws: int, seed: int, chunk: int = 4000):
    """Per-phase moments of ``(x, d)`` from independent streams.

    Both processes are zero-mean by construction, so no centring is applied.
    """
    period, M = link.block, link.M
    rng = np.random.Generator(np.random.Philox(seed))
    second = MomentAccumulator(period, M, fourth=False)
    fourth = MomentAccumulator(period, M, fourth=True)
    done = 0
    while done < second_draws:
        k = min(chunk, second_draws - done)
        x, d = link.stream(rng, k)
        xb, db = x.reshape(k, period, M), d.reshape(k, period)
        second.add(xb, db)
        if done < fourth_draws:
            j = min(k, fourth_draws - done)
            fourth.add(xb[:j])
        done += k
    return second.finalize(), fourth.finalize()


@functools.lru_cache(maxsize=8)
def _nbplc_cached(cfg_json: str) -> Scenario:
    cfg = json.loads(cfg_json)
    M = cfg["M"]
    body = {**NBPLC_DEFAULTS, **cfg["nbplc"]}
    link = build_link(M, body)
    est_cfg = {**NBPLC_DEFAULTS["estimation"], **body.get("estimation", {})}
    if est_cfg["fourth_order_draws"] > est_cfg["second_order_draws"]:
        raise ConfigError("fourth_order_draws cannot exceed second_order_draws")
    sec, four = estimate_link_moments(
        link, est_cfg["second_order_draws"], est_cfg["fourth_order_draws"], est_cfg["seed"]
    )
    period = link.block
    h_M, sigma_v2 = [], []
    for k in range(period):
        c, p = sec["cov"][k], sec["xd"][k]
        try:
            h = solve(c, p)
        except SolverError as exc:
            raise NumericalError(f"estimated input covariance is singular at phase {k}: {exc}") from exc
        h_M.append(h)
        sigma_v2.append(max(float(sec["dd"][k] - np.real(p.conj() @ h)), 0.0))

    def phase_sampler(n, rng, size=None):
        k = 1 if size is None else size
        x, _ = link.stream(rng, k)
        out = x.reshape(k, period, M)[:, n % period]
        return out[0] if size is None else out

    model = EmpiricalModel(
        cov=PeriodicSequence(list(sec["cov"])),
        b=PeriodicSequence(list(four["b"])),
        cov_stderr=PeriodicSequence(list(sec["cov_stderr"])),
        b_stderr=PeriodicSequence(list(four["b_stderr"])),
        n_draws=est_cfg["second_order_draws"],
        sampler=phase_sampler,
    )
    gt = GroundTruth.from_model(PeriodicSequence(h_M), PeriodicSequence(sigma_v2), model)

    def generate(rng, horizon):
        n_blocks = -(-horizon // period)
        x, d = link.stream(rng, n_blocks)
        return x[:horizon], d[:horizon]

    return Scenario(
        name=cfg["name"],
        input=model,
        gt=gt,
        period=period,
        M=M,
        default_mus=tuple(cfg.get("default_mus", ())),
        notes={
            "independent_input": False,
            "independent_noise": False,
            "bounded_fourth_moments": True,
            "link": link,
        },
        generator=generate,
        h0=_initial_filter(cfg, M),
        config=cfg,
        default_seed=cfg.get("seeds", {}).get("simulation", 0),
    )


def _nbplc_from_config(cfg: dict) -> Scenario:
    return _nbplc_cached(json.dumps(cfg, sort_keys=True))


def nbplc_lite(cfg: dict | None = None) -> Scenario:
    """OFDM power-line recovery scenario with estimated moments.

    ``cfg`` is either a full scenario config or a dict of ``nbplc`` overrides.
    """
    if cfg is None:
        cfg = nbplc_config()
    elif "nbplc" not in cfg:
        cfg = nbplc_config(**cfg)
    return from_config(cfg)


BUILTIN = {
    "example1": example1,
    "example2": example2,
    "nbplc_lite": nbplc_lite,
    "nbplc-lite": nbplc_lite,
    "scalar_gaussian": lambda: from_config(scalar_gaussian_config()),
}


def load_scenario(ref: str) -> Scenario:
    """Built-in scenario by name, or a JSON config path."""
    if ref in BUILTIN:
        return BUILTIN[ref]()
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"unknown scenario {ref!r}; built-ins are {sorted(BUILTIN)}")
    return from_config(path)
