"""Experiment configuration: an INI file with flat sections.

Grammar (parsed with :mod:`configparser`, ``#`` comments, ``key = value``)::

    [experiment]   seed, name
    [problem]      type = linear_gaussian | mixed_noise, plus that type's keys
    [training]     lam, batch_size, steps, lr
    [evaluation]   metric, n_y, n_samples, resolution, cap, baseline_*
    [chain]        n_layers, interp_steps
    [layer.1] ...  [layer.<n_layers>]   type = deterministic | langevin | mala | rw

Integer lists (hidden widths) are comma separated. Unknown sections or keys
are rejected; every default is written out by :meth:`ExperimentConfig.to_ini`.
A stochastic layer's target is ``p_Z^(1 - t/T) p_X^(t/T)`` with ``t`` its
``t`` key and ``T`` the chain's ``interp_steps``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

REQUIRED = object()


def _int_list(text):
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _fmt(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
EXPERIMENT = {"seed": (int, 0), "name": (str, "run")}

PROBLEMS = {
    "linear_gaussian": {
        "dim": (int, 8), "n_components": (int, 3), "component_var": (float, 0.01),
        "noise_var": (float, 0.05), "scale": (float, 0.1),
    },
    "mixed_noise": {
        "dim": (int, 3), "obs_dim": (int, 23), "a": (float, 0.2), "b": (float, 0.01),
        "alpha": (float, 1000.0), "map_hidden": (_int_list, (32,)),
        "map_offset": (float, 1.0), "map_gain": (float, 0.3),
        "surrogate_hidden": (_int_list, (256, 256, 256)), "surrogate_samples": (int, 10000),
        "surrogate_steps": (int, 2000),
    },
}

TRAINING = {"lam": (float, 0.0), "batch_size": (int, 512), "steps": (int, 2000),
            "lr": (float, 1e-3)}

EVALUATION = {
    "metric": (str, REQUIRED), "n_y": (int, 20), "n_samples": (int, 1000),
    "resolution": (int, 50), "cap": (int, 2000), "baseline_steps": (int, 1000),
    "baseline_sigma": (float, 0.4), "baseline_pool": (int, 20),
}

CHAIN = {"n_layers": (int, REQUIRED), "interp_steps": (int, 1)}

LAYERS = {
    "deterministic": {"n_blocks": (int, 4), "hidden": (_int_list, (128, 128)),
                      "clamp": (float, 2.5)},
    "langevin": {"a1": (float, REQUIRED), "a2": (float, REQUIRED), "n_steps": (int, 1),
                 "t": (int, REQUIRED)},
    "mala": {"a1": (float, REQUIRED), "a2": (float, REQUIRED), "n_steps": (int, 1),
             "t": (int, REQUIRED)},
    "rw": {"sigma": (float, 0.4), "n_steps": (int, 1), "t": (int, REQUIRED)},
}


class ConfigError(ValueError):
    pass


def _parse_section(name, raw: dict, schema: dict, skip=()):
    out = {}
    unknown = set(raw) - set(schema) - set(skip)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(sorted(unknown))}")
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                out[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key} = {raw[key]!r}: {exc}") from None
            if isinstance(out[key], float) and not math.isfinite(out[key]):
                raise ConfigError(f"[{name}] {key} must be finite")
        elif default is REQUIRED:
            raise ConfigError(f"[{name}]: missing required key {key!r}")
        else:
            out[key] = default
    return out


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


@dataclass
class ExperimentConfig:
    experiment: dict
    problem: dict
    training: dict
    evaluation: dict
    chain: dict
    layers: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.experiment["seed"]

    @classmethod
    def from_string(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        sections = {s: dict(cp[s]) for s in cp.sections()}
        fixed = {"experiment", "problem", "training", "evaluation", "chain"}
        for s in sections:
            if s not in fixed and not s.startswith("layer."):
                raise ConfigError(f"unknown section [{s}]")
        for s in ("problem", "chain"):
            _require(s in sections, f"missing section [{s}]")
        experiment = _parse_section("experiment", sections.get("experiment", {}), EXPERIMENT)
        raw_problem = sections["problem"]
        ptype = raw_problem.get("type")
        _require(ptype in PROBLEMS, f"[problem] type must be one of {sorted(PROBLEMS)}")
        problem = {"type": ptype, **_parse_section("problem", raw_problem, PROBLEMS[ptype],
                                                   skip=("type",))}
        training = _parse_section("training", sections.get("training", {}), TRAINING)
        raw_eval = dict(sections.get("evaluation", {}))
        raw_eval.setdefault("metric", "w1" if ptype == "linear_gaussian" else "binned_kl")
        evaluation = _parse_section("evaluation", raw_eval, EVALUATION)
        chain = _parse_section("chain", sections["chain"], CHAIN)
        n = chain["n_layers"]
        _require(n >= 1, "[chain] n_layers must be >= 1")
        expected = {f"layer.{k}" for k in range(1, n + 1)}
        present = {s for s in sections if s.startswith("layer.")}
        _require(present == expected,
                 f"layer sections must be exactly layer.1 .. layer.{n}; "
                 f"extra {sorted(present - expected)}, missing {sorted(expected - present)}")
        layers = []
        for k in range(1, n + 1):
            raw = sections[f"layer.{k}"]
            ltype = raw.get("type")
            _require(ltype in LAYERS, f"[layer.{k}] type must be one of {sorted(LAYERS)}")
            layers.append({"type": ltype,
                           **_parse_section(f"layer.{k}", raw, LAYERS[ltype], skip=("type",))})
        cfg = cls(experiment, problem, training, evaluation, chain, layers)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_string(path.read_text())

    def validate(self) -> None:
        p, tr, ev, ch = self.problem, self.training, self.evaluation, self.chain
        _require(p["dim"] >= 1, "[problem] dim must be >= 1")
        if p["type"] == "linear_gaussian":
            _require(p["n_components"] >= 1, "[problem] n_components must be >= 1")
            _require(p["component_var"] > 0 and p["noise_var"] > 0,
                     "[problem] variances must be positive")
        else:
            _require(p["obs_dim"] >= 1, "[problem] obs_dim must be >= 1")
            _require(p["a"] >= 0 and p["b"] > 0 and p["alpha"] > 0,
                     "[problem] need a >= 0, b > 0, alpha > 0")
            _require(p["surrogate_samples"] >= 1 and p["surrogate_steps"] >= 0,
                     "[problem] invalid surrogate sizes")
        _require(0.0 <= tr["lam"] <= 1.0, "[training] lam must lie in [0, 1]")
        _require(tr["batch_size"] >= 1 and tr["steps"] >= 0 and tr["lr"] > 0,
                 "[training] invalid batch_size, steps or lr")
        _require(ev["metric"] in ("w1", "binned_kl"), "[evaluation] metric must be w1 or binned_kl")
        _require(ev["n_y"] >= 1 and ev["n_samples"] >= 1 and ev["resolution"] >= 1,
                 "[evaluation] n_y, n_samples and resolution must be >= 1")
        _require(ev["baseline_steps"] >= 0 and ev["baseline_sigma"] > 0 and ev["baseline_pool"] >= 1,
                 "[evaluation] invalid baseline settings")
        T = ch["interp_steps"]
        _require(T >= 1, "[chain] interp_steps must be >= 1")
        for k, layer in enumerate(self.layers, start=1):
            if layer["type"] == "deterministic":
                _require(layer["n_blocks"] >= 1 and min(layer["hidden"]) >= 1
                         and layer["clamp"] > 0, f"[layer.{k}] invalid flow settings")
                continue
            _require(0 <= layer["t"] <= T,
                     f"[layer.{k}] interpolation index t = {layer['t']} outside 0..{T}")
            _require(layer["n_steps"] >= 0, f"[layer.{k}] n_steps must be >= 0")
            if layer["type"] == "rw":
                _require(layer["sigma"] > 0, f"[layer.{k}] sigma must be positive")
            else:
                _require(layer["a1"] >= 0 and layer["a2"] > 0, f"[layer.{k}] need a1 >= 0, a2 > 0")
        if tr["steps"] > 0:
            _require(any(l["type"] == "deterministic" for l in self.layers),
                     "training requested but the chain has no deterministic layer")

    def to_ini(self) -> str:
        lines = []

        def section(name, values):
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
            lines.append("")

        section("experiment", self.experiment)
        section("problem", self.problem)
        section("training", self.training)
        section("evaluation", self.evaluation)
        section("chain", self.chain)
        for k, layer in enumerate(self.layers, start=1):
            section(f"layer.{k}", layer)
        return "\n".join(lines)

    def with_seed(self, seed) -> "ExperimentConfig":
        return ExperimentConfig({**self.experiment, "seed": int(seed)}, dict(self.problem),
                                dict(self.training), dict(self.evaluation), dict(self.chain),
                                [dict(l) for l in self.layers])
