"""Experiment configuration files (TOML).

A config has these tables; only ``[group]`` and ``[data]`` are required.

    seed = 0                       # seeds randomized probes

    [group]                        # arguments of make_group
    kind = "euclidean"
    n = 1
    points = 2048
    extent = 240.0
    scheme = "spectral"            # optional propagator override

    [nonlinearity]
    p = [2.0, 4.0]                 # default: grid around the Fujita exponent
    K1 = 1.0
    K2 = 1.0

    [data]
    family = "kernel"              # kernel (eps*h_gamma) | constant (eps) | file
    eps = [0.5]
    gamma = [1.0]
    file = "u0.bin"                # family = "file" only

    [controls]                     # see Controls for every key and default

    [kernel]                       # kernel-check
    times = [1.0, 2.0, 4.0]
    radii = [0.5, 1.0, 2.0]
    slack = 2.0

    [abstract]                     # certify: closed-form profile certificate
    profile = "polynomial"         # or "exponential"
    a = 4.0
    b = 4.0
    d = 3
    C = 1.0

    [output]
    dir = "out"
    format = "csv"
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, LabError
from .groups import GroupModel, group_from_spec

log = logging.getLogger(__name__)

FAMILIES = ("kernel", "constant", "file")
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class Controls:
    T_max: float = 100.0
    tol: float = 1e-8
    k_max: int = 50
    steps: int = 200
    S_cut: float = 100.0
    M_max_factor: float = 1e8
    dt0: float = 1e-2
    dt_min: float = 1e-12
    safety: float = 0.1
    monitor_slack: float = 0.01
    ap_probes: int = 25
    refine: int = 0  # extra integrations with halved h and dt0
    jensen_probes: int = 0  # random Jensen checks recorded in sweep metadata
    dump_fields: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    group: dict
    scheme: str | None
    p: tuple[float, ...]
    K1: float | None
    K2: float | None
    family: str
    eps: tuple[float, ...]
    gamma: tuple[float, ...]
    file: str | None
    controls: Controls
    kernel: dict
    abstract: dict | None
    out_dir: str
    format: str
    seed: int
    warnings: tuple[str, ...] = field(default=())

    def model(self) -> GroupModel:
        return group_from_spec(self.group)

    def cells(self) -> list[tuple[float, float, float]]:
        """(p, eps, gamma) cells in sorted order."""
        if self.family == "file":
            return [(p, 1.0, 0.0) for p in sorted(self.p)]
        gammas = self.gamma if self.family == "kernel" else (0.0,)
        return sorted((p, e, gm) for p in self.p for e in self.eps for gm in gammas)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in ("p", "eps", "gamma", "warnings"):
            out[k] = list(out[k])
        return out


_TOP = {"seed", "group", "nonlinearity", "data", "controls", "kernel", "abstract", "output"}
_SECTIONS = {
    "group": {"kind", "n", "points", "extent", "spacing", "boundary", "gauge", "scheme"},
    "nonlinearity": {"p", "K1", "K2"},
    "data": {"family", "eps", "gamma", "file"},
    "controls": {f.name for f in dataclasses.fields(Controls)},
    "kernel": {"times", "radii", "slack", "shell"},
    "abstract": {"profile", "a", "b", "d", "C"},
    "output": {"dir", "format"},
}


def default_p_grid(p_F: float) -> tuple[float, ...]:
    """{p_F/1.5, 0.9 p_F, p_F, 1.1 p_F, 1.5 p_F}, dropping entries <= 1."""
    if not math.isfinite(p_F):
        return (1.5, 2.0, 3.0)
    grid = (p_F / 1.5, 0.9 * p_F, p_F, 1.1 * p_F, 1.5 * p_F)
    return tuple(p for p in grid if p > 1)


def _as_list(value, name: str) -> list:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return [float(value)]
    if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        return [float(v) for v in value]
    raise ConfigError(f"{name}: expected a number or an array of numbers")


def _check_keys(raw: dict, section: str | None) -> None:
    allowed = _TOP if section is None else _SECTIONS[section]
    for key in raw:
        if key not in allowed:
            where = key if section is None else f"{section}.{key}"
            raise ConfigError(f"unknown field {where!r}")


def parse_config(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    """Validate an already-parsed config mapping."""
    _check_keys(raw, None)
    for sec in _SECTIONS:
        if sec in raw:
            if not isinstance(raw[sec], dict):
                raise ConfigError(f"[{sec}] must be a table")
            _check_keys(raw[sec], sec)
    if "group" not in raw:
        raise ConfigError("missing [group] table")
    if "data" not in raw:
        raise ConfigError("missing [data] table: the data family is empty")

    grp = dict(raw["group"])
    scheme = grp.pop("scheme", None)
    try:
        g = group_from_spec(grp)
    except (LabError, KeyError, TypeError) as exc:
        raise ConfigError(f"group: {exc}") from exc
    warnings: list[str] = []

    nlraw = raw.get("nonlinearity", {})
    p_grid = _as_list(nlraw["p"], "nonlinearity.p") if "p" in nlraw else list(default_p_grid(g.fujita_exponent))
    if not p_grid:
        raise ConfigError("nonlinearity.p: grid is empty")
    if any(not (p > 1 and math.isfinite(p)) for p in p_grid):
        raise ConfigError("nonlinearity.p: every exponent must satisfy 1 < p < inf")
    K1 = nlraw.get("K1", 1.0)
    K2 = nlraw.get("K2", 1.0)
    for name, v in (("K1", K1), ("K2", K2)):
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            raise ConfigError(f"nonlinearity.{name}: must be positive")
    if K1 is not None and K2 is not None and K2 > K1:
        raise ConfigError("nonlinearity: K2 must not exceed K1")
    pF = g.fujita_exponent
    if math.isfinite(pF) and not (any(p <= pF for p in p_grid) and any(p > pF for p in p_grid)):
        msg = f"p grid {sorted(p_grid)} does not straddle the Fujita exponent {pF:.6g}"
        warnings.append(msg)
        log.warning(msg)

    data = raw["data"]
    family = data.get("family", "kernel")
    if family not in FAMILIES:
        raise ConfigError(f"data.family: expected one of {FAMILIES}, got {family!r}")
    file = None
    eps, gamma = [1.0], [0.0]
    if family == "file":
        if "file" not in data:
            raise ConfigError("data.file: required for family 'file'")
        path = Path(data["file"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"data.file: {path} does not exist")
        file = str(path)
    else:
        if "eps" not in data:
            raise ConfigError("data.eps: the data family is empty")
        eps = _as_list(data["eps"], "data.eps")
        if not eps:
            raise ConfigError("data.eps: grid is empty")
        if any(e < 0 or not math.isfinite(e) for e in eps):
            raise ConfigError("data.eps: scales must be finite and >= 0")
        if family == "kernel":
            gamma = _as_list(data.get("gamma", [1.0]), "data.gamma")
            if not gamma:
                raise ConfigError("data.gamma: grid is empty")
            if any(gm <= 0 for gm in gamma):
                raise ConfigError("data.gamma: kernel times must be positive")

    ctl_raw = raw.get("controls", {})
    defaults = Controls()
    ctl_kwargs = {}
    for f in dataclasses.fields(Controls):
        if f.name in ctl_raw:
            v = ctl_raw[f.name]
            want = type(getattr(defaults, f.name))
            if want is bool:
                if not isinstance(v, bool):
                    raise ConfigError(f"controls.{f.name}: expected true/false")
            elif want is int:
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ConfigError(f"controls.{f.name}: expected a nonnegative integer")
            else:
                if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                    raise ConfigError(f"controls.{f.name}: tolerances and times must be positive")
                v = float(v)
            ctl_kwargs[f.name] = v
    controls = Controls(**ctl_kwargs)
    if controls.k_max < 1 or controls.steps < 1 or controls.ap_probes < 1:
        raise ConfigError("controls: k_max, steps and ap_probes must be at least 1")

    kernel = dict(raw.get("kernel", {}))
    for key in ("times", "radii"):
        if key in kernel:
            kernel[key] = _as_list(kernel[key], f"kernel.{key}")
            if not kernel[key] or any(v <= 0 for v in kernel[key]):
                raise ConfigError(f"kernel.{key}: must be a nonempty list of positive numbers")
    if "slack" in kernel and not kernel["slack"] >= 1:
        raise ConfigError("kernel.slack: must be >= 1")

    abstract = raw.get("abstract")
    if abstract is not None:
        abstract = dict(abstract)
        kind = abstract.get("profile", "polynomial")
        if kind not in ("polynomial", "exponential"):
            raise ConfigError("abstract.profile: expected 'polynomial' or 'exponential'")
        need = ("a", "b") if kind == "polynomial" else ("d",)
        for key in need:
            if key not in abstract or not abstract[key] >= 0:
                raise ConfigError(f"abstract.{key}: required nonnegative number for a {kind} profile")
        if "C" in abstract and not abstract["C"] > 0:
            raise ConfigError("abstract.C: must be positive")
        abstract["profile"] = kind

    out = raw.get("output", {})
    fmt = out.get("format", "csv")
    if fmt not in FORMATS:
        raise ConfigError(f"output.format: expected one of {FORMATS}, got {fmt!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError("seed: expected an unsigned 64-bit integer")

    return ExperimentConfig(
        group=g.spec(),
        scheme=scheme,
        p=tuple(p_grid),
        K1=None if K1 is None else float(K1),
        K2=None if K2 is None else float(K2),
        family=family,
        eps=tuple(eps),
        gamma=tuple(gamma),
        file=file,
        controls=controls,
        kernel=kernel,
        abstract=abstract,
        out_dir=str(out.get("dir", "out")),
        format=fmt,
        seed=int(seed),
        warnings=tuple(warnings),
    )


def load_config(path, out_dir=None, echo: bool = True) -> ExperimentConfig:
    """Read, validate and (optionally) echo the resolved config to the output dir."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    cfg = parse_config(raw, base=path.parent)
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
    if echo:
        echo_config(cfg)
    return cfg


def echo_config(cfg: ExperimentConfig) -> Path:
    """Write the resolved config (defaults filled) to the output directory."""
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
