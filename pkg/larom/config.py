"""Run configuration: dataclass sections, the ``[section] key = value`` file format
and environment overrides.

Environment:
- LAROM_OUT: output directory (wins over the file)
- LAROM_JOBS: default worker count for parallel sweeps
"""

import configparser
import dataclasses
import logging
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError
from .euler1d import VISCOSITY_CONTINUATION, NozzleProblem, PtcConfig
from .mor import GnmConfig
from .registration import RegistrationConfig
from .training import ParameterBox, TrainingConfig

logger = logging.getLogger(__name__)

OUTPUT_ENV = "LAROM_OUT"
JOBS_ENV = "LAROM_JOBS"
DEFAULT_OUTPUT_DIR = Path("larom-out")


@dataclass
class ProblemSection:
    length: float = 10.0
    a0_min: float = 0.5
    a0_max: float = 1.5
    p0_min: float = 0.7
    p0_max: float = 0.85
    p_tot: float = 0.95
    t_tot: float = 0.95
    gamma: float = 1.4
    isentropic_totals: bool = True


@dataclass
class DiscretizationSection:
    n_elements: int = 60
    degree: int = 2
    c_nu: float = 0.1
    gamma_ip: Optional[float] = None  # 10 p^2 when unset
    quadrature_points: Optional[int] = None  # 2p + 1 when unset
    cfl0: float = 1.0
    warm_cfl0: float = 100.0
    cfl_max: float = 1e8
    cfl_min: float = 1e-4
    max_update: float = 0.2  # relative density/pressure change per PTC update
    viscosity_continuation: bool = True
    residual_tol: float = 1e-9
    max_iters: int = 300


@dataclass
class RegistrationSection:
    degree: int = 10
    xi: float = 1e-3
    eps: float = 0.1
    c_exp: Optional[float] = None  # 0.025 eps when unset
    kappa_msh: float = 10.0
    delta: float = 0.5
    tol_pod: float = 1e-3
    tol_greedy: float = 1e-2
    max_templates: int = 5


@dataclass
class RomSection:
    tol: float = 1e-3
    test_factor: int = 2
    test_space_energy: bool = False
    tol_eq: float = 1e-10
    eq_augment: int = 0
    n0: int = 9
    n_max: int = 30
    br2_eta: float = 2.0
    gnm_tol: float = 1e-10
    gnm_max_iters: int = 50


@dataclass
class LoopSection:
    iterations: int = 3
    mesh_growth: float = 1.5
    accelerated: bool = False
    rom_bootstrap: bool = False  # ROM-based snapshots at k=1 only; accelerated implies it
    train_a0: int = 15
    train_p0: int = 15
    greedy_a0: int = 10
    greedy_p0: int = 10
    n_test: int = 20
    seed: int = 0
    init_dataset_points: int = 1000
    de_boor_sweeps: int = 3
    jobs: int = 1


@dataclass
class RunSection:
    output_dir: Path = DEFAULT_OUTPUT_DIR


SECTIONS = {
    "problem": ProblemSection,
    "discretization": DiscretizationSection,
    "registration": RegistrationSection,
    "rom": RomSection,
    "loop": LoopSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    discretization: DiscretizationSection = field(default_factory=DiscretizationSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    rom: RomSection = field(default_factory=RomSection)
    loop: LoopSection = field(default_factory=LoopSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def output_dir(self) -> Path:
        return Path(self.run.output_dir)

    @property
    def box(self) -> ParameterBox:
        return ParameterBox(
            (self.problem.a0_min, self.problem.a0_max),
            (self.problem.p0_min, self.problem.p0_max),
        )

    def nozzle_problem(self, mu: Tuple[float, float] = (1.0, 0.775)) -> NozzleProblem:
        p, d = self.problem, self.discretization
        return NozzleProblem(
            L=p.length,
            A0=float(mu[0]),
            p0=float(mu[1]),
            p_tot=p.p_tot,
            T_tot=p.t_tot,
            gamma=p.gamma,
            c_nu=d.c_nu,
            gamma_ip=d.gamma_ip,
            isentropic_totals=p.isentropic_totals,
        )

    def ptc_config(self, warm: bool = False) -> PtcConfig:
        d = self.discretization
        return PtcConfig(
            cfl0=d.warm_cfl0 if warm else d.cfl0,
            residual_tol=d.residual_tol,
            max_iters=d.max_iters,
            cfl_max=d.cfl_max,
            cfl_min=d.cfl_min,
            max_update=d.max_update,
            viscosity_continuation=VISCOSITY_CONTINUATION if d.viscosity_continuation else (),
        )

    def registration_config(self) -> RegistrationConfig:
        r = self.registration
        return RegistrationConfig(
            xi=r.xi,
            eps=r.eps,
            c_exp=r.c_exp,
            kappa_msh=r.kappa_msh,
            delta=r.delta,
            tol_pod=r.tol_pod,
            tol_greedy=r.tol_greedy,
            max_templates=r.max_templates,
        )

    def training_config(self) -> TrainingConfig:
        d, r, rom, loop = self.discretization, self.registration, self.rom, self.loop
        return TrainingConfig(
            problem=self.nozzle_problem(),
            box=self.box,
            n_elements=d.n_elements,
            degree=d.degree,
            quadrature_points=d.quadrature_points,
            ptc=self.ptc_config(),
            warm_cfl0=d.warm_cfl0,
            map_degree=r.degree,
            registration=self.registration_config(),
            gnm=GnmConfig(tol=rom.gnm_tol, max_iters=rom.gnm_max_iters),
            train_shape=(loop.train_a0, loop.train_p0),
            greedy_shape=(loop.greedy_a0, loop.greedy_p0),
            tol=rom.tol,
            n0=rom.n0,
            n_max=rom.n_max,
            test_factor=rom.test_factor,
            test_space_energy=rom.test_space_energy,
            tol_eq=rom.tol_eq,
            eq_augment=rom.eq_augment,
            br2_eta=rom.br2_eta,
            iterations=loop.iterations,
            mesh_growth=loop.mesh_growth,
            accelerated=loop.accelerated,
            rom_bootstrap=loop.rom_bootstrap,
            n_test=loop.n_test,
            seed=loop.seed,
            init_dataset_points=loop.init_dataset_points,
            de_boor_sweeps=loop.de_boor_sweeps,
            jobs=loop.jobs,
        )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, args[0])
    text = raw.strip()
    if annotation is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is Path:
        return Path(text)
    return text


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """Map (section, key) to the 1-based line where the key is assigned."""
    lines: Dict[Tuple[str, str], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        header = re.match(r"^\[([^\]]+)\]", stripped)
        if header:
            section = header.group(1).strip().lower()
            continue
        assignment = re.match(r"^([A-Za-z_][\w.]*)\s*[=:]", stripped)
        if assignment:
            lines[(section, assignment.group(1).lower())] = number
    return lines


def parse_config(text: str) -> RunConfig:
    """Build a RunConfig from the text of a config file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from exc

    lines = _key_lines(text)
    config = RunConfig()
    for section_name in parser.sections():
        name = section_name.strip().lower()
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{section_name}]")
        target = getattr(config, name)
        hints = typing.get_type_hints(type(target))
        known = {f.name for f in dataclasses.fields(target)}
        for key, raw in parser.items(section_name):
            line = lines.get((name, key))
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]", line)
            try:
                value = _coerce(raw, hints[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}.{key}: {exc}", line) from exc
            setattr(target, key, value)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    p, d, loop = config.problem, config.discretization, config.loop
    if p.length <= 0:
        raise ConfigError("problem.length must be positive")
    if not (p.a0_min <= p.a0_max and p.p0_min <= p.p0_max):
        raise ConfigError("parameter box bounds are inverted")
    if d.n_elements < 1 or d.degree < 1:
        raise ConfigError("discretization.n_elements and degree must be >= 1")
    if config.rom.tol <= 0:
        raise ConfigError("rom.tol must be positive")
    if loop.iterations < 1:
        raise ConfigError("loop.iterations must be >= 1")
    if loop.jobs < 1:
        raise ConfigError("loop.jobs must be >= 1")


def apply_env_overrides(config: RunConfig) -> RunConfig:
    out = os.getenv(OUTPUT_ENV)
    if out:
        logger.debug(f"{OUTPUT_ENV} overrides output directory: {out}")
        config.run.output_dir = Path(out)
    jobs = os.getenv(JOBS_ENV)
    if jobs:
        try:
            config.loop.jobs = max(1, int(jobs))
        except ValueError as exc:
            raise ConfigError(f"{JOBS_ENV} must be an integer, got {jobs!r}") from exc
    return config


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Load a config file (defaults when ``path`` is None) and apply env overrides."""
    if path is None:
        config = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        config = parse_config(text)
    return apply_env_overrides(config)
