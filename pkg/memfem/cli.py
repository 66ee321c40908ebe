# Distributed under the terms of the MIT License.

"""
Command line interface for running memfem experiments from a JSON file.

Example configuration::

    {
        "command": "convergence",
        "kernel": {"variant": "exponential", "c": 1.0, "gamma": 2.0},
        "problem": {"family": "sin_cos_1d", "T": 1.0},
        "space": {"kind": "fem", "degree": 1, "levels": 4, "base": 8},
        "solver": {"scheme": "newmark"},
        "output": {"prefix": "p1_"}
    }
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from monty.json import MSONable
from monty.serialization import dumpfn
from tabulate import tabulate

from memfem.convergence_lab import (
    MANUFACTURED_FAMILIES,
    error_norms,
    level_space,
    manufacture_family,
    run_convergence,
)
from memfem.galerkin_spaces import build_space
from memfem.kernels import (
    KERNEL_VARIANTS,
    XiFunction,
    kernel_from_dict,
    positive_type_check,
    random_piecewise_linear,
)
from memfem.volterra_solver import (
    SCHEMES,
    picard_solve,
    time_step_solve,
    to_integral_equation,
)

__author__ = "memfem developers"
__version__ = "0.1.0"
__date__ = "Oct 17, 2026"

logger = logging.getLogger(__name__)

COMMANDS = ("validate-kernel", "solve", "picard-certify", "convergence")

EXIT_SUCCESS = 0
EXIT_VALIDATION = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3

# number of random functions in the positive-type sweep
POSITIVE_TYPE_SAMPLES = 20
POSITIVE_TYPE_TOL = 1e-10

_SECTION_KEYS = {
    "kernel": ("variant", "c", "gamma", "alpha", "kappa"),
    "problem": ("family", "T"),
    "space": ("kind", "degree", "levels", "base", "m", "domain"),
    "solver": ("scheme", "n_steps", "tol", "max_iters"),
    "output": ("prefix",),
}


class ConfigError(ValueError):
    """An invalid experiment configuration; ``errors`` lists every problem."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig(MSONable):
    """
    A validated experiment configuration.

    Args:
        command: One of ``COMMANDS``.
        kernel: The kernel specification passed to ``kernel_from_dict``.
        family: The manufactured family.
        horizon: The final time ``T``.
        kind: ``"fem"`` or ``"spectral"``.
        degree: The element degree.
        levels: The number of refinement levels.
        base: Elements per side on the coarsest level.
        m: The number of spectral modes.
        domain: The interval of spectral spaces.
        scheme: The time stepping scheme.
        n_steps: The number of time steps (or Picard grid intervals).
        tol: The Picard tolerance.
        max_iters: The Picard iteration cap.
        prefix: Prefix for output file names.
    """

    command: str
    kernel: Dict[str, Any]
    family: str = "sin_cos_1d"
    horizon: float = 1.0
    kind: str = "fem"
    degree: int = 1
    levels: int = 4
    base: int = 8
    m: int = 4
    domain: Tuple[float, float] = (0.0, 1.0)
    scheme: str = "newmark"
    n_steps: int = 256
    tol: float = 1e-10
    max_iters: int = 60
    prefix: str = ""

    def to_dict(self) -> Dict[str, Any]:
        """Get the configuration in the JSON layout read by ``parse_config``."""
        return {
            "command": self.command,
            "kernel": dict(self.kernel),
            "problem": {"family": self.family, "T": self.horizon},
            "space": {
                "kind": self.kind,
                "degree": self.degree,
                "levels": self.levels,
                "base": self.base,
                "m": self.m,
                "domain": list(self.domain),
            },
            "solver": {
                "scheme": self.scheme,
                "n_steps": self.n_steps,
                "tol": self.tol,
                "max_iters": self.max_iters,
            },
            "output": {"prefix": self.prefix},
        }

    def output_path(self, directory: Union[str, Path], name: str) -> Path:
        return Path(directory) / "{}{}".format(self.prefix, name)


def _load_json(text: str) -> Any:
    duplicates = []

    def collect(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                duplicates.append("duplicate key {!r}".format(key))
            out[key] = value
        return out

    try:
        data = json.loads(text, object_pairs_hook=collect)
    except json.JSONDecodeError as exc:
        raise ConfigError(["invalid JSON: {}".format(exc)])
    if duplicates:
        raise ConfigError(duplicates)
    return data


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class _Checker(object):
    """Collects field-level errors while reading a configuration."""

    def __init__(self):
        self.errors: List[str] = []

    def number(self, name, value, low=None, high=None, integer=False, open_low=False):
        if integer and not (isinstance(value, int) and not isinstance(value, bool)):
            self.errors.append("{} must be an integer; got {!r}".format(name, value))
            return None
        if not _is_number(value):
            self.errors.append("{} must be a number; got {!r}".format(name, value))
            return None
        too_low = low is not None and (value <= low if open_low else value < low)
        too_high = high is not None and value > high
        if too_low or too_high:
            if open_low and high is None:
                self.errors.append("{} must be > {}; got {}".format(name, low, value))
            elif high is None:
                self.errors.append("{} must be >= {}; got {}".format(name, low, value))
            else:
                self.errors.append(
                    "{} must lie in [{}, {}]; got {}".format(name, low, high, value)
                )
            return None
        return value

    def choice(self, name, value, options):
        if value not in options:
            self.errors.append(
                "{} must be one of {}; got {!r}".format(name, list(options), value)
            )
            return None
        return value


def _check_kernel(spec: Dict[str, Any], checker: _Checker):
    variant = checker.choice("kernel.variant", spec.get("variant"), KERNEL_VARIANTS)
    allowed = {
        "exponential": ("variant", "c", "gamma"),
        "power_law": ("variant", "alpha", "c", "kappa"),
        "zero": ("variant",),
    }.get(variant, _SECTION_KEYS["kernel"])
    for key in spec:
        if key not in allowed:
            checker.errors.append(
                "unknown key kernel.{} for variant {!r}".format(key, variant)
            )

    for key in ("c", "gamma"):
        if key in spec:
            checker.number("kernel.{}".format(key), spec[key], low=0, open_low=True)
    if "alpha" in spec:
        alpha = spec["alpha"]
        if not _is_number(alpha) or not 0 < alpha < 1:
            checker.errors.append("alpha must lie in (0,1); got {!r}".format(alpha))
    if "kappa" in spec:
        kappa = spec["kappa"]
        if not _is_number(kappa) or not 0 < kappa < 1:
            checker.errors.append("kappa must lie in (0,1); got {!r}".format(kappa))
    if variant == "power_law" and "c" in spec and "kappa" in spec:
        checker.errors.append("kernel.c and kernel.kappa are mutually exclusive")


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse and validate a JSON experiment configuration.

    Args:
        text: The JSON text.

    Returns:
        The configuration with defaults filled in.

    Raises:
        ConfigError: Listing every unknown key and invalid value.
    """
    data = _load_json(text)
    if not isinstance(data, dict):
        raise ConfigError(["configuration must be a JSON object"])

    checker = _Checker()
    for key in data:
        if key != "command" and key not in _SECTION_KEYS:
            checker.errors.append("unknown key {!r}".format(key))

    sections = {}
    for name, keys in _SECTION_KEYS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            checker.errors.append("{} must be an object".format(name))
            section = {}
        if name != "kernel":
            for key in section:
                if key not in keys:
                    checker.errors.append("unknown key {}.{}".format(name, key))
        sections[name] = section

    if "command" not in data:
        checker.errors.append("command is required")
    command = checker.choice("command", data.get("command"), COMMANDS)

    if "kernel" not in data:
        checker.errors.append("kernel is required")
    else:
        _check_kernel(sections["kernel"], checker)

    defaults = ExperimentConfig(command="solve", kernel={})
    problem, space, solver = sections["problem"], sections["space"], sections["solver"]

    family = checker.choice(
        "problem.family", problem.get("family", defaults.family), MANUFACTURED_FAMILIES
    )
    horizon = checker.number("problem.T", problem.get("T", defaults.horizon), 0, open_low=True)
    kind = checker.choice("space.kind", space.get("kind", defaults.kind), ("fem", "spectral"))
    degree = checker.choice("space.degree", space.get("degree", defaults.degree), (1, 2))
    levels = checker.number("space.levels", space.get("levels", defaults.levels), 3, integer=True)
    base = checker.number("space.base", space.get("base", defaults.base), 2, integer=True)
    m = checker.number("space.m", space.get("m", defaults.m), 1, integer=True)
    scheme = checker.choice("solver.scheme", solver.get("scheme", defaults.scheme), SCHEMES)
    n_steps = checker.number(
        "solver.n_steps", solver.get("n_steps", defaults.n_steps), 8, integer=True
    )
    tol = checker.number("solver.tol", solver.get("tol", defaults.tol), 0, open_low=True)
    max_iters = checker.number(
        "solver.max_iters", solver.get("max_iters", defaults.max_iters), 1, integer=True
    )

    domain = space.get("domain", list(defaults.domain))
    if (
        not isinstance(domain, (list, tuple))
        or len(domain) != 2
        or not all(_is_number(x) for x in domain)
        or not domain[0] < domain[1]
    ):
        checker.errors.append("space.domain must be [a, b] with a < b; got {!r}".format(domain))
        domain = defaults.domain
    elif family not in (None, "quiescent") and tuple(domain) != (0, 1):
        checker.errors.append(
            "space.domain must be [0, 1] for manufactured family {!r}".format(family)
        )

    prefix = sections["output"].get("prefix", defaults.prefix)
    if not isinstance(prefix, str):
        checker.errors.append("output.prefix must be a string; got {!r}".format(prefix))

    if not checker.errors:
        try:
            kernel_from_dict(sections["kernel"], horizon)
        except ValueError as exc:
            checker.errors.append(str(exc))

    if checker.errors:
        raise ConfigError(checker.errors)

    return ExperimentConfig(
        command=command,
        kernel=dict(sections["kernel"]),
        family=family,
        horizon=float(horizon),
        kind=kind,
        degree=degree,
        levels=levels,
        base=base,
        m=m,
        domain=(float(domain[0]), float(domain[1])),
        scheme=scheme,
        n_steps=n_steps,
        tol=float(tol),
        max_iters=max_iters,
        prefix=prefix,
    )


def _single_space(config: ExperimentConfig, problem):
    if config.kind == "spectral":
        return build_space(config.domain, kind="spectral", m=config.m)
    return level_space(problem, "fem", config.degree, config.base, 0)


def _validate_kernel(
    config: ExperimentConfig, kernel, seed: int
) -> Tuple[int, Dict[str, Any]]:
    validation = kernel.validate(config.horizon)
    for message in validation.messages:
        logger.info(message)

    status = EXIT_SUCCESS if validation.passed else EXIT_VALIDATION
    record = validation.as_dict()
    record.update(passed=validation.passed, messages=validation.messages)
    if validation.passed:
        rng = np.random.default_rng(seed)
        xi = XiFunction(kernel, config.horizon)
        values, scales = [], []
        for _ in range(POSITIVE_TYPE_SAMPLES):
            phi = random_piecewise_linear(rng)
            values.append(positive_type_check(xi, phi))
            scales.append(np.abs(phi).max() ** 2 * config.horizon ** 2)
        worst = int(np.argmin(np.array(values) / np.array(scales)))
        positive = all(v >= -POSITIVE_TYPE_TOL * s for v, s in zip(values, scales))
        logger.info(
            "positive type ({} samples, seed {}): min {:.3e}: {}".format(
                POSITIVE_TYPE_SAMPLES, seed, values[worst], "pass" if positive else "fail"
            )
        )
        record["positive_type_min"] = float(min(values))
        if not positive:
            status = EXIT_VALIDATION

    return status, record


def run(
    config: ExperimentConfig, out_dir: Union[str, Path] = ".", seed: int = 0
) -> int:
    """
    Run an experiment and write its artifacts.

    Args:
        config: The validated configuration.
        out_dir: The output directory.
        seed: The seed of randomised checks.

    Returns:
        The exit status: 0 on success, 1 on a failed validation, 2 when Picard
        iteration did not converge.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernel = kernel_from_dict(config.kernel, config.horizon)

    if config.command == "validate-kernel":
        status, record = _validate_kernel(config, kernel, seed)
        dumpfn(record, config.output_path(out_dir, "validation.json"), indent=2)
        return status

    validation = kernel.validate(config.horizon)
    if not validation.passed:
        for message in validation.messages:
            logger.error(message)
        return EXIT_VALIDATION

    problem = manufacture_family(config.family, kernel, config.horizon)

    if config.command == "convergence":
        report = run_convergence(
            problem,
            kind=config.kind,
            degree=config.degree,
            levels=config.levels,
            base=config.base,
            scheme=config.scheme,
        )
        report.to_csv(config.output_path(out_dir, "report.csv"))
        report.to_json(config.output_path(out_dir, "report.json"))
        logger.info(report.summary())
        return EXIT_SUCCESS

    space = _single_space(config, problem)
    system = problem.build_system(space)

    if config.command == "solve":
        trajectory = time_step_solve(system, config.n_steps, config.scheme)
        trajectory.to_csv(config.output_path(out_dir, "trajectory.csv"))
        norms = error_norms(space, trajectory, problem)
        logger.info(
            tabulate(
                [[space.dimension, config.n_steps, norms.l2, norms.energy, norms.velocity]],
                headers=["dofs", "steps", "e_L2", "e_H1", "e_vel"],
                floatfmt=".4e",
            )
        )
        return EXIT_SUCCESS

    result = picard_solve(
        to_integral_equation(system), config.n_steps, config.max_iters, config.tol
    )
    result.trajectory.to_csv(config.output_path(out_dir, "trajectory.csv"))
    certificate = result.certificate
    certificate.to_json(config.output_path(out_dir, "certificate.json"))
    logger.info(
        tabulate(
            [[it["n"], it["measured"], it["bound"]] for it in certificate.iterations[:11]],
            headers=["n", "measured", "bound"],
            floatfmt=".4e",
        )
    )
    logger.info("Z = {:.6g}, Z0 = {:.6g}".format(certificate.Z, certificate.Z0))

    if not result.converged:
        logger.error(
            "Picard iteration did not converge: last increment {:.3e} > tol {:.1e}".format(
                result.last_increment, config.tol
            )
        )
        return EXIT_NOT_CONVERGED
    if not certificate.dominated():
        logger.error("Measured increments exceed the factorial bound")
        return EXIT_VALIDATION
    return EXIT_SUCCESS


def _get_parser():
    parser = argparse.ArgumentParser(
        description="""
    memfem runs Galerkin solvers for wave equations with memory""",
        epilog="""
    Author: {}
    Version: {}
    Last updated: {}""".format(
            __author__, __version__, __date__
        ),
    )
    parser.add_argument(
        "-c", "--config", required=True, metavar="F", help="JSON experiment file"
    )
    parser.add_argument(
        "-o", "--out", default=".", metavar="D", help="output directory for artifacts"
    )
    parser.add_argument(
        "--seed", default=0, type=int, help="seed for randomised checks (default: 0)"
    )
    parser.add_argument(
        "-q", "--quiet", action="store_true", help="do not echo the log to the console"
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _get_parser().parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        filename=out_dir / "memfem.log",
        level=logging.INFO,
        filemode="w",
        format="%(message)s",
        force=True,
    )
    logging.captureWarnings(True)
    logging.info(" ".join(sys.argv[:] if argv is None else ["memfem"] + list(argv)))
    if not args.quiet:
        console = logging.StreamHandler(sys.stdout)
        logging.getLogger("").addHandler(console)

    try:
        config = parse_config(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        logging.error("cannot read config: {}".format(exc))
        return EXIT_CONFIG
    except ConfigError as exc:
        for error in exc.errors:
            logging.error("config error: {}".format(error))
        return EXIT_CONFIG

    try:
        return run(config, out_dir, seed=args.seed)
    except ValueError as exc:
        logging.error("error: {}".format(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
