"""Markov random dynamical systems of polynomials: escape-probability
fields, per-vertex Julia sets, and structural condition checkers."""

from importlib import resources

from .errors import (
    BudgetExceeded,
    DeadEnd,
    DegreeError,
    MrdsError,
    NoConvergence,
    NotIrreducible,
    SchemaError,
    StochasticityError,
    WeightError,
    WindowTooSmall,
)
from .model import (
    INFINITY,
    EdgeMeasure,
    Polynomial,
    System,
    chordal_distance,
    escape_radius,
    is_essentially_nondeterministic,
    is_infinity,
    is_irreducible,
    parse_system,
    serialize_system,
    stationary_vector,
)

__version__ = "0.1.0"


def config_path(name: str):
    """Filesystem path of a shipped example config (e.g. 'basilica_pair')."""
    if not name.endswith(".toml"):
        name += ".toml"
    return resources.files("mrds").joinpath("configs", name)


def load_config(name: str) -> System:
    return parse_system(config_path(name).read_text())
