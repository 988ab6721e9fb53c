"""INI experiment configuration: parsing, validation and canonical serialization."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError
from .market import ConstraintSet, MarketScenario

SUITE_NAMES = ("consistency", "oc_check", "shape_audit", "dual_suite", "darboux", "conjugate")

# override keys accepted per suite; values are parsed by the suite runner
SUITE_OPTIONS = {
    "consistency": {"x0s", "n_strategies", "k", "start", "features", "branches"},
    "oc_check": {"xs", "x_primes", "direction", "n_strategies", "k", "features"},
    "shape_audit": {"inada_ratio"},
    "dual_suite": {"etas", "deltas", "start", "n_strategies", "k"},
    "darboux": {"x", "ns", "k"},
    "conjugate": {"n_paths", "n_t", "n_y", "tol"},
}
FORMATS = ("json", "csv")


class ConfigError(ConfigurationError):
    """Malformed or inconsistent configuration (reported before any simulation)."""

    module = "cli_reporting"


@dataclass(frozen=True)
class FlowSection:
    generator: str = "linear"
    sources: tuple[str, ...] = ("asset:0",)
    x_min: float = 1e-3
    x_max: float = 1e3
    n_nodes: int = 61
    time_stride: int = 1


@dataclass(frozen=True)
class DualSection:
    kind: str = "constant"
    family: str = "power"
    gamma: float = 0.5
    gammas: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    drift: float = 0.1
    aux_index: int = 0

    def utility_params(self) -> dict:
        if self.family == "power":
            return {"gamma": self.gamma}
        return {"gammas": self.gammas, "weights": self.weights}


@dataclass(frozen=True)
class ConstructionSection:
    market: str = "martingale"
    numeraire: str = "none"


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs/out"
    formats: tuple[str, ...] = ("json", "csv")
    plots: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    paths: int
    scenario: MarketScenario
    flow: FlowSection = FlowSection()
    dual: DualSection = DualSection()
    construction: ConstructionSection = ConstructionSection()
    suites: tuple[str, ...] = ()
    overrides: dict = field(default_factory=dict)
    output: OutputSection = OutputSection()
    name: str = "experiment"

    def __hash__(self):
        return hash(self.to_text())

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_text() == other.to_text()

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_run(self, seed: int | None = None, paths: int | None = None, suites=None, directory=None, formats=None):
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if paths is not None:
            if paths < 1:
                raise ConfigError("--paths must be positive")
            out = replace(out, paths=int(paths))
        if suites:
            _check_suites(suites)
            out = replace(out, suites=tuple(suites))
        if directory is not None or formats is not None:
            out = replace(
                out,
                output=replace(
                    out.output,
                    directory=out.output.directory if directory is None else str(directory),
                    formats=out.output.formats if formats is None else tuple(formats),
                ),
            )
        return out

    def suite_options(self, suite: str) -> dict:
        return dict(self.overrides.get(suite, {}))

    # serialization

    def to_text(self) -> str:
        sc = self.scenario
        cs = sc.constraint_set
        lines = [
            "[run]",
            f"name = {self.name}",
            f"seed = {self.seed}",
            f"paths = {self.paths}",
            "",
            "[scenario]",
            f"n_assets = {sc.n_assets}",
            f"drift = {_floats(sc.drift)}",
            f"volatility = {'; '.join(_floats(row) for row in sc.volatility)}",
            f"rate = {sc.rate!r}",
            f"horizon = {sc.horizon!r}",
            f"n_steps = {sc.n_steps}",
            f"initial_prices = {_floats(sc.initial_prices)}",
            f"aux_volatility = {_floats(sc.aux_volatility)}",
            f"constraint = {cs.kind}",
            f"lower = {_floats(cs.lower)}",
            f"upper = {_floats(cs.upper)}",
            f"capital_cap = {cs.capital_cap!r}",
            "",
            "[flow]",
            f"generator = {self.flow.generator}",
            f"sources = {', '.join(self.flow.sources)}",
            f"x_min = {self.flow.x_min!r}",
            f"x_max = {self.flow.x_max!r}",
            f"n_nodes = {self.flow.n_nodes}",
            f"time_stride = {self.flow.time_stride}",
            "",
            "[dual]",
            f"kind = {self.dual.kind}",
            f"family = {self.dual.family}",
            f"gamma = {self.dual.gamma!r}",
            f"gammas = {_floats(self.dual.gammas)}",
            f"weights = {_floats(self.dual.weights)}",
            f"drift = {self.dual.drift!r}",
            f"aux_index = {self.dual.aux_index}",
            "",
            "[construction]",
            f"market = {self.construction.market}",
            f"numeraire = {self.construction.numeraire}",
            "",
            "[suites]",
            f"names = {', '.join(self.suites)}",
        ]
        for suite in sorted(self.overrides):
            for key in sorted(self.overrides[suite]):
                lines.append(f"{suite}.{key} = {self.overrides[suite][key]}")
        lines += [
            "",
            "[output]",
            f"directory = {self.output.directory}",
            f"formats = {', '.join(self.output.formats)}",
            f"plots = {str(self.output.plots).lower()}",
            "",
        ]
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        for section in ("run", "scenario", "flow", "dual", "suites"):
            if not cp.has_section(section):
                raise ConfigError(f"{source}: missing section [{section}]")
        known = {"run", "scenario", "flow", "dual", "construction", "suites", "output"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"{source}: unknown section(s) {sorted(extra)}")

        def get(section, key, conv, default=None):
            if not cp.has_option(section, key):
                if default is None:
                    raise ConfigError(f"{source}: [{section}] {key} is required")
                return default
            raw = cp.get(section, key)
            try:
                return conv(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {exc}") from exc

        suites = tuple(_names(cp.get("suites", "names", fallback="")))
        _check_suites(suites, source)
        overrides: dict[str, dict[str, str]] = {}
        for key, raw in cp.items("suites"):
            if key == "names":
                continue
            suite, dot, opt = key.partition(".")
            if not dot or suite not in SUITE_NAMES:
                raise ConfigError(f"{source}: [suites] {key}: overrides are written <suite>.<option>")
            if opt not in SUITE_OPTIONS[suite]:
                raise ConfigError(f"{source}: [suites] {key}: unknown option for {suite}; allowed {sorted(SUITE_OPTIONS[suite])}")
            overrides.setdefault(suite, {})[opt] = raw.strip()

        n_assets = get("scenario", "n_assets", int, 1)
        try:
            constraint = ConstraintSet(
                kind=get("scenario", "constraint", str, "box"),
                lower=get("scenario", "lower", _float_tuple, (0.0,) * n_assets),
                upper=get("scenario", "upper", _float_tuple, (1.0,) * n_assets),
                capital_cap=get("scenario", "capital_cap", float, 1e3),
            )
            scenario = MarketScenario(
                n_assets=n_assets,
                drift=get("scenario", "drift", _float_tuple),
                volatility=get("scenario", "volatility", _matrix),
                rate=get("scenario", "rate", float, 0.0),
                horizon=get("scenario", "horizon", float, 1.0),
                n_steps=get("scenario", "n_steps", int, 16),
                constraint_set=constraint,
                initial_prices=get("scenario", "initial_prices", _float_tuple, (1.0,) * n_assets),
                aux_volatility=get("scenario", "aux_volatility", _float_tuple, (0.2,)),
            )
        except ConfigError:
            raise
        except ConfigurationError as exc:
            raise ConfigError(f"{source}: [scenario] {exc}") from exc

        flow = FlowSection(
            generator=get("flow", "generator", str, "linear"),
            sources=get("flow", "sources", lambda s: tuple(_names(s)), ("asset:0",)),
            x_min=get("flow", "x_min", float, 1e-3),
            x_max=get("flow", "x_max", float, 1e3),
            n_nodes=get("flow", "n_nodes", int, 61),
            time_stride=get("flow", "time_stride", int, 1),
        )
        if flow.generator not in ("linear", "two-fund"):
            raise ConfigError(f"{source}: [flow] generator must be linear or two-fund")
        if flow.time_stride < 1 or scenario.n_steps % flow.time_stride:
            raise ConfigError(f"{source}: [flow] time_stride must divide n_steps")
        if flow.n_nodes < 3 or not 0 < flow.x_min < flow.x_max:
            raise ConfigError(f"{source}: [flow] grid needs 0 < x_min < x_max and at least 3 nodes")
        dual = DualSection(
            kind=get("dual", "kind", str, "constant"),
            family=get("dual", "family", str, "power"),
            gamma=get("dual", "gamma", float, 0.5),
            gammas=get("dual", "gammas", _float_tuple, ()),
            weights=get("dual", "weights", _float_tuple, ()),
            drift=get("dual", "drift", float, 0.1),
            aux_index=get("dual", "aux_index", int, 0),
        )
        if dual.kind not in ("constant", "modulated", "drifted"):
            raise ConfigError(f"{source}: [dual] kind must be constant, modulated or drifted")
        construction = ConstructionSection(
            market=get("construction", "market", str, "martingale"),
            numeraire=get("construction", "numeraire", str, "none"),
        )
        if construction.market not in ("martingale", "initial"):
            raise ConfigError(f"{source}: [construction] market must be martingale or initial")
        output = OutputSection(
            directory=get("output", "directory", str, "runs/out") if cp.has_section("output") else "runs/out",
            formats=get("output", "formats", lambda s: tuple(_names(s)), ("json", "csv")) if cp.has_section("output") else ("json", "csv"),
            plots=get("output", "plots", _bool, False) if cp.has_section("output") else False,
        )
        if not output.formats or any(f not in FORMATS for f in output.formats):
            raise ConfigError(f"{source}: [output] formats must be drawn from {FORMATS}")
        return cls(
            seed=get("run", "seed", int),
            paths=get("run", "paths", int),
            scenario=scenario,
            flow=flow,
            dual=dual,
            construction=construction,
            suites=suites,
            overrides=overrides,
            output=output,
            name=get("run", "name", str, Path(source).stem if source != "<string>" else "experiment"),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = resolve_config(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=str(path))


def resolve_config(path) -> Path:
    """A filesystem path, or the name of a bundled config (e.g. ``merton_power.cfg``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("flowutil") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {path} not found (neither a file nor a bundled config)")


def bundled_configs() -> list[str]:
    return sorted(p.name for p in (resources.files("flowutil") / "configs").iterdir() if p.name.endswith(".cfg"))


def _check_suites(suites, source="config"):
    unknown = [s for s in suites if s not in SUITE_NAMES]
    if unknown:
        raise ConfigError(f"{source}: unknown suite(s) {unknown}; registered: {list(SUITE_NAMES)}")


def _names(raw: str) -> list[str]:
    return [p.strip() for p in raw.replace("\n", ",").split(",") if p.strip()]


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in _names(raw))


def _matrix(raw: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_float_tuple(row) for row in raw.split(";") if row.strip())


def _floats(values) -> str:
    return ", ".join(repr(float(v)) for v in values)


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def parse_list(raw, conv=float) -> tuple:
    """Suite override values: comma-separated lists or scalars."""
    if isinstance(raw, (list, tuple)):
        return tuple(conv(v) for v in raw)
    return tuple(conv(v) for v in _names(str(raw)))
