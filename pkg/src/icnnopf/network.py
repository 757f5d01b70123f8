"""Balanced distribution network data model and case-document I/O.

A case document is plain UTF-8 text with three sections::

    # comments start with '#'
    [header]
    s_base_kva = 100
    v_base_kv = 12.66
    per_unit = false

    [buses]
    # id  kind   p_load  q_load  v_min  v_max  has_control
    1     slack  0       0       0.90   1.05   0
    2     load   100     60      0.90   1.05   0

    [branches]
    # from  to  r       x       p_min   p_max
    1       2   0.0922  0.0470  -6000   6000

Physical units are kW / kvar for loads and flow bounds and ohms for
impedances; with ``per_unit = true`` every quantity is already in per-unit.
Voltage bounds are always per-unit. ``p_min``/``p_max`` may be omitted, in
which case they default to +/-10 pu.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources

import numpy as np

DEFAULT_FLOW_LIMIT_PU = 10.0
_BUS_KINDS = ("slack", "load")


class CaseError(ValueError):
    """Raised for malformed or physically invalid case documents."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float
    q_load: float
    v_min: float
    v_max: float
    has_control: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    p_min: float = -DEFAULT_FLOW_LIMIT_PU
    p_max: float = DEFAULT_FLOW_LIMIT_PU


@dataclass(frozen=True)
class Diagnostic:
    """One invariant violation found by :func:`validate_bounds`."""

    element: str  # "bus", "branch" or "case"
    ident: object
    message: str

    def __str__(self) -> str:
        if self.element == "case":
            return self.message
        return f"{self.element} {self.ident}: {self.message}"


@dataclass(frozen=True)
class NetworkCase:
    """Bus/branch model of a balanced distribution network.

    The object is immutable; derived arrays are cached on first access.
    Bus order in ``buses`` defines the index order of every per-bus vector
    used elsewhere in the package, likewise for branches.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    s_base: float = 100.0
    v_base: float = 12.66
    per_unit: bool = True
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def index(self) -> dict[int, int]:
        """Map from bus id to position in ``buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        """Position of the (unique) slack bus."""
        slacks = [i for i, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slacks) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slacks)}")
        return slacks[0]

    @cached_property
    def non_slack(self) -> np.ndarray:
        return np.array([i for i in range(self.n_bus) if i != self.slack], dtype=int)

    @cached_property
    def controllable(self) -> np.ndarray:
        """Positions of buses hosting a controllable device, in bus order."""
        return np.array([i for i, b in enumerate(self.buses) if b.has_control], dtype=int)

    @cached_property
    def from_idx(self) -> np.ndarray:
        return np.array([self.index[br.from_bus] for br in self.branches], dtype=int)

    @cached_property
    def to_idx(self) -> np.ndarray:
        return np.array([self.index[br.to_bus] for br in self.branches], dtype=int)

    def bus_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    def branch_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(br, attr) for br in self.branches], dtype=float)

    @cached_property
    def topology_kind(self) -> str:
        if self.n_branch == self.n_bus - 1 and _is_connected(self):
            return "radial"
        return "meshed"

    @cached_property
    def digest(self) -> str:
        """SHA-256 of the canonical serialization; identifies the case in files."""
        return hashlib.sha256(serialize_case(self).encode("utf-8")).hexdigest()


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _components(case: NetworkCase) -> int:
    index = {b.id: i for i, b in enumerate(case.buses)}
    uf = _UnionFind(len(case.buses))
    for br in case.branches:
        if br.from_bus in index and br.to_bus in index:
            uf.union(index[br.from_bus], index[br.to_bus])
    return len({uf.find(i) for i in range(len(case.buses))})


def _is_connected(case: NetworkCase) -> bool:
    return len(case.buses) > 0 and _components(case) == 1


def is_spanning_tree(case: NetworkCase) -> bool:
    """True when every branch joins two previously unjoined components."""
    index = {b.id: i for i, b in enumerate(case.buses)}
    uf = _UnionFind(len(case.buses))
    for br in case.branches:
        if not uf.union(index[br.from_bus], index[br.to_bus]):
            return False
    return _components(case) == 1


def validate_bounds(case: NetworkCase) -> list[Diagnostic]:
    """Check bound and connectivity invariants without raising.

    Returns an empty list for a valid case, otherwise one diagnostic per
    violation naming the offending bus or branch.
    """
    diags: list[Diagnostic] = []
    seen: set[int] = set()
    for bus in case.buses:
        if bus.id in seen:
            diags.append(Diagnostic("bus", bus.id, "duplicate bus id"))
        seen.add(bus.id)
        if bus.kind not in _BUS_KINDS:
            diags.append(Diagnostic("bus", bus.id, f"unknown bus kind {bus.kind!r}"))
        if not (0.0 < bus.v_min < bus.v_max):
            diags.append(Diagnostic(
                "bus", bus.id, f"voltage bounds must satisfy 0 < v_min < v_max (got {bus.v_min}, {bus.v_max})"))
        if not (math.isfinite(bus.p_load) and math.isfinite(bus.q_load)):
            diags.append(Diagnostic("bus", bus.id, "non-finite load"))

    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack == 0:
        diags.append(Diagnostic("case", None, "missing slack bus"))
    elif n_slack > 1:
        diags.append(Diagnostic("case", None, "multiple slack buses"))

    dangling = False
    for k, br in enumerate(case.branches):
        tag = f"#{k} ({br.from_bus}-{br.to_bus})"
        missing = [b for b in (br.from_bus, br.to_bus) if b not in seen]
        if missing:
            dangling = True
            diags.append(Diagnostic("branch", tag, f"references nonexistent bus {missing[0]}"))
        if br.from_bus == br.to_bus:
            diags.append(Diagnostic("branch", tag, "self loop"))
        if br.r < 0 or br.x <= 0:
            diags.append(Diagnostic("branch", tag, f"non-physical impedance r={br.r}, x={br.x}"))
        if not br.p_min < br.p_max:
            diags.append(Diagnostic("branch", tag, "flow bounds must satisfy p_min < p_max"))

    if case.buses and not dangling and not _is_connected(case):
        diags.append(Diagnostic("case", None, "disconnected graph"))
    if case.s_base <= 0 or case.v_base <= 0:
        diags.append(Diagnostic("case", None, "base quantities must be positive"))
    return diags


# --------------------------------------------------------------------------
# Case document parsing / serialization

def _parse_bool(tok: str, where: str) -> bool:
    t = tok.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise CaseError(f"{where}: expected boolean, got {tok!r}")


def _parse_float(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise CaseError(f"{where}: expected number, got {tok!r}") from None


def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse a case document into a validated :class:`NetworkCase`.

    The returned case is in whatever units the document declares; call
    :func:`to_per_unit` (or use :func:`load_case`) to normalize.
    """
    section = None
    header: dict[str, str] = {}
    buses: list[Bus] = []
    branches: list[Branch] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("header", "buses", "branches"):
                raise CaseError(f"{where}: unknown section [{section}]")
            continue
        if section == "header":
            if "=" not in line:
                raise CaseError(f"{where}: expected 'key = value' in header")
            key, val = (s.strip() for s in line.split("=", 1))
            header[key] = val
        elif section == "buses":
            tok = line.split()
            if len(tok) != 7:
                raise CaseError(f"{where}: bus row needs 7 fields, got {len(tok)}")
            try:
                bid = int(tok[0])
            except ValueError:
                raise CaseError(f"{where}: bad bus id {tok[0]!r}") from None
            kind = tok[1].lower()
            if kind not in _BUS_KINDS:
                raise CaseError(f"{where}: unknown bus kind {tok[1]!r}")
            buses.append(Bus(
                bid, kind,
                *(_parse_float(t, where) for t in tok[2:6]),
                has_control=_parse_bool(tok[6], where),
            ))
        elif section == "branches":
            tok = line.split()
            if len(tok) not in (4, 6):
                raise CaseError(f"{where}: branch row needs 4 or 6 fields, got {len(tok)}")
            try:
                f, t = int(tok[0]), int(tok[1])
            except ValueError:
                raise CaseError(f"{where}: bad bus id in branch row") from None
            vals = [_parse_float(s, where) for s in tok[2:]]
            branches.append(Branch(f, t, *vals) if len(vals) == 4 else Branch(f, t, vals[0], vals[1], None, None))
        else:
            raise CaseError(f"{where}: data outside of a section")

    for key in ("s_base_kva", "v_base_kv", "per_unit"):
        if key not in header:
            raise CaseError(f"header is missing {key!r}")
    s_base = _parse_float(header["s_base_kva"], "header s_base_kva")
    v_base = _parse_float(header["v_base_kv"], "header v_base_kv")
    per_unit = _parse_bool(header["per_unit"], "header per_unit")
    if not buses:
        raise CaseError("case has no buses")

    # absent flow limits default to +/-10 pu in the document's own units
    default = DEFAULT_FLOW_LIMIT_PU * (1.0 if per_unit else s_base)
    branches = [br if br.p_min is not None else replace(br, p_min=-default, p_max=default) for br in branches]

    case = NetworkCase(tuple(buses), tuple(branches), s_base, v_base, per_unit, name=name)
    _raise_on_invalid(case)
    return case


def _raise_on_invalid(case: NetworkCase) -> None:
    diags = validate_bounds(case)
    if diags:
        raise CaseError("; ".join(str(d) for d in diags))


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_case(case: NetworkCase) -> str:
    """Write ``case`` as a case document; ``parse_case`` inverts this exactly."""
    out = [
        "[header]",
        f"s_base_kva = {_fmt(case.s_base)}",
        f"v_base_kv = {_fmt(case.v_base)}",
        f"per_unit = {'true' if case.per_unit else 'false'}",
        "",
        "[buses]",
        "# id kind p_load q_load v_min v_max has_control",
    ]
    for b in case.buses:
        out.append(" ".join([str(b.id), b.kind, _fmt(b.p_load), _fmt(b.q_load),
                             _fmt(b.v_min), _fmt(b.v_max), "1" if b.has_control else "0"]))
    out += ["", "[branches]", "# from to r x p_min p_max"]
    for br in case.branches:
        out.append(" ".join([str(br.from_bus), str(br.to_bus), _fmt(br.r), _fmt(br.x),
                             _fmt(br.p_min), _fmt(br.p_max)]))
    return "\n".join(out) + "\n"


def to_per_unit(raw: NetworkCase) -> NetworkCase:
    """Convert a physical-unit case to per-unit; per-unit input is returned unchanged.

    Loads and flow bounds are divided by ``s_base``, impedances by
    ``v_base**2 / s_base``.
    """
    if raw.s_base <= 0 or raw.v_base <= 0:
        raise CaseError("base quantities must be positive")
    for br in raw.branches:
        if br.r == 0 and br.x == 0:
            raise CaseError(f"non-physical impedance on branch {br.from_bus}-{br.to_bus}")
    if raw.per_unit:
        return raw
    s = raw.s_base
    z_base = (raw.v_base * 1e3) ** 2 / (raw.s_base * 1e3)
    buses = tuple(replace(b, p_load=b.p_load / s, q_load=b.q_load / s) for b in raw.buses)
    branches = tuple(
        replace(br, r=br.r / z_base, x=br.x / z_base, p_min=br.p_min / s, p_max=br.p_max / s)
        for br in raw.branches
    )
    return NetworkCase(buses, branches, raw.s_base, raw.v_base, True, name=raw.name)


def load_case(source) -> NetworkCase:
    """Read a case document from a path (or a bundled case name) in per-unit."""
    if isinstance(source, str) and source in bundled_cases():
        return bundled_case(source)
    with open(source, encoding="utf-8") as fh:
        text = fh.read()
    return to_per_unit(parse_case(text, name=str(source)))


def bundled_cases() -> tuple[str, ...]:
    return ("ieee33", "ieee33_meshed")


def bundled_case_text(name: str) -> str:
    if name not in bundled_cases():
        raise KeyError(f"no bundled case named {name!r}")
    return resources.files("icnnopf.data").joinpath(f"{name}.case").read_text(encoding="utf-8")


def bundled_case(name: str) -> NetworkCase:
    """Per-unit version of one of the bundled cases (``ieee33``, ``ieee33_meshed``)."""
    return to_per_unit(parse_case(bundled_case_text(name), name=name))
