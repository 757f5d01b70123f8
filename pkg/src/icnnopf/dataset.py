"""Scenario sampling, power-flow labeling, and dataset files.

Surrogate inputs are augmented net-injection vectors: with ``s = [p; q]``
over the non-slack buses (``p = p^c + p^u``), the model input is
``[s; -s]``. Controls ``x~ = [p^c; q^c]`` over the controllable buses enter
``s`` through a fixed selection matrix (see :func:`control_selector`), so a
model that is convex in its input is convex in the controls for any
uncontrollable context.

Dataset files are zip archives with fixed member timestamps holding a JSON
header plus one ``.npy`` member per array, so identical content gives
identical bytes.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .icnn import NormStats, augment_input
from .network import NetworkCase
from .powerflow import Injection, deviation_targets, newton_power_flow

log = logging.getLogger(__name__)

DATASET_FORMAT = "icnnopf-dataset"
DATASET_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

DEFAULT_P_BAR = 0.5
DEFAULT_S_BAR = 0.6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """Uniform sampling ranges.

    Uncontrollable loads are the nominal loads scaled per bus by
    independent factors in ``load_scale`` (separately for p and q); controls
    are drawn per device from ``p_ctrl`` and ``q_ctrl`` (per-unit).
    """

    load_scale: tuple[float, float] = (0.6, 1.4)
    p_ctrl: tuple[float, float] = (0.0, DEFAULT_P_BAR)
    q_ctrl: tuple[float, float] = (-DEFAULT_S_BAR, DEFAULT_S_BAR)

    def __post_init__(self):
        for name in ("load_scale", "p_ctrl", "q_ctrl"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @property
    def has_controls(self) -> bool:
        return self.p_ctrl != (0.0, 0.0) or self.q_ctrl != (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    case_id: str
    p_u: np.ndarray  # (count, n_bus), generation-positive
    q_u: np.ndarray
    p_c: np.ndarray  # zero at buses without a device
    q_c: np.ndarray
    seed: int
    sampler: SamplerSpec

    def __len__(self):
        return self.p_u.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ScenarioSet):
            return NotImplemented
        return (self.case_id == other.case_id and self.seed == other.seed and self.sampler == other.sampler
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("p_u", "q_u", "p_c", "q_c")))


def sample_scenarios(case: NetworkCase, count: int, ranges: SamplerSpec | None = None, seed: int = 0) -> ScenarioSet:
    if count <= 0:
        raise ValueError("count must be positive")
    ranges = ranges or SamplerSpec()
    ctrl = case.controllable
    if ctrl.size == 0 and ranges.has_controls:
        raise DatasetError("case has no controllable buses but control ranges are nonzero")
    rng = np.random.default_rng(seed)
    n = case.n_bus
    pl, ql = case.bus_array("p_load"), case.bus_array("q_load")
    sp = rng.uniform(*ranges.load_scale, size=(count, n))
    sq = rng.uniform(*ranges.load_scale, size=(count, n))
    p_c = np.zeros((count, n))
    q_c = np.zeros((count, n))
    p_c[:, ctrl] = rng.uniform(*ranges.p_ctrl, size=(count, ctrl.size))
    q_c[:, ctrl] = rng.uniform(*ranges.q_ctrl, size=(count, ctrl.size))
    return ScenarioSet(case.digest, -sp * pl, -sq * ql, p_c, q_c, seed, ranges)


def control_selector(case: NetworkCase) -> np.ndarray:
    """Matrix mapping controls ``[p^c; q^c]`` (per device) to ``[p; q]`` over non-slack buses."""
    ns = case.non_slack
    ctrl = case.controllable
    pos = {b: k for k, b in enumerate(ns)}
    nd, m = ctrl.size, ns.size
    S = np.zeros((2 * m, 2 * nd))
    for j, b in enumerate(ctrl):
        S[pos[b], j] = 1.0
        S[m + pos[b], nd + j] = 1.0
    return S


def injection_features(case: NetworkCase, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Augmented model input ``[s; -s]`` for per-bus net injections (vector or batch)."""
    ns = case.non_slack
    s = np.concatenate([np.asarray(p)[..., ns], np.asarray(q)[..., ns]], axis=-1)
    return augment_input(s)


@dataclass(eq=False)
class LabeledDataset:
    case_id: str
    controls: np.ndarray  # (N, 2 n_dev)  [p^c; q^c] over devices
    context: np.ndarray  # (N, 2 n_bus)  [p^u; q^u]
    inputs: np.ndarray  # (N, 4 (n_bus - 1)) augmented net injections
    targets_v: np.ndarray  # (N, n_bus)
    targets_p: np.ndarray  # (N, n_branch)
    split: dict[str, np.ndarray]
    norm_v: NormStats
    norm_p: NormStats
    seed: int = 0
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    dropped: int = 0

    def __len__(self):
        return self.inputs.shape[0]

    def rows(self, part: str):
        """``(inputs, targets_v, targets_p)`` restricted to one split."""
        idx = self.split[part]
        return self.inputs[idx], self.targets_v[idx], self.targets_p[idx]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        arrays = ("controls", "context", "inputs", "targets_v", "targets_p")
        return (self.case_id == other.case_id and self.seed == other.seed and self.sampler == other.sampler
                and self.dropped == other.dropped and self.norm_v == other.norm_v and self.norm_p == other.norm_p
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays)
                and self.split.keys() == other.split.keys()
                and all(np.array_equal(self.split[k], other.split[k]) for k in self.split))


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def build_dataset(case: NetworkCase, scenarios: ScenarioSet, pf_tol: float = 1e-8,
                  max_drop_fraction: float = 0.05) -> LabeledDataset:
    """Label every scenario with Newton power flow deviation targets.

    Non-convergent scenarios are dropped; more than ``max_drop_fraction`` of
    them aborts. Normalization statistics come from the training split only.
    """
    if scenarios.case_id != case.digest:
        raise DatasetError("scenario set was sampled for a different case")
    ctrl = case.controllable
    keep, tv, tp = [], [], []
    for k in range(len(scenarios)):
        inj = Injection(scenarios.p_u[k] + scenarios.p_c[k], scenarios.q_u[k] + scenarios.q_c[k])
        sol = newton_power_flow(case, inj, tol=pf_tol)
        if not sol.converged:
            continue
        dev = deviation_targets(case, sol)
        keep.append(k)
        tv.append(dev.v_dev)
        tp.append(dev.p_dev)
    dropped = len(scenarios) - len(keep)
    if dropped > max_drop_fraction * len(scenarios):
        raise DatasetError(f"{dropped} of {len(scenarios)} scenarios did not converge; "
                           "sampling ranges are too aggressive")
    if dropped:
        log.warning("dropped %d non-convergent scenarios", dropped)
    keep = np.array(keep, dtype=int)
    p = scenarios.p_u[keep] + scenarios.p_c[keep]
    q = scenarios.q_u[keep] + scenarios.q_c[keep]
    inputs = injection_features(case, p, q)
    targets_v, targets_p = np.array(tv), np.array(tp)
    split = split_indices(keep.size, scenarios.seed)
    tr = split["train"]
    return LabeledDataset(
        case_id=case.digest,
        controls=np.hstack([scenarios.p_c[keep][:, ctrl], scenarios.q_c[keep][:, ctrl]]),
        context=np.hstack([scenarios.p_u[keep], scenarios.q_u[keep]]),
        inputs=inputs, targets_v=targets_v, targets_p=targets_p, split=split,
        norm_v=NormStats.fit(inputs[tr], targets_v[tr]),
        norm_p=NormStats.fit(inputs[tr], targets_p[tr]),
        seed=scenarios.seed, sampler=scenarios.sampler, dropped=dropped,
    )


# --------------------------------------------------------------------------
# file format

_ARRAYS = ("controls", "context", "inputs", "targets_v", "targets_p")


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _members(ds: LabeledDataset) -> dict[str, np.ndarray]:
    out = {name: getattr(ds, name) for name in _ARRAYS}
    out.update({f"split_{k}": v for k, v in ds.split.items()})
    for tag, ns in (("v", ds.norm_v), ("p", ds.norm_p)):
        out.update({f"norm_{tag}_in_shift": ns.in_shift, f"norm_{tag}_in_scale": ns.in_scale,
                    f"norm_{tag}_out_scale": ns.out_scale})
    return out


def save_dataset(ds: LabeledDataset, path) -> None:
    members = _members(ds)
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION, "case_id": ds.case_id, "seed": ds.seed,
        "sampler": asdict(ds.sampler), "dropped": ds.dropped, "rows": len(ds),
        "members": sorted(members),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
        put("header.json", json.dumps(header, sort_keys=True).encode("utf-8"))
        for name in sorted(members):
            put(f"{name}.npy", _npy_bytes(members[name]))


def load_dataset(path) -> LabeledDataset:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != DATASET_FORMAT:
                raise DatasetError("not an icnnopf dataset file")
            if header.get("version") != DATASET_VERSION:
                raise DatasetError(f"dataset version {header.get('version')} unsupported "
                                   f"(expected {DATASET_VERSION})")
            arr = {name: np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                   for name in header["members"]}
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError, OSError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"corrupt or truncated dataset file: {exc}") from None

    n = header["rows"]
    for name in _ARRAYS:
        if arr[name].shape[0] != n:
            raise DatasetError(f"array {name} has {arr[name].shape[0]} rows, header says {n}")
    split = {k: arr[f"split_{k}"] for k in ("train", "val", "test")}
    allidx = np.sort(np.concatenate(list(split.values())))
    if not np.array_equal(allidx, np.arange(n)):
        raise DatasetError("splits are not a partition of the rows")
    norms = {tag: NormStats(arr[f"norm_{tag}_in_shift"], arr[f"norm_{tag}_in_scale"], arr[f"norm_{tag}_out_scale"])
             for tag in ("v", "p")}
    s = header["sampler"]
    return LabeledDataset(
        case_id=header["case_id"], **{name: arr[name] for name in _ARRAYS}, split=split,
        norm_v=norms["v"], norm_p=norms["p"], seed=header["seed"],
        sampler=SamplerSpec(tuple(s["load_scale"]), tuple(s["p_ctrl"]), tuple(s["q_ctrl"])),
        dropped=header["dropped"],
    )
