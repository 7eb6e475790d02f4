"""Fixed-step sampler ODE integration with kinetic-energy instrumentation.

Batch runs are split into fixed-size blocks whose geometry never depends on
the worker count, and every block draws its own rows from the counter-based
source stream, so tables are bit-identical for 1 or many workers.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Dataset, SourceKernel, sample_source

# Rows per work unit; fixed (not tied to worker count) so that array shapes,
# and therefore bits, are identical however blocks are scheduled.
BLOCK_SIZE = 8192

_DIVERGENCE_LIMIT = 1e300

_METHODS = ("euler", "rk4")


class IntegrationDivergedError(RuntimeError):
    """A state became non-finite or left the representable range."""

    def __init__(self, step_index: int, sample_index: int | None = None):
        self.step_index = step_index
        self.sample_index = sample_index
        loc = f"step {step_index}"
        if sample_index is not None:
            loc += f", sample {sample_index}"
        super().__init__(f"integration diverged at {loc}")


@dataclass(frozen=True)
class IntegratorConfig:
    """Explicit fixed-step scheme on the uniform grid [0, t_end]."""

    method: str = "rk4"
    steps: int = 256
    t_end: float = 0.99

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.t_end < 1.0:
            raise ValueError("t_end must lie in (0, 1)")

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.steps + 1)


def kinetic_energy(v: np.ndarray) -> np.ndarray:
    """Squared Euclidean norm over the coordinate axis."""
    return np.einsum("...d,...d->...", v, v)


def energy_quadrature(times: np.ndarray, kinetic: np.ndarray) -> np.ndarray:
    """Trapezoid rule along the last axis; the one definition of E_T."""
    return np.trapezoid(kinetic, times, axis=-1)


@dataclass(frozen=True)
class Trajectory:
    """One integrated path with per-node velocity and energy records."""

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    kinetic: np.ndarray
    integrated_energy: float


def _check_domain(field, config: IntegratorConfig) -> None:
    t_max = getattr(field, "t_max", None)
    if t_max is not None and config.t_end > t_max:
        raise ValueError(f"t_end={config.t_end} exceeds the field domain t_max={t_max}")


def _run_block(field, Z, config: IntegratorConfig, keep_states: bool, sample_offset: int):
    """Integrate a (B, d) block.

    Returns (kinetic (B, S+1), final states (B, d), states, velocities);
    the last two are (S+1, B, d) when keep_states, else None.
    """
    times = config.grid()
    steps = config.steps
    B, d = Z.shape
    kin = np.empty((B, steps + 1))
    states = np.empty((steps + 1, B, d)) if keep_states else None
    vels = np.empty((steps + 1, B, d)) if keep_states else None
    rk4 = config.method == "rk4"

    def check(Znew, step):
        bad = ~np.isfinite(Znew) | (np.abs(Znew) > _DIVERGENCE_LIMIT)
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise IntegrationDivergedError(step, sample_offset + row)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        v = field.velocity(times[0], Z)
        kin[:, 0] = kinetic_energy(v)
        if keep_states:
            states[0] = Z
            vels[0] = v
        for i in range(steps):
            t0, t1 = times[i], times[i + 1]
            h = t1 - t0
            if rk4:
                k1 = v
                k2 = field.velocity(t0 + 0.5 * h, Z + (0.5 * h) * k1)
                k3 = field.velocity(t0 + 0.5 * h, Z + (0.5 * h) * k2)
                k4 = field.velocity(t1, Z + h * k3)
                Z = Z + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            else:
                Z = Z + h * v
            check(Z, i + 1)
            v = field.velocity(t1, Z)
            kin[:, i + 1] = kinetic_energy(v)
            if keep_states:
                states[i + 1] = Z
                vels[i + 1] = v
    return kin, Z, states, vels


def integrate(field, x0: np.ndarray, config: IntegratorConfig) -> Trajectory:
    """Integrate dz/dt = v(t, z) from (0, x0) to t_end on a uniform grid.

    The recorded velocity at each node is the field value there (the first
    RK4 stage), and integrated_energy is ``energy_quadrature`` of the
    recorded kinetic values.
    """
    _check_domain(field, config)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("x0 must be a single d-vector")
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    kin, _, states, vels = _run_block(field, x0[None, :], config, True, 0)
    times = config.grid()
    kinetic = kin[0]
    return Trajectory(
        times=times,
        states=states[:, 0, :],
        velocities=vels[:, 0, :],
        kinetic=kinetic,
        integrated_energy=float(energy_quadrature(times, kinetic)),
    )


@dataclass(frozen=True)
class EnergyTable:
    """Per-trajectory integrated energy plus kinetic energy at probe times."""

    e_total: np.ndarray
    probe_times: tuple
    probe_kinetic: np.ndarray

    def __len__(self) -> int:
        return self.e_total.shape[0]

    def column_labels(self) -> list[str]:
        return ["sample_index", "E_T"] + [f"K_t@{t:.17g}" for t in self.probe_times]

    def write_csv(self, fobj, metadata: dict | None = None) -> None:
        if metadata:
            tags = " ".join(f"{k}={v}" for k, v in metadata.items())
            fobj.write(f"# {tags}\n")
        fobj.write(",".join(self.column_labels()) + "\n")
        for i in range(len(self)):
            cells = [str(i), format(self.e_total[i], ".17g")]
            cells += [format(k, ".17g") for k in self.probe_kinetic[i]]
            fobj.write(",".join(cells) + "\n")

    def to_csv(self, path, metadata: dict | None = None) -> None:
        with open(path, "w", newline="\n") as f:
            self.write_csv(f, metadata)

    def to_csv_text(self, metadata: dict | None = None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, metadata)
        return buf.getvalue()


def read_energy_csv(path) -> EnergyTable:
    """Read a table written by ``EnergyTable.to_csv`` (comment lines skipped)."""
    probe_times: list[float] = []
    e_vals: list[float] = []
    k_vals: list[list[float]] = []
    with open(path) as f:
        header = None
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                if header[:2] != ["sample_index", "E_T"]:
                    raise ValueError(f"{path}: unexpected energy CSV header {header[:2]}")
                probe_times = [float(c.split("@", 1)[1]) for c in header[2:]]
                continue
            cells = line.split(",")
            e_vals.append(float(cells[1]))
            k_vals.append([float(c) for c in cells[2:]])
    if header is None:
        raise ValueError(f"{path}: empty energy CSV")
    return EnergyTable(
        e_total=np.asarray(e_vals),
        probe_times=tuple(probe_times),
        probe_kinetic=np.asarray(k_vals).reshape(len(e_vals), len(probe_times)),
    )


def _probe_indices(config: IntegratorConfig, probe_times) -> np.ndarray:
    grid = config.grid()
    idx = []
    for p in probe_times:
        hits = np.nonzero(np.abs(grid - p) <= 1e-12)[0]
        if hits.size == 0:
            raise ValueError(f"probe time {p} is not a grid node of {config}")
        idx.append(int(hits[0]))
    return np.asarray(idx, dtype=np.intp)


def batch_energies(
    field,
    kernel: SourceKernel,
    config: IntegratorConfig,
    seed: int,
    count: int,
    probe_times=(),
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> EnergyTable:
    """Integrate ``count`` source draws and collect (E_T, K_t at probes).

    Row i is a pure function of (seed, i, config): blocks of ``block_size``
    rows are integrated independently and reassembled by index, so any worker
    count yields the same table.
    """
    _check_domain(field, config)
    if count < 1:
        raise ValueError("count must be >= 1")
    pidx = _probe_indices(config, probe_times)
    times = config.grid()
    e_total = np.empty(count)
    probe_kin = np.empty((count, len(pidx)))

    def run(start: int, n: int):
        Z0 = sample_source(kernel, seed, n, start=start)
        kin, _, _, _ = _run_block(field, Z0, config, False, start)
        return start, n, energy_quadrature(times, kin), kin[:, pidx]

    blocks = [(s, min(block_size, count - s)) for s in range(0, count, block_size)]
    if workers <= 1:
        outs = [run(s, n) for s, n in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda b: run(*b), blocks))
    for start, n, e, k in outs:
        e_total[start : start + n] = e
        probe_kin[start : start + n] = k
    return EnergyTable(
        e_total=e_total,
        probe_times=tuple(float(p) for p in probe_times),
        probe_kinetic=probe_kin,
    )


def batch_endpoints(
    field,
    x0: np.ndarray,
    config: IntegratorConfig,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
    sample_offset: int = 0,
) -> np.ndarray:
    """End states psi_{t_end}(x0) for a (B, d) batch of starting points.

    Same fixed blocking as ``batch_energies``, so results are independent of
    the worker count.
    """
    _check_domain(field, config)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError("x0 must be a (B, d) batch")
    count = x0.shape[0]
    out = np.empty_like(x0)

    def run(start: int, n: int):
        _, zf, _, _ = _run_block(
            field, x0[start : start + n], config, False, sample_offset + start
        )
        return start, n, zf

    blocks = [(s, min(block_size, count - s)) for s in range(0, count, block_size)]
    if workers <= 1:
        outs = [run(s, n) for s, n in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda b: run(*b), blocks))
    for start, n, zf in outs:
        out[start : start + n] = zf
    return out


def trajectory_norm_bound_check(trajectory: Trajectory, dataset: Dataset) -> bool:
    """Check |psi_t| <= (|x0| + M t) / (1 - t) at every node, with fp slack.

    The bound is a theorem for straight-path fields, so a violation flags an
    integrator defect rather than an unlucky draw.
    """
    x0_norm = float(np.linalg.norm(trajectory.states[0]))
    eps = 1e-8 * (1.0 + x0_norm)
    t = trajectory.times
    bound = (x0_norm + dataset.max_norm * t) / (1.0 - t) + eps
    norms = np.linalg.norm(trajectory.states, axis=1)
    return bool(np.all(norms <= bound))
