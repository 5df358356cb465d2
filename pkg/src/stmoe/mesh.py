"""Analytical planner for data / model / expert parallel meshes.

Nothing here runs on devices: the functions return mesh shapes, byte counts
and rough step-time estimates for comparing configurations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

from stmoe.errors import ConfigError


@dataclass(frozen=True)
class MeshSpec:
    cores: int
    data: int
    model: int
    num_experts: int
    outer: int | None = None
    inner: int | None = None

    @property
    def is_3d(self) -> bool:
        return self.outer is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.outer, self.inner, self.model) if self.is_3d else (self.data, self.model)

    @property
    def experts_per_inner_row(self) -> float:
        rows = self.inner if self.is_3d else self.data
        return self.num_experts / rows

    def check(self) -> None:
        if self.data * self.model != self.cores:
            raise AssertionError(f"d*m = {self.data * self.model} != n = {self.cores}")
        if self.is_3d:
            if self.outer * self.inner * self.model != self.cores:
                raise AssertionError("o*i*m != n")
            if self.inner != self.num_experts or self.inner * self.outer != self.data:
                raise AssertionError("3D mesh needs i = experts and i*o = d")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = "3d" if self.is_3d else "2d"
        d["shape"] = list(self.shape)
        return d


def _factorizations(n: int) -> list[tuple[int, int]]:
    return [(d, n // d) for d in range(1, n + 1) if n % d == 0]


def plan_mesh(cores: int, num_experts: int, data_parallel: int, model_parallel: int,
              batch: int | None = None) -> MeshSpec:
    """2D ``d x m`` mesh, or 3D ``o x i x m`` when there are fewer experts than rows."""
    if min(cores, num_experts, data_parallel, model_parallel) < 1:
        raise ConfigError("mesh", "all sizes must be positive")
    if data_parallel * model_parallel != cores:
        valid = ", ".join(f"{d}x{m}" for d, m in _factorizations(cores))
        raise ConfigError("mesh", f"{data_parallel}x{model_parallel} != {cores} cores; "
                                  f"valid d x m factorizations: {valid}")
    if batch is not None and batch % data_parallel:
        raise ConfigError("mesh", f"batch {batch} is not divisible by {data_parallel} data rows")
    if num_experts >= data_parallel:
        if num_experts % data_parallel:
            warnings.warn(f"{num_experts} experts do not split evenly over {data_parallel} rows",
                          stacklevel=2)
        if num_experts > data_parallel:
            warnings.warn(f"{num_experts / data_parallel:g} experts per core row; "
                          "more than one expert per core lowers operational intensity",
                          stacklevel=2)
        spec = MeshSpec(cores, data_parallel, model_parallel, num_experts)
    else:
        if data_parallel % num_experts:
            valid = [i for i in range(1, data_parallel + 1) if data_parallel % i == 0]
            raise ConfigError("mesh", f"{num_experts} experts do not divide {data_parallel} data "
                                      f"rows; valid inner sizes: {valid}")
        spec = MeshSpec(cores, data_parallel, model_parallel, num_experts,
                        outer=data_parallel // num_experts, inner=num_experts)
    spec.check()
    return spec


def operational_intensity(b: float, h: float, e: float) -> float:
    """FLOPs per byte of the first expert matmul: ``b*h / (b + h*e)``."""
    if min(b, h, e) <= 0:
        raise ValueError("operational_intensity needs positive inputs")
    return b * h / (b + h * e)


COMM_OPS = ("all2all", "allreduce", "grad_allreduce")


def comm_cost(op: str, batch_tokens: float, d_model: float, cf: float = 1.0,
              devices: int = 1, bytes_per_scalar: float = 4.0,
              num_params: float | None = None, num_experts: int | None = None) -> float:
    """Bytes moved per step for one communication pattern.

    ``all2all``: routed token payload, ``tokens * cf * d_model``.
    ``allreduce``: model-parallel partial sums over the activations, scaled by
    ``cf`` for expert layers. ``grad_allreduce``: gradient volume, set by the
    parameter count only. ``num_experts`` is accepted and deliberately unused.
    """
    del num_experts
    if op == "all2all":
        return batch_tokens * cf * d_model * bytes_per_scalar
    if op == "allreduce":
        # ring allreduce moves 2(p-1)/p of the buffer per device
        ring = 2.0 * (devices - 1) / devices if devices > 1 else 1.0
        return ring * batch_tokens * cf * d_model * bytes_per_scalar
    if op == "grad_allreduce":
        if num_params is None:
            raise ValueError("grad_allreduce needs num_params")
        ring = 2.0 * (devices - 1) / devices if devices > 1 else 1.0
        return ring * num_params * bytes_per_scalar
    raise ValueError(f"unknown op {op!r}; expected one of {COMM_OPS}")


@dataclass
class HardwareProfile:
    flops_per_s: float = 1e14
    mem_bytes_per_s: float = 1e12
    comm_bytes_per_s: float = 1e11


@dataclass
class StepEstimate:
    seconds: float
    compute_s: float
    memory_s: float
    comm_s: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def step_time_estimate(mesh: MeshSpec, model_config, cf: float, profile: HardwareProfile,
                       batch_tokens: int, bytes_per_scalar: float = 4.0) -> StepEstimate:
    """Roofline-style per-step time: ``max(compute, memory) + comm`` per expert layer.

    An ordering tool for comparing configurations, not a predictor.
    ``model_config`` needs ``d_model``, ``d_ff``, ``num_experts`` and an
    ``num_moe_layers`` attribute (or method).
    """
    flags: list[str] = []
    d, ff = model_config.d_model, model_config.d_ff
    layers = model_config.num_moe_layers
    layers = layers() if callable(layers) else layers
    tok_per_core = batch_tokens / mesh.data
    routed = tok_per_core * cf
    # GEGLU expert: three d x ff matmuls, 2 FLOPs per MAC, split over the model axis
    flops = 2.0 * 3 * routed * d * ff / mesh.model
    weights = 3.0 * d * ff * max(1.0, model_config.num_experts / (mesh.inner or mesh.data)) / mesh.model
    bytes_mem = (weights + routed * (2 * d + 2 * ff / mesh.model)) * bytes_per_scalar
    comm = (comm_cost("all2all", tok_per_core, d, cf, mesh.cores, bytes_per_scalar) * 2
            + comm_cost("allreduce", tok_per_core, d, cf, mesh.model, bytes_per_scalar))

    def _t(amount: float, rate: float, what: str) -> float:
        if rate <= 0:
            flags.append(f"zero {what} bandwidth")
            return math.inf
        return amount / rate

    compute_s = _t(flops, profile.flops_per_s, "compute")
    memory_s = _t(bytes_mem, profile.mem_bytes_per_s, "memory")
    comm_s = _t(comm, profile.comm_bytes_per_s, "communication")
    total = layers * (max(compute_s, memory_s) + comm_s)
    if math.isinf(total):
        flags.append("infinite estimate")
    return StepEstimate(total, layers * compute_s, layers * memory_s, layers * comm_s, flags)
