from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Mapping
from typing import Optional
from typing import Union

from ddbounds.driver import BenchmarkProblem
from ddbounds.driver import cracked_benchmark
from ddbounds.driver import square_benchmark
from ddbounds.fem import DEFAULT_QUADRATURE_DEGREE
from ddbounds.fem import LoadSet
from ddbounds.fem import Material
from ddbounds.mesh import Partition
from ddbounds.mesh import load_mesh
from ddbounds.mesh import load_partition
from ddbounds.mesh import partition_regular
from ddbounds.utils._expr import compile_vector_expression

_LOGGER = logging.getLogger(__name__)

_KNOWN_KEYS = frozenset({"mesh", "material", "loads", "quadrature_degree", "partition", "qoi"})


def config_hash(payload: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form (sorted keys, compact separators)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class ProblemConfig:
    """A problem and its partition, as described by a configuration file.

    Arguments:
        problem: The problem.
        partition: The partition of its mesh.
        payload: The parsed configuration.
        digest: `config_hash(payload)`.
    """

    problem: BenchmarkProblem
    partition: Partition
    payload: Mapping[str, Any]
    digest: str


def _material(payload: Optional[Mapping[str, Any]]) -> Optional[Material]:
    if payload is None:
        return None
    return Material(
        young_modulus=float(payload["young_modulus"]),
        poisson_ratio=float(payload["poisson_ratio"]),
        hypothesis=payload.get("hypothesis", "plane_strain"),
    )


def _loads(payload: Mapping[str, Any]) -> LoadSet:
    body = payload.get("body_force")
    dirichlet = payload.get("dirichlet_values")
    return LoadSet(
        body_force=None if body is None else compile_vector_expression(body),
        tractions={tag: compile_vector_expression(v) for tag, v in payload.get("tractions", {}).items()},
        dirichlet_values=None if dirichlet is None else compile_vector_expression(dirichlet),
    )


def _problem(payload: Mapping[str, Any], base: Path) -> BenchmarkProblem:
    entry = payload["mesh"]
    material = _material(payload.get("material"))
    if entry.get("builtin") == "square":
        problem = square_benchmark(int(entry["subdivisions"]), float(entry.get("half_width", 1.0)), material)
    elif entry.get("builtin") == "cracked":
        problem = cracked_benchmark(int(entry.get("cells_per_unit", 4)))
        if material is not None:
            problem = problem.with_options(material=material)
    elif "file" in entry:
        if material is None or "loads" not in payload:
            msg = "A mesh file requires both `material` and `loads`."
            raise ValueError(msg)
        mesh_path = base / entry["file"]
        problem = BenchmarkProblem(
            name=mesh_path.stem, mesh=load_mesh(mesh_path), material=material, loads=_loads(payload["loads"])
        )
    else:
        msg = f"`mesh` must hold `builtin` (square or cracked) or `file`. Found {dict(entry)}"
        raise ValueError(msg)

    if "loads" in payload and "file" not in entry:
        problem = problem.with_options(loads=_loads(payload["loads"]), exact=None)

    qoi = payload.get("qoi")
    overrides: Dict[str, Any] = {"quadrature_degree": int(payload.get("quadrature_degree", DEFAULT_QUADRATURE_DEGREE))}
    if qoi is not None:
        overrides.update(qoi_region=qoi["region"], qoi_kind=qoi.get("kind", "mean_sxx"))
    return problem.with_options(**overrides)


def _partition(payload: Optional[Mapping[str, Any]], problem: BenchmarkProblem, base: Path) -> Partition:
    if payload is None:
        return partition_regular(problem.mesh, (1, 1))
    if "grid" in payload:
        nx, ny = payload["grid"]
        return partition_regular(problem.mesh, (int(nx), int(ny)))
    if "file" in payload:
        return load_partition(problem.mesh, base / payload["file"])
    msg = f"`partition` must hold `grid` or `file`. Found {dict(payload)}"
    raise ValueError(msg)


def load_problem_config(path: Union[str, Path]) -> ProblemConfig:
    """Reads a JSON problem configuration.

    Expressions use `x`, `y`, numbers, parentheses and `+ - * / ^`. Relative file paths are resolved against the
    directory of the configuration file.

    Raises:
        OSError: If the file cannot be read.
        ValueError: If the content is not valid JSON or does not describe a problem.

    Examples:
        ```json
        {
            "mesh": {"builtin": "square", "subdivisions": 12, "half_width": 1.0},
            "partition": {"grid": [3, 3]},
            "qoi": {"region": "omega", "kind": "mean_sxx"}
        }
        ```
    """
    source = Path(path)
    payload = json.loads(source.read_text())
    if not isinstance(payload, dict) or "mesh" not in payload:
        msg = f"Configuration {source} must be a JSON object with a `mesh` entry."
        raise ValueError(msg)
    unknown = set(payload) - _KNOWN_KEYS
    if unknown:
        msg = f"Unknown configuration keys {sorted(unknown)}. Allowed keys are {sorted(_KNOWN_KEYS)}"
        raise ValueError(msg)

    try:
        problem = _problem(payload, source.parent)
        partition = _partition(payload.get("partition"), problem, source.parent)
    except KeyError as exc:
        msg = f"Missing configuration entry {exc} in {source}"
        raise ValueError(msg) from exc

    digest = config_hash(payload)
    _LOGGER.info(
        "Loaded %s: %s elements, %s subdomains, hash %s",
        source,
        problem.mesh.n_elements,
        partition.n_subdomains,
        digest[:12],
    )
    return ProblemConfig(problem=problem, partition=partition, payload=payload, digest=digest)
