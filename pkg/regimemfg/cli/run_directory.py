import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from regimemfg.paths.tree import PathTree
from regimemfg.scenario.base import SpatialGrid, scenario_hash

MAGIC = b"MFGB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sII")
DIMENSION = struct.Struct("<Q")

MANIFEST_FILE = "manifest.json"
SCENARIO_FILE = "scenario.scn"
DIAGNOSTICS_FILE = "diagnostics.json"
CONVERGENCE_FILE = "convergence.csv"
STRATEGY_FILE = "strategy.bin"
ZETA_FILE = "zeta.bin"
THETA_DIAGONAL_FILE = "theta_diagonal.bin"
THETA_TAU_FILE = "theta_tau.bin"
VALIDATION_FILE = "validation.json"

TENSOR_COLUMNS = ("tau_index", "time_index", "node_id", "path_signature", "x", "value")
CONVERGENCE_COLUMNS = ("iteration", "distance")

PathLike = Union[str, Path]


class RunDirectoryError(ValueError):
    pass


def file_checksum(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for block in iter(lambda: fp.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_binary(path: PathLike, array: np.ndarray) -> None:
    """
    ``MFGB`` magic, format version and rank as little-endian uint32, the dimensions as uint64, then the values as
    little-endian float64 in row-major order.
    """
    values = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fp:
        fp.write(HEADER.pack(MAGIC, FORMAT_VERSION, values.ndim))
        for size in values.shape:
            fp.write(DIMENSION.pack(size))
        fp.write(values.tobytes(order="C"))


def read_binary(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as error:
        raise RunDirectoryError(f"Cannot read {path}: {error}") from None
    if len(data) < HEADER.size:
        raise RunDirectoryError(f"{path} is too short for a binary tensor")
    magic, version, ndim = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RunDirectoryError(f"{path} does not start with {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise RunDirectoryError(f"{path} has format version {version}, expected {FORMAT_VERSION}")

    offset = HEADER.size
    shape = []
    for _ in range(ndim):
        if offset + DIMENSION.size > len(data):
            raise RunDirectoryError(f"{path} ends inside its header")
        shape.append(DIMENSION.unpack_from(data, offset)[0])
        offset += DIMENSION.size
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(data) - offset != expected:
        raise RunDirectoryError(f"{path} holds {len(data) - offset} value bytes, expected {expected}")
    if expected == 0:
        return np.zeros(shape)
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(float)


def _format(value: float) -> str:
    return repr(float(value))


def tensor_rows(
    tree: PathTree, grid: SpatialGrid, values: np.ndarray, tau_index: Optional[int] = None
) -> Iterator[Tuple[str, ...]]:
    """
    CSV rows for one ``(n_nodes, n_points)`` tensor.  Without ``tau_index`` the row's own time index is written, as
    for the diagonal and the strategy.  NaN rows (nodes before the slice's evaluation time) are skipped.
    """
    x = grid.x
    for node in tree.nodes:
        row = values[node.node_id]
        if np.all(np.isnan(row)):
            continue
        tau = node.time_index if tau_index is None else tau_index
        for j in range(grid.n_points):
            yield str(tau), str(node.time_index), str(node.node_id), node.signature, _format(x[j]), _format(row[j])


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def write_tensor_csv(
    path: PathLike, tree: PathTree, grid: SpatialGrid, slices: Sequence[Tuple[Optional[int], np.ndarray]]
) -> None:
    def rows():
        for tau_index, values in slices:
            yield from tensor_rows(tree, grid, values, tau_index)

    write_csv(path, TENSOR_COLUMNS, rows())


def write_convergence_csv(path: PathLike, distances: Sequence[float]) -> None:
    write_csv(path, CONVERGENCE_COLUMNS, ((str(i), _format(d)) for i, d in enumerate(distances, start=1)))


def read_convergence_csv(path: PathLike) -> List[float]:
    try:
        with open(path, encoding="utf-8", newline="") as fp:
            rows = list(csv.reader(fp))
    except OSError as error:
        raise RunDirectoryError(f"Cannot read {path}: {error}") from None
    if not rows or tuple(rows[0]) != CONVERGENCE_COLUMNS:
        raise RunDirectoryError(f"{path} is not a convergence table")
    return [float(distance) for _, distance in rows[1:]]


def _json_encoder(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    elif isinstance(value, np.generic):
        return value.item()
    elif isinstance(value, Path):
        return str(value)
    else:
        raise TypeError(f"Object of type {value.__class__.__name__} is not JSON serializable")  # pragma: no cover


def write_json(path: PathLike, data) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(data, fp, indent=2, sort_keys=True, default=_json_encoder)
        fp.write("\n")


def read_json(path: PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fp:
            return json.load(fp)
    except OSError as error:
        raise RunDirectoryError(f"Cannot read {path}: {error}") from None
    except json.JSONDecodeError as error:
        raise RunDirectoryError(f"{path} is not valid JSON: {error}") from None


@dataclass
class RunManifest:
    scenario_hash: str
    seed: int
    tool_version: str
    command: List[str]
    started: str
    finished: Optional[str] = None
    status: Optional[str] = None
    retained_taus: List[int] = field(default_factory=list)
    solver: Dict[str, float] = field(default_factory=dict)
    files: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        try:
            return cls(**data)
        except TypeError as error:
            raise RunDirectoryError(f"Malformed manifest: {error}") from None


class RunDirectory:
    """
    The files of one solver run.  Everything written through ``write_*`` is checksummed into the manifest when the
    run is finished.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self._written = []  # type: List[str]

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    def create(self) -> "RunDirectory":
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as error:
            raise RunDirectoryError(f"Cannot create run directory {self.path}: {error}") from None
        return self

    def _record(self, name: str) -> Path:
        if name not in self._written:
            self._written.append(name)
        return self.path / name

    def write_text(self, name: str, text: str) -> None:
        with open(self._record(name), "w", encoding="utf-8", newline="\n") as fp:
            fp.write(text)

    def write_binary(self, name: str, array: np.ndarray) -> None:
        write_binary(self._record(name), array)

    def write_json(self, name: str, data) -> None:
        write_json(self._record(name), data)

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
        write_csv(self._record(name), columns, rows)

    def track(self, name: str) -> None:
        self._record(name)

    def write_convergence(self, distances: Sequence[float]) -> None:
        write_convergence_csv(self._record(CONVERGENCE_FILE), distances)

    def finish(self, manifest: RunManifest) -> RunManifest:
        manifest.finished = datetime.now().isoformat()
        manifest.files = {name: file_checksum(self.path / name) for name in sorted(self._written)}
        write_json(self.path / MANIFEST_FILE, manifest.to_dict())
        logger.info(f"Run directory {self.path} written ({len(manifest.files)} files)")
        return manifest

    def extend(self, manifest: RunManifest) -> RunManifest:
        """
        Add the files written since the manifest was last saved to its inventory.
        """
        for name in self._written:
            manifest.files[name] = file_checksum(self.path / name)
        manifest.files = dict(sorted(manifest.files.items()))
        write_json(self.path / MANIFEST_FILE, manifest.to_dict())
        return manifest

    def manifest(self) -> RunManifest:
        if not (self.path / MANIFEST_FILE).is_file():
            raise RunDirectoryError(f"{self.path} has no {MANIFEST_FILE}")
        return RunManifest.from_dict(read_json(self.path / MANIFEST_FILE))

    def verify(self) -> RunManifest:
        """
        Check that every file of the inventory exists with its recorded checksum and that the stored scenario still
        hashes to the manifest's value.
        """
        manifest = self.manifest()
        for name, checksum in manifest.files.items():
            path = self.path / name
            if not path.is_file():
                raise RunDirectoryError(f"Missing artifact {name} in {self.path}")
            if file_checksum(path) != checksum:
                raise RunDirectoryError(f"Checksum mismatch for {name} in {self.path}")
        scenario_path = self.path / SCENARIO_FILE
        if not scenario_path.is_file():
            raise RunDirectoryError(f"Missing artifact {SCENARIO_FILE} in {self.path}")
        if scenario_hash(scenario_path.read_text(encoding="utf-8")) != manifest.scenario_hash:
            raise RunDirectoryError(f"Stored scenario does not match the manifest hash in {self.path}")
        return manifest

    def read_binary(self, name: str) -> np.ndarray:
        path = self.path / name
        if not path.is_file():
            raise RunDirectoryError(f"Missing artifact {name} in {self.path}")
        return read_binary(path)
