"""Ground-truth datasets, their on-disk format, and TNTP network/trip parsing."""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .games import MatrixGame, RoadNetwork, TrafficGame, sample_context_matrix, vi_certificate
from .numerics import RngStream, ShapeError
from .solvers import DivergenceError

CERTIFICATE_TOL = 1e-5
DATA_FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class InvalidInputError(ValueError):
    pass


class GenerationError(RuntimeError):
    """A ground-truth solve failed for a specific context."""

    def __init__(self, message, index=None, context=None):
        super().__init__(message)
        self.index, self.context = index, context


# -- TNTP parsing -------------------------------------------------------------------

@dataclass(frozen=True)
class TntpArc:
    init_node: int
    term_node: int
    capacity: float
    length: float
    free_flow_time: float
    b: float
    power: float
    speed: float
    toll: float
    link_type: int


_META = re.compile(r"^\s*<([^>]+)>\s*(.*?)\s*$")


def _split_metadata(text: str):
    """Return ``(meta, body_lines)``; body lines keep their 1-based line numbers."""
    meta = {}
    lines = text.splitlines()
    end = None
    for i, line in enumerate(lines):
        m = _META.match(line)
        if m is None:
            continue
        tag = m.group(1).strip().upper()
        if tag == "END OF METADATA":
            end = i
            break
        meta[tag] = m.group(2)
    if end is None:
        raise FormatError("missing metadata tag <END OF METADATA>")
    body = [(i + 1, ln) for i, ln in enumerate(lines[end + 1:], start=end + 1)]
    return meta, body


def _meta_number(meta, tag, cast):
    if tag not in meta:
        raise FormatError(f"missing metadata tag <{tag}>")
    try:
        return cast(meta[tag].split()[0])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"metadata tag <{tag}> has invalid value {meta[tag]!r}") from exc


def _strip_comment(line: str) -> str:
    return line.split("~", 1)[0].strip()


def parse_tntp_net(text: str):
    """Parse a TNTP ``_net`` file into ``(node_count, arcs)``."""
    meta, body = _split_metadata(text)
    n_nodes = _meta_number(meta, "NUMBER OF NODES", int)
    n_links = _meta_number(meta, "NUMBER OF LINKS", int)
    _meta_number(meta, "FIRST THRU NODE", int)
    arcs = []
    for lineno, raw in body:
        line = _strip_comment(raw)
        if not line:
            continue
        if not line.endswith(";"):
            raise FormatError(f"line {lineno}: arc row must end with ';'")
        fields = line[:-1].split()
        if len(fields) != 10:
            raise FormatError(f"line {lineno}: expected 10 arc fields, got {len(fields)}")
        try:
            i, j = int(fields[0]), int(fields[1])
            nums = [float(v) for v in fields[2:9]]
            link_type = int(float(fields[9]))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        if not (1 <= i <= n_nodes and 1 <= j <= n_nodes):
            raise FormatError(f"line {lineno}: node id outside 1..{n_nodes}")
        if nums[0] <= 0:
            raise FormatError(f"line {lineno}: capacity must be positive")
        if nums[2] < 0:
            raise FormatError(f"line {lineno}: free-flow time must be nonnegative")
        arcs.append(TntpArc(i, j, *nums, link_type))
    if len(arcs) != n_links:
        raise FormatError(f"<NUMBER OF LINKS> is {n_links} but {len(arcs)} arcs were read")
    return n_nodes, arcs


_ENTRY = re.compile(r"^\s*(\d+)\s*:\s*([-+0-9.eE]+)\s*$")


def parse_tntp_trips(text: str):
    """Parse a TNTP ``_trips`` file into a list of ``(origin, destination, demand)``.

    Zero-demand entries and self-trips are dropped. The checksum against
    ``<TOTAL OD FLOW>`` counts every entry of the file.
    """
    meta, body = _split_metadata(text)
    n_zones = _meta_number(meta, "NUMBER OF ZONES", int)
    total = _meta_number(meta, "TOTAL OD FLOW", float)
    trips = []
    parsed = 0.0
    origin = None
    for lineno, raw in body:
        line = _strip_comment(raw)
        if not line:
            continue
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"line {lineno}: malformed origin header {line!r}")
            try:
                origin = int(parts[1])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: malformed origin header {line!r}") from exc
            if not 1 <= origin <= n_zones:
                raise FormatError(f"line {lineno}: origin {origin} outside 1..{n_zones}")
            continue
        if origin is None:
            raise FormatError(f"line {lineno}: destination entries before any 'Origin' header")
        for entry in line.split(";"):
            if not entry.strip():
                continue
            m = _ENTRY.match(entry)
            if m is None:
                raise FormatError(f"line {lineno}: malformed entry {entry.strip()!r}")
            dest, q = int(m.group(1)), float(m.group(2))
            if not 1 <= dest <= n_zones:
                raise FormatError(f"line {lineno}: destination {dest} outside 1..{n_zones}")
            if q < 0:
                raise FormatError(f"line {lineno}: negative demand {q}")
            parsed += q
            # zero demands carry no flow; self-trips never use the network
            if q > 0 and dest != origin:
                trips.append((origin, dest, q))
    if abs(parsed - total) > 1e-6 * max(abs(total), 1.0):
        raise FormatError(f"<TOTAL OD FLOW> is {total} but entries sum to {parsed}")
    return trips


def build_network(arcs, trips, context_dim: int, eps_cap: float, bpr_coeff: float, rng: RngStream,
                  node_count: int | None = None, name: str = "tntp") -> RoadNetwork:
    """Road network with one demand vector per OD pair and a freshly sampled context matrix."""
    if node_count is None:
        node_count = max(max(a.init_node, a.term_node) for a in arcs)
    ne = len(arcs)
    N = np.zeros((node_count, ne))
    for e, a in enumerate(arcs):
        N[a.init_node - 1, e] = -1.0
        N[a.term_node - 1, e] = 1.0
    demands = np.zeros((len(trips), node_count))
    for k, (o, dst, q) in enumerate(trips):
        if not (1 <= o <= node_count and 1 <= dst <= node_count):
            raise InvalidInputError(f"OD pair ({o}, {dst}) references a node outside 1..{node_count}")
        demands[k, o - 1] = -q
        demands[k, dst - 1] = q
    free_flow = np.array([a.free_flow_time for a in arcs])
    cap = np.array([a.capacity for a in arcs])
    W = sample_context_matrix(ne, context_dim, rng)
    return RoadNetwork(N, free_flow, cap, demands, W, eps_cap, bpr_coeff, context_dim, name=name,
                       od_pairs=list(trips))


def load_tntp_game(net_path, trips_path, context_dim: int = 10, eps_cap: float = 0.3,
                   bpr_coeff: float = 0.5, seed: int = 0) -> TrafficGame:
    """Read a TNTP network/trips pair from disk and wrap it as a traffic game."""
    texts = []
    for p in (net_path, trips_path):
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"TNTP file not found: {p}")
        texts.append(p.read_text(encoding="utf-8", errors="replace"))
    node_count, arcs = parse_tntp_net(texts[0])
    trips = parse_tntp_trips(texts[1])
    net = build_network(arcs, trips, context_dim, eps_cap, bpr_coeff, RngStream(seed, "tntp/W"),
                        node_count=node_count, name=Path(net_path).stem.replace("_net", ""))
    return TrafficGame(net)


def game_from_params(p: dict):
    kind = p.get("kind")
    if kind == "matrix":
        return MatrixGame.from_params(p)
    if kind == "traffic":
        return TrafficGame.from_params(p)
    raise FormatError(f"unknown game kind {kind!r}")


# -- datasets -------------------------------------------------------------------------

@dataclass
class EquilibriumDataset:
    """Contexts ``d`` (n, m) with equilibria ``x_star`` (n, action_dim).

    The last ``n_test`` samples form the test split. ``certificates`` holds,
    per sample, the worst normalized VI residual found at generation
    (``max(0, -min_y cert)``). Traffic datasets also carry the per-OD block
    flows in ``blocks`` (n, K, action_dim).
    """

    d: np.ndarray
    x_star: np.ndarray
    n_test: int
    provenance: dict
    game_params: dict
    certificates: np.ndarray
    blocks: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.d.ndim != 2 or self.x_star.ndim != 2 or len(self.d) != len(self.x_star):
            raise ShapeError(f"inconsistent sample arrays {self.d.shape} and {self.x_star.shape}")
        if not 0 <= self.n_test <= len(self.d):
            raise ValueError("n_test must lie in [0, n]")

    @property
    def context_dim(self) -> int:
        return self.d.shape[1]

    @property
    def action_dim(self) -> int:
        return self.x_star.shape[1]

    def __len__(self):
        return len(self.d)

    @property
    def n_train(self) -> int:
        return len(self.d) - self.n_test

    def train_arrays(self):
        return self.d[:self.n_train], self.x_star[:self.n_train]

    def test_arrays(self):
        return self.d[self.n_train:], self.x_star[self.n_train:]

    def game(self):
        return game_from_params(self.game_params)


def default_test_size(n: int) -> int:
    """Test share of one eleventh (e.g. 1100 -> 100, 5500 -> 500)."""
    return n // 11


def _solve_one(game, d, tol, max_iter):
    if isinstance(game, TrafficGame):
        _, blocks, _ = game.solve(d[None], tol=tol, max_iter=max_iter)
        # clip round-off negatives so stored flows are exactly nonnegative
        blk = np.maximum(blocks[0], 0.0)
        return blk.sum(axis=0), blk
    x, _ = game.solve(d[None], tol=tol, max_iter=max_iter)
    return x[0], None


def certify(game, x, d, rng: RngStream, n_feasible: int = 100) -> float:
    """Worst VI violation of ``x`` over random feasible points and the exact linear minimizer."""
    y = game.sample_feasible(rng, n_feasible)
    g = game.gradient(x[None], d[None])
    y = np.concatenate([y, game.best_response_set(g)])
    return float(max(0.0, -vi_certificate(game, x, d, y).min()))


def generate_dataset(game, n: int, seed: int, tol: float = 1e-10, max_iter: int = 100_000,
                     n_test: int | None = None, n_certificate: int = 100) -> EquilibriumDataset:
    """Sample ``n`` contexts and solve each ground-truth VI.

    Sample ``i`` depends only on ``(seed, i)``: its context and its
    certificate points come from streams keyed by the index.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    m, na = game.context_dim, game.action_dim
    D = np.zeros((n, m))
    X = np.zeros((n, na))
    certs = np.zeros(n)
    traffic = isinstance(game, TrafficGame)
    blocks = np.zeros((n, game.constraint.K, na)) if traffic else None
    for i in range(n):
        d = game.sample_contexts(RngStream(seed, f"sample/{i}/context"), 1)[0]
        try:
            x, blk = _solve_one(game, d, tol, max_iter)
        except DivergenceError as exc:
            raise GenerationError(f"ground-truth solve failed for sample {i} (context {d.tolist()}): {exc}",
                                  i, d) from exc
        cert = certify(game, x, d, RngStream(seed, f"sample/{i}/certificate"), n_certificate)
        if cert > CERTIFICATE_TOL:
            raise GenerationError(f"sample {i} fails the VI certificate ({cert:.3e})", i, d)
        D[i], X[i], certs[i] = d, x, cert
        if traffic:
            blocks[i] = blk
    provenance = {"seed": int(seed), "game_digest": game.digest(), "solver_tol": tol,
                  "solver_max_iter": int(max_iter), "n_certificate": int(n_certificate)}
    return EquilibriumDataset(D, X, default_test_size(n) if n_test is None else n_test, provenance,
                              game.params(), certs, blocks)


# -- files ------------------------------------------------------------------------------

SPLIT_FILES = {"train": "train.csv", "test": "test.csv"}
META_NAME = "metadata.json"
BLOCKS_NAME = "blocks.npy"


def _fmt(v: float) -> str:
    return format(v, ".17g")


def _header(m: int, na: int) -> list:
    return [f"d_{j + 1}" for j in range(m)] + [f"x_{j + 1}" for j in range(na)]


def _table_bytes(d, x) -> bytes:
    rows = [",".join(_header(d.shape[1], x.shape[1]))]
    rows += [",".join(map(_fmt, np.concatenate([di, xi]))) for di, xi in zip(d, x)]
    return ("\n".join(rows) + "\n").encode("utf-8")


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _parse_table(raw: bytes, name: str, m: int, na: int) -> np.ndarray:
    lines = raw.decode("utf-8").splitlines()
    if not lines:
        raise FormatError(f"{name}: empty file")
    if lines[0].split(",") != _header(m, na):
        raise FormatError(f"{name}: header does not match metadata dims (context {m}, action {na})")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        vals = line.split(",")
        if len(vals) != m + na:
            raise FormatError(f"{name} line {lineno}: expected {m + na} columns, got {len(vals)}")
        try:
            rows.append([float(v) for v in vals])
        except ValueError as exc:
            raise FormatError(f"{name} line {lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(len(rows), m + na)


def write_dataset(ds: EquilibriumDataset, path) -> Path:
    """Write ``train.csv``, ``test.csv``, ``metadata.json`` and (traffic only) ``blocks.npy`` into ``path``.

    Each table has the header ``d_1..d_m,x_1..x_n`` and one sample per line
    with 17 significant digits, so values round-trip exactly.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for split, (d, x) in (("train", ds.train_arrays()), ("test", ds.test_arrays())):
        raw = _table_bytes(d, x)
        (out / SPLIT_FILES[split]).write_bytes(raw)
        digests[split] = _sha(raw)
    meta = {"format_version": DATA_FORMAT_VERSION, "context_dim": ds.context_dim, "action_dim": ds.action_dim,
            "n_train": ds.n_train, "n_test": ds.n_test, "sha256": digests,
            "provenance": ds.provenance, "certificates": [_fmt(c) for c in ds.certificates],
            "game": ds.game_params}
    if ds.blocks is not None:
        np.save(out / BLOCKS_NAME, ds.blocks, allow_pickle=False)
        meta["blocks_file"] = BLOCKS_NAME
    (out / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_dataset(path) -> EquilibriumDataset:
    src = Path(path)
    try:
        meta = json.loads((src / META_NAME).read_text(encoding="utf-8"))
        raws = {split: (src / name).read_bytes() for split, name in SPLIT_FILES.items()}
    except FileNotFoundError as exc:
        raise FormatError(f"dataset file missing: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}") from exc
    if meta.get("format_version") != DATA_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {meta.get('format_version')}")
    m, na = int(meta["context_dim"]), int(meta["action_dim"])
    notes = []
    parts = {}
    for split, raw in raws.items():
        parts[split] = _parse_table(raw, SPLIT_FILES[split], m, na)
        if len(parts[split]) != meta[f"n_{split}"]:
            raise FormatError(f"metadata lists {meta[f'n_{split}']} {split} samples, "
                              f"{SPLIT_FILES[split]} has {len(parts[split])}")
        if _sha(raw) != meta.get("sha256", {}).get(split):
            msg = f"{SPLIT_FILES[split]} digest differs from metadata in {src}"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
    arr = np.concatenate([parts["train"], parts["test"]])
    blocks = None
    if "blocks_file" in meta:
        blocks = np.load(src / meta["blocks_file"], allow_pickle=False)
    certs = np.array([float(c) for c in meta["certificates"]])
    return EquilibriumDataset(arr[:, :m], arr[:, m:], int(meta["n_test"]), meta["provenance"], meta["game"],
                              certs, blocks, notes)
