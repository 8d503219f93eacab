"""Speaker-disjoint source-tracing protocols.

Spoofed utterances carry no speaker labels, so voices are recovered by
spherical k-means over speaker-verification embeddings. Whole voice groups
are then assigned to train/dev/eval, and classes whose samples sit almost
entirely inside one voice cluster are dropped for the affected task.
"""

from __future__ import annotations

import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import TASKS, CorpusError, CorpusManifest

PARTITIONS = ("train", "dev", "eval")
DEFAULT_RATIOS = (0.7, 0.15, 0.15)
PROTOCOL_COLUMNS = ("id", "partition", "voice_id", "input_type", "acoustic_model", "vocoder")

_EMB_MAGIC = b"EMB1"


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSet:
    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.ids):
            raise ProtocolError(f"expected {len(self.ids)} x dim matrix, got shape {vectors.shape}")
        if vectors.shape[1] == 0:
            raise ProtocolError("embedding dim must be positive")
        if not np.all(np.isfinite(vectors)):
            raise ProtocolError("embeddings contain non-finite values")
        if len(set(self.ids)) != len(self.ids):
            raise ProtocolError("duplicate ids in embedding set")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.vectors))

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            bad = self.ids[int(np.argmin(norms))]
            raise ProtocolError(f"zero embedding vector for {bad!r}")
        return self.vectors / norms[:, None]

    def select(self, ids: Sequence[str]) -> "EmbeddingSet":
        lookup = {k: i for i, k in enumerate(self.ids)}
        try:
            rows = [lookup[i] for i in ids]
        except KeyError as exc:
            raise ProtocolError(f"no embedding for id {exc.args[0]!r}") from None
        return EmbeddingSet(tuple(ids), self.vectors[rows])


def write_embeddings(path, emb: EmbeddingSet) -> None:
    """EMB1: magic, u32 count, u32 dim, then (u16 id length, UTF-8 id, dim x f32) records."""
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC + struct.pack("<II", len(emb), emb.dim))
        data = emb.vectors.astype("<f4")
        for uid, row in zip(emb.ids, data):
            raw = uid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + row.tobytes())


def read_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise ProtocolError(f"{path}: not an EMB1 file")
    count, dim = struct.unpack_from("<II", raw, 4)
    pos, ids, rows = 12, [], []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        ids.append(raw[pos + 2:pos + 2 + n].decode("utf-8"))
        pos += 2 + n
        rows.append(np.frombuffer(raw, dtype="<f4", count=dim, offset=pos))
        pos += 4 * dim
    if pos != len(raw):
        raise ProtocolError(f"{path}: {len(raw) - pos} trailing bytes")
    vectors = np.vstack(rows).astype(np.float64) if rows else np.zeros((0, dim))
    return EmbeddingSet(tuple(ids), vectors)


@dataclass(frozen=True)
class VoiceClustering:
    ids: tuple[str, ...]
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: tuple[float, ...] = ()
    converged: bool = False

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def assignment(self) -> dict[str, int]:
        return dict(zip(self.ids, self.labels.tolist()))


def cosine_inertia(units: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    """Sum over points of 1 - cos(point, assigned centroid)."""
    sims = np.einsum("ij,ij->i", units, centroids[labels])
    return float(np.sum(1.0 - sims))


def _plusplus_init(units: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    n = units.shape[0]
    chosen = [int(rng.integers(n))]
    dist = 1.0 - units @ units[chosen[0]]
    for _ in range(1, k):
        weights = np.clip(dist, 0.0, None)
        total = weights.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - units @ units[nxt])
    return chosen


def _update_centroids(units, labels, centroids, k):
    """Renormalized member means; empty clusters reseeded at the worst-fit point."""
    new = np.zeros_like(centroids)
    np.add.at(new, labels, units)
    sizes = np.bincount(labels, minlength=k)
    fit = np.einsum("ij,ij->i", units, centroids[labels])
    taken = set()
    for c in np.flatnonzero(sizes == 0):
        order = np.argsort(fit, kind="stable")
        idx = next(int(i) for i in order if int(i) not in taken)
        taken.add(idx)
        new[c] = units[idx]
        fit[idx] = np.inf
    norms = np.linalg.norm(new, axis=1)
    # members summing to zero (antipodal pairs) keep the previous direction
    degenerate = norms < 1e-12
    new[degenerate] = centroids[degenerate]
    norms[degenerate] = 1.0
    return new / norms[:, None]


def spherical_kmeans(emb: EmbeddingSet, k: int, seed: int = 0, max_iter: int = 300,
                     tol: float = 1e-10, init: Sequence[int] | None = None) -> VoiceClustering:
    """Cluster unit-normalized embeddings by cosine similarity.

    Seeding is k-means++ with 1 - cos as the distance unless ``init`` names
    the starting centroid rows explicitly. Ties in the assignment step go
    to the lowest cluster index.
    """
    units = emb.normalized()
    n = units.shape[0]
    if not 1 <= k <= n:
        raise ProtocolError(f"K={k} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    start = list(init) if init is not None else _plusplus_init(units, k, rng)
    if len(start) != k:
        raise ProtocolError(f"init names {len(start)} rows for K={k}")
    centroids = units[start].copy()
    labels = np.argmax(units @ centroids.T, axis=1)
    inertia = cosine_inertia(units, labels, centroids)
    history = [inertia]
    converged = False
    for _ in range(max_iter):
        centroids = _update_centroids(units, labels, centroids, k)
        new_labels = np.argmax(units @ centroids.T, axis=1)
        new_inertia = cosine_inertia(units, new_labels, centroids)
        history.append(new_inertia)
        stable = np.array_equal(new_labels, labels)
        improvement = inertia - new_inertia
        labels, inertia = new_labels, new_inertia
        if stable:
            converged = True
            break
        if improvement < tol:
            break
    labels.setflags(write=False)
    centroids.setflags(write=False)
    return VoiceClustering(emb.ids, labels, centroids, inertia, tuple(history), converged)


@dataclass(frozen=True)
class ElbowResult:
    k: int
    grid: tuple[int, ...]
    inertias: tuple[float, ...]
    distances: tuple[float, ...]
    pronounced: bool


def knee_point(grid: Sequence[int], inertias: Sequence[float], min_distance: float = 1e-3) -> ElbowResult:
    """Pick the grid point farthest from the chord between the curve's endpoints.

    Both axes are rescaled to [0, 1] first, so the choice does not depend on
    the units of K or inertia. If no point clears ``min_distance`` the curve
    has no pronounced elbow and the grid midpoint is returned.
    """
    if len(grid) < 3:
        raise ProtocolError("elbow search needs at least 3 grid points")
    if list(grid) != sorted(set(grid)):
        raise ProtocolError("k grid must be strictly ascending")
    x = np.asarray(grid, dtype=np.float64)
    y = np.asarray(inertias, dtype=np.float64)
    x = (x - x[0]) / (x[-1] - x[0])
    span = y.max() - y.min()
    y = (y - y.min()) / span if span > 0 else np.zeros_like(y)
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    dist = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / np.hypot(dx, dy)
    best = int(np.argmax(dist))
    pronounced = bool(dist[best] >= min_distance)
    if not pronounced:
        best = (len(grid) - 1) // 2
    return ElbowResult(int(grid[best]), tuple(int(k) for k in grid), tuple(map(float, inertias)),
                       tuple(map(float, dist)), pronounced)


def select_k_elbow(emb: EmbeddingSet, k_grid: Sequence[int], seed: int = 0, n_init: int = 3,
                   **kmeans_kw) -> ElbowResult:
    if len(k_grid) < 3:
        raise ProtocolError("elbow search needs at least 3 grid points")
    inertias = []
    for k in k_grid:
        runs = [spherical_kmeans(emb, k, seed=seed + r, **kmeans_kw) for r in range(n_init)]
        inertias.append(min(r.inertia for r in runs))
    return knee_point(k_grid, inertias)


def best_of(emb: EmbeddingSet, k: int, seed: int = 0, n_init: int = 5, **kw) -> VoiceClustering:
    runs = [spherical_kmeans(emb, k, seed=seed + r, **kw) for r in range(n_init)]
    return min(runs, key=lambda r: r.inertia)


def assign_voice_ids(manifest: CorpusManifest, clustering: VoiceClustering) -> CorpusManifest:
    """Spoofs get ``cluster:<k>``, bonafide utterances ``spk:<speaker>``."""
    assignment = clustering.assignment
    rows = []
    for utt, labels in manifest:
        if utt.is_bonafide:
            if not utt.native_speaker_id:
                raise ProtocolError(f"bonafide utterance {utt.id!r} has no native speaker id")
            voice = f"spk:{utt.native_speaker_id}"
        else:
            if utt.id not in assignment:
                raise ProtocolError(f"spoofed utterance {utt.id!r} missing from clustering")
            voice = f"cluster:{assignment[utt.id]}"
        rows.append((replace(utt, voice_id=voice), labels))
    return replace(manifest, utterances=tuple(rows))


@dataclass(frozen=True)
class ProtocolSpec:
    partition: Mapping[str, str]
    removed_classes: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    target_ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    dominance_threshold: float = 0.5

    def ids(self, split: str) -> list[str]:
        return [i for i, p in self.partition.items() if p == split]

    def task_ids(self, manifest: CorpusManifest, task: str, split: str) -> list[str]:
        """Ids in ``split`` whose ``task`` label was not removed as degenerate."""
        removed = set(self.removed_classes.get(task, ()))
        return [u.id for u, lab in manifest
                if self.partition.get(u.id) == split and lab.get(task) not in removed]


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ProtocolError(f"ratios must be three positive fractions summing to 1, got {ratios}")


def partition_disjoint(manifest: CorpusManifest, ratios=DEFAULT_RATIOS, seed: int = 0,
                       removed_classes=None, dominance_threshold: float = 0.5) -> ProtocolSpec:
    """Assign whole voice groups to partitions, largest group first.

    Each group goes to the partition with the greatest remaining deficit
    against its target count. Equal-sized groups are visited in a seeded
    random order and deficit ties are broken by a seeded permutation.
    """
    ratios = tuple(float(r) for r in ratios)
    _check_ratios(ratios)
    groups: dict[str, list[str]] = defaultdict(list)
    for utt, _ in manifest:
        if not utt.voice_id:
            raise ProtocolError(f"utterance {utt.id!r} has no voice_id")
        groups[utt.voice_id].append(utt.id)
    if len(groups) < 3:
        raise ProtocolError(f"need at least 3 voice groups to fill 3 partitions, got {len(groups)}")
    rng = np.random.default_rng(seed)
    names = sorted(groups)
    shuffled = [names[i] for i in rng.permutation(len(names))]
    order = sorted(shuffled, key=lambda g: -len(groups[g]))
    total = len(manifest)
    target = np.array(ratios) * total
    filled = np.zeros(3)
    partition = {}
    for i, g in enumerate(order):
        deficit = target - filled
        # never leave a partition empty while groups remain to fill it
        empty = np.flatnonzero(filled == 0)
        candidates = empty if len(empty) >= len(order) - i else np.arange(3)
        best = deficit[candidates].max()
        tied = [int(c) for c in candidates if deficit[c] == best]
        pick = tied[int(rng.integers(len(tied)))] if len(tied) > 1 else tied[0]
        filled[pick] += len(groups[g])
        for uid in groups[g]:
            partition[uid] = PARTITIONS[pick]
    ordered = {u.id: partition[u.id] for u, _ in manifest}
    return ProtocolSpec(ordered, dict(removed_classes or {}), ratios, seed, dominance_threshold)


def achieved_ratios(spec: ProtocolSpec) -> tuple[float, float, float]:
    counts = Counter(spec.partition.values())
    n = max(len(spec.partition), 1)
    return tuple(counts.get(p, 0) / n for p in PARTITIONS)


def degenerate_classes(manifest: CorpusManifest, task: str, dominance_threshold: float = 0.5,
                       clustering: VoiceClustering | None = None) -> list[str]:
    """Spoof classes whose single largest voice cluster exceeds the threshold share."""
    if not 0 < dominance_threshold <= 1:
        raise ProtocolError(f"dominance threshold must lie in (0, 1], got {dominance_threshold}")
    if task not in TASKS:
        raise CorpusError(f"unknown task {task!r}")
    assignment = clustering.assignment if clustering is not None else None
    per_class: dict[str, Counter] = defaultdict(Counter)
    for utt, labels in manifest:
        if utt.is_bonafide:
            continue
        voice = f"cluster:{assignment[utt.id]}" if assignment is not None else utt.voice_id
        if voice is None:
            raise ProtocolError(f"spoofed utterance {utt.id!r} has no voice assignment")
        per_class[labels.get(task)][voice] += 1
    removed = []
    for cls in sorted(per_class):
        counts = per_class[cls]
        if max(counts.values()) / sum(counts.values()) > dominance_threshold:
            removed.append(cls)
    return removed


def filter_degenerate(manifest: CorpusManifest, task: str, dominance_threshold: float = 0.5,
                      clustering: VoiceClustering | None = None) -> tuple[CorpusManifest, list[str]]:
    removed = degenerate_classes(manifest, task, dominance_threshold, clustering)
    gone = set(removed)
    kept = tuple(p for p in manifest if p[1].get(task) not in gone)
    return replace(manifest, utterances=kept), removed


def build_protocol(manifest: CorpusManifest, ratios=DEFAULT_RATIOS, seed: int = 0,
                   dominance_threshold: float = 0.5, filter_tasks=("vocoder",)) -> ProtocolSpec:
    """Degenerate-class screening per task followed by voice-disjoint partitioning.

    Removed classes stay in the protocol file; task views exclude them.
    """
    removed = {task: tuple(degenerate_classes(manifest, task, dominance_threshold)) for task in filter_tasks}
    return partition_disjoint(manifest, ratios, seed, removed, dominance_threshold)


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.tsv")


def emit_protocol(spec: ProtocolSpec, manifest: CorpusManifest, out) -> Path:
    """Write the protocol TSV and its key/value sidecar; returns the TSV path."""
    index = manifest.index()
    missing = [i for i in index if i not in spec.partition]
    if missing:
        raise ProtocolError(f"protocol does not cover manifest id {missing[0]!r}")
    out = Path(out)
    lines = ["\t".join(PROTOCOL_COLUMNS)]
    for uid, part in spec.partition.items():
        if uid not in index:
            raise ProtocolError(f"protocol id {uid!r} absent from manifest")
        utt, lab = index[uid]
        lines.append("\t".join((uid, part, utt.voice_id or "-", lab.input_type, lab.acoustic_model, lab.vocoder)))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")

    meta = [("seed", str(spec.seed)),
            ("dominance_threshold", repr(float(spec.dominance_threshold))),
            ("target_ratios", ",".join(repr(float(r)) for r in spec.target_ratios))]
    for task in TASKS:
        if task in spec.removed_classes:
            meta.append((f"removed:{task}", ",".join(spec.removed_classes[task]) or "-"))
    _sidecar(out).write_text("key\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in meta), encoding="utf-8")
    return out


def read_protocol(path) -> ProtocolSpec:
    partition = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != PROTOCOL_COLUMNS:
            raise ProtocolError(f"{path}: unexpected header {header}")
        for lineno, line in enumerate(fh, 2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != len(PROTOCOL_COLUMNS) or fields[1] not in PARTITIONS:
                raise ProtocolError(f"{path}:{lineno}: malformed protocol row")
            partition[fields[0]] = fields[1]
    kwargs = {}
    removed = {}
    sidecar = _sidecar(path)
    if sidecar.exists():
        for line in sidecar.read_text(encoding="utf-8").splitlines()[1:]:
            key, value = line.split("\t")
            if key == "seed":
                kwargs["seed"] = int(value)
            elif key == "dominance_threshold":
                kwargs["dominance_threshold"] = float(value)
            elif key == "target_ratios":
                kwargs["target_ratios"] = tuple(float(v) for v in value.split(","))
            elif key.startswith("removed:"):
                removed[key.split(":", 1)[1]] = () if value == "-" else tuple(value.split(","))
    return ProtocolSpec(partition, removed, **kwargs)
