"""Dataset metadata ingestion and attribute labelling.

Utterances from ASVspoof-style protocol files, MLAAD-style metadata tables
and bonafide speaker indexes are turned into a :class:`CorpusManifest`,
with attribute labels attached through an editable :class:`LabelMap`.
"""

from __future__ import annotations

import csv
import fnmatch
import hashlib
import io
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import yaml

TASKS = ("input_type", "acoustic_model", "vocoder")
ALL_TASKS = TASKS + ("binary",)
INPUT_TYPES = ("text", "speech", "bonafide")
BONAFIDE = "bonafide"
MISSING = "-"

MANIFEST_COLUMNS = (
    "id", "audio_path", "language", "source_system", "is_bonafide",
    "native_speaker_id", "voice_id", "input_type", "acoustic_model", "vocoder",
)

CONFIG_DIR = Path(__file__).with_name("configs")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeLabelSet:
    input_type: str
    acoustic_model: str
    vocoder: str

    def __post_init__(self):
        if self.input_type not in INPUT_TYPES:
            raise CorpusError(f"input_type must be one of {INPUT_TYPES}, got {self.input_type!r}")
        if not self.acoustic_model or not self.vocoder:
            raise CorpusError("acoustic_model and vocoder must be non-empty")
        flags = {self.input_type == BONAFIDE, self.acoustic_model == BONAFIDE, self.vocoder == BONAFIDE}
        if len(flags) != 1:
            raise CorpusError(f"bonafide must be set on all three attributes or none: {self}")

    @property
    def is_bonafide(self) -> bool:
        return self.input_type == BONAFIDE

    def get(self, task: str) -> str:
        if task == "binary":
            return BONAFIDE if self.is_bonafide else "spoof"
        if task not in TASKS:
            raise CorpusError(f"unknown task {task!r}")
        return getattr(self, task)


BONAFIDE_LABELS = AttributeLabelSet(BONAFIDE, BONAFIDE, BONAFIDE)


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    language: str = "und"
    source_system: str = BONAFIDE
    is_bonafide: bool = True
    native_speaker_id: str | None = None
    voice_id: str | None = None

    def __post_init__(self):
        if not self.id:
            raise CorpusError("utterance id must be non-empty")
        if not self.audio_path:
            raise CorpusError(f"utterance {self.id!r} has an empty audio_path")
        if self.is_bonafide and self.source_system != BONAFIDE:
            raise CorpusError(f"bonafide utterance {self.id!r} has source_system {self.source_system!r}")


@dataclass(frozen=True)
class LabelMap:
    """Exact system names first, then glob patterns in file order."""

    entries: Mapping[str, AttributeLabelSet]
    patterns: tuple[tuple[str, AttributeLabelSet], ...] = ()
    notes: Mapping[str, str] = field(default_factory=dict)

    def lookup(self, system: str) -> AttributeLabelSet:
        if system == BONAFIDE:
            return BONAFIDE_LABELS
        if system in self.entries:
            return self.entries[system]
        for pattern, labels in self.patterns:
            if fnmatch.fnmatchcase(system, pattern):
                return labels
        raise KeyError(system)

    def __contains__(self, system) -> bool:
        try:
            self.lookup(system)
        except KeyError:
            return False
        return True

    def classes(self, task: str) -> list[str]:
        labels = list(self.entries.values()) + [lab for _, lab in self.patterns]
        return sorted({lab.get(task) for lab in labels})


def _label_entry(name: str, body: Mapping) -> AttributeLabelSet:
    try:
        return AttributeLabelSet(body["input_type"], body["acoustic_model"], body["vocoder"])
    except KeyError as exc:
        raise CorpusError(f"label map entry {name!r} lacks {exc.args[0]!r}") from None


def load_label_map(path) -> LabelMap:
    """Read a YAML label map with ``systems:`` and optional ``patterns:`` sections.

    A bare name (no suffix, not an existing path) resolves to a shipped config.
    """
    path = Path(path)
    if not path.exists() and not path.suffix:
        path = CONFIG_DIR / f"labelmap_{path.name}.yaml"
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    entries, notes = {}, {}
    for name, body in (doc.get("systems") or {}).items():
        entries[str(name)] = _label_entry(name, body)
        if body.get("note"):
            notes[str(name)] = body["note"]
    patterns = []
    for item in doc.get("patterns") or []:
        patterns.append((item["match"], _label_entry(item["match"], item)))
        if item.get("note"):
            notes[item["match"]] = item["note"]
    return LabelMap(entries, tuple(patterns), notes)


@dataclass(frozen=True)
class CorpusManifest:
    utterances: tuple[tuple[Utterance, AttributeLabelSet], ...]
    dataset_name: str = ""
    created_from: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        seen = set()
        for utt, labels in self.utterances:
            if utt.id in seen:
                raise CorpusError(f"duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
            if utt.is_bonafide != labels.is_bonafide:
                raise CorpusError(f"utterance {utt.id!r}: bonafide flag disagrees with labels")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def ids(self) -> list[str]:
        return [u.id for u, _ in self.utterances]

    def index(self) -> dict[str, tuple[Utterance, AttributeLabelSet]]:
        return {u.id: (u, lab) for u, lab in self.utterances}

    def labels(self, task: str) -> list[str]:
        return [lab.get(task) for _, lab in self.utterances]

    def subset(self, ids: Iterable[str]) -> "CorpusManifest":
        keep = set(ids)
        return replace(self, utterances=tuple(p for p in self.utterances if p[0].id in keep))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _provenance(*paths) -> tuple[tuple[str, str], ...]:
    return tuple((Path(p).name, file_digest(p)) for p in paths)


def ingest_asvspoof(protocol_file, label_map: LabelMap, partition_tag: str = "train",
                    audio_root="", audio_ext: str = ".flac") -> CorpusManifest:
    """Parse ``speaker utt_id - attack_id key`` lines into a labelled manifest."""
    if partition_tag not in ("train", "eval"):
        raise CorpusError(f"partition_tag must be train or eval, got {partition_tag!r}")
    rows, seen = [], set()
    with open(protocol_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5 or parts[4] not in (BONAFIDE, "spoof"):
                raise CorpusError(f"{protocol_file}:{lineno}: malformed protocol line {line.rstrip()!r}")
            speaker, utt_id, _, attack, key = parts
            if utt_id in seen:
                raise CorpusError(f"{protocol_file}:{lineno}: duplicate utterance id {utt_id!r}")
            seen.add(utt_id)
            audio = str(Path(audio_root) / f"{utt_id}{audio_ext}")
            if key == BONAFIDE:
                utt = Utterance(utt_id, audio, "en", BONAFIDE, True, speaker)
                labels = BONAFIDE_LABELS
            else:
                try:
                    labels = label_map.lookup(attack)
                except KeyError:
                    raise CorpusError(f"{protocol_file}:{lineno}: attack id {attack!r} not in label map") from None
                utt = Utterance(utt_id, audio, "en", attack, False, speaker)
            rows.append((utt, labels))
    return CorpusManifest(tuple(rows), f"asvspoof2019_la:{partition_tag}", _provenance(protocol_file))


def _read_table(path) -> list[dict[str, str]]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    header = text.splitlines()[0]
    delim = max("|\t,", key=header.count)
    return list(csv.DictReader(io.StringIO(text), delimiter=delim))


def _require(rows, path, columns):
    if rows:
        missing = [c for c in columns if c not in rows[0]]
        if missing:
            raise CorpusError(f"{path}: missing column(s) {missing}")


def ingest_mlaad(meta_table, bonafide_index, label_map: LabelMap, audio_root="") -> CorpusManifest:
    """Label MLAAD spoofs by ``model_name`` and add bonafide speakers from an index."""
    spoof_rows = _read_table(meta_table)
    _require(spoof_rows, meta_table, ("path", "language", "model_name"))
    bona_rows = _read_table(bonafide_index)
    _require(bona_rows, bonafide_index, ("path", "speaker", "language"))

    missing = sorted({r["model_name"] for r in spoof_rows if r["model_name"] not in label_map})
    if missing:
        raise CorpusError(f"model_name(s) absent from label map: {missing}")

    root = Path(audio_root)
    rows = []
    for r in spoof_rows:
        utt = Utterance(r["path"], str(root / r["path"]), r["language"] or "und", r["model_name"], False)
        rows.append((utt, label_map.lookup(r["model_name"])))
    for r in bona_rows:
        if not r["speaker"]:
            raise CorpusError(f"{bonafide_index}: bonafide row {r['path']!r} has no speaker")
        utt = Utterance(r["path"], str(root / r["path"]), r["language"] or "und", BONAFIDE, True, r["speaker"])
        rows.append((utt, BONAFIDE_LABELS))
    return CorpusManifest(tuple(rows), "mlaad", _provenance(meta_table, bonafide_index))


def class_order(classes: Iterable[str]) -> list[str]:
    """Sorted class names with bonafide first."""
    classes = set(classes)
    return ([BONAFIDE] if BONAFIDE in classes else []) + sorted(classes - {BONAFIDE})


def corpus_stats(manifest: CorpusManifest, task: str, protocol=None) -> "OrderedDict[str, Counter]":
    """Per-partition per-class counts for ``task``; a single ``all`` row without a protocol."""
    if task not in ALL_TASKS:
        raise CorpusError(f"unknown task {task!r}")
    table: OrderedDict[str, Counter] = OrderedDict()
    if protocol is None:
        table["all"] = Counter(manifest.labels(task))
        return table
    missing = [i for i in manifest.ids if i not in protocol.partition]
    if missing:
        raise CorpusError(f"{len(missing)} manifest id(s) absent from protocol, e.g. {missing[0]!r}")
    for part in ("train", "dev", "eval"):
        table[part] = Counter()
    for utt, labels in manifest:
        table[protocol.partition[utt.id]][labels.get(task)] += 1
    return table


def render_stats(table: Mapping[str, Counter]) -> str:
    """Render a count table as TSV: one row per partition, one column per class."""
    classes = class_order(c for counts in table.values() for c in counts)
    lines = ["\t".join(["partition"] + classes)]
    for part, counts in table.items():
        lines.append("\t".join([part] + [str(counts.get(c, 0)) for c in classes]))
    return "\n".join(lines) + "\n"


def write_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# dataset_name\t{manifest.dataset_name}\n")
        for name, digest in manifest.created_from:
            fh.write(f"# created_from\t{name}\t{digest}\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for u, lab in manifest:
            row = (u.id, u.audio_path, u.language, u.source_system, "1" if u.is_bonafide else "0",
                   u.native_speaker_id or MISSING, u.voice_id or MISSING,
                   lab.input_type, lab.acoustic_model, lab.vocoder)
            fh.write("\t".join(row) + "\n")


def read_manifest(path) -> CorpusManifest:
    name, provenance, rows = "", [], []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, *vals = line[2:].split("\t")
                if key == "dataset_name":
                    name = vals[0] if vals else ""
                elif key == "created_from":
                    provenance.append((vals[0], vals[1]))
                continue
            if not line:
                continue
            fields = line.split("\t")
            if header is None:
                if tuple(fields) != MANIFEST_COLUMNS:
                    raise CorpusError(f"{path}: unexpected header {fields}")
                header = fields
                continue
            if len(fields) != len(MANIFEST_COLUMNS):
                raise CorpusError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}")
            (uid, audio, lang, system, bona, spk, voice, itype, am, voc) = fields
            utt = Utterance(uid, audio, lang, system, bona == "1",
                            None if spk == MISSING else spk, None if voice == MISSING else voice)
            rows.append((utt, AttributeLabelSet(itype, am, voc)))
    return CorpusManifest(tuple(rows), name, tuple(provenance))
