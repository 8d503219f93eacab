"""End-to-end, binary and two-stage attribute training with dev-set model selection."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from . import frontend
from .corpus import ALL_TASKS, CorpusManifest, class_order
from .evaluation import score
from .models import (
    BackboneProvider, Checkpoint, FixtureProvider, LMCLHead, LMCLParams, MLPHead, ModelError,
    ResNetBackbone, params_to_state, predict, resnet_config_dict, resnet_config_from, state_to_params,
)
from .protocol import ProtocolSpec, read_embeddings

log = logging.getLogger(__name__)

SELECTION_METRICS = ("dev_accuracy", "dev_macro_f1")
STRATEGIES = ("e2e", "two_stage")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "vocoder"
    strategy: str = "e2e"
    batch_size: int | None = None
    learning_rate: float | None = None
    epochs: int = 50
    seed: int = 0
    selection_metric: str = "dev_macro_f1"
    augmentation: bool = True
    mask_max_width: int = 10
    window_seconds: float = 4.0
    n_filters: int = 20
    n_coeffs: int = 20
    deltas: bool = True
    resnet: dict = field(default_factory=dict)
    lmcl_scale: float = 30.0
    lmcl_margin: float = 0.35
    weight_decay: float = 0.0
    balanced_sampler: bool = False
    head_hidden: list = field(default_factory=list)
    backbone_checkpoint: str | None = None
    fixture_embeddings: str | None = None

    def __post_init__(self):
        if self.task not in ALL_TASKS:
            raise ConfigError(f"task must be one of {ALL_TASKS}, got {self.task!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")
        two_stage = self.strategy == "two_stage"
        if self.batch_size is None:
            self.batch_size = 256 if two_stage else 32
        if self.learning_rate is None:
            self.learning_rate = 1e-3 if two_stage else 1e-4
        for name in ("batch_size", "learning_rate", "epochs", "window_seconds", "n_filters", "n_coeffs",
                     "lmcl_scale", "mask_max_width"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        self.head_hidden = [int(h) for h in self.head_hidden]

    @property
    def feature_width(self) -> int:
        return self.n_coeffs * (3 if self.deltas else 1)

    def resnet_config(self):
        return resnet_config_from({"in_coeffs": self.feature_width, **self.resnet})

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(source, **overrides) -> TrainConfig:
    """Build a config from a YAML/JSON document (path or mapping); unknown keys are rejected."""
    if source is None:
        doc = {}
    elif isinstance(source, Mapping):
        doc = dict(source)
    else:
        doc = yaml.safe_load(Path(source).read_text(encoding="utf-8")) or {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {unknown}")
    return TrainConfig(**doc)


# --------------------------------------------------------------------------
# features


class FeatureBank:
    """Per-utterance LFCC(+deltas) over the whole (repeat-padded) file, memoised.

    Windows are cut at frame granularity: offset 0 for evaluation, a seeded
    random frame offset for training crops.
    """

    def __init__(self, manifest: CorpusManifest, cfg: TrainConfig, root=None, cache_dir=None):
        self.cfg = cfg
        self.root = Path(root) if root is not None else None
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.paths = {u.id: u.audio_path for u, _ in manifest}
        win, shift, _ = frontend._frame_params(frontend.CANONICAL_RATE, 20.0, 10.0)
        self.n_target = int(round(cfg.window_seconds * frontend.CANONICAL_RATE))
        self.n_frames = frontend.frame_count(self.n_target, win, shift)
        self._memo: dict[str, np.ndarray] = {}

    def add(self, manifest: CorpusManifest):
        self.paths.update({u.id: u.audio_path for u, _ in manifest})

    def _resolve(self, uid) -> Path:
        path = Path(self.paths[uid])
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def full(self, uid: str) -> np.ndarray:
        if uid not in self._memo:
            cached = self.cache_dir / f"{uid}.fea" if self.cache_dir is not None else None
            if cached is not None and cached.exists():
                values = frontend.read_features(cached).values
            else:
                seg = frontend.read_audio(self._resolve(uid))
                samples = frontend.fit_window(seg.samples, max(seg.samples.size, self.n_target), 0)
                fm = frontend.extract(frontend.AudioSegment(samples, seg.rate, uid), self.cfg.n_filters,
                                      self.cfg.n_coeffs, deltas=self.cfg.deltas)
                values = fm.values
            self._memo[uid] = values.astype(np.float32)
        return self._memo[uid]

    def window(self, uid: str, rng: np.random.Generator | None = None) -> np.ndarray:
        values = self.full(uid)
        slack = values.shape[0] - self.n_frames
        offset = int(rng.integers(0, slack + 1)) if rng is not None and slack > 0 else 0
        return values[offset:offset + self.n_frames]

    def batch(self, ids: Sequence[str], rng=None) -> np.ndarray:
        return np.stack([self.window(i, rng) for i in ids])


def _augment(batch: np.ndarray, max_width: int, rng: np.random.Generator) -> np.ndarray:
    out = batch.copy()
    width = min(max_width, batch.shape[2])
    for b in range(out.shape[0]):
        start, w = frontend.mask_band(out.shape[2], width, int(rng.integers(2**32)))
        out[b, :, start:start + w] = 0.0
    return out


# --------------------------------------------------------------------------
# shared plumbing


def manifest_digest(manifest: CorpusManifest) -> str:
    h = hashlib.sha256()
    for u, lab in manifest:
        h.update("\t".join((u.id, u.audio_path, u.voice_id or "-", lab.input_type, lab.acoustic_model,
                            lab.vocoder)).encode())
        h.update(b"\n")
    return h.hexdigest()


def protocol_digest(protocol: ProtocolSpec) -> str:
    h = hashlib.sha256()
    for uid, part in protocol.partition.items():
        h.update(f"{uid}\t{part}\n".encode())
    for task in sorted(protocol.removed_classes):
        h.update(f"{task}:{','.join(protocol.removed_classes[task])}\n".encode())
    return h.hexdigest()


def _split_task(manifest, protocol, task):
    index = manifest.index()
    train = protocol.task_ids(manifest, task, "train")
    dev = protocol.task_ids(manifest, task, "dev")
    if not train or not dev:
        raise TrainingError(f"task {task!r} needs non-empty train and dev splits")
    train_labels = [index[i][1].get(task) for i in train]
    dev_labels = [index[i][1].get(task) for i in dev]
    classes = class_order(train_labels)
    if task == "binary":
        missing = sorted({"bonafide", "spoof"} - set(train_labels))
    else:
        missing = sorted(set(dev_labels) - set(train_labels))
    if missing:
        raise TrainingError(f"class(es) {missing} absent from the train split")
    lookup = {c: i for i, c in enumerate(classes)}
    return (train, np.array([lookup[c] for c in train_labels]), dev, dev_labels, classes)


def _epoch_order(labels: np.ndarray, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if not balanced:
        return rng.permutation(len(labels))
    counts = np.bincount(labels)
    weights = 1.0 / counts[labels]
    return rng.choice(len(labels), size=len(labels), replace=True, p=weights / weights.sum())


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        chunk = order[i:i + size]
        if len(chunk) > 1:
            yield chunk


def select_best(history: Sequence[Mapping], metric: str) -> int:
    """Index of the best epoch under ``metric``; the earliest one wins ties."""
    if not history:
        raise TrainingError("empty metric history")
    if any(metric not in h for h in history):
        raise TrainingError(f"metric {metric!r} missing from history")
    values = [h[metric] for h in history]
    return int(np.argmax(values))


def _dev_metrics(preds, truths, classes) -> dict:
    rep = score(preds, truths, classes)
    return {"dev_accuracy": rep.micro_accuracy, "dev_macro_f1": rep.macro_f1,
            "dev_macro_accuracy": rep.macro_accuracy}


def _provenance(cfg, manifest, protocol, **extra) -> dict:
    return {"seed": cfg.seed, "manifest_sha256": manifest_digest(manifest),
            "protocol_sha256": protocol_digest(protocol), "torch": torch.__version__,
            "numpy": np.__version__, **extra}


def _seed_all(seed: int):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# end-to-end and binary


def _embed_all(model, bank, ids, chunk=256) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(ids), chunk):
            outs.append(model(torch.from_numpy(bank.batch(ids[i:i + chunk]))))
    return torch.cat(outs)


def train_e2e(manifest: CorpusManifest, protocol: ProtocolSpec, cfg: TrainConfig, root=None,
              bank: FeatureBank | None = None, on_epoch: Callable | None = None) -> Checkpoint:
    """Train backbone + LMCL classifier on one task and keep the best dev epoch."""
    train_ids, y_train, dev_ids, dev_labels, classes = _split_task(manifest, protocol, cfg.task)
    bank = bank or FeatureBank(manifest, cfg, root)
    rng = _seed_all(cfg.seed)
    rcfg = cfg.resnet_config()
    model = ResNetBackbone(rcfg)
    head = LMCLHead(rcfg.embed_dim, len(classes), cfg.lmcl_scale, cfg.lmcl_margin)
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    history, best, best_state = [], None, None
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for step, chunk in enumerate(_batches(_epoch_order(y_train, cfg.balanced_sampler, rng), cfg.batch_size)):
            x = bank.batch([train_ids[i] for i in chunk], rng)
            if cfg.augmentation:
                x = _augment(x, cfg.mask_max_width, rng)
            loss = head.loss(model(torch.from_numpy(x)), torch.from_numpy(y_train[chunk]))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            head.renormalize_()
            losses.append(loss.item())
        with torch.no_grad():
            logits = head(_embed_all(model, bank, dev_ids))
        preds = [classes[i] for i in logits.argmax(dim=1).tolist()]
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                  **_dev_metrics(preds, dev_labels, classes)}
        history.append(record)
        log.info("epoch %d loss %.4f dev_acc %.4f dev_f1 %.4f", epoch, record["train_loss"],
                 record["dev_accuracy"], record["dev_macro_f1"])
        if on_epoch is not None:
            on_epoch(record)
        if best is None or record[cfg.selection_metric] > best:
            best = record[cfg.selection_metric]
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))

    model.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    chosen = select_best(history, cfg.selection_metric)
    params = state_to_params(model, "backbone")
    params["lmcl.weight"] = head.weight.detach().numpy().astype(np.float32)
    config = {"train": cfg.to_dict(), "resnet": resnet_config_dict(rcfg), "kind": "e2e"}
    return Checkpoint(params, config, classes, _provenance(cfg, manifest, protocol), history,
                      {"metric": cfg.selection_metric, "epoch": chosen, "value": history[chosen][cfg.selection_metric]})


def train_binary(manifest: CorpusManifest, protocol: ProtocolSpec, cfg: TrainConfig, root=None,
                 bank: FeatureBank | None = None, on_epoch=None) -> Checkpoint:
    """Standard bonafide-vs-spoof countermeasure training."""
    cfg = copy.deepcopy(cfg)
    cfg.task = "binary"
    return train_e2e(manifest, protocol, cfg, root, bank, on_epoch)


# --------------------------------------------------------------------------
# two-stage


def load_backbone(ckpt: Checkpoint) -> ResNetBackbone:
    model = ResNetBackbone(resnet_config_from(ckpt.config["resnet"]))
    params_to_state(model, ckpt.params, "backbone")
    model.eval()
    return model


def _module_digest(module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def train_two_stage(manifest: CorpusManifest, protocol: ProtocolSpec, cfg: TrainConfig,
                    backbone: Checkpoint | None = None, fixture=None, root=None,
                    bank: FeatureBank | None = None, on_epoch=None) -> Checkpoint:
    """Fit a light head on frozen countermeasure embeddings.

    ``backbone`` is a trained (usually binary) checkpoint; ``fixture`` an
    :class:`EmbeddingSet` (or EMB1 path) of precomputed embeddings.
    Embeddings are computed once and cached for all epochs.
    """
    if (backbone is None) == (fixture is None):
        raise ConfigError("two-stage training needs exactly one of a backbone checkpoint or fixture embeddings")
    train_ids, y_train, dev_ids, dev_labels, classes = _split_task(manifest, protocol, cfg.task)
    extra = {}
    if backbone is not None:
        model = load_backbone(backbone)
        before = _module_digest(model)
        bank = bank or FeatureBank(manifest, cfg, root)
        provider = BackboneProvider(model)
        x_train = torch.from_numpy(provider.embed_batch(bank.batch(train_ids)).astype(np.float32))
        x_dev = torch.from_numpy(provider.embed_batch(bank.batch(dev_ids)).astype(np.float32))
        if _module_digest(model) != before:
            raise TrainingError("backbone parameters changed during two-stage training")
        extra = {"provider": "backbone", "backbone_sha256": backbone.digest("backbone.")}
    else:
        if not hasattr(fixture, "vectors"):
            extra["fixture_path"] = str(fixture)
            fixture = read_embeddings(fixture)
        provider = FixtureProvider(fixture)
        x_train = torch.tensor(np.stack([provider.embed(i) for i in train_ids]), dtype=torch.float32)
        x_dev = torch.tensor(np.stack([provider.embed(i) for i in dev_ids]), dtype=torch.float32)
        extra.setdefault("provider", "fixture")
        extra["fixture_dim"] = provider.dim

    rng = _seed_all(cfg.seed)
    head = MLPHead(provider.dim, len(classes), cfg.head_hidden)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    y = torch.from_numpy(y_train)
    history, best, best_state = [], None, None
    for epoch in range(cfg.epochs):
        head.train()
        losses = []
        for step, chunk in enumerate(_batches(_epoch_order(y_train, cfg.balanced_sampler, rng), cfg.batch_size)):
            idx = torch.from_numpy(chunk)
            loss = F.cross_entropy(head(x_train[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        head.eval()
        with torch.no_grad():
            preds = [classes[i] for i in head(x_dev).argmax(dim=1).tolist()]
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                  **_dev_metrics(preds, dev_labels, classes)}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if best is None or record[cfg.selection_metric] > best:
            best = record[cfg.selection_metric]
            best_state = copy.deepcopy(head.state_dict())

    head.load_state_dict(best_state)
    chosen = select_best(history, cfg.selection_metric)
    params = state_to_params(head, "head")
    config = {"train": cfg.to_dict(), "kind": "two_stage", "embed_dim": provider.dim}
    if backbone is not None:
        params.update({k: v for k, v in backbone.params.items() if k.startswith("backbone.")})
        config["resnet"] = backbone.config["resnet"]
    return Checkpoint(params, config, classes, _provenance(cfg, manifest, protocol, **extra), history,
                      {"metric": cfg.selection_metric, "epoch": chosen, "value": history[chosen][cfg.selection_metric]})


# --------------------------------------------------------------------------
# inference


class TrainedModel:
    """Inference wrapper around an E2E or two-stage checkpoint."""

    def __init__(self, ckpt: Checkpoint, manifest: CorpusManifest | None = None, root=None,
                 bank: FeatureBank | None = None, fixture=None):
        self.ckpt = ckpt
        self.class_names = list(ckpt.class_names)
        self.kind = ckpt.config["kind"]
        cfg = load_config(ckpt.config["train"])
        self.backbone = load_backbone(ckpt) if "resnet" in ckpt.config and any(
            k.startswith("backbone.") for k in ckpt.params) else None
        if self.backbone is not None:
            if bank is None:
                if manifest is None:
                    raise ModelError("a manifest or feature bank is needed to embed audio")
                bank = FeatureBank(manifest, cfg, root)
            self.bank = bank
            self.provider = BackboneProvider(self.backbone)
        else:
            fixture = fixture if fixture is not None else ckpt.provenance.get("fixture_path") or cfg.fixture_embeddings
            if fixture is None:
                raise ModelError("two-stage fixture checkpoint needs its embedding file")
            self.provider = FixtureProvider(fixture if hasattr(fixture, "vectors") else read_embeddings(fixture))
            self.bank = None
        if self.kind == "e2e":
            weight = ckpt.params["lmcl.weight"].astype(np.float64)
            if weight.shape[0] != len(self.class_names):
                raise ModelError("class-name list does not match checkpoint weights")
            self.scorer = (LMCLParams(weight, cfg.lmcl_scale, cfg.lmcl_margin), self.class_names)
            self.head = None
        else:
            self.head = MLPHead(ckpt.config["embed_dim"], len(self.class_names), cfg.head_hidden)
            params_to_state(self.head, ckpt.params, "head")
            self.head.eval()
            self.scorer = self.head.as_classifier_head(self.class_names) if not cfg.head_hidden else None

    def embed(self, ids: Sequence[str]) -> np.ndarray:
        if self.bank is not None:
            return self.provider.embed_batch(self.bank.batch(list(ids)))
        return np.stack([self.provider.embed(i) for i in ids]) if len(ids) else np.zeros((0, self.provider.dim))

    def logits(self, ids: Sequence[str]) -> np.ndarray:
        emb = self.embed(ids)
        if self.kind == "e2e":
            params, _ = self.scorer
            w = params.weight / np.linalg.norm(params.weight, axis=1, keepdims=True)
            e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
            return params.scale * e @ w.T
        with torch.no_grad():
            return self.head(torch.as_tensor(emb, dtype=torch.float32)).double().numpy()

    def predict(self, ids: Sequence[str]) -> list[str]:
        return [self.class_names[i] for i in np.argmax(self.logits(ids), axis=1)]

    def predict_one(self, uid: str):
        """Single-utterance prediction through :func:`models.predict`."""
        if self.scorer is None:
            raise ModelError("hidden-layer heads do not expose a single-layer scorer")
        features = self.bank.window(uid) if self.bank is not None else None
        return predict(self.provider, self.scorer, uid, features)


# --------------------------------------------------------------------------
# run directories


def unique_run_dir(path) -> Path:
    """``path`` if unused, else the first free ``path-N``."""
    path = Path(path)
    if not path.exists() or not any(path.iterdir()):
        path.mkdir(parents=True, exist_ok=True)
        return path
    n = 1
    while True:
        candidate = path.with_name(f"{path.name}-{n}")
        if not candidate.exists():
            candidate.mkdir(parents=True)
            return candidate
        n += 1


def write_history(history: Sequence[Mapping], path, metric: str) -> Path:
    lines = ["epoch\ttrain_loss\tdev_metric"]
    lines += [f"{h['epoch']}\t{h['train_loss']:.6f}\t{h[metric]:.6f}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)
