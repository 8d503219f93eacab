"""Spoof-embedding backbone, margin loss, classification heads and checkpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .protocol import EmbeddingSet

# reference embedding sizes of the external countermeasures
FIXTURE_DIMS = {"ssl_aasist": 160, "whisper_lcnn": 768}
POOL_EPS = 1e-5


class ModelError(ValueError):
    pass


# --------------------------------------------------------------------------
# backbone


@dataclass
class ResNetConfig:
    in_coeffs: int = 60
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    embed_dim: int = 256
    stem_stride: int = 1

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.channels = tuple(self.channels)
        if len(self.blocks) != len(self.channels) or not self.blocks:
            raise ModelError("blocks and channels must be non-empty and equally long")
        if self.embed_dim <= 0 or self.in_coeffs <= 0:
            raise ModelError("embed_dim and in_coeffs must be positive")

    @property
    def min_frames(self) -> int:
        return self.stem_stride * 2 ** (len(self.blocks) - 1)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _out_len(n, stride):
    return (n - 1) // stride + 1


class ResNetBackbone(nn.Module):
    """2-D residual network over (time, coefficient) maps with mean+std time pooling.

    Input is (batch, frames, coeffs); output is (batch, embed_dim) whatever
    the number of frames.
    """

    def __init__(self, cfg: ResNetConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.channels[0]
        self.stem = nn.Sequential(nn.Conv2d(1, c0, 3, cfg.stem_stride, 1, bias=False), nn.BatchNorm2d(c0), nn.ReLU())
        stages = []
        c_in = c0
        width = _out_len(cfg.in_coeffs, cfg.stem_stride)
        for i, (n_blocks, c_out) in enumerate(zip(cfg.blocks, cfg.channels)):
            stride = 1 if i == 0 else 2
            layers = [BasicBlock(c_in, c_out, stride)] + [BasicBlock(c_out, c_out, 1) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*layers))
            width = _out_len(width, stride)
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.pooled_dim = 2 * c_in * width
        self.embed = nn.Linear(self.pooled_dim, cfg.embed_dim)
        self.embed_bn = nn.BatchNorm1d(cfg.embed_dim)

    def named_layers(self):
        yield "stem", self.stem
        for i, stage in enumerate(self.stages):
            yield f"stage{i}", stage

    def forward(self, x, check_finite: bool = False):
        if x.shape[-1] != self.cfg.in_coeffs:
            raise ModelError(f"expected {self.cfg.in_coeffs} coefficients, got {x.shape[-1]}")
        h = x.unsqueeze(1)
        for name, layer in self.named_layers():
            h = layer(h)
            if check_finite and not torch.isfinite(h).all():
                raise ModelError(f"non-finite activations after layer {name}")
        # (B, C, T, W) -> (B, C*W, T), pool over time
        h = h.permute(0, 1, 3, 2).flatten(1, 2)
        mean = h.mean(dim=2)
        std = torch.sqrt(h.var(dim=2, unbiased=False) + POOL_EPS)
        pooled = torch.cat([mean, std], dim=1)
        out = self.embed_bn(self.embed(pooled))
        if check_finite and not torch.isfinite(out).all():
            raise ModelError("non-finite activations after layer embed")
        return out


def backbone_embed(model: ResNetBackbone, values: np.ndarray) -> np.ndarray:
    """Embed one T x C feature matrix in inference mode."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[1] != model.cfg.in_coeffs:
        raise ModelError(f"expected T x {model.cfg.in_coeffs} features, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ModelError("non-finite input features")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(values, dtype=dtype)[None], check_finite=True)[0]
    model.train(was_training)
    return out.numpy().astype(np.float64)


# --------------------------------------------------------------------------
# large margin cosine loss


@dataclass
class LMCLParams:
    weight: np.ndarray
    scale: float = 30.0
    margin: float = 0.35

    def __post_init__(self):
        if self.scale <= 0:
            raise ModelError("LMCL scale must be positive")
        if not 0 <= self.margin < 1:
            raise ModelError("LMCL margin must lie in [0, 1)")


def _unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ModelError(f"zero-norm {what} row")
    return x / norms, norms


def _check_labels(labels, n, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ModelError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ModelError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def lmcl_loss(embeddings, labels, params: LMCLParams, with_grad: bool = False):
    """Mean large-margin cosine loss over a batch.

    With ``with_grad`` also returns the gradients w.r.t. the raw embeddings
    and the raw (unnormalized) class weights.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(params.weight, dtype=np.float64)
    n = x.shape[0]
    y = _check_labels(labels, n, w.shape[0])
    xh, xn = _unit_rows(x, "embedding")
    wh, wn = _unit_rows(w, "class weight")
    cos = xh @ wh.T
    rows = np.arange(n)
    logits = params.scale * cos
    logits[rows, y] -= params.scale * params.margin
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    loss = float(np.mean(log_z - logits[rows, y]))
    if not with_grad:
        return loss
    probs = np.exp(logits - log_z[:, None])
    probs[rows, y] -= 1.0
    g_cos = params.scale * probs / n
    g_xh = g_cos @ wh
    g_wh = g_cos.T @ xh
    g_x = (g_xh - xh * np.sum(g_xh * xh, axis=1, keepdims=True)) / xn
    g_w = (g_wh - wh * np.sum(g_wh * wh, axis=1, keepdims=True)) / wn
    return loss, g_x, g_w


class LMCLHead(nn.Module):
    """Class-weight matrix with unit rows scored by scaled cosine similarity."""

    def __init__(self, embed_dim: int, n_classes: int, scale: float = 30.0, margin: float = 0.35):
        super().__init__()
        LMCLParams(np.ones((1, 1)), scale, margin)
        self.scale, self.margin = scale, margin
        self.weight = nn.Parameter(torch.empty(n_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)
        self.renormalize_()

    @torch.no_grad()
    def renormalize_(self):
        self.weight.div_(self.weight.norm(dim=1, keepdim=True))

    def cosine(self, x):
        return F.normalize(x, dim=1) @ F.normalize(self.weight, dim=1).T

    def forward(self, x):
        """Inference logits: scale * cos, no margin."""
        return self.scale * self.cosine(x)

    def loss(self, x, labels):
        cos = self.cosine(x)
        margin = F.one_hot(labels, cos.shape[1]).to(cos.dtype) * self.margin
        return F.cross_entropy(self.scale * (cos - margin), labels)


# --------------------------------------------------------------------------
# heads and losses


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.shape[0] != len(self.class_names) or self.bias.shape != (len(self.class_names),):
            raise ModelError("head rows, bias length and class names disagree")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ModelError("non-finite head parameters")

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]


def head_logits(head: ClassifierHead, embedding) -> np.ndarray:
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape[-1] != head.embed_dim:
        raise ModelError(f"embedding dim {embedding.shape[-1]} != head dim {head.embed_dim}")
    return embedding @ head.weight.T + head.bias


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def ce_loss(logits, labels) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return float(-np.mean(log_softmax(logits)[np.arange(len(y)), y]))


class MLPHead(nn.Module):
    """Affine head, optionally with hidden ReLU layers."""

    def __init__(self, embed_dim: int, n_classes: int, hidden: Sequence[int] = ()):
        super().__init__()
        dims = [embed_dim, *hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(dims[-1], n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def as_classifier_head(self, class_names) -> ClassifierHead:
        if len(self.net) != 1:
            raise ModelError("only single-layer heads export as ClassifierHead")
        lin = self.net[0]
        return ClassifierHead(lin.weight.detach().double().numpy(), lin.bias.detach().double().numpy(),
                              list(class_names))


# --------------------------------------------------------------------------
# embedding providers


class EmbeddingProvider:
    name: str
    dim: int
    mode: str

    def embed(self, uid: str, features=None) -> np.ndarray:
        raise NotImplementedError


class BackboneProvider(EmbeddingProvider):
    mode = "trainable_backbone"

    def __init__(self, model: ResNetBackbone, name: str = "resnet"):
        self.model, self.name, self.dim = model, name, model.cfg.embed_dim

    def embed(self, uid, features=None):
        if features is None:
            raise ModelError(f"backbone provider needs features for {uid!r}")
        values = features.values if hasattr(features, "values") else features
        return backbone_embed(self.model, values)

    def embed_batch(self, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        outs = []
        with torch.no_grad():
            for i in range(0, len(batch), chunk):
                outs.append(self.model(torch.as_tensor(batch[i:i + chunk], dtype=dtype)).double().numpy())
        return np.concatenate(outs) if outs else np.zeros((0, self.dim))


class FixtureProvider(EmbeddingProvider):
    """Read-only lookup into precomputed embeddings (e.g. SSL or Whisper countermeasures)."""

    mode = "fixture_file"

    def __init__(self, emb: EmbeddingSet, name: str = "fixture"):
        self.emb, self.name, self.dim = emb, name, emb.dim
        self._rows = {k: i for i, k in enumerate(emb.ids)}

    def embed(self, uid, features=None):
        try:
            return self.emb.vectors[self._rows[uid]]
        except KeyError:
            raise ModelError(f"fixture {self.name!r} has no embedding for {uid!r}") from None


# --------------------------------------------------------------------------
# prediction


def predict(provider: EmbeddingProvider, scorer, uid: str, features=None) -> tuple[str, np.ndarray]:
    """Classify one utterance; ties resolve to the lowest class index.

    ``scorer`` is a :class:`ClassifierHead` or an ``(LMCLParams, class_names)`` pair.
    """
    emb = provider.embed(uid, features)
    if isinstance(scorer, ClassifierHead):
        if scorer.embed_dim != provider.dim:
            raise ModelError(f"head dim {scorer.embed_dim} != provider dim {provider.dim}")
        names, logits = scorer.class_names, head_logits(scorer, emb)
    else:
        params, names = scorer
        if params.weight.shape[0] != len(names):
            raise ModelError("class-name list does not match LMCL weight rows")
        wh, _ = _unit_rows(np.asarray(params.weight, dtype=np.float64), "class weight")
        logits = params.scale * (wh @ (emb / np.linalg.norm(emb)))
    probs = softmax(logits)
    return names[int(np.argmax(probs))], probs


# --------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    """Named float32 arrays plus config, class names and provenance."""

    params: dict[str, np.ndarray]
    config: dict
    class_names: list[str]
    provenance: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    selection: dict = field(default_factory=dict)

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    meta = {"config": ckpt.config, "class_names": ckpt.class_names, "provenance": ckpt.provenance,
            "history": ckpt.history, "selection": ckpt.selection}
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float32) for k, v in ckpt.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    return Checkpoint(params, meta["config"], meta["class_names"], meta["provenance"],
                      meta["history"], meta["selection"])


def state_to_params(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def params_to_state(module: nn.Module, params: Mapping[str, np.ndarray], prefix: str) -> None:
    state = {k[len(prefix) + 1:]: torch.as_tensor(np.array(v)) for k, v in params.items()
             if k.startswith(prefix + ".")}
    own = module.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise ModelError(f"checkpoint lacks {prefix} parameters {sorted(missing)[:3]}")
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})


def resnet_config_from(cfg: Mapping) -> ResNetConfig:
    fields = ResNetConfig.__dataclass_fields__
    return ResNetConfig(**{k: v for k, v in cfg.items() if k in fields})


def resnet_config_dict(cfg: ResNetConfig) -> dict:
    d = asdict(cfg)
    d["blocks"], d["channels"] = list(cfg.blocks), list(cfg.channels)
    return d
