"""Text-only and text+audio dialect classifiers, training and bundles."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .corpus import DialectLabel, REGISTRY, Registry, Utterance
from .dsp import DspConfig, Waveform, extract_features, load_features, resample
from .text import Vocabulary, build_vocab, encode_fixed, tokenize

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"MRID"
BUNDLE_VERSION = 1
SUPPORTED_VERSIONS = (BUNDLE_VERSION,)


class BundleError(ValueError):
    pass


class AudioRequired(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    hidden: int = 64
    text_layers: int = 2
    audio_layers: int = 1
    audio_proj: int = 64
    pool_rows: int = 8
    text_length: int = 64
    granularity: str = "word"
    min_count: int = 1
    max_vocab: int | None = 20000
    dropout: float = 0.2


TEXT_DEFAULTS = ModelConfig()
FUSION_DEFAULTS = ModelConfig(text_layers=1)


def _round32(params: nn.Params) -> None:
    # weights live on the float32 grid so bundles round-trip exactly
    for v in params.values():
        v[...] = v.astype(np.float32)


def _sub(params: nn.Params, prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


def _add(grads: nn.Params, prefix: str, sub: dict) -> None:
    for k, v in sub.items():
        grads[prefix + k] = v


def _init_bilstm_stack(rng, params: nn.Params, prefix: str, input_dim: int, hidden: int, layers: int) -> None:
    for layer in range(layers):
        d_in = input_dim if layer == 0 else 2 * hidden
        _add(params, f"{prefix}l{layer}.fwd.", nn.init_lstm(rng, d_in, hidden))
        _add(params, f"{prefix}l{layer}.bwd.", nn.init_lstm(rng, d_in, hidden))


def _stack_forward(params, prefix, layers, x, lengths):
    caches = []
    for layer in range(layers):
        x, c = nn.bilstm_forward(
            x, lengths, _sub(params, f"{prefix}l{layer}.fwd."), _sub(params, f"{prefix}l{layer}.bwd.")
        )
        caches.append(c)
    return x, caches


def _stack_backward(grads, prefix, caches, d):
    for layer in reversed(range(len(caches))):
        d, gf, gb = nn.bilstm_backward(d, caches[layer])
        _add(grads, f"{prefix}l{layer}.fwd.", gf)
        _add(grads, f"{prefix}l{layer}.bwd.", gb)
    return d


def _embed_backward(E: np.ndarray, ids: np.ndarray, dx: np.ndarray) -> np.ndarray:
    dE = np.zeros_like(E)
    np.add.at(dE, ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    return dE


@dataclass
class TextBatch:
    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class FusionBatch:
    ids: np.ndarray
    lengths: np.ndarray
    feats: np.ndarray
    feat_lengths: np.ndarray
    labels: np.ndarray | None = None


class _Classifier:
    kind = ""

    def __init__(self, vocab: Vocabulary, config: ModelConfig, params: nn.Params, labels: Registry = REGISTRY):
        self.vocab = vocab
        self.config = config
        self.params = params
        self.labels = labels

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def encode_texts(self, transcripts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        enc = [
            encode_fixed(tokenize(t, self.config.granularity), self.vocab, self.config.text_length)
            for t in transcripts
        ]
        ids = np.stack([e.ids for e in enc])
        # an empty transcript is read as a single PAD token
        lengths = np.array([max(e.true_length, 1) for e in enc])
        return ids[:, : lengths.max()], lengths

    def loss_and_grads(self, batch, train: bool = False, rng=None):
        logits, cache = self.forward(batch, train=train, rng=rng)
        loss, dlogits = nn.softmax_xent(logits, batch.labels)
        return loss, self.backward(cache, dlogits)

    def probabilities(self, batch) -> np.ndarray:
        logits, _ = self.forward(batch, train=False)
        return nn.softmax(logits)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def extra_tensors(self) -> dict[str, np.ndarray]:
        return {}


class TextOnlyModel(_Classifier):
    """Embedding, stacked BiLSTM, general attention, dense softmax head."""

    kind = "text"

    @classmethod
    def init(cls, vocab: Vocabulary, config: ModelConfig = TEXT_DEFAULTS, seed: int = 0, labels: Registry = REGISTRY):
        rng = np.random.default_rng([seed, 0])
        H, E = config.hidden, config.embed_dim
        p: nn.Params = {"embed": rng.normal(0.0, 0.1, size=(len(vocab), E))}
        _init_bilstm_stack(rng, p, "enc.", E, H, config.text_layers)
        p["att.query"] = nn.uniform_init(rng, 2 * H, 2 * H)
        p["att.W"] = nn.uniform_init(rng, (2 * H, 2 * H), 2 * H)
        p["head.W"] = nn.uniform_init(rng, (len(labels), 2 * H), 2 * H)
        p["head.b"] = np.zeros(len(labels))
        _round32(p)
        return cls(vocab, config, p, labels)

    def batch(self, transcripts: Sequence[str], labels=None) -> TextBatch:
        ids, lengths = self.encode_texts(transcripts)
        return TextBatch(ids, lengths, None if labels is None else np.asarray(labels))

    def forward(self, batch: TextBatch, train: bool = False, rng=None):
        p = self.params
        x = p["embed"][batch.ids]
        h, stack = _stack_forward(p, "enc.", self.config.text_layers, x, batch.lengths)
        ctx, att = nn.attention_pool(h, p["att.query"], p["att.W"], batch.lengths)
        logits = nn.dense_forward(ctx, p["head.W"], p["head.b"])
        return logits, (batch.ids, stack, att, ctx)

    def backward(self, cache, dlogits):
        ids, stack, att, ctx = cache
        p = self.params
        g: nn.Params = {}
        dctx, g["head.W"], g["head.b"] = nn.dense_backward(dlogits, ctx, p["head.W"])
        dh, ga = nn.attention_backward(dctx, att)
        g["att.query"], g["att.W"] = ga["query"], ga["W_a"]
        dx = _stack_backward(g, "enc.", stack, dh)
        g["embed"] = _embed_backward(p["embed"], ids, dx)
        return g


class FusionModel(_Classifier):
    """Two-branch text+audio classifier joined by concatenation.

    Text: embedding, BiLSTM, global average pooling over tokens.
    Audio: standardized features, tanh projection, BiLSTM, adaptive average
    pooling to ``pool_rows`` rows, flattened. The concatenation passes
    through dropout and a dense softmax head.
    """

    kind = "fusion"

    def __init__(self, vocab, config, params, labels=REGISTRY, dsp: DspConfig = DspConfig(),
                 feat_mean=None, feat_std=None):
        super().__init__(vocab, config, params, labels)
        self.dsp = dsp
        self.feat_mean = np.zeros(dsp.dim) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.ones(dsp.dim) if feat_std is None else np.asarray(feat_std, dtype=np.float64)

    @classmethod
    def init(cls, vocab: Vocabulary, config: ModelConfig = FUSION_DEFAULTS, seed: int = 0,
             labels: Registry = REGISTRY, dsp: DspConfig = DspConfig(), feat_mean=None, feat_std=None):
        rng = np.random.default_rng([seed, 0])
        H, E, A, D = config.hidden, config.embed_dim, config.audio_proj, dsp.dim
        p: nn.Params = {"text.embed": rng.normal(0.0, 0.1, size=(len(vocab), E))}
        _init_bilstm_stack(rng, p, "text.", E, H, config.text_layers)
        p["audio.proj.W"] = nn.uniform_init(rng, (A, D), D)
        p["audio.proj.b"] = np.zeros(A)
        _init_bilstm_stack(rng, p, "audio.", A, H, config.audio_layers)
        width = 2 * H + config.pool_rows * 2 * H
        p["head.W"] = nn.uniform_init(rng, (len(labels), width), width)
        p["head.b"] = np.zeros(len(labels))
        _round32(p)
        model = cls(vocab, config, p, labels, dsp, feat_mean, feat_std)
        model.feat_mean = model.feat_mean.astype(np.float32).astype(np.float64)
        model.feat_std = model.feat_std.astype(np.float32).astype(np.float64)
        return model

    def features(self, audio: Waveform) -> np.ndarray:
        w = resample(audio, self.dsp.target_rate_hz)
        return extract_features(w, self.dsp).frames

    def batch(self, transcripts: Sequence[str], feats: Sequence[np.ndarray], labels=None) -> FusionBatch:
        ids, lengths = self.encode_texts(transcripts)
        flens = np.array([f.shape[0] for f in feats])
        padded = np.zeros((len(feats), flens.max(), self.dsp.dim))
        for i, f in enumerate(feats):
            padded[i, : f.shape[0]] = (f - self.feat_mean) / self.feat_std
        return FusionBatch(ids, lengths, padded, flens, None if labels is None else np.asarray(labels))

    def forward(self, batch: FusionBatch, train: bool = False, rng=None):
        p, cfg = self.params, self.config
        xt = p["text.embed"][batch.ids]
        ht, tstack = _stack_forward(p, "text.", cfg.text_layers, xt, batch.lengths)
        text_vec, tpool = nn.global_avg_pool(ht, batch.lengths)

        pre = nn.dense_forward(batch.feats, p["audio.proj.W"], p["audio.proj.b"])
        xa = np.tanh(pre)
        ha, astack = _stack_forward(p, "audio.", cfg.audio_layers, xa, batch.feat_lengths)
        pooled, apool = nn.adaptive_avg_pool(ha, cfg.pool_rows, batch.feat_lengths)
        audio_vec = pooled.reshape(pooled.shape[0], -1)

        joint = np.concatenate([text_vec, audio_vec], axis=1)
        dropped, mask = nn.dropout(joint, cfg.dropout, train=train, rng=rng)
        logits = nn.dense_forward(dropped, p["head.W"], p["head.b"])
        cache = (batch, tstack, tpool, xa, astack, apool, pooled.shape, text_vec.shape[1], mask, dropped)
        return logits, cache

    def backward(self, cache, dlogits):
        batch, tstack, tpool, xa, astack, apool, pooled_shape, d_t, mask, dropped = cache
        p = self.params
        g: nn.Params = {}
        ddrop, g["head.W"], g["head.b"] = nn.dense_backward(dlogits, dropped, p["head.W"])
        djoint = nn.dropout_backward(ddrop, mask)

        dht = nn.global_avg_pool_backward(djoint[:, :d_t], tpool)
        dxt = _stack_backward(g, "text.", tstack, dht)
        g["text.embed"] = _embed_backward(p["text.embed"], batch.ids, dxt)

        dha = nn.adaptive_avg_pool_backward(djoint[:, d_t:].reshape(pooled_shape), apool)
        dxa = _stack_backward(g, "audio.", astack, dha)
        dpre = dxa * (1 - xa * xa)
        _, g["audio.proj.W"], g["audio.proj.b"] = nn.dense_backward(dpre, batch.feats, p["audio.proj.W"])
        return g

    def extra_tensors(self) -> dict[str, np.ndarray]:
        return {"norm.mean": self.feat_mean, "norm.std": self.feat_std}


ModelBundle = TextOnlyModel | FusionModel


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    kind: str
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    selected_epoch: int = 0
    steps: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _labels_of(utts: Sequence[Utterance], registry: Registry) -> np.ndarray:
    out = []
    for u in utts:
        if u.dialect.index >= len(registry) or registry.by_index(u.dialect.index) != u.dialect:
            raise ValueError(f"utterance {u.id!r}: label {u.dialect.name!r} not in the registry")
        out.append(u.dialect.index)
    return np.array(out, dtype=np.int64)


def _accuracy(model, make_batch, n: int, labels: np.ndarray, batch_size: int) -> float:
    if n == 0:
        return 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        pred = np.argmax(model.probabilities(make_batch(idx)), axis=1)
        correct += int(np.sum(pred == labels[idx]))
    return correct / n


def _fit(model, make_batch, y_train, n_val, make_val_batch, y_val, cfg: nn.TrainConfig) -> TrainReport:
    cfg.validate()
    n = len(y_train)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng([cfg.seed, 1])
    opt = nn.make_optimizer(cfg)
    report = TrainReport(kind=model.kind, config=cfg.to_dict())
    best_acc, best_params = -1.0, None
    batches_per_epoch = -(-n // cfg.batch_size)
    budget = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        budget = min(budget, cfg.max_steps)

    for epoch in range(1, cfg.epochs + 1):
        if report.steps >= budget:
            break
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            if report.steps >= budget:
                break
            idx = order[lo : lo + cfg.batch_size]
            batch = make_batch(idx)
            loss, grads = model.loss_and_grads(batch, train=True, rng=rng)
            if cfg.clip_norm is not None:
                nn.clip_grad_norm(grads, cfg.clip_norm)
            opt.step(model.params, grads)
            _round32(model.params)
            losses.append(loss)
            report.steps += 1
        report.train_loss.append(float(np.mean(losses)))
        acc = _accuracy(model, make_val_batch, n_val, y_val, max(cfg.batch_size, 32))
        report.val_accuracy.append(acc)
        log.info("epoch %d: loss %.4f, val acc %.4f", epoch, report.train_loss[-1], acc)
        # ties keep the earliest epoch; without validation data the last epoch wins
        if acc > best_acc or n_val == 0:
            best_acc, best_params = acc, copy.deepcopy(model.params)
            report.selected_epoch = epoch
    model.params = best_params
    return report


def train_text_only(
    train: Sequence[Utterance],
    val: Sequence[Utterance],
    cfg: nn.TrainConfig = nn.TrainConfig(),
    config: ModelConfig = TEXT_DEFAULTS,
    registry: Registry = REGISTRY,
) -> tuple[TextOnlyModel, TrainReport]:
    cfg.validate()
    if not train:
        raise ValueError("empty training set")
    y_train, y_val = _labels_of(train, registry), _labels_of(val, registry)
    vocab = build_vocab(
        (tokenize(u.transcript_dialectal, config.granularity) for u in train),
        config.min_count, config.max_vocab, config.granularity,
    )
    model = TextOnlyModel.init(vocab, config, cfg.seed, registry)
    tr_text = [u.transcript_dialectal for u in train]
    va_text = [u.transcript_dialectal for u in val]
    report = _fit(
        model,
        lambda idx: model.batch([tr_text[i] for i in idx], y_train[idx]),
        y_train,
        len(val),
        lambda idx: model.batch([va_text[i] for i in idx]),
        y_val,
        cfg,
    )
    return model, report


def resolve_audio(u: Utterance, audio_root: str | Path | None) -> Path:
    path = Path(u.audio_path)
    if not path.is_absolute() and audio_root is not None:
        path = Path(audio_root) / path
    return path


def utterance_features(utts: Sequence[Utterance], dsp: DspConfig, audio_root=None) -> list[np.ndarray]:
    feats = []
    for u in utts:
        if not u.audio_path:
            raise AudioRequired(f"utterance {u.id!r} has no audio")
        try:
            feats.append(load_features(resolve_audio(u, audio_root), dsp).frames)
        except (OSError, ValueError) as exc:
            raise AudioRequired(f"utterance {u.id!r}: cannot load audio: {exc}") from exc
    return feats


def train_fusion(
    train: Sequence[Utterance],
    val: Sequence[Utterance],
    cfg: nn.TrainConfig = nn.TrainConfig(),
    config: ModelConfig = FUSION_DEFAULTS,
    dsp: DspConfig = DspConfig(),
    audio_root: str | Path | None = None,
    registry: Registry = REGISTRY,
) -> tuple[FusionModel, TrainReport]:
    cfg.validate()
    dsp.validate()
    if not train:
        raise ValueError("empty training set")
    y_train, y_val = _labels_of(train, registry), _labels_of(val, registry)
    tr_feats = utterance_features(train, dsp, audio_root)
    va_feats = utterance_features(val, dsp, audio_root)
    stacked = np.concatenate(tr_feats)
    mean, std = stacked.mean(axis=0), stacked.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    vocab = build_vocab(
        (tokenize(u.transcript_dialectal, config.granularity) for u in train),
        config.min_count, config.max_vocab, config.granularity,
    )
    model = FusionModel.init(vocab, config, cfg.seed, registry, dsp, mean, std)
    tr_text = [u.transcript_dialectal for u in train]
    va_text = [u.transcript_dialectal for u in val]
    report = _fit(
        model,
        lambda idx: model.batch([tr_text[i] for i in idx], [tr_feats[i] for i in idx], y_train[idx]),
        y_train,
        len(val),
        lambda idx: model.batch([va_text[i] for i in idx], [va_feats[i] for i in idx]),
        y_val,
        cfg,
    )
    return model, report


# ---------------------------------------------------------------------------
# inference


def predict(model: ModelBundle, transcript: str, audio: Waveform | None = None) -> tuple[DialectLabel, np.ndarray]:
    """Most probable dialect (lowest index on ties) and the class distribution."""
    if isinstance(model, FusionModel):
        if audio is None:
            raise AudioRequired("audio required for a fusion model")
        batch = model.batch([transcript], [model.features(audio)])
    else:
        batch = model.batch([transcript])
    scores = model.probabilities(batch)[0]
    return model.labels.by_index(int(np.argmax(scores))), scores


def predict_many(model: ModelBundle, utts: Sequence[Utterance], audio_root=None, batch_size: int = 32) -> np.ndarray:
    preds = []
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        texts = [u.transcript_dialectal for u in chunk]
        if isinstance(model, FusionModel):
            batch = model.batch(texts, utterance_features(chunk, model.dsp, audio_root))
        else:
            batch = model.batch(texts)
        preds.append(np.argmax(model.probabilities(batch), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# bundles


def bundle_bytes(model: ModelBundle) -> bytes:
    tensors = dict(sorted(model.params.items()))
    tensors.update(model.extra_tensors())
    directory, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "kind": model.kind,
        "format_version": BUNDLE_VERSION,
        "model_config": asdict(model.config),
        "vocab": {
            "granularity": model.vocab.granularity,
            "min_count": model.vocab.min_count,
            "max_size": model.vocab.max_size,
            "tokens": list(model.vocab.tokens),
        },
        "labels": [[d.name, d.code] for d in model.labels],
        "tensors": directory,
    }
    if isinstance(model, FusionModel):
        header["dsp_config"] = model.dsp.to_dict()
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return struct.pack("<4sII", BUNDLE_MAGIC, BUNDLE_VERSION, len(blob)) + blob + b"".join(chunks)


def save_bundle(model: ModelBundle, path: str | Path) -> None:
    Path(path).write_bytes(bundle_bytes(model))


def parse_bundle(data: bytes, registry: Registry = REGISTRY) -> ModelBundle:
    if len(data) < 12 or data[:4] != BUNDLE_MAGIC:
        raise BundleError("not a model bundle")
    _, version, hlen = struct.unpack_from("<4sII", data)
    if version not in SUPPORTED_VERSIONS:
        raise BundleError(f"unsupported bundle version {version}; supported versions: {list(SUPPORTED_VERSIONS)}")
    if len(data) < 12 + hlen:
        raise BundleError("truncated model bundle (header)")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"corrupt bundle header: {exc}") from None
    payload = data[12 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise BundleError(f"truncated model bundle (tensor {entry['name']!r})")
        arr = np.frombuffer(payload[entry["offset"] : end], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    labels = [tuple(x) for x in header["labels"]]
    if labels != [(d.name, d.code) for d in registry]:
        raise BundleError("bundle label registry does not match the dialect registry")
    v = header["vocab"]
    vocab = Vocabulary(tuple(v["tokens"]), v["granularity"], v["min_count"], v["max_size"])
    config = ModelConfig(**header["model_config"])
    if header["kind"] == "text":
        return TextOnlyModel(vocab, config, tensors, registry)
    if header["kind"] == "fusion":
        mean, std = tensors.pop("norm.mean"), tensors.pop("norm.std")
        return FusionModel(vocab, config, tensors, registry, DspConfig(**header["dsp_config"]), mean, std)
    raise BundleError(f"unknown model kind {header['kind']!r}")


def load_bundle(path: str | Path, registry: Registry = REGISTRY) -> ModelBundle:
    return parse_bundle(Path(path).read_bytes(), registry)
