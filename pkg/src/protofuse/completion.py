"""Encoder-aggregator-decoder network that completes class prototypes.

A shared encoder embeds both the incomplete prototype and the attribute
features; an attention MLP scores each associated attribute from the
concatenation (prototype, class semantic, attribute semantic); the gated,
weighted latents plus the prototype latent are decoded back to embedding
space. Attributes the class is not associated with contribute exactly zero
and are skipped.

The attention score is a raw scalar (identity output activation) with no
normalization across attributes. The classifier scale used downstream is
kept here as ``log_scale`` so one checkpoint carries the whole trainable
state; optimizing the log keeps the scale positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .fileio import atomic_write_json
from .knowledge import AttributeStats, PrimitiveKnowledge

MODE_TRAIN = "train"
MODE_TEST = "test"

ENCODER_DIM = 256
AGGREGATOR_HIDDEN = 300
DECODER_HIDDEN = 512

TENSOR_NAMES = (
    "encoder.weight", "encoder.bias",
    "aggregator.hidden.weight", "aggregator.hidden.bias",
    "aggregator.output.weight", "aggregator.output.bias",
    "decoder.hidden.weight", "decoder.hidden.bias",
    "decoder.output.weight", "decoder.output.bias",
    "log_scale",
)


@dataclass
class CompletionNetParams:
    """All learnable state: encoder, aggregator, decoder, classifier scale."""

    store: nn.ParamStore
    input_dim: int
    semantic_dim: int
    encoder_dim: int = ENCODER_DIM
    aggregator_hidden: int = AGGREGATOR_HIDDEN
    decoder_hidden: int = DECODER_HIDDEN

    @classmethod
    def initialize(cls, input_dim: int, semantic_dim: int, seed,
                   encoder_dim: int = ENCODER_DIM,
                   aggregator_hidden: int = AGGREGATOR_HIDDEN,
                   decoder_hidden: int = DECODER_HIDDEN,
                   scale_init: float = 10.0) -> "CompletionNetParams":
        if scale_init <= 0:
            raise ValueError("scale_init must be positive")
        rng = np.random.default_rng(seed)
        aggregator_in = input_dim + 2 * semantic_dim
        store = nn.ParamStore()
        store.register("encoder.weight", nn.glorot_uniform(rng, encoder_dim, input_dim))
        store.register("encoder.bias", np.zeros(encoder_dim))
        store.register("aggregator.hidden.weight",
                       nn.glorot_uniform(rng, aggregator_hidden, aggregator_in))
        store.register("aggregator.hidden.bias", np.zeros(aggregator_hidden))
        store.register("aggregator.output.weight", nn.glorot_uniform(rng, 1, aggregator_hidden))
        store.register("aggregator.output.bias", np.zeros(1))
        store.register("decoder.hidden.weight", nn.glorot_uniform(rng, decoder_hidden, encoder_dim))
        store.register("decoder.hidden.bias", np.zeros(decoder_hidden))
        store.register("decoder.output.weight", nn.glorot_uniform(rng, input_dim, decoder_hidden))
        store.register("decoder.output.bias", np.zeros(input_dim))
        store.register("log_scale", np.log(scale_init))
        return cls(store, input_dim, semantic_dim, encoder_dim, aggregator_hidden, decoder_hidden)

    def tensors(self) -> dict:
        """Live parameter arrays by name (the untraced fast path)."""
        return {name: self.store.value(name) for name in self.store.names()}

    def leaves(self) -> dict:
        """Fresh leaf Nodes for one traced forward/backward pass."""
        return self.store.leaves()

    @property
    def scale_gamma(self) -> float:
        return float(np.exp(self.store.value("log_scale")))


def _tensor_dict(params) -> dict:
    return params.tensors() if isinstance(params, CompletionNetParams) else params


def encode(params, x):
    """Shared encoder: relu(W x + b)."""
    t = _tensor_dict(params)
    w = ad.value_of(t["encoder.weight"])
    xv = ad.value_of(x)
    if xv.shape != (w.shape[1],):
        raise ValueError(f"encoder expects a {w.shape[1]}-vector, got shape {xv.shape}")
    return ad.relu(ad.add(ad.matmul(t["encoder.weight"], x), t["encoder.bias"]))


def sample_attribute_feature(stats: AttributeStats, attribute: int, mode: str,
                             rng: np.random.Generator | None = None) -> np.ndarray:
    """One attribute feature draw: mean + std * eps in train mode, mean in test."""
    if not 0 <= attribute < stats.num_attributes:
        raise KeyError(f"unknown attribute id {attribute}")
    if mode == MODE_TEST:
        return stats.mean[attribute].copy()
    if mode == MODE_TRAIN:
        if rng is None:
            raise ValueError("train mode requires an rng")
        eps = rng.standard_normal(stats.dim)
        return stats.mean[attribute] + stats.std[attribute] * eps
    raise ValueError(f"mode must be '{MODE_TRAIN}' or '{MODE_TEST}', got {mode!r}")


def draw_attribute_features(stats: AttributeStats, attributes, mode: str,
                            rng: np.random.Generator | None = None) -> dict:
    return {int(a): sample_attribute_feature(stats, int(a), mode, rng) for a in attributes}


def _attention_scores(tensors, knowledge: PrimitiveKnowledge, class_id: int,
                      incomplete: np.ndarray, attrs: np.ndarray):
    """Raw attention scalars for the given attribute indices, shape (len(attrs),)."""
    h_class = knowledge.class_semantics[class_id]
    inputs = np.stack([
        np.concatenate([incomplete, h_class, knowledge.attribute_semantics[a]])
        for a in attrs
    ])
    hidden = ad.relu(ad.add(ad.matmul(inputs, ad.transpose(tensors["aggregator.hidden.weight"])),
                            tensors["aggregator.hidden.bias"]))
    scores = ad.add(ad.matmul(hidden, ad.transpose(tensors["aggregator.output.weight"])),
                    tensors["aggregator.output.bias"])
    return ad.reshape(scores, (len(attrs),))


def aggregate(params, knowledge: PrimitiveKnowledge, class_id: int, incomplete,
              attribute_latents: dict, prototype_latent):
    """Attention-gated combination of attribute latents with the prototype latent.

    Returns (combined latent, weights) where ``weights`` maps every supplied
    attribute index to its attention scalar; attributes the class is not
    associated with get exactly 0 and their score MLP is never evaluated.
    """
    t = _tensor_dict(params)
    incomplete = np.asarray(ad.value_of(incomplete), dtype=np.float64)
    gated = [a for a in sorted(attribute_latents) if knowledge.association[class_id, a]]
    weights = {a: 0.0 for a in attribute_latents}
    if not gated:
        return prototype_latent, weights
    alphas = _attention_scores(t, knowledge, class_id, incomplete, np.asarray(gated))
    latents = ad.stack([attribute_latents[a] for a in gated])
    combined = ad.add(ad.matmul(ad.transpose(latents), alphas), prototype_latent)
    for a, alpha in zip(gated, np.asarray(ad.value_of(alphas))):
        weights[a] = float(alpha)
    return combined, weights


def _decode(tensors, combined):
    hidden = ad.relu(ad.add(ad.matmul(tensors["decoder.hidden.weight"], combined),
                            tensors["decoder.hidden.bias"]))
    return ad.add(ad.matmul(tensors["decoder.output.weight"], hidden),
                  tensors["decoder.output.bias"])


def _complete(tensors, knowledge: PrimitiveKnowledge, class_id: int,
              incomplete: np.ndarray, attribute_values: dict):
    """Full completion pass; generic over plain arrays and traced Nodes.

    ``attribute_values`` maps associated attribute ids to their (constant)
    feature draws. The aggregated latent feeds the decoder; a class with no
    associated attributes decodes its own encoded prototype.
    """
    incomplete = np.asarray(incomplete, dtype=np.float64)
    z_proto = ad.relu(ad.add(ad.matmul(tensors["encoder.weight"], incomplete),
                             tensors["encoder.bias"]))
    attrs = [a for a in sorted(attribute_values) if knowledge.association[class_id, a]]
    if attrs:
        features = np.stack([attribute_values[a] for a in attrs])
        latents = ad.relu(ad.add(ad.matmul(features, ad.transpose(tensors["encoder.weight"])),
                                 tensors["encoder.bias"]))
        alphas = _attention_scores(tensors, knowledge, class_id, incomplete,
                                   np.asarray(attrs))
        combined = ad.add(ad.matmul(ad.transpose(latents), alphas), z_proto)
    else:
        combined = z_proto
    return _decode(tensors, combined)


def complete_prototype(params, knowledge: PrimitiveKnowledge, stats: AttributeStats,
                       class_id: int, incomplete, mode: str = MODE_TEST,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Complete one prototype. Test mode is a pure function of its inputs."""
    t = _tensor_dict(params)
    incomplete = np.asarray(ad.value_of(incomplete), dtype=np.float64)
    d = ad.value_of(t["encoder.weight"]).shape[1]
    if incomplete.shape != (d,):
        raise ValueError(f"prototype must be a {d}-vector, got shape {incomplete.shape}")
    if not 0 <= class_id < knowledge.num_classes:
        raise ValueError(f"unknown class id {class_id}")
    draws = draw_attribute_features(stats, knowledge.attributes_of(class_id), mode, rng)
    return _complete(t, knowledge, class_id, incomplete, draws)


@dataclass
class CompletionTask:
    """One prototype-completion training episode for a base class."""

    class_id: int
    support: np.ndarray     # (k_shot, d)
    incomplete: np.ndarray  # (d,) mean of the support rows
    target: np.ndarray      # (d,) the full-class prototype

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.float64)
        self.incomplete = np.asarray(self.incomplete, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.support.ndim != 2 or self.support.shape[0] < 1:
            raise ValueError("support must hold at least one embedding")
        if self.incomplete.shape != (self.support.shape[1],):
            raise ValueError("incomplete prototype dimension mismatch")
        if self.target.shape != self.incomplete.shape:
            raise ValueError("target dimension mismatch")


def sample_completion_tasks(embeddings, labels, prototypes, k_shot: int, count: int,
                            rng: np.random.Generator) -> list:
    """Uniformly draw (class, k_shot support rows without replacement) tasks.

    The incomplete prototype is the support mean; the target is the class's
    full prototype from ``prototypes``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    class_ids = list(prototypes.class_ids)
    by_class = {cid: np.flatnonzero(y == cid) for cid in class_ids}
    for cid, rows in by_class.items():
        if rows.size < k_shot:
            raise ValueError(f"class {cid} has {rows.size} samples, fewer than k_shot={k_shot}")
    tasks = []
    for _ in range(count):
        cid = class_ids[rng.integers(len(class_ids))]
        chosen = rng.choice(by_class[cid], size=k_shot, replace=False)
        support = x[chosen]
        tasks.append(CompletionTask(
            class_id=cid,
            support=support,
            incomplete=support.mean(axis=0),
            target=prototypes.prototype(cid),
        ))
    return tasks


def completion_loss(tensors, knowledge: PrimitiveKnowledge, task: CompletionTask,
                    attribute_values: dict):
    """Mean-over-dimensions squared error of the completed prototype."""
    predicted = _complete(tensors, knowledge, task.class_id, task.incomplete, attribute_values)
    diff = ad.sub(predicted, task.target)
    return ad.mean(ad.mul(diff, diff))


def train_completion(params: CompletionNetParams, knowledge: PrimitiveKnowledge,
                     stats: AttributeStats, tasks, config: nn.SgdConfig,
                     rng: np.random.Generator) -> list:
    """SGD over completion tasks; returns the per-epoch mean loss curve.

    The task list is consumed in ``config.epochs`` consecutive chunks, so
    callers control how many fresh episodes each epoch sees. Attribute
    features are re-sampled (train mode) per task.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no completion tasks provided")
    if len(tasks) < config.epochs:
        raise ValueError(f"{len(tasks)} tasks cannot fill {config.epochs} epochs")
    losses = []
    for chunk in np.array_split(np.arange(len(tasks)), config.epochs):
        total = 0.0
        for index in chunk:
            task = tasks[index]
            draws = draw_attribute_features(
                stats, knowledge.attributes_of(task.class_id), MODE_TRAIN, rng)
            leaves = params.store.leaves()
            loss = completion_loss(leaves, knowledge, task, draws)
            if not np.isfinite(loss.value):
                raise RuntimeError(
                    f"non-finite completion loss on class {task.class_id}")
            ad.backward(loss)
            params.store.accumulate(leaves)
            nn.sgd_step(params.store, config)
            total += float(loss.value)
        losses.append(total / len(chunk))
    return losses


def save_model(params: CompletionNetParams, path, metadata: dict | None = None) -> None:
    """Binary checkpoint plus a JSON sidecar (dims, scale, training metadata)."""
    nn.save_checkpoint(params.store, path)
    sidecar = {
        "input_dim": params.input_dim,
        "semantic_dim": params.semantic_dim,
        "encoder_dim": params.encoder_dim,
        "aggregator_hidden": params.aggregator_hidden,
        "decoder_hidden": params.decoder_hidden,
        "scale_gamma": params.scale_gamma,
        "metadata": metadata or {},
    }
    atomic_write_json(str(path) + ".json", sidecar)


def load_model(path) -> tuple:
    """Load a checkpoint + sidecar pair; returns (params, metadata)."""
    import json

    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    tensors = nn.load_checkpoint(path)
    missing = [name for name in TENSOR_NAMES if name not in tensors]
    if missing:
        raise nn.CheckpointError(f"checkpoint is missing tensors: {missing}")
    store = nn.ParamStore()
    for name in TENSOR_NAMES:
        store.register(name, tensors[name])
    params = CompletionNetParams(
        store=store,
        input_dim=int(sidecar["input_dim"]),
        semantic_dim=int(sidecar["semantic_dim"]),
        encoder_dim=int(sidecar["encoder_dim"]),
        aggregator_hidden=int(sidecar["aggregator_hidden"]),
        decoder_hidden=int(sidecar["decoder_hidden"]),
    )
    expected = {
        "encoder.weight": (params.encoder_dim, params.input_dim),
        "decoder.output.weight": (params.input_dim, params.decoder_hidden),
        "log_scale": (),
    }
    for name, shape in expected.items():
        if store.value(name).shape != shape:
            raise nn.CheckpointError(
                f"tensor '{name}' has shape {store.value(name).shape}, expected {shape}")
    return params, sidecar.get("metadata", {})
