"""N-way K-shot episodes: sampling, cosine-softmax classification, episodic
fine-tuning of the completion network, and the evaluation/diagnostic harness.

Evaluation draws one RNG stream per episode (stream id = episode index), so
results are reproducible bit-for-bit regardless of how many worker threads
run the episodes. ``PROTOFUSE_THREADS`` caps the pool; aggregation happens in
fixed index order.

Embeddings are treated as a fixed feature space throughout: episodic
fine-tuning updates only the completion network and the classifier scale.
Gradients flow through the whole episode loss, including the fusion stage
and its soft assignments.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import completion as cp
from . import fusion
from . import nn
from .datagen import FewShotDataset
from .knowledge import AttributeStats, PrimitiveKnowledge

MODE_MEAN_ONLY = "mean-only"
MODE_COMPLETED_ONLY = "completed-only"
MODE_MEAN_FUSION = "mean-fusion"
MODE_GAUSS_FUSION = "gauss-fusion"
MODES = (MODE_MEAN_ONLY, MODE_COMPLETED_ONLY, MODE_MEAN_FUSION, MODE_GAUSS_FUSION)


@dataclass
class Episode:
    """Support and query sets over a sorted class roster.

    Labels are global class ids; ``roster`` maps positions to ids. Support
    and query rows never share a dataset index.
    """

    roster: np.ndarray          # (n_way,) sorted class ids
    support_x: np.ndarray       # (n_way * k_shot, d)
    support_y: np.ndarray       # (n_way * k_shot,)
    query_x: np.ndarray         # (n_way * m_query, d)
    query_y: np.ndarray         # (n_way * m_query,)
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def n_way(self) -> int:
        return self.roster.shape[0]

    @property
    def k_shot(self) -> int:
        return self.support_x.shape[0] // self.n_way

    def position_of(self, class_id) -> int:
        return int(np.searchsorted(self.roster, class_id))

    def support_of(self, class_id) -> np.ndarray:
        return self.support_x[self.support_y == class_id]


def sample_episode(dataset: FewShotDataset, n_way: int, k_shot: int, m_query: int,
                   rng: np.random.Generator) -> Episode:
    """Uniform classes without replacement, then uniform disjoint samples."""
    class_ids = dataset.class_ids()
    if class_ids.size < n_way:
        raise ValueError(f"dataset has {class_ids.size} classes, needs {n_way}")
    chosen = np.sort(rng.choice(class_ids, size=n_way, replace=False))
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    sup_idx, qry_idx = [], []
    for cid in chosen:
        rows = dataset.indices_of(cid)
        if rows.size < k_shot + m_query:
            raise ValueError(
                f"class {cid} has {rows.size} samples, needs {k_shot + m_query}")
        picked = rng.choice(rows, size=k_shot + m_query, replace=False)
        sup_idx.append(picked[:k_shot])
        qry_idx.append(picked[k_shot:])
        sup_x.append(dataset.embeddings[picked[:k_shot]])
        qry_x.append(dataset.embeddings[picked[k_shot:]])
        sup_y.append(np.full(k_shot, cid, dtype=np.int64))
        qry_y.append(np.full(m_query, cid, dtype=np.int64))
    return Episode(
        roster=chosen,
        support_x=np.vstack(sup_x),
        support_y=np.concatenate(sup_y),
        query_x=np.vstack(qry_x) if m_query else np.empty((0, dataset.dim)),
        query_y=np.concatenate(qry_y) if m_query else np.empty(0, dtype=np.int64),
        support_indices=np.concatenate(sup_idx),
        query_indices=np.concatenate(qry_idx) if m_query else np.empty(0, dtype=np.int64),
    )


def mean_prototype(episode: Episode, class_id) -> np.ndarray:
    """Arithmetic mean of the class's support embeddings."""
    if class_id not in episode.roster:
        raise ValueError(f"class {class_id} is not in the episode roster")
    return episode.support_of(class_id).mean(axis=0)


def mean_prototypes(episode: Episode) -> np.ndarray:
    return np.stack([mean_prototype(episode, cid) for cid in episode.roster])


def classify(query, prototypes, scale_gamma: float) -> np.ndarray:
    """softmax(scale * cosine) over the prototype rows; the argmax is
    independent of the (positive) scale."""
    if not scale_gamma > 0:
        raise ValueError("scale_gamma must be positive")
    query = np.asarray(query, dtype=np.float64)
    sims = fusion.cosine_matrix(query[None, :], np.asarray(prototypes, np.float64))[0]
    shifted = scale_gamma * sims
    shifted = shifted - shifted.max()
    weights = np.exp(shifted)
    return weights / weights.sum()


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Per-episode RNG stream: deterministic in (seed, index) only."""
    return np.random.default_rng([int(seed), int(index)])


def _transductive_pool(episode: Episode):
    """(embeddings, labels-as-positions) for S then Q; queries unlabeled."""
    x = np.vstack([episode.support_x, episode.query_x])
    positions = np.searchsorted(episode.roster, episode.support_y)
    labels = np.concatenate([positions, np.full(episode.query_y.shape[0], -1, np.int64)])
    return x, labels


def completed_prototypes(params, knowledge, stats, episode: Episode,
                         mode: str = cp.MODE_TEST,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    means = mean_prototypes(episode)
    return np.stack([
        cp.complete_prototype(params, knowledge, stats, int(cid), means[i], mode, rng)
        for i, cid in enumerate(episode.roster)
    ])


def episode_prototypes(params, knowledge, stats, episode: Episode, mode: str,
                       lam: float = fusion.DEFAULT_LAMBDA,
                       floor: float = fusion.EPSILON_VARIANCE):
    """Prototype matrix for the requested ablation mode (plus fusion details
    when the mode runs the full fusion)."""
    means = mean_prototypes(episode)
    if mode == MODE_MEAN_ONLY:
        return means, None
    completed = completed_prototypes(params, knowledge, stats, episode)
    if mode == MODE_COMPLETED_ONLY:
        return completed, None
    if mode == MODE_MEAN_FUSION:
        return np.stack([fusion.mean_fuse(means[i], completed[i])
                         for i in range(means.shape[0])]), None
    if mode == MODE_GAUSS_FUSION:
        x, labels = _transductive_pool(episode)
        result = fusion.fuse_prototypes(x, labels, means, completed, lam, floor)
        return result.fused, result
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass
class EvalReport:
    mode: str
    n_way: int
    k_shot: int
    episodes: int
    seed: int
    per_episode: list
    mean_acc: float = field(init=False)
    ci95: float = field(init=False)

    def __post_init__(self):
        accs = np.asarray(self.per_episode, dtype=np.float64)
        if accs.size != self.episodes:
            raise ValueError("per-episode accuracies must match the episode count")
        if accs.size and ((accs < 0).any() or (accs > 1).any()):
            raise ValueError("accuracies must lie in [0, 1]")
        self.mean_acc = float(accs.mean())
        self.ci95 = float(1.96 * accs.std() / np.sqrt(accs.size))

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "episodes": self.episodes,
            "mean_acc": self.mean_acc,
            "ci95": self.ci95,
            "seed": self.seed,
            "per_episode": list(map(float, self.per_episode)),
        }


def _episode_accuracy(params, knowledge, stats, episode: Episode, mode: str,
                      lam: float, floor: float):
    prototypes, detail = episode_prototypes(params, knowledge, stats, episode, mode, lam, floor)
    sims = fusion.cosine_matrix(episode.query_x, prototypes)
    predicted = episode.roster[np.argmax(sims, axis=1)]
    return float(np.mean(predicted == episode.query_y)), detail


def _worker_count() -> int:
    env = os.environ.get("PROTOFUSE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(params, dataset: FewShotDataset, knowledge: PrimitiveKnowledge,
             stats: AttributeStats, mode: str, n_way: int = 5, k_shot: int = 1,
             m_query: int = 15, num_episodes: int = 600, seed: int = 0,
             lam: float = fusion.DEFAULT_LAMBDA,
             floor: float = fusion.EPSILON_VARIANCE,
             fusion_dump: list | None = None) -> EvalReport:
    """Accuracy over freshly sampled episodes, reported with a 95% CI.

    When ``fusion_dump`` is a list and the mode runs the full fusion, one
    diagnostic entry per episode is appended to it (in episode order).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")

    def run(index: int):
        episode = sample_episode(dataset, n_way, k_shot, m_query, episode_rng(seed, index))
        return _episode_accuracy(params, knowledge, stats, episode, mode, lam, floor)

    workers = _worker_count()
    if workers > 1 and num_episodes >= 2 * workers:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(num_episodes)))
    else:
        outcomes = [run(i) for i in range(num_episodes)]
    accuracies = [acc for acc, _ in outcomes]
    if fusion_dump is not None and mode == MODE_GAUSS_FUSION:
        for i, (_, detail) in enumerate(outcomes):
            fusion_dump.append(_fusion_dump_entry(i, detail))
    return EvalReport(mode=mode, n_way=n_way, k_shot=k_shot, episodes=num_episodes,
                      seed=seed, per_episode=accuracies)


def _fusion_dump_entry(index: int, result: fusion.FusionResult) -> dict:
    return {
        "episode": index,
        "mean_based": [{"mean": g.mean.tolist(), "variance": g.variance.tolist()}
                       for g in result.mean_based],
        "completed": [{"mean": g.mean.tolist(), "variance": g.variance.tolist()}
                      for g in result.completed],
        "posterior": [{"mean": g.mean.tolist(), "variance": g.variance.tolist()}
                      for g in result.posterior],
        "responsibilities_mean": result.assignment_mean.matrix.tolist(),
        "responsibilities_completed": result.assignment_completed.matrix.tolist(),
    }


def meta_episode_loss(tensors, knowledge: PrimitiveKnowledge, episode: Episode,
                      draws_by_class: dict, lam: float = fusion.DEFAULT_LAMBDA,
                      floor: float = fusion.EPSILON_VARIANCE):
    """Cross-entropy of query labels under the full fused pipeline.

    ``draws_by_class`` maps class ids to their attribute feature draws, so the
    same loss can be re-evaluated with frozen sampling noise. Generic over
    traced and plain tensors.
    """
    means = mean_prototypes(episode)
    completed_rows = [
        cp._complete(tensors, knowledge, int(cid), means[i], draws_by_class[int(cid)])
        for i, cid in enumerate(episode.roster)
    ]
    x, labels = _transductive_pool(episode)
    fused_rows = fusion.fused_means(x, labels, means, completed_rows, lam, floor)
    sims = fusion.cosine_matrix(episode.query_x, ad.stack(fused_rows))
    logits = ad.mul(sims, ad.exp(tensors["log_scale"]))
    positions = np.searchsorted(episode.roster, episode.query_y)
    mask = np.zeros((positions.size, episode.n_way))
    mask[np.arange(positions.size), positions] = 1.0
    picked = ad.sum(ad.mul(logits, mask), axis=1)
    return ad.mean(ad.sub(ad.logsumexp_rows(logits), picked))


@dataclass
class MetaTrainConfig:
    optimizer: nn.SgdConfig
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    episodes_per_epoch: int = 64
    lam: float = fusion.DEFAULT_LAMBDA
    variance_floor: float = fusion.EPSILON_VARIANCE
    seed: int = 0

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.m_query, self.episodes_per_epoch) < 1:
            raise ValueError("episode shape fields must be at least 1")


def meta_train(params: cp.CompletionNetParams, dataset: FewShotDataset,
               knowledge: PrimitiveKnowledge, stats: AttributeStats,
               config: MetaTrainConfig):
    """Episodic fine-tuning of the completion network and classifier scale.

    Minimizes query cross-entropy through completion, fusion, and the scaled
    cosine classifier; returns (params, per-epoch mean losses). Deterministic
    per config seed.
    """
    rng = np.random.default_rng(config.seed)
    losses = []
    for _ in range(config.optimizer.epochs):
        total = 0.0
        for _ in range(config.episodes_per_epoch):
            episode = sample_episode(dataset, config.n_way, config.k_shot,
                                     config.m_query, rng)
            draws = {
                int(cid): cp.draw_attribute_features(
                    stats, knowledge.attributes_of(int(cid)), cp.MODE_TRAIN, rng)
                for cid in episode.roster
            }
            leaves = params.store.leaves()
            loss = meta_episode_loss(leaves, knowledge, episode, draws,
                                     config.lam, config.variance_floor)
            if not np.isfinite(loss.value):
                raise RuntimeError("non-finite episodic loss")
            ad.backward(loss)
            params.store.accumulate(leaves)
            nn.sgd_step(params.store, config.optimizer)
            total += float(loss.value)
        losses.append(total / config.episodes_per_epoch)
    return params, losses


@dataclass
class SimilarityReport:
    """Mean cosine similarity of each prototype estimate to the true centers."""

    mean_based: float
    completed: float
    fused: float
    episodes: int

    def to_json_dict(self) -> dict:
        return {
            "mean_based": self.mean_based,
            "completed": self.completed,
            "fused": self.fused,
            "episodes": self.episodes,
        }


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def prototype_similarity_report(params, dataset: FewShotDataset, centers: np.ndarray,
                                knowledge: PrimitiveKnowledge, stats: AttributeStats,
                                num_episodes: int = 1000, n_way: int = 5,
                                k_shot: int = 1, m_query: int = 15, seed: int = 0,
                                lam: float = fusion.DEFAULT_LAMBDA,
                                floor: float = fusion.EPSILON_VARIANCE) -> SimilarityReport:
    """Average cos(prototype, center) for mean-based, completed, and fused
    prototypes over sampled episodes."""
    sums = np.zeros(3)
    count = 0
    for index in range(num_episodes):
        episode = sample_episode(dataset, n_way, k_shot, m_query, episode_rng(seed, index))
        means = mean_prototypes(episode)
        completed = completed_prototypes(params, knowledge, stats, episode)
        x, labels = _transductive_pool(episode)
        fused = fusion.fuse_prototypes(x, labels, means, completed, lam, floor).fused
        for i, cid in enumerate(episode.roster):
            center = centers[int(cid)]
            sums += (_cosine(means[i], center), _cosine(completed[i], center),
                     _cosine(fused[i], center))
            count += 1
    sums /= count
    return SimilarityReport(float(sums[0]), float(sums[1]), float(sums[2]), num_episodes)


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; leading entries average what is available."""
    if window < 1:
        raise ValueError("window must be at least 1")
    values = np.asarray(values, dtype=np.float64)
    csum = np.cumsum(values)
    out = np.empty_like(values)
    for i in range(values.size):
        lo = max(0, i - window + 1)
        total = csum[i] - (csum[lo - 1] if lo > 0 else 0.0)
        out[i] = total / (i - lo + 1)
    return out


@dataclass
class RankCurveReport:
    """Similarity-vs-rank curves, samples sorted by falling cosine to center."""

    raw: np.ndarray        # smoothed cos(sample, center) per rank
    completed: np.ndarray  # smoothed cos(completed 1-shot prototype, center)
    window: int
    classes_below_window: int

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(self.raw.size)


def rank_curve_report(params, dataset: FewShotDataset, centers: np.ndarray,
                      knowledge: PrimitiveKnowledge, stats: AttributeStats,
                      window: int = 50) -> RankCurveReport:
    """Per-rank completion diagnostic, averaged over classes then smoothed.

    Every sample is treated as a 1-shot prototype; rank r holds the class's
    r-th closest sample to its center. Classes shorter than the window shrink
    it (with a count reported).
    """
    raw_rows, completed_rows = [], []
    shortest = None
    below = 0
    for cid in dataset.class_ids():
        rows = dataset.embeddings[dataset.indices_of(cid)]
        center = centers[int(cid)]
        sims = np.array([_cosine(row, center) for row in rows])
        order = np.argsort(-sims)
        raw_rows.append(sims[order])
        completed_rows.append(np.array([
            _cosine(cp.complete_prototype(params, knowledge, stats, int(cid), rows[i]), center)
            for i in order
        ]))
        shortest = rows.shape[0] if shortest is None else min(shortest, rows.shape[0])
        if rows.shape[0] < window:
            below += 1
    max_rank = max(len(r) for r in raw_rows)

    def averaged(rows_list):
        padded = np.full((len(rows_list), max_rank), np.nan)
        for i, row in enumerate(rows_list):
            padded[i, :row.size] = row
        return np.nanmean(padded, axis=0)

    effective = min(window, shortest)
    return RankCurveReport(
        raw=moving_average(averaged(raw_rows), effective),
        completed=moving_average(averaged(completed_rows), effective),
        window=effective,
        classes_below_window=below,
    )
