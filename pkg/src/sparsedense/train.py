"""Training orchestration: batching, schedules, ablations, model selection.

Each batch holds N distinct images with one caption sampled uniformly
per image, so every off-diagonal entry of the batch score matrices is a
true negative.  The best checkpoint is chosen by validation sparse
MRR@10 because the served artifact is the sparse retriever.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import EmbeddingTable, PairedDataset
from .errors import ConfigError, NumericError
from .evaluation import compute_metrics, rank_queries
from .grad import LossSettings, backward, init_optimizer, optimizer_step
from .index import flops_from_matrices
from .losses import LossWeights, SparsitySchedule, l1_weights_at
from .model import ParamSet, encode_batch, init_params
from .rng import SplitMix64, derive_seed
from .scoring import IntegrationWeights


@dataclass
class TrainConfig:
    batch_size: int
    seed: int = 0
    epochs: int = 200
    learning_rate: float = 0.01
    lambdas: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1.0, 1.0))
    weights: IntegrationWeights = field(default_factory=lambda: IntegrationWeights(0.3, 0.7))
    schedule: SparsitySchedule = field(
        default_factory=lambda: SparsitySchedule(0.01, 0.01, 100))
    self_distillation: bool = True
    finetune_final_layer: bool = True
    validate_every: int = 10
    head_init_noise: float = 0.01
    initial_tau: float = 0.07

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.validate_every < 1:
            raise ConfigError("validate_every must be >= 1")


@dataclass
class TrainData:
    """Everything the trainer reads; all tables are frozen inputs."""

    images: EmbeddingTable
    captions: EmbeddingTable
    train_pairs: PairedDataset
    vocab_size: int
    val_pairs: PairedDataset | None = None
    word_embeddings: np.ndarray | None = None

    @property
    def validation_pairs(self) -> PairedDataset:
        return self.val_pairs if self.val_pairs is not None else self.train_pairs


class Batch(NamedTuple):
    image_ids: list[str]
    caption_ids: list[str]


def make_batches(dataset: PairedDataset, batch_size: int, seed: int,
                 epoch: int) -> list[Batch]:
    """Deterministic batches of distinct images, one caption each.

    The image order is a seeded shuffle of the dataset, re-derived per
    epoch; captions are drawn uniformly from each image's list with the
    same stream.  A trailing partial batch is dropped.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds image count {n}")
    stream = SplitMix64(derive_seed(seed, 0xBA7C, epoch))
    order = list(range(n))
    stream.shuffle(order)
    batches = []
    for start in range(0, n - batch_size + 1, batch_size):
        image_ids = []
        caption_ids = []
        for idx in order[start:start + batch_size]:
            image_id, captions = dataset.pairs[idx]
            image_ids.append(image_id)
            caption_ids.append(captions[stream.below(len(captions))])
        batches.append(Batch(image_ids=image_ids, caption_ids=caption_ids))
    return batches


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    initial: dict | None = None
    best_epoch: int = 0
    best_sparse_mrr: float = -1.0
    diverged: bool = False
    divergence_message: str = ""

    def to_jsonl(self) -> str:
        lines = []
        if self.initial is not None:
            lines.append(json.dumps({"event": "init", **self.initial}, sort_keys=True))
        for record in self.epochs:
            lines.append(json.dumps({"event": "epoch", **record}, sort_keys=True))
        lines.append(json.dumps({
            "event": "final", "best_epoch": self.best_epoch,
            "best_sparse_mrr": self.best_sparse_mrr,
            "diverged": self.diverged,
            "divergence_message": self.divergence_message,
        }, sort_keys=True))
        return "".join(line + "\n" for line in lines)


def _validate(params: ParamSet, data: TrainData) -> dict:
    pairs = data.validation_pairs
    metrics = {}
    for mode in ("dense", "sparse"):
        results = rank_queries(params, data.images, data.captions, pairs, mode)
        report = compute_metrics(results)
        metrics[mode] = {"r_at_1": report.r_at_1, "r_at_5": report.r_at_5,
                         "mrr_at_10": report.mrr_at_10}
    pool = [i for i in pairs.image_ids]
    _, z_i = encode_batch(data.images.gather(pool), "image", params)
    _, z_t = encode_batch(data.captions.gather(pairs.caption_ids), "text", params)
    metrics["flops"] = flops_from_matrices(z_t, z_i).flops
    return metrics


def fit(config: TrainConfig, data: TrainData,
        report_path: str | Path | None = None) -> tuple[ParamSet, TrainReport]:
    """Train and return the best checkpoint with the per-epoch report.

    Ablations: ``self_distillation=False`` removes the distillation
    term from the objective and nothing else; ``finetune_final_layer=
    False`` zero-masks the final-layer gradients so those tensors never
    move.  A non-finite loss aborts training and returns the parameters
    from the last step whose loss was finite.
    """
    dim = data.images.dim
    if data.captions.dim != dim:
        raise ConfigError("image and caption tables disagree on dim")
    params = init_params(dim, data.vocab_size, config.seed,
                         word_embeddings=data.word_embeddings,
                         hidden_noise=config.head_init_noise,
                         initial_tau=config.initial_tau)
    optimizer = init_optimizer(params, config.learning_rate)
    report = TrainReport()
    report.initial = {"epoch": 0, "val": _validate(params, data)}
    best_params = params.copy()
    report.best_epoch = 0
    report.best_sparse_mrr = report.initial["val"]["sparse"]["mrr_at_10"]
    last_good = params.copy()

    sink = open(report_path, "a", encoding="utf-8") if report_path else None
    if sink:
        sink.write(json.dumps({"event": "init", **report.initial}, sort_keys=True) + "\n")
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            batches = make_batches(data.train_pairs, config.batch_size,
                                   config.seed, epoch)
            sums: dict[str, float] = {}
            for batch in batches:
                eta_text, eta_image = l1_weights_at(step, config.schedule)
                settings = LossSettings(
                    lambdas=config.lambdas, weights=config.weights,
                    eta_text=eta_text, eta_image=eta_image,
                    self_distillation=config.self_distillation)
                text_penult = data.captions.gather(batch.caption_ids)
                image_penult = data.images.gather(batch.image_ids)
                try:
                    breakdown, grads = backward(text_penult, image_penult,
                                                params, settings)
                except NumericError as exc:
                    report.diverged = True
                    report.divergence_message = f"epoch {epoch}: {exc}"
                    return last_good, _finish(report, sink)
                last_good = params.copy()
                if not config.finetune_final_layer:
                    for name in ("text_final.weight", "text_final.bias",
                                 "image_final.weight", "image_final.bias"):
                        grads[name] = np.zeros_like(grads[name])
                optimizer_step(params, grads, optimizer)
                step += 1
                for key, value in dataclasses.asdict(breakdown).items():
                    sums[key] = sums.get(key, 0.0) + value
            record = {"epoch": epoch, "steps": step,
                      "loss": {k: v / len(batches) for k, v in sums.items()}}
            if epoch % config.validate_every == 0 or epoch == config.epochs:
                val = _validate(params, data)
                record["val"] = val
                mrr = val["sparse"]["mrr_at_10"]
                if mrr > report.best_sparse_mrr:
                    report.best_sparse_mrr = mrr
                    report.best_epoch = epoch
                    best_params = params.copy()
            report.epochs.append(record)
            if sink:
                sink.write(json.dumps({"event": "epoch", **record}, sort_keys=True) + "\n")
        return best_params, _finish(report, sink)
    finally:
        if sink:
            sink.close()


def _finish(report: TrainReport, sink) -> TrainReport:
    if sink:
        sink.write(json.dumps({
            "event": "final", "best_epoch": report.best_epoch,
            "best_sparse_mrr": report.best_sparse_mrr,
            "diverged": report.diverged,
            "divergence_message": report.divergence_message,
        }, sort_keys=True) + "\n")
    return report
