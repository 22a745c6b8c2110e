import dataclasses
import json

import numpy as np
import pytest

from sparsedense.data import PairedDataset
from sparsedense.errors import ConfigError
from sparsedense.evaluation import compute_metrics, rank_queries
from sparsedense.index import dense_search
from sparsedense.losses import SparsitySchedule
from sparsedense.model import init_params
from sparsedense.train import TrainConfig, TrainData, fit, make_batches


def _short_config(**overrides):
    base = dict(batch_size=25, seed=7, epochs=30, validate_every=10)
    base.update(overrides)
    return TrainConfig(**base)


class TestMakeBatches:
    def _dataset(self, n_images=10, k=3):
        return PairedDataset(pairs=[
            (f"i{p}", [f"i{p}_c{q}" for q in range(k)]) for p in range(n_images)])

    def test_single_caption_degenerates(self):
        dataset = self._dataset(k=1)
        batches = make_batches(dataset, batch_size=5, seed=0, epoch=1)
        for batch in batches:
            for image_id, caption_id in zip(batch.image_ids, batch.caption_ids):
                assert caption_id == f"{image_id}_c0"

    def test_images_distinct_within_batch(self):
        dataset = self._dataset(n_images=20)
        for epoch in range(3):
            for batch in make_batches(dataset, batch_size=7, seed=1, epoch=epoch):
                assert len(set(batch.image_ids)) == len(batch.image_ids)

    def test_deterministic_per_seed_and_epoch(self):
        dataset = self._dataset()
        a = make_batches(dataset, batch_size=4, seed=3, epoch=2)
        b = make_batches(dataset, batch_size=4, seed=3, epoch=2)
        assert a == b
        c = make_batches(dataset, batch_size=4, seed=3, epoch=3)
        assert a != c

    def test_batch_size_exceeds_images(self):
        with pytest.raises(ConfigError):
            make_batches(self._dataset(n_images=4), batch_size=5, seed=0, epoch=0)

    def test_caption_sampling_frequency(self):
        dataset = self._dataset(n_images=5, k=4)
        counts = {f"i0_c{q}": 0 for q in range(4)}
        draws = 0
        for epoch in range(2000):
            for batch in make_batches(dataset, batch_size=5, seed=11, epoch=epoch):
                for image_id, caption_id in zip(batch.image_ids, batch.caption_ids):
                    if image_id == "i0":
                        counts[caption_id] += 1
                        draws += 1
        assert draws == 2000
        sigma = np.sqrt(draws * 0.25 * 0.75)
        for caption_id, count in counts.items():
            assert abs(count - draws / 4) <= 3 * sigma, (caption_id, count)


class TestFit:
    def test_improves_sparse_retrieval(self, planted_bundle):
        params, report = fit(_short_config(), planted_bundle)
        initial = report.initial["val"]["sparse"]["r_at_1"]
        final = report.epochs[-1]["val"]["sparse"]["r_at_1"]
        assert final >= initial
        assert final >= 0.9

    def test_reproducible_bitwise(self, planted_bundle):
        config = _short_config(epochs=10)
        a, _ = fit(config, planted_bundle)
        b, _ = fit(config, planted_bundle)
        for (name, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert ta.tobytes() == tb.tobytes(), name

    def test_frozen_final_layer_ablation(self, planted_bundle):
        config = _short_config(epochs=30, validate_every=5,
                               finetune_final_layer=False)
        params, report = fit(config, planted_bundle)
        assert report.best_epoch >= 1  # the returned checkpoint has trained
        dim = planted_bundle.images.dim
        fresh = init_params(dim, planted_bundle.vocab_size, config.seed,
                            hidden_noise=config.head_init_noise,
                            initial_tau=config.initial_tau)
        for name in ("text_final.weight", "text_final.bias",
                     "image_final.weight", "image_final.bias"):
            trained = dict(params.named_tensors())[name]
            initial = dict(fresh.named_tensors())[name]
            assert trained.tobytes() == initial.tobytes(), name
        # the head did move
        assert not np.array_equal(dict(params.named_tensors())["head.output_weight"],
                                  dict(fresh.named_tensors())["head.output_weight"])

    def test_self_distillation_off_reports_zero(self, planted_bundle):
        config = _short_config(epochs=5, self_distillation=False)
        _, report = fit(config, planted_bundle)
        for record in report.epochs:
            assert record["loss"]["distill_combined"] == 0.0

    def test_baseline_preserved_at_init(self, planted_bundle):
        # Before any step the dense route reproduces frozen-embedding
        # rankings id for id.
        data = planted_bundle
        params = init_params(data.images.dim, data.vocab_size, seed=7)
        results = rank_queries(params, data.images, data.captions,
                               data.train_pairs, "dense", k_max=None)
        tau = params.tau
        pool_ids = data.train_pairs.image_ids
        from sparsedense.data import EmbeddingTable
        pool = EmbeddingTable(
            ids=pool_ids,
            rows=np.stack([data.images.row(i) for i in pool_ids]))
        for result in results[:20]:
            query = data.captions.row(result.query_id).astype(np.float64)
            frozen = dense_search(pool, query, tau, k=len(pool_ids))
            assert [d for d, _ in frozen] == result.ranked_ids

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_last_good(self, planted_bundle):
        # An absurd learning rate overflows the very first matmul of the
        # next step; training must stop and hand back finite parameters.
        config = _short_config(epochs=50, learning_rate=1e200, validate_every=50)
        params, report = fit(config, planted_bundle)
        assert report.diverged
        assert report.divergence_message
        for name, tensor in params.named_tensors():
            assert np.all(np.isfinite(tensor)), name

    def test_report_jsonl(self, planted_bundle, tmp_path):
        path = tmp_path / "report.jsonl"
        config = _short_config(epochs=5, validate_every=2)
        _, report = fit(config, planted_bundle, report_path=path)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        events = [line["event"] for line in lines]
        assert events[0] == "init"
        assert events[-1] == "final"
        assert events.count("epoch") == 5
        assert lines[-1]["best_epoch"] == report.best_epoch

    def test_best_checkpoint_tracks_validation_mrr(self, planted_bundle):
        config = _short_config(epochs=30, validate_every=10)
        _, report = fit(config, planted_bundle)
        validated = [r for r in report.epochs if "val" in r]
        best_seen = report.initial["val"]["sparse"]["mrr_at_10"]
        for record in validated:
            best_seen = max(best_seen, record["val"]["sparse"]["mrr_at_10"])
        assert report.best_sparse_mrr == best_seen

    def test_mismatched_dims_rejected(self, planted_bundle):
        data = dataclasses.replace(
            planted_bundle,
            captions=dataclasses.replace(
                planted_bundle.captions,
                rows=planted_bundle.captions.rows[:, :8]))
        with pytest.raises(ConfigError):
            fit(_short_config(epochs=1), data)


class TestScheduleWiring:
    def test_l1_weights_follow_step_count(self, planted_bundle):
        # warmup over 4 steps with 2 batches/epoch: epoch 1 runs steps
        # 0-1, epoch 2 runs steps 2-3, epoch 3 saturates.
        config = _short_config(
            epochs=3, validate_every=10,
            schedule=SparsitySchedule(1.0, 1.0, warmup_steps=4))
        _, report = fit(config, planted_bundle)
        weights = [r["loss"]["l1_weight_text"] for r in report.epochs]
        assert weights[0] == pytest.approx((0.0 + (1 / 4) ** 2) / 2)
        assert weights[1] == pytest.approx(((2 / 4) ** 2 + (3 / 4) ** 2) / 2)
        assert weights[2] == pytest.approx(1.0)
