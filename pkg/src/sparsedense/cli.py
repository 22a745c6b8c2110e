"""Operator entry point.

Subcommands wire the library end to end: synth -> gradcheck -> train ->
encode -> index -> search / eval / sweep / report.  All commands are
deterministic functions of their config, input files, and seed, and
none mutates its inputs.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 verification failure.

The only environment variable honored is SPARSEDENSE_THREADS, which
caps the BLAS thread pools (set it to 1 for bitwise determinism).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, NumericError, SparseDenseError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _configure_threads() -> None:
    requested = os.environ.get("SPARSEDENSE_THREADS")
    if requested:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, requested)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_DATA_KEYS = {"images", "captions", "pairs_train", "pairs_val", "vocab",
              "word_embeddings"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "lambda_dense",
               "lambda_sparse", "lambda_inter", "w_dense", "w_sparse",
               "l1_max_text", "l1_max_image", "l1_warmup_steps",
               "self_distillation", "finetune_final_layer", "seed",
               "validate_every", "head_init_noise", "initial_tau"}
_MASK_KEYS = {"min_doc_freq"}
_TOP_KEYS = {"data", "train", "mask", "output_dir"}


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_run_config(path: str | Path) -> dict:
    """Parse and schema-validate a run config document."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    data = doc.get("data")
    if not isinstance(data, dict):
        raise ConfigError("config needs a 'data' section")
    _reject_unknown(data, _DATA_KEYS, "data")
    for required in ("images", "captions", "pairs_train", "vocab"):
        if required not in data:
            raise ConfigError(f"data.{required} is required")
    train = doc.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("'train' must be an object")
    _reject_unknown(train, _TRAIN_KEYS, "train")
    mask = doc.get("mask")
    if mask is not None:
        if not isinstance(mask, dict):
            raise ConfigError("'mask' must be an object")
        _reject_unknown(mask, _MASK_KEYS, "mask")
        if "min_doc_freq" not in mask:
            raise ConfigError("mask.min_doc_freq is required when 'mask' is present")
    if "output_dir" not in doc:
        raise ConfigError("output_dir is required")
    return doc


def config_hash(doc: dict) -> int:
    from .data import fnv1a64

    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return fnv1a64(canonical.encode("utf-8"))


def _train_config(doc: dict, seed_override: int | None):
    from .losses import LossWeights, SparsitySchedule
    from .scoring import IntegrationWeights
    from .train import TrainConfig

    train = doc.get("train", {})
    seed = seed_override if seed_override is not None else int(train.get("seed", 0))
    return TrainConfig(
        batch_size=int(train.get("batch_size", 16)),
        seed=seed,
        epochs=int(train.get("epochs", 200)),
        learning_rate=float(train.get("learning_rate", 0.01)),
        lambdas=LossWeights(float(train.get("lambda_dense", 1.0)),
                            float(train.get("lambda_sparse", 1.0)),
                            float(train.get("lambda_inter", 1.0))),
        weights=IntegrationWeights(float(train.get("w_dense", 0.3)),
                                   float(train.get("w_sparse", 0.7))),
        schedule=SparsitySchedule(float(train.get("l1_max_text", 0.01)),
                                  float(train.get("l1_max_image", 0.01)),
                                  int(train.get("l1_warmup_steps", 100))),
        self_distillation=bool(train.get("self_distillation", True)),
        finetune_final_layer=bool(train.get("finetune_final_layer", True)),
        validate_every=int(train.get("validate_every", 10)),
        head_init_noise=float(train.get("head_init_noise", 0.01)),
        initial_tau=float(train.get("initial_tau", 0.07)),
    )


def _load_train_data(doc: dict):
    from .data import load_embeddings, load_pairs, load_vocabulary
    from .train import TrainData

    data = doc["data"]
    images = load_embeddings(data["images"])
    captions = load_embeddings(data["captions"])
    vocab = load_vocabulary(data["vocab"])
    train_pairs = load_pairs(data["pairs_train"], split_tag="train",
                             image_ids=set(images.ids),
                             caption_ids=set(captions.ids))
    val_pairs = None
    if data.get("pairs_val"):
        val_pairs = load_pairs(data["pairs_val"], split_tag="val",
                               image_ids=set(images.ids),
                               caption_ids=set(captions.ids))
    word_embeddings = None
    if data.get("word_embeddings"):
        table = load_embeddings(data["word_embeddings"])
        if table.count != vocab.size:
            raise ConfigError("word embedding count does not match vocabulary size")
        word_embeddings = table.rows.astype("float64")
    return TrainData(images=images, captions=captions, train_pairs=train_pairs,
                     vocab_size=vocab.size, val_pairs=val_pairs,
                     word_embeddings=word_embeddings)


# ---------------------------------------------------------------------------
# Sparse-vector JSONL (encode -> index/search interchange)
# ---------------------------------------------------------------------------

def write_vectors(path: Path, items) -> None:
    """items: iterable of (id, SparseVector)."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, vector in items:
            fh.write(json.dumps({
                "id": doc_id,
                "dim": vector.dim,
                "terms": [[int(j), float(w)] for j, w in
                          zip(vector.indices, vector.weights)],
            }))
            fh.write("\n")


def read_vectors(path: str | Path):
    from .errors import FormatError
    from .model import SparseVector
    import numpy as np

    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if set(record) != {"id", "dim", "terms"}:
                raise FormatError(f"{path}:{lineno}: expected id, dim, terms")
            terms = record["terms"]
            items.append((record["id"], SparseVector(
                indices=np.array([t[0] for t in terms], dtype=np.int64),
                weights=np.array([t[1] for t in terms], dtype=np.float64),
                dim=int(record["dim"]),
            )))
    return items


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import (SyntheticSpec, generate_synthetic, save_embeddings,
                       save_pairs, save_vocabulary, synthetic_vocabulary)

    spec = SyntheticSpec(
        n_images=args.n_images, captions_per_image=args.captions_per_image,
        dim=args.dim, vocab_size=args.vocab_size,
        n_clusters=args.clusters if args.clusters else args.n_images,
        noise_std=args.noise_std, seed=args.seed)
    images, captions, pairs = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(images, out / "images.emb")
    save_embeddings(captions, out / "captions.emb")
    save_pairs(pairs, out / "pairs.jsonl")
    save_vocabulary(synthetic_vocabulary(spec.vocab_size), out / "vocab.txt")
    print(f"wrote {out}/images.emb, captions.emb, pairs.jsonl, vocab.txt")
    return EXIT_OK


def _gradcheck_report(args, doc=None):
    from .grad import LossSettings, finite_diff_check
    from .losses import LossWeights, l1_weights_at
    from .model import init_params
    from .rng import SplitMix64, derive_seed
    from .scoring import IntegrationWeights
    import numpy as np

    if doc is not None:
        data = _load_train_data(doc)
        config = _train_config(doc, getattr(args, "seed", None))
        from .train import make_batches
        batch = make_batches(data.train_pairs,
                             min(8, len(data.train_pairs)), config.seed, 1)[0]
        text_penult = data.captions.gather(batch.caption_ids)
        image_penult = data.images.gather(batch.image_ids)
        params = init_params(data.images.dim, data.vocab_size, config.seed,
                             word_embeddings=data.word_embeddings,
                             hidden_noise=config.head_init_noise,
                             initial_tau=config.initial_tau)
        eta_text, eta_image = l1_weights_at(config.schedule.warmup_steps,
                                            config.schedule)
        settings = LossSettings(lambdas=config.lambdas, weights=config.weights,
                                eta_text=eta_text, eta_image=eta_image,
                                self_distillation=config.self_distillation)
    else:
        seed = args.seed if args.seed is not None else 0
        n, dim, vocab = 8, 16, 64
        stream = SplitMix64(derive_seed(seed, 0x6C))
        # Unit-norm rows, matching the scale of pooled encoder outputs.
        text_penult = np.array(stream.normals(n * dim)).reshape(n, dim)
        image_penult = np.array(stream.normals(n * dim)).reshape(n, dim)
        text_penult /= np.linalg.norm(text_penult, axis=1, keepdims=True)
        image_penult /= np.linalg.norm(image_penult, axis=1, keepdims=True)
        params = init_params(dim, vocab, seed)
        settings = LossSettings(lambdas=LossWeights(1.0, 1.0, 1.0),
                                weights=IntegrationWeights(0.3, 0.7),
                                eta_text=0.01, eta_image=0.01)
    return finite_diff_check(params, text_penult, image_penult, settings,
                             eps=args.eps)


def cmd_gradcheck(args) -> int:
    doc = load_run_config(args.config) if args.config else None
    report = _gradcheck_report(args, doc)
    for line in report.lines():
        print(line)
    if not report.passed(args.tolerance):
        print(f"FAIL: max relative error {report.max_rel_err:.3e} "
              f"exceeds {args.tolerance:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .train import fit

    doc = load_run_config(args.config)
    out = Path(args.out) if args.out else Path(doc["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data = _load_train_data(doc)
    config = _train_config(doc, args.seed)

    if not args.skip_gradcheck:
        probe = argparse.Namespace(seed=config.seed, eps=1e-5)
        report = _gradcheck_report(probe, doc)
        if not report.passed(1e-4):
            print("gradient check failed; see `sparsedense gradcheck`",
                  file=sys.stderr)
            return EXIT_VERIFY

    report_path = out / "report.jsonl"
    report_path.unlink(missing_ok=True)
    params, report = fit(config, data, report_path=report_path)
    save_checkpoint(out / "checkpoint.bin", params,
                    step=report.best_epoch, config_hash=config_hash(doc))
    if report.diverged:
        print(f"training diverged: {report.divergence_message}", file=sys.stderr)
        return EXIT_NUMERIC
    best = report.best_sparse_mrr
    print(f"best epoch {report.best_epoch} (sparse MRR@10 {best:.4f}) -> "
          f"{out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_encode(args) -> int:
    from .data import EmbeddingTable, load_embeddings, save_embeddings
    from .model import encode_batch, load_checkpoint, sparse_rows

    params, _, _ = load_checkpoint(args.checkpoint)
    table = load_embeddings(args.embeddings)
    h, z = encode_batch(table.rows.astype("float64"), args.side, params)
    write_vectors(Path(args.out), zip(table.ids, sparse_rows(z)))
    if args.dense_out:
        save_embeddings(EmbeddingTable(ids=table.ids, rows=h.astype("float32")),
                        args.dense_out)
    print(f"encoded {table.count} {args.side} vectors -> {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    from .index import build_index, load_mask, save_index

    docs = read_vectors(args.vectors)
    mask = load_mask(args.mask) if args.mask else None
    index = build_index(docs, mask=mask)
    save_index(index, args.out)
    print(f"indexed {index.doc_count} docs over |V|={index.vocab_size} -> {args.out}")
    return EXIT_OK


def cmd_search(args) -> int:
    from .index import load_index, search

    index = load_index(args.index)
    queries = read_vectors(args.queries)
    if args.query_id is not None:
        queries = [q for q in queries if q[0] == args.query_id]
        if not queries:
            raise ConfigError(f"query id {args.query_id!r} not in {args.queries}")
    single = len(queries) == 1
    for query_id, vector in queries:
        for rank, (doc_id, score) in enumerate(search(index, vector, args.k), 1):
            if single:
                print(f"{rank}\t{doc_id}\t{score:.6f}")
            else:
                print(f"{query_id}\t{rank}\t{doc_id}\t{score:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_embeddings, load_pairs
    from .evaluation import compute_metrics, rank_queries
    from .model import load_checkpoint

    params, step, ckpt_hash = load_checkpoint(args.checkpoint)
    images = load_embeddings(args.images)
    captions = load_embeddings(args.captions)
    pairs = load_pairs(args.pairs, split_tag="test",
                       image_ids=set(images.ids), caption_ids=set(captions.ids))
    if len(pairs) == 0:
        raise ConfigError(f"{args.pairs}: no queries")
    modes = ("dense", "sparse") if args.mode == "both" else (args.mode,)
    payload = {"checkpoint_step": step, "config_hash": ckpt_hash,
               "n_queries": len(pairs.caption_ids)}
    for mode in modes:
        results = rank_queries(params, images, captions, pairs, mode)
        report = compute_metrics(results)
        payload[mode] = {
            "r_at_1": report.r_at_1, "r_at_5": report.r_at_5,
            "mrr_at_10": report.mrr_at_10,
            "reciprocal_ranks": report.reciprocal_ranks,
        }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
    summary = {m: round(payload[m]["r_at_1"], 4) for m in modes}
    print(f"wrote {args.out} (R@1 {summary})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .evaluation import sweep_csv, weight_sweep

    doc = load_run_config(args.config)
    data = _load_train_data(doc)
    config = _train_config(doc, args.seed)
    w1_grid = [float(v) for v in args.w1_grid.split(",") if v]
    w2_grid = [float(v) for v in args.w2_grid.split(",") if v]
    rows = weight_sweep(config, data, w1_grid, w2_grid, ranking=args.ranking)
    Path(args.out).write_text(sweep_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} sweep rows -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import tradeoff_csv, tradeoff_report
    from .index import load_mask
    from .model import load_checkpoint

    doc = load_run_config(args.config)
    data = _load_train_data(doc)
    variants = []
    for spec in args.variant:
        name, _, rest = spec.partition("=")
        if not rest:
            raise ConfigError(f"variant must be NAME=CHECKPOINT[:MASK], got {spec!r}")
        ckpt_path, _, mask_path = rest.partition(":")
        params, _, _ = load_checkpoint(ckpt_path)
        mask = load_mask(mask_path) if mask_path else None
        variants.append((name, params, mask))
    rows = tradeoff_report(variants, data.images, data.captions,
                           data.validation_pairs)
    Path(args.out).write_text(tradeoff_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} tradeoff rows -> {args.out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    from .index import build_vocab_mask, save_mask
    from .model import load_checkpoint, encode_batch
    from .data import load_embeddings

    params, _, _ = load_checkpoint(args.checkpoint)
    captions = load_embeddings(args.captions)
    _, z = encode_batch(captions.rows.astype("float64"), "text", params)
    term_sets = [set(map(int, row.nonzero()[0])) for row in (z > 0)]
    mask = build_vocab_mask(term_sets, z.shape[1], args.min_doc_freq)
    save_mask(mask, args.out)
    print(f"mask admits {mask.n_allowed}/{mask.size} terms -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsedense",
        description="Train joint sparse-dense retrieval adapters and serve "
                    "the sparse vectors through an exact inverted index.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate planted-cluster synthetic data")
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--captions-per-image", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--clusters", type=int, default=0,
                   help="defaults to one cluster per image")
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--skip-gradcheck", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode embeddings to sparse vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--side", choices=("text", "image"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dense-out", default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("mask", help="build a vocabulary mask from caption supports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--min-doc-freq", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("index", help="build an inverted index from sparse vectors")
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="top-k search against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-id", default=None)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--mode", choices=("dense", "sparse", "both"), default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="retrain over a (w_dense, w_sparse) grid")
    p.add_argument("--config", required=True)
    p.add_argument("--w1-grid", required=True, help="comma-separated values")
    p.add_argument("--w2-grid", required=True, help="comma-separated values")
    p.add_argument("--ranking", choices=("sparse", "integrated"), default="sparse")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="effectiveness vs FLOPs per variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", action="append", required=True,
                   help="NAME=CHECKPOINT[:MASK], repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SparseDenseError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
