"""Quantitative evaluation: retrieval metrics, score differences, FINB,
diversity, timing, and the abstract complexity calculator.

Every metric is deterministic given its seed and frozen models, carries its
sample count, and serializes without timestamps so identical runs produce
identical reports.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import kernels
from .data import Catalog, Outfit, SplitTriple, split_outfit
from .matching import MatchParams, category_matched_negative, match_score_batch
from .model import (
    CSTParams,
    SlotInit,
    cst_graph,
    slots_graph,
    get_forward_count,
    reset_forward_count,
    complete_features,
    st_sequential_complete,
)
from .retrieval import RetrievalIndex
from .sets import FeatureSet, pad_stack


# -- model predictions over triples ---------------------------------------------


def predict_triples(
    params: CSTParams, triples: list[SplitTriple], batch_size: int = 64, slot_seed: int = 0
) -> list[np.ndarray]:
    """Output features for each triple, batched; gaussian slots use a fixed seed."""
    if params.variant == "st":
        raise ValueError("the sequential baseline predicts via st_sequential_complete")
    outputs: list[np.ndarray] = []
    for start in range(0, len(triples), batch_size):
        chunk = triples[start : start + batch_size]
        x_pad, x_mask = pad_stack([t.x.features for t in chunk])
        labels = [np.asarray(t.z, dtype=np.int64) for t in chunk]
        width = max(len(z) for z in labels)
        z0, z_mask = slots_graph(params, labels, width, SlotInit(mode="gaussian", seed=slot_seed))
        yhat = cst_graph(params, x_pad, x_mask, z0, z_mask).values
        outputs.extend(yhat[i, : len(labels[i])].copy() for i in range(len(chunk)))
    return outputs


def _predictions(model, triples: list[SplitTriple], slot_seed: int = 0) -> list[np.ndarray]:
    if isinstance(model, CSTParams):
        return predict_triples(model, triples, slot_seed=slot_seed)
    if callable(model):
        return [np.asarray(model(t), dtype=np.float64) for t in triples]
    return [np.asarray(p, dtype=np.float64) for p in model]


# -- retrieval metrics --------------------------------------------------------------


def recall_at_k(model, triples: list[SplitTriple], index: RetrievalIndex, k: int = 32, slot_seed: int = 0) -> float:
    """Mean over triples of |retrieved-candidate union ∩ Y| / |Y|."""
    if not triples:
        raise ValueError("no evaluation triples")
    preds = _predictions(model, triples, slot_seed)
    scores = []
    for t, yhat in zip(triples, preds):
        hit_ids = index.query_knn_batch(yhat, k)
        candidates = set(int(i) for ids in hit_ids for i in ids)
        truth = set(int(i) for i in t.y.element_ids)
        scores.append(len(candidates & truth) / len(truth))
    return float(np.mean(scores))


def top1_ids(index: RetrievalIndex, queries: np.ndarray) -> np.ndarray:
    """Vectorized nearest item per query row (ids ascend with rows, so argmax
    tie-breaking matches the documented ascending-id rule)."""
    sims = queries @ index.features.T
    return index.ids[np.argmax(sims, axis=1)]


def category_accuracy(model, triples: list[SplitTriple], index: RetrievalIndex, slot_seed: int = 0) -> float:
    """Share of elements whose top-1 retrieved item has the requested category."""
    if not triples:
        raise ValueError("no evaluation triples")
    preds = _predictions(model, triples, slot_seed)
    cat_of = {int(i): int(c) for i, c in zip(index.ids, index.categories)}
    hits, total = 0, 0
    for t, yhat in zip(triples, preds):
        got = top1_ids(index, yhat)
        for want, item in zip(t.z, got):
            hits += int(cat_of[int(item)] == int(want))
            total += 1
    return hits / total


# -- set-matching score difference ----------------------------------------------------


def smd(model, triples: list[SplitTriple], scorer: MatchParams, index: RetrievalIndex | None = None, slot_seed: int = 0, batch_size: int = 64) -> dict:
    """Distribution of g(X, completion) - g(X, Y).

    With an index, completions are the retrieved top-1 item features (the
    deliverable); without, the raw output features are scored directly.
    """
    if not triples:
        raise ValueError("no evaluation triples")
    preds = _predictions(model, triples, slot_seed)
    if index is not None:
        preds = [index.features_of(top1_ids(index, y)) for y in preds]
    samples = []
    for start in range(0, len(triples), batch_size):
        chunk = triples[start : start + batch_size]
        chunk_pred = preds[start : start + batch_size]
        xs = [t.x.features for t in chunk]
        s_hat = match_score_batch(scorer, xs, chunk_pred)
        s_true = match_score_batch(scorer, xs, [t.y.features for t in chunk])
        samples.extend((s_hat - s_true).tolist())
    arr = np.asarray(samples)
    return {
        "mean": float(arr.mean()),
        "n": int(arr.size),
        "mode": "retrieved" if index is not None else "raw",
        "percentiles": {str(p): float(np.percentile(arr, p)) for p in (5, 25, 50, 75, 95)},
        "samples": [float(v) for v in arr],
    }


def quick_val_metrics(params: CSTParams, triples, index: RetrievalIndex, scorer: MatchParams | None, k: int = 32, seed: int = 0) -> dict:
    """Per-epoch validation block: recall, accuracy and raw-feature SMD."""
    preds = predict_triples(params, triples, slot_seed=seed)
    out = {
        "val_recall": recall_at_k(preds, triples, index, k=k),
        "val_accuracy": category_accuracy(preds, triples, index),
    }
    out["val_smd"] = smd(preds, triples, scorer)["mean"] if scorer is not None else 0.0
    return out


# -- fill-in-the-N-blank ---------------------------------------------------------------


def binomial_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) confidence interval for a proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    alpha = 1.0 - level
    low = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, n - successes + 1))
    high = 1.0 if successes == n else float(stats.beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return low, high


def finb_eval(
    model_or_scorer,
    outfits: list[Outfit],
    catalog: Catalog,
    negatives: int = 7,
    seed: int = 0,
    selector: str = "scorer",
    slot_seed: int = 0,
    batch_size: int = 64,
) -> dict:
    """Pick the true target among category-matched negatives.

    selector "scorer" ranks candidate sets by g(X, candidate); selector "cst"
    ranks by the sum of positionally aligned similarities to the generated
    features. The positive's position among the 8 candidates is randomized.
    """
    if selector not in ("scorer", "cst"):
        raise ValueError("selector must be 'scorer' or 'cst'")
    usable: list[tuple[SplitTriple, list[np.ndarray], int]] = []
    skipped = 0
    for outfit in outfits:
        if len(outfit.item_ids) < 2:
            skipped += 1
            continue
        rng = np.random.default_rng([seed, 5, outfit.outfit_id])
        triple = split_outfit(outfit, rng, catalog)
        cats = catalog.categories_of(triple.y.element_ids)
        if any(len(catalog.by_category[int(c)]) < 2 for c in cats):
            skipped += 1
            continue
        cand_ids = [np.asarray(triple.y.element_ids, dtype=np.int64)]
        for _ in range(negatives):
            cand_ids.append(category_matched_negative(cand_ids[0], cats, catalog.by_category, rng))
        order = rng.permutation(negatives + 1)
        usable.append((triple, [cand_ids[j] for j in order], int(np.where(order == 0)[0][0])))

    if not usable:
        raise ValueError("no usable outfits for the FINB task")

    correct = 0
    if selector == "cst":
        triples = [u[0] for u in usable]
        preds = _predictions(model_or_scorer, triples, slot_seed)
        for (triple, cands, pos), yhat in zip(usable, preds):
            sums = [float(np.sum(yhat * catalog.features_of(ids))) for ids in cands]
            correct += int(int(np.argmax(sums)) == pos)
    else:
        scorer: MatchParams = model_or_scorer
        flat_x, flat_y = [], []
        for triple, cands, _ in usable:
            for ids in cands:
                flat_x.append(triple.x.features)
                flat_y.append(catalog.features_of(ids))
        scores = np.empty(len(flat_x))
        for start in range(0, len(flat_x), batch_size):
            scores[start : start + batch_size] = match_score_batch(
                scorer, flat_x[start : start + batch_size], flat_y[start : start + batch_size]
            )
        per = negatives + 1
        for i, (_, _, pos) in enumerate(usable):
            block = scores[i * per : (i + 1) * per]
            correct += int(int(np.argmax(block)) == pos)

    n = len(usable)
    low, high = binomial_ci(correct, n)
    return {
        "accuracy": correct / n,
        "correct": correct,
        "n": n,
        "skipped": skipped,
        "ci_low": low,
        "ci_high": high,
        "negatives": negatives,
        "selector": selector,
        "seed": seed,
    }


# -- diversity ----------------------------------------------------------------------


def diversity_histogram(model, triples: list[SplitTriple], index: RetrievalIndex, top: int = 100, slot_seed: int = 0) -> dict:
    """Frequency of each retrieved item over all completions."""
    preds = _predictions(model, triples, slot_seed)
    counts: dict[int, int] = {}
    total = 0
    for yhat in preds:
        for item in top1_ids(index, yhat):
            counts[int(item)] = counts.get(int(item), 0) + 1
            total += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top_rows = ranked[:top]
    top_count = sum(c for _, c in top_rows)
    return {
        "n_elements": total,
        "n_distinct": len(counts),
        "max_frequency": ranked[0][1] if ranked else 0,
        "top_share": top_count / total if total else 0.0,
        "top": [[int(i), int(c)] for i, c in top_rows],
    }


def target_histogram(triples: list[SplitTriple], top: int = 100) -> dict:
    """The same histogram computed over the ground-truth target items."""
    counts: dict[int, int] = {}
    total = 0
    for t in triples:
        for item in t.y.element_ids:
            counts[int(item)] = counts.get(int(item), 0) + 1
            total += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top_rows = ranked[:top]
    return {
        "n_elements": total,
        "n_distinct": len(counts),
        "max_frequency": ranked[0][1] if ranked else 0,
        "top_share": (sum(c for _, c in top_rows) / total) if total else 0.0,
        "top": [[int(i), int(c)] for i, c in top_rows],
    }


# -- timing -------------------------------------------------------------------------


def timing_benchmark(
    models: dict[str, CSTParams],
    indexes: list[RetrievalIndex],
    x: FeatureSet,
    labels_pool: list[int],
    m_values=(1, 2, 3, 4, 5),
    repeats: int = 20,
) -> list[dict]:
    """Median completion time and forward-pass counts per (model, M, index).

    A completion is one model inference plus top-1 retrieval per element
    (sequential baseline: one inference and one query per step).
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats for a stable median")
    kernels.warmup()
    rows: list[dict] = []
    for index in indexes:
        for name, params in models.items():
            for m in m_values:
                labels = [int(labels_pool[i % len(labels_pool)]) for i in range(m)]

                def run():
                    if params.variant == "st":
                        st_sequential_complete(x, labels, params, index)
                    else:
                        yhat = complete_features(x, labels, params, SlotInit(mode="gaussian", seed=1))
                        top1_ids(index, yhat.features)

                run()  # warmup pass
                reset_forward_count()
                run()
                passes = get_forward_count()
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    run()
                    times.append(time.perf_counter() - t0)
                rows.append(
                    {
                        "model": name,
                        "variant": params.variant,
                        "m": int(m),
                        "index_size": len(index),
                        "median_seconds": float(np.median(times)),
                        "forward_passes": int(passes),
                        "repeats": int(repeats),
                    }
                )
    return rows


# -- abstract complexity ----------------------------------------------------------------


@dataclass
class ComplexityInputs:
    p: float
    q: float
    m: int
    l: int = 0

    def validate(self, need_l: bool = False) -> "ComplexityInputs":
        if self.p <= 0 or self.q <= 0 or self.m <= 0:
            raise ValueError("p, q and m must be positive")
        if need_l:
            if self.l <= 0:
                raise ValueError("series length l must be positive")
            if self.m > self.l:
                raise ValueError("cannot miss more elements than the series holds")
        return self


def complexity_calc(inputs: ComplexityInputs, method: str) -> float:
    """Abstract cost of completing M elements under each architecture."""
    if method == "proposed":
        inputs.validate()
        return inputs.p + inputs.m * inputs.q
    if method == "set-transformer":
        inputs.validate()
        return inputs.m * (inputs.p + inputs.q)
    if method == "bilstm":
        inputs.validate(need_l=True)
        return (inputs.l - inputs.m) * inputs.l * (inputs.p + inputs.q)
    raise ValueError(f"unknown method {method!r}")


# -- report container ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    seed: int
    variants: dict[str, dict] = field(default_factory=dict)
    timing: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "variants": self.variants, "timing": self.timing},
                          sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[dict]:
        rows = []
        for variant, metrics in sorted(self.variants.items()):
            for metric, value in sorted(metrics.items()):
                if isinstance(value, dict):
                    n = value.get("n", "")
                    val = value.get("mean", value.get("accuracy", ""))
                else:
                    n, val = "", value
                rows.append({"variant": variant, "metric": metric, "value": val, "n": n, "seed": self.seed})
        for row in self.timing:
            rows.append({
                "variant": row.get("variant", row["model"]),
                "metric": f"median_seconds_m{row['m']}_n{row['index_size']}",
                "value": row["median_seconds"], "n": row["repeats"], "seed": self.seed,
            })
        return rows

    def save(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        json_path = out_dir / f"{stem}.json"
        csv_path = out_dir / f"{stem}.csv"
        json_path.write_text(self.to_json(), encoding="utf-8")
        import csv as _csv

        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.DictWriter(fh, fieldnames=("variant", "metric", "value", "n", "seed"))
            writer.writeheader()
            for row in self.csv_rows():
                writer.writerow(row)
        return json_path, csv_path
