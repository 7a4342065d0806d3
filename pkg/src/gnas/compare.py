"""Head-to-head runs of GNAS against random search (and exhaustive search when tiny)."""

from __future__ import annotations

import itertools
import math

from .arch import Architecture, NetworkShape, ancestor_at, count_architectures
from .baselines import exhaustive_search, random_search
from .search import SearchConfig, SearchContext, finetune, mean_reward, run_search


def grouping_scores(arch: Architecture, group_labels) -> tuple[float, float]:
    """Fraction of same-group and of cross-group attribute pairs that share a non-root ancestor.

    In a tree, two leaves share some non-root ancestor exactly when they share
    their layer-1 ancestor.
    """
    if len(arch.block_counts) < 3:
        return 0.0, 0.0
    anc = [ancestor_at(arch, 1, n) for n in range(arch.block_counts[-1])]
    same = [0, 0]
    cross = [0, 0]
    for a, b in itertools.combinations(range(len(anc)), 2):
        bucket = same if group_labels[a] == group_labels[b] else cross
        bucket[0] += anc[a] == anc[b]
        bucket[1] += 1
    return (same[0] / same[1] if same[1] else 0.0,
            cross[0] / cross[1] if cross[1] else 0.0)


def first_reaching(curve, target_error) -> int | None:
    """Candidate count at which ``curve`` first gets down to ``target_error``."""
    for point in curve:
        if point["error"] <= target_error + 1e-12:
            return point["candidates"]
    return None


def _error(r: float) -> float:
    return 100.0 * (1.0 - r)


def _curve_from_gnas(trace):
    best = -math.inf
    out = []
    for rec in trace.records:
        best = max(best, rec.monitor_reward)
        out.append({"candidates": rec.candidates, "elapsed_ms": rec.elapsed_ms,
                    "error": _error(rec.monitor_reward), "best_error": _error(best)})
    return out


def _curve_from_random(trace):
    return [{"candidates": e.index + 1, "elapsed_ms": e.elapsed_ms,
             "error": _error(e.monitor_reward), "best_error": _error(e.best_reward)}
            for e in trace.entries]


def compare_methods(shape: NetworkShape, data, cfg: SearchConfig, *,
                    budget: int | None = None, finetune_iters: int = 0,
                    exhaustive: bool | None = None, data_seed: int | None = None) -> dict:
    """Run GNAS, then random search with the same candidate budget and cost model.

    Both methods start from identically seeded weight stores and data streams.
    Curves are measured on the whole validation split: for GNAS the current
    architecture after each layer update, for random search the best-so-far
    pick after each candidate. ``budget=None`` matches GNAS's candidate count.
    Returns a JSON-ready report; the chosen architectures and traces are under
    the ``_objects`` key.
    """
    if budget is not None and budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    g_ctx = SearchContext.create(data, cfg)
    g_arch, g_store, g_trace = run_search(shape, data, cfg, ctx=g_ctx, monitor=data.valid)
    if budget is None:
        budget = max(1, g_trace.num_candidates)

    r_ctx = SearchContext.create(data, cfg)
    r_store = r_ctx.new_store(shape)
    r_arch, r_trace = random_search(shape, data, r_store, cfg, budget, ctx=r_ctx,
                                    monitor=data.valid)

    methods = {}
    for name, arch, store, curve, extra in (
            ("gnas", g_arch, g_store, _curve_from_gnas(g_trace),
             {"converged": g_trace.converged, "candidates": g_trace.num_candidates}),
            ("random", r_arch, r_store, _curve_from_random(r_trace),
             {"candidates": len(r_trace.entries)})):
        entry = {"parents": [list(p) for p in arch.parents],
                 "valid_error": _error(mean_reward(shape, arch, store, [data.valid])),
                 "curve": curve, **extra}
        if finetune_iters:
            tuned = finetune(shape, arch, store.copy(), data.merged(["train", "valid"]),
                             cfg, finetune_iters)
        else:
            tuned = store
        if "test" in data.splits:
            entry["test_error"] = _error(mean_reward(shape, arch, tuned, [data.test]))
        if data.group_labels is not None:
            same, cross = grouping_scores(arch, data.group_labels)
            entry["grouping"] = {"same_group": same, "cross_group": cross}
        methods[name] = entry

    target = methods["random"]["valid_error"]
    methods["gnas"]["candidates_to_reach_random"] = first_reaching(methods["gnas"]["curve"], target)

    report = {"data_seed": data_seed, "search_seed": cfg.rng_seed, "budget": budget,
              "methods": methods, "exhaustive": None}
    if exhaustive is None:
        exhaustive = count_architectures(shape) <= 4
    if exhaustive:
        frozen = g_store.copy()
        best, r = exhaustive_search(shape, data, frozen, cfg)
        report["exhaustive"] = {
            "parents": [list(p) for p in best.parents],
            "valid_error": _error(r),
            "gnas_valid_error_same_weights": _error(
                mean_reward(shape, g_arch, frozen, [data.valid])),
        }
    report["_objects"] = {"gnas": (g_arch, g_store, g_trace), "random": (r_arch, r_store, r_trace)}
    return report


def format_report(report: dict) -> str:
    lines = [f"budget: {report['budget']} candidates   data seed: {report['data_seed']}",
             f"{'method':<12}{'valid err %':>12}{'test err %':>12}{'candidates':>12}"]
    for name, m in report["methods"].items():
        test = f"{m['test_error']:.2f}" if "test_error" in m else "-"
        lines.append(f"{name:<12}{m['valid_error']:>12.2f}{test:>12}{m['candidates']:>12}")
    ex = report.get("exhaustive")
    if ex:
        lines.append(f"{'exhaustive':<12}{ex['valid_error']:>12.2f}{'-':>12}"
                     f"{'all':>12}   (frozen GNAS weights; GNAS arch: "
                     f"{ex['gnas_valid_error_same_weights']:.2f})")
    reach = report["methods"]["gnas"].get("candidates_to_reach_random")
    lines.append(f"GNAS reaches random search's final error after "
                 f"{reach if reach is not None else 'never'} candidates")
    for name, m in report["methods"].items():
        if "grouping" in m:
            g = m["grouping"]
            lines.append(f"{name}: pairs sharing a non-root ancestor: same-group "
                         f"{g['same_group']:.2f}, cross-group {g['cross_group']:.2f}")
    return "\n".join(lines) + "\n"
