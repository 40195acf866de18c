"""The three experiment families: cross-variant transfer, two-task mixture
sweep, and DCD against baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import attribution as attr
from .. import circuits as circ
from .. import dcd
from .. import engine
from ..model import Params, load_checkpoint
from ..tasks import DatasetSpec, build_mixture, ratio_sweep, training_records
from ..train import accuracy
from .config import ConfigError, ExperimentConfig
from .report import ReportBundle, make_manifest

log = logging.getLogger(__name__)


class AccuracyFloorError(RuntimeError):
    """The model is below the accuracy floor on a dataset a study needs.

    ``bundle`` holds the accuracy table so the refusal can still be reported."""

    def __init__(self, msg: str, bundle: Optional[ReportBundle] = None):
        super().__init__(msg)
        self.bundle = bundle


class NumericDegeneracy(ArithmeticError):
    pass


# --- shared pieces --------------------------------------------------------------


def load_model(cfg: ExperimentConfig) -> Params:
    params, _ = load_checkpoint(cfg.checkpoint())
    return params


def label_of(task: str, variant: str) -> str:
    return f"{task}/{variant}"


def check_floor(params: Params, sets: dict, floor: float, bundle: ReportBundle) -> dict:
    """Measure accuracy on every named dataset, record it, and refuse below ``floor``."""
    t = bundle.table("accuracy", ["dataset", "n", "accuracy", "floor", "passes"])
    acc = {}
    for name, pairs in sets.items():
        a = accuracy(params, training_records(pairs))
        acc[name] = a
        t.add(name, len(pairs), a, float(floor), a >= floor)
    low = {k: v for k, v in acc.items() if v < floor}
    if low:
        detail = ", ".join(f"{k}={v:.3f}" for k, v in low.items())
        raise AccuracyFloorError(f"accuracy below floor {floor}: {detail}", bundle)
    return acc


def base_manifest(cfg: ExperimentConfig, params: Params, extra: Optional[dict] = None) -> dict:
    g = engine.graph_for(params)
    info = {"experiment": cfg["experiment"], "graph_manifest_hash": g.manifest_hash, "n_edges": g.n_edges}
    if extra:
        info.update(extra)
    return make_manifest(cfg.hash(), cfg.seeds, cfg.canonical(), info)


def method_params(cfg: ExperimentConfig, method: str) -> dict:
    return {"steps": cfg["discovery"]["ig_steps"]} if method == "eap_ig" else {}


def single_split(task: str, variant: str, cfg: ExperimentConfig, n: int):
    d = cfg["data"]
    spec = DatasetSpec([(task, variant, 1.0)], n, tuple(d["splits"]), cfg.seeds["data"])
    return build_mixture(spec)


def _require_finite(curve: circ.FaithfulnessCurve, what: str) -> None:
    if curve.degenerate:
        raise NumericDegeneracy(
            f"{what}: |m(G) - m(empty)| = {abs(curve.m_G - curve.m_empty):.3g} is below the threshold"
        )


def _size_index(sizes: Sequence[float], k: float) -> int:
    for i, s in enumerate(sizes):
        if abs(s - k) < 1e-12:
            return i
    raise ConfigError(f"discovery.eval_size {k} is not in discovery.sizes")


# --- cross-variant ---------------------------------------------------------------


def run_cross_variant(cfg: ExperimentConfig, params: Optional[Params] = None) -> ReportBundle:
    params = params or load_model(cfg)
    variants = [tuple(v) for v in cfg["data"]["variants"]]
    if len(variants) < 2:
        raise ConfigError("cross_variant needs at least two data.variants")
    disc = cfg["discovery"]
    sizes = circ.check_grid(disc["sizes"])
    ie = _size_index(sizes, disc["eval_size"])
    bundle = ReportBundle()
    names = [label_of(*v) for v in variants]
    splits = {nm: single_split(*v, cfg, cfg["data"]["n_per_variant"]) for nm, v in zip(names, variants)}
    bundle.manifest = base_manifest(cfg, params)
    check_floor(params, {nm: s.test for nm, s in splits.items()}, cfg["accuracy_floor"], bundle)
    summary = {}
    for method in disc["methods"]:
        mats = {nm: attr.attribute_dataset(params, s.train, method, method_params(cfg, method))
                for nm, s in splits.items()}
        curves_t = bundle.table(f"curves_{method}", ["discovery", "evaluation", "size", "f"])
        fm = bundle.table(f"faithfulness_{method}", ["discovery"] + names)
        jm = bundle.table(f"jaccard_{method}", ["discovery"] + names)
        mt = bundle.table(f"metric_{method}", ["evaluation", "m_G", "m_empty"])
        drops = bundle.table(f"drops_{method}", ["discovery", "in_distribution", "worst_cross",
                                                 "worst_evaluation", "drop"])
        F = np.zeros((len(names), len(names)))
        for i, di in enumerate(names):
            for j, ej in enumerate(names):
                curve = circ.faithfulness_curve(params, mats[di].mean, splits[ej].test, sizes,
                                                disc["zero_ablation"])
                _require_finite(curve, f"{method} {di} on {ej}")
                F[i, j] = curve.f[ie]
                for k, f in curve.points():
                    curves_t.add(di, ej, k, f)
                if i == 0:
                    mt.add(ej, curve.m_G, curve.m_empty)
        cs = {nm: circ.select_circuit(mats[nm].mean, disc["eval_size"], mats[nm].manifest_hash, method, nm)
              for nm in names}
        J = np.array([[circ.jaccard(cs[a], cs[b]) for b in names] for a in names])
        for i, nm in enumerate(names):
            fm.add(nm, *F[i])
            jm.add(nm, *J[i])
            others = [j for j in range(len(names)) if j != i]
            w = min(others, key=lambda j: (F[i, j], j))
            drops.add(nm, F[i, i], F[i, w], names[w], F[i, i] - F[i, w])
        summary[method] = {"names": names, "faithfulness": F, "jaccard": J, "eval_size": disc["eval_size"]}
    bundle.documents["summary"] = summary
    bundle.manifest = base_manifest(cfg, params, {"variants": names})
    return bundle


# --- mixture sweep ---------------------------------------------------------------


def run_mixture_sweep(cfg: ExperimentConfig, params: Optional[Params] = None) -> ReportBundle:
    params = params or load_model(cfg)
    d, disc = cfg["data"], cfg["discovery"]
    if len(d["mixture_tasks"]) != 2:
        raise ConfigError("mixture_sweep needs exactly two data.mixture_tasks")
    (ta, va), (tb, vb) = [tuple(x) for x in d["mixture_tasks"]]
    la, lb = label_of(ta, va), label_of(tb, vb)
    sizes = circ.check_grid(disc["sizes"])
    ie = _size_index(sizes, disc["eval_size"])
    ratios = ratio_sweep(d["ratio_step"])
    bundle = ReportBundle()

    def mixture(r):
        spec = DatasetSpec([(ta, va, 1.0 - r), (tb, vb, r)], d["n_examples"], tuple(d["splits"]),
                           cfg.seeds["data"])
        return build_mixture(spec)

    splits = {r: mixture(r) for r in ratios}
    pure = {la: splits[ratios[0]].test, lb: splits[ratios[-1]].test}
    bundle.manifest = base_manifest(cfg, params)
    check_floor(params, pure, cfg["accuracy_floor"], bundle)
    summary = {}
    for method in disc["methods"]:
        curves_t = bundle.table(f"curves_{method}", ["ratio", "evaluation", "size", "f"])
        evals = [la, lb] + (["mixed"] if d["eval"] == "mixed" else [])
        ft = bundle.table(f"faithfulness_{method}", ["ratio"] + evals)
        circuits = {}
        at_size = {}
        for r in ratios:
            m = attr.attribute_dataset(params, splits[r].train, method, method_params(cfg, method))
            circuits[r] = circ.select_circuit(m.mean, disc["eval_size"], m.manifest_hash, method, f"ratio={r}")
            row = []
            for name in evals:
                data = pure[name] if name != "mixed" else splits[r].test
                curve = circ.faithfulness_curve(params, m.mean, data, sizes, disc["zero_ablation"])
                _require_finite(curve, f"{method} ratio {r} on {name}")
                for k, f in curve.points():
                    curves_t.add(r, name, k, f)
                row.append(curve.f[ie])
                at_size[(r, name)] = curve.f
            ft.add(r, *row)
        J = np.array([[circ.jaccard(circuits[a], circuits[b]) for b in ratios] for a in ratios])
        jt = bundle.table(f"jaccard_{method}", ["ratio"] + [str(r) for r in ratios])
        for i, r in enumerate(ratios):
            jt.add(r, *J[i])
        adjacent = [J[i, i + 1] for i in range(len(ratios) - 1)]
        summary[method] = {
            "ratios": ratios,
            "extremes_jaccard": float(J[0, -1]),
            "mean_adjacent_jaccard": float(np.mean(adjacent)),
            "pure_a": {"in_distribution": at_size[(ratios[0], la)], "cross": at_size[(ratios[0], lb)]},
            "pure_b": {"in_distribution": at_size[(ratios[-1], lb)], "cross": at_size[(ratios[-1], la)]},
            "sizes": sizes,
            "task_a": la,
            "task_b": lb,
        }
    bundle.documents["summary"] = summary
    bundle.manifest = base_manifest(cfg, params, {"task_a": la, "task_b": lb, "evaluation": d["eval"]})
    return bundle


# --- DCD comparison --------------------------------------------------------------


_VARIANT_SETTINGS = {
    "kmeans-pca": ("kmeans", "pca"),
    "kmeans-svd": ("kmeans", "truncated_svd"),
    "agglom": ("agglomerative", "pca"),
    "divisive": ("divisive", "pca"),
}


def dcd_config(cfg: ExperimentConfig, method: str, variant: str) -> dcd.DCDConfig:
    algo, red = _VARIANT_SETTINGS[variant]
    c = cfg["dcd"]
    return dcd.DCDConfig(
        method=method, ig_steps=cfg["discovery"]["ig_steps"], binarize=c["binarize"], gamma=c["gamma"],
        reduction=red, r=c["r"], algorithm=algo, K_range=tuple(cfg.K_values()), B=c["B"],
        n_init=c["n_init"], seed=cfg.seeds["dcd"], sizes=tuple(cfg["discovery"]["sizes"]),
        min_cluster=c["min_cluster"],
    )


@dataclass
class Approach:
    name: str
    circuits: dict  # size -> list of Circuit


def run_dcd_compare(cfg: ExperimentConfig, params: Optional[Params] = None) -> ReportBundle:
    params = params or load_model(cfg)
    d, disc = cfg["data"], cfg["discovery"]
    comps = [tuple(c) for c in d["components"]]
    if not comps:
        raise ConfigError("dcd_compare needs data.components")
    spec = DatasetSpec([(t, v, float(w)) for t, v, w in comps], d["n_examples"], tuple(d["splits"]),
                       cfg.seeds["data"])
    split = build_mixture(spec)
    train, test = split.train, split.test
    sizes = circ.check_grid(disc["sizes"])
    ie = _size_index(sizes, disc["eval_size"])
    graph = engine.graph_for(params)
    bundle = ReportBundle()
    by_comp = {}
    for p in test:
        by_comp.setdefault(label_of(p.task, p.variant), []).append(p)
    bundle.manifest = base_manifest(cfg, params)
    check_floor(params, dict(sorted(by_comp.items())), cfg["accuracy_floor"], bundle)
    labels_train = [label_of(p.task, p.variant) for p in train]
    summary = {}
    cpr_t = bundle.table("cpr_table", ["approach", "mixed"])
    cmd_t = bundle.table("cmd_prime_table", ["approach", "mixed"])
    for method in disc["methods"]:
        m = attr.attribute_dataset(params, train, method, method_params(cfg, method))
        rows = m.rows.astype(np.float64)
        approaches = [Approach("single", dcd.circuits_for_rows([m.mean], sizes, m.manifest_hash, method, "all"))]
        results = {}
        for v in cfg["dcd"]["variants"]:
            res = dcd.cluster_matrix(m, dcd_config(cfg, method, v))
            results[v] = res
            approaches.append(Approach(f"dcd-{v}", res.circuits))
        ref = results.get("kmeans-pca") or next(iter(results.values()))
        K = ref.K_star
        rnd = dcd.baseline_random_edges(graph, cfg.seeds["baseline"])
        approaches.append(Approach("random-edges", dcd.circuits_for_rows([rnd], sizes, m.manifest_hash,
                                                                          "random", "random")))
        meds, krep = dcd.baseline_k_representative(ref, rows, sizes=sizes)
        approaches.append(Approach("k-representative", krep))
        _, krand = dcd.baseline_k_random(rows, K, cfg.seeds["baseline"], sizes, m.manifest_hash, method)
        approaches.append(Approach("k-random", krand))

        # one batched evaluation of every circuit on the test split
        masks, cols = [], {}
        for a in approaches:
            for k in sizes:
                cs = a.circuits[float(k)]
                cols[(a.name, float(k))] = list(range(len(masks), len(masks) + len(cs)))
                masks.extend(c.mask() for c in cs)
        em = circ.example_metrics(params, test, masks, disc["zero_ablation"])
        bt = bundle.table(f"best_of_k_{method}", ["approach", "size", "n_circuits", "f_star", "n_degenerate"])
        curves = {}
        for a in approaches:
            fs = []
            for k in sizes:
                bk = circ.best_of_k_from_metrics(em, cols[(a.name, float(k))])
                fs.append(bk.value)
                bt.add(a.name, k, len(cols[(a.name, float(k))]), bk.value, bk.n_degenerate)
            curve = circ.FaithfulnessCurve(sizes, fs, [], float("nan"), float("nan"), label=a.name)
            curves[a.name] = fs
            cpr_t.add(f"{method}/{a.name}", circ.cpr(curve))
            cmd_t.add(f"{method}/{a.name}", circ.cmd_prime(curve))

        # cluster purity for every DCD variant
        pt_names = sorted(set(labels_train))
        pt = bundle.table(f"purity_{method}", ["variant", "cluster", "size"] + pt_names + ["purity"])
        purities = {}
        for v, res in results.items():
            names, counts, pur = dcd.purity_table(res.assignment, [(l,) for l in labels_train], res.K_star)
            for k in range(res.K_star):
                row = [int(counts[k, names.index((nm,))]) for nm in pt_names]
                pt.add(v, k, int(counts[k].sum()), *row, float(pur[k]))
            purities[v] = [float(x) for x in pur]

        gt = bundle.table(f"gap_{method}", ["variant", "K", "gap", "s_K", "W_K", "silhouette"])
        for v, res in results.items():
            g = res.gap
            for K_, gp, s, W in zip(g.Ks, g.gap, g.s, g.W):
                gt.add(v, K_, gp, s, W, res.silhouettes.get(K_))

        # per-example x circuit faithfulness on the clustered (train) examples
        circs = ref.circuits[float(disc["eval_size"])]
        em_tr = circ.example_metrics(params, train, [c.mask() for c in circs], disc["zero_ablation"])
        Ftr, degen = circ.per_example_faithfulness(em_tr)
        pe = bundle.table(f"per_example_{method}", ["example", "label", "cluster", "degenerate"]
                          + [f"circuit_{k}" for k in range(len(circs))])
        for i in range(len(train)):
            pe.add(i, labels_train[i], int(ref.assignment[i]), bool(degen[i]), *Ftr[i])
        blk = bundle.table(f"block_{method}", ["circuit", "own_cluster_mean", "other_clusters_mean", "n_own",
                                               "n_other"])
        block = []
        for k in range(len(circs)):
            own = (ref.assignment == k) & ~degen
            oth = (ref.assignment != k) & ~degen
            om = float(Ftr[own, k].mean()) if own.any() else float("nan")
            xm = float(Ftr[oth, k].mean()) if oth.any() else float("nan")
            blk.add(k, om, xm, int(own.sum()), int(oth.sum()))
            block.append((om, xm))
        summary[method] = {
            "sizes": sizes,
            "best_of_k": curves,
            "K_star": {v: r.K_star for v, r in results.items()},
            "purity": purities,
            "block": block,
            "medoids": meds,
            "n_degenerate_train": int(degen.sum()),
            "eval_size": disc["eval_size"],
        }
        bundle.documents[f"clusters_{method}"] = {v: r.to_json() for v, r in results.items()}
    bundle.documents["summary"] = summary
    bundle.manifest = base_manifest(cfg, params, {"components": [list(c) for c in comps],
                                                  "evaluation": "mixed test split"})
    return bundle


EXPERIMENT_RUNNERS = {
    "cross_variant": run_cross_variant,
    "mixture_sweep": run_mixture_sweep,
    "dcd_compare": run_dcd_compare,
}
