"""Command-line entry point (``dcdkit``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import attribution as attr
from .. import circuits as circ
from .. import dcd, engine
from ..induction import build_induction_model
from ..model import ConfigError as ModelConfigError
from ..model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from ..tasks import DatasetSpec, TaskError, build_mixture, default_vocab, read_jsonl, training_records, write_jsonl
from ..train import OptimizerSpec, TrainingDiverged, accuracy, repeated_segment_records, train
from . import config as hcfg
from .experiments import (EXPERIMENT_RUNNERS, AccuracyFloorError, NumericDegeneracy, check_floor,
                          label_of, load_model)
from .report import ReportBundle, ReportError, make_manifest, manifest_hash, read_csv, report_emit

EXIT_OK, EXIT_CONFIG, EXIT_FLOOR, EXIT_DEGENERATE = 0, 2, 3, 4
log = logging.getLogger("dcdkit")


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else cfg.output


def _dataset(args, cfg):
    """Pairs from --dataset, data.path, or generated from data.components / data.variants."""
    path = args.dataset or cfg.resolve(cfg["data"]["path"])
    if path:
        return read_jsonl(path)
    d = cfg["data"]
    comps = [tuple(c) for c in d["components"]] or [(t, v, 1.0) for t, v in d["variants"]]
    if not comps:
        raise hcfg.ConfigError("no dataset: give --dataset, data.path, data.components or data.variants")
    spec = DatasetSpec([(t, v, float(w)) for t, v, w in comps], d["n_examples"], tuple(d["splits"]),
                       cfg.seeds["data"])
    split = build_mixture(spec)
    return {"train": split.train, "val": split.val, "test": split.test}[args.split]


def _model_config(cfg) -> ModelConfig:
    mc = cfg["model"]["config"]
    if mc is None:
        raise hcfg.ConfigError("model.config is required")
    mc = dict(mc)
    mc.setdefault("vocab_size", len(default_vocab()))
    mc.setdefault("seed", cfg.seeds["train"])
    try:
        return ModelConfig.from_dict(mc).validate()
    except (TypeError, ModelConfigError) as exc:
        raise hcfg.ConfigError(f"model.config: {exc}") from exc


# --- subcommands ------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    written = []
    if d["components"]:
        spec = DatasetSpec([tuple(c) for c in d["components"]], d["n_examples"], tuple(d["splits"]),
                           cfg.seeds["data"])
        split = build_mixture(spec)
        for name in ("train", "val", "test"):
            write_jsonl(getattr(split, name), out / f"mixture_{name}.jsonl")
            written.append(out / f"mixture_{name}.jsonl")
    for t, v in d["variants"]:
        split = build_mixture(DatasetSpec([(t, v, 1.0)], d["n_per_variant"], tuple(d["splits"]), cfg.seeds["data"]))
        for name in ("train", "val", "test"):
            p = out / f"{t}_{v}_{name}.jsonl"
            write_jsonl(getattr(split, name), p)
            written.append(p)
    for p in written:
        print(p)


def cmd_train(args, cfg):
    mc = _model_config(cfg)
    tr = cfg["train"]
    if not tr["tasks"]:
        raise hcfg.ConfigError("train.tasks is empty")
    from ..tasks import generate

    recs, evals = [], {}
    for i, (t, v) in enumerate(tr["tasks"]):
        pairs = generate(t, v, tr["n_per_variant"], seed=cfg.seeds["data"] + 1000 + i)
        recs.extend(training_records(pairs))
        evals[label_of(t, v)] = generate(t, v, 300, seed=cfg.seeds["data"] + 2000 + i)
    aux = []
    if tr["aux_segments"]:
        aux = repeated_segment_records(tr["aux_segments"], cfg.seeds["data"] + 3000, default_vocab().classes["name"])
    opt = dict(lr=tr["lr"], batch_size=tr["batch_size"], warmup=tr["warmup"], weight_decay=tr["weight_decay"],
               log_every=200)
    params = build_model(mc, cfg["model"]["init_std"])
    seed = cfg.seeds["train"]
    if tr["aux_pretrain_steps"]:
        # first phase on the auxiliary sequences alone, then everything together
        params, _ = train(params, aux, OptimizerSpec(steps=tr["aux_pretrain_steps"], seed=seed, **opt))
        seed += 1
    params, report = train(params, recs + aux, OptimizerSpec(steps=tr["steps"], seed=seed, **opt))
    accs = {k: accuracy(params, training_records(v)) for k, v in evals.items()}
    ck = cfg.checkpoint(must_exist=False)
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ck, {"train_accuracy": report["train_accuracy"], "heldout_accuracy": accs})
    print(json.dumps({"checkpoint": str(ck), "heldout_accuracy": accs}, indent=1, sort_keys=True))


def cmd_wire_induction(args, cfg):
    params = build_induction_model(_model_config(cfg))
    ck = cfg.checkpoint(must_exist=False)
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ck, {"wired": "induction"})
    print(ck)


def cmd_attribute(args, cfg):
    params = load_model(cfg)
    pairs = _dataset(args, cfg)
    method = args.method or cfg["discovery"]["methods"][0]
    mp = {"steps": cfg["discovery"]["ig_steps"]} if method == "eap_ig" else {}
    m = attr.attribute_dataset(params, pairs, method, mp)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"attribution_{method}.dcda"
    m.save(path)
    engine.graph_for(params).write_manifest(out / "graph_manifest.json")
    print(path)


def _scores(args, cfg, params):
    if args.matrix:
        return attr.AttributionMatrix.load(args.matrix)
    pairs = _dataset(args, cfg)
    method = args.method or cfg["discovery"]["methods"][0]
    mp = {"steps": cfg["discovery"]["ig_steps"]} if method == "eap_ig" else {}
    return attr.attribute_dataset(params, pairs, method, mp)


def cmd_discover(args, cfg):
    params = load_model(cfg)
    m = _scores(args, cfg, params)
    g = engine.graph_for(params)
    if m.manifest_hash != g.manifest_hash:
        raise hcfg.ConfigError("attribution matrix was computed on a different graph")
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for k in cfg["discovery"]["sizes"]:
        c = circ.select_circuit(m.mean, k, m.manifest_hash, m.method, args.dataset_id)
        c.save(out / f"circuit_{m.method}_{k:g}.json", g)
        print(out / f"circuit_{m.method}_{k:g}.json")


def cmd_dcd(args, cfg):
    from .experiments import dcd_config

    params = load_model(cfg)
    m = _scores(args, cfg, params)
    g = engine.graph_for(params)
    variant = args.variant or cfg["dcd"]["variants"][0]
    res = dcd.cluster_matrix(m, dcd_config(cfg, m.method, variant))
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for k, cs in res.circuits.items():
        for i, c in enumerate(cs):
            name = f"cluster{i}_{k:g}.json"
            c.save(out / name, g)
            files.setdefault(f"{k:g}", []).append(name)
    if res.binary is not None:
        res.binary.save(out / "binary.dcdb", m.manifest_hash)
    (out / "clusters.json").write_text(json.dumps(res.to_json(files), indent=1, sort_keys=True) + "\n")
    print(json.dumps({"K_star": res.K_star, "sizes": np.bincount(res.assignment).tolist()}))


def cmd_eval(args, cfg):
    params = load_model(cfg)
    pairs = _dataset(args, cfg)
    bundle = ReportBundle()
    check_floor(params, {"eval": pairs}, cfg["accuracy_floor"], bundle)
    if args.circuit:
        g = engine.graph_for(params)
        c = circ.Circuit.from_json(json.loads(Path(args.circuit).read_text()), g.n_edges)
        r = circ.faithfulness(params, c, pairs, cfg["discovery"]["zero_ablation"])
        if r.degenerate:
            raise NumericDegeneracy("degenerate faithfulness denominator")
        print(json.dumps(r.to_json(), sort_keys=True))
        return
    m = _scores(args, cfg, params)
    curve = circ.faithfulness_curve(params, m.mean, pairs, cfg["discovery"]["sizes"],
                                    cfg["discovery"]["zero_ablation"])
    if curve.degenerate:
        raise NumericDegeneracy("degenerate faithfulness denominator")
    t = bundle.table("curve", ["size", "f"])
    for k, f in curve.points():
        t.add(k, f)
    bundle.documents["curve_summary"] = curve.summary()
    bundle.manifest = make_manifest(cfg.hash(), cfg.seeds, cfg.canonical(), {"command": "eval"})
    for p in report_emit(bundle, _out(args, cfg)):
        print(p)


def _experiment(kind):
    def run(args, cfg):
        if cfg["experiment"] not in (None, kind):
            raise hcfg.ConfigError(f"config is for experiment {cfg['experiment']!r}, not {kind!r}")
        cfg.raw["experiment"] = kind
        try:
            bundle = EXPERIMENT_RUNNERS[kind](cfg)
        except AccuracyFloorError as exc:
            if exc.bundle is not None and exc.bundle.manifest:
                report_emit(ReportBundle({"accuracy": exc.bundle.tables["accuracy"]}, {},
                                         exc.bundle.manifest), _out(args, cfg))
            raise
        for p in report_emit(bundle, _out(args, cfg)):
            print(p)

    return run


def cmd_report(args, cfg):
    """Check an output directory: every CSV must carry the manifest's hash."""
    out = _out(args, cfg)
    man = json.loads((out / "manifest.json").read_text())
    want = man.pop("manifest_sha256")
    if manifest_hash(man) != want:
        raise ReportError(f"{out}/manifest.json: content does not match its hash")
    bad = []
    for p in sorted(out.glob("*.csv")):
        h, header, rows = read_csv(p)
        status = "ok" if h == want else "MISMATCH"
        if h != want:
            bad.append(p.name)
        print(f"{p.name}: {len(rows)} rows, {len(header)} columns, manifest {status}")
    if bad:
        raise ReportError(f"manifest mismatch in {', '.join(bad)}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "wire-induction": cmd_wire_induction,
    "attribute": cmd_attribute,
    "discover": cmd_discover,
    "dcd": cmd_dcd,
    "eval": cmd_eval,
    "cross-variant": _experiment("cross_variant"),
    "mixture": _experiment("mixture_sweep"),
    "compare": _experiment("dcd_compare"),
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcdkit", description="circuit discovery experiments")
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--seed-override", type=int, default=None, help="replace every seed in the config")
    ap.add_argument("--out", default=None, help="output directory (overrides config 'output')")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("attribute", "discover", "dcd", "eval"):
            sp.add_argument("--dataset", help="JSONL dataset file")
            sp.add_argument("--split", default="train", choices=("train", "val", "test"))
            sp.add_argument("--method", choices=attr.METHODS)
        if name in ("discover", "dcd", "eval"):
            sp.add_argument("--matrix", help="attribution matrix file (.dcda)")
        if name == "discover":
            sp.add_argument("--dataset-id", default="")
        if name == "dcd":
            sp.add_argument("--variant", choices=("kmeans-pca", "kmeans-svd", "agglom", "divisive"))
        if name == "eval":
            sp.add_argument("--circuit", help="circuit JSON file")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = hcfg.load_config(args.config, args.seed_override)
        COMMANDS[args.command](args, cfg)
    except (hcfg.ConfigError, TaskError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AccuracyFloorError as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return EXIT_FLOOR
    except (NumericDegeneracy, circ.DegenerateDenominator, TrainingDiverged) as exc:
        print(f"numeric degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
