"""Command-line entry point: ``ctformer <command> [flags] [section.key=value ...]``.

Every command writes a run directory holding ``config.json`` (the effective
configuration plus the command and its flags), NDJSON logs/metrics and CSV
tables. ``ctformer rerun DIR`` re-executes a run from that file. Failures
print one JSON line ``{"error": code, "message": ...}`` to stderr and exit
with status 2.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

COMMANDS = ("gen-data", "train", "evaluate", "ablate", "depth-grid", "explain", "align-check", "rerun")


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config

def _sections():
    from .attribution import AttributionConfig
    from .data import SyntheticConfig
    from .model import ModelConfig
    from .training import TrainConfig
    return {"data": SyntheticConfig, "model": ModelConfig, "train": TrainConfig,
            "attribution": AttributionConfig}


def default_config() -> dict:
    cfg = {name: dataclasses.asdict(cls()) for name, cls in _sections().items()}
    cfg["paths"] = {"cohort": None}
    return cfg


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def merge_config(base: dict, patch: dict, where: str = "config") -> dict:
    out = json.loads(json.dumps(base))
    for sec, vals in patch.items():
        if sec not in out:
            raise CLIError("unknown_key", f"{where}: unknown section {sec!r}; valid: {sorted(out)}")
        if not isinstance(vals, dict):
            raise CLIError("bad_config", f"{where}: section {sec!r} must be an object")
        for k, v in vals.items():
            if k not in out[sec]:
                raise CLIError("unknown_key", f"{where}: unknown key {sec}.{k}")
            out[sec][k] = v
    return out


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    patch: dict = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or key.count(".") != 1:
            raise CLIError("bad_override", f"override {item!r} must look like section.key=value")
        sec, k = key.split(".")
        patch.setdefault(sec, {})[k] = _coerce(raw)
    return merge_config(cfg, patch, "override")


def build(cfg: dict):
    """Instantiate and validate the dataclasses of every section."""
    secs = _sections()
    objs = {}
    for name, cls in secs.items():
        vals = dict(cfg[name])
        if name == "train" and isinstance(vals.get("split"), list):
            vals["split"] = tuple(vals["split"])
        try:
            objs[name] = cls(**vals)
            if hasattr(objs[name], "validate"):
                objs[name].validate()
        except (TypeError, ValueError) as e:
            raise CLIError("bad_config", f"{name}: {e}") from None
    m = objs["model"]
    d = objs["data"]
    if (m.n_features, m.t_max) != (d.n_features, d.t_max):
        raise CLIError("bad_config", "model.n_features/t_max must equal data.n_features/t_max")
    return objs


# --------------------------------------------------------------- run dirs

class Run:
    def __init__(self, path, command: str, args: dict, cfg: dict):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        (self.path / "config.json").write_text(
            json.dumps({"command": command, "args": args, "config": cfg}, indent=1, sort_keys=True))
        self._t0 = time.time()
        self._log = (self.path / "run.log").open("w")

    def log(self, msg: str) -> None:
        self._log.write(f"[{time.time() - self._t0:8.1f}s] {msg}\n")
        self._log.flush()

    def ndjson(self, name: str):
        return (self.path / name).open("a")

    def write_json(self, name: str, obj) -> None:
        (self.path / name).write_text(json.dumps(obj, indent=1, sort_keys=True))

    def write_csv(self, name: str, header, rows) -> None:
        import csv
        with (self.path / name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in r])

    def close(self) -> None:
        self._log.close()


def _fresh(path: Path) -> None:
    """Remove files this tool writes so appended logs start empty."""
    if path.exists():
        for p in list(path.glob("*.ndjson")):
            p.unlink()


# ---------------------------------------------------------------- helpers

def _cohort(objs, cfg, lead_time=None, run: Run | None = None):
    from . import data
    dc = objs["data"] if lead_time is None else dataclasses.replace(objs["data"], lead_time_hours=lead_time)
    path = cfg["paths"].get("cohort")
    if path and lead_time is None:
        if not Path(path).exists():
            raise CLIError("missing_artifact", f"cohort file {path} not found; produce it with `ctformer gen-data`")
        try:
            cohort, _ = data.read_cohort(path)
        except data.CohortFormatError as e:
            raise CLIError("bad_cohort", f"{path}: {e}") from None
        return cohort
    if run:
        run.log(f"generating cohort seed={dc.rng_seed} W={dc.lead_time_hours} n={dc.n_patients}")
    return data.generate_synthetic_cohort(dc)


def _splits(objs, cohort):
    from . import data, training
    tc = objs["train"]
    tr, va, te = data.split_cohort(cohort, tc.split, tc.seed)
    stats = data.fit_normalization(tr)
    tr, va, te = (data.zscore_normalize(x, stats) for x in (tr, va, te))
    return training.Splits(list(tr), list(va), list(te)), stats


def _curves(run: Run, prefix: str, y, p) -> None:
    from . import metrics
    if 0 < sum(y) < len(y):
        metrics.write_curve_csv(run.path / f"{prefix}roc.csv", metrics.curve_points(p, y, "roc"))
        metrics.write_curve_csv(run.path / f"{prefix}pr.csv", metrics.curve_points(p, y, "pr"))


def _export_causal(run: Run, model, cache) -> None:
    """Per-patient S, alpha and gate vectors for the given cache."""
    import numpy as np
    from . import engine as E, training
    rows_s, rows_g = [], []
    with E.no_grad():
        for lo in range(0, len(cache), 256):
            idx = np.arange(lo, min(lo + 256, len(cache)))
            out = training.stage2_outputs(model, cache, idx)
            for r, i in enumerate(idx):
                pid, tv = cache.ids[i], int(cache.lengths[i])
                for t in range(tv):
                    rows_s.append([pid, t, float(out["S"].data[r, t]), float(out["alpha"].data[r, t])])
                if "gate" in out:
                    rows_g.append([pid] + [float(x) for x in out["gate"].data[r]])
    run.write_csv("causal_attention.csv", ["patient_id", "step", "S", "alpha"], rows_s)
    if rows_g:
        d = len(rows_g[0]) - 1
        run.write_csv("gates.csv", ["patient_id"] + [f"g{j}" for j in range(d)], rows_g)


def _write_matrix_csv(path: Path, mat) -> None:
    import csv
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"c{j}" for j in range(mat.shape[1])])
        for i, r in enumerate(mat):
            w.writerow([i] + [repr(float(x)) for x in r])


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, objs, cfg, args) -> None:
    import numpy as np
    from . import data
    cohort = data.generate_synthetic_cohort(objs["data"])
    data.save_cohort(run.path / "cohort.ndjson", cohort, objs["data"])
    y = np.array([p.label for p in cohort])
    summary = {"n": len(cohort), "prevalence": float(y.mean()) if len(y) else None,
               "mean_t_valid": float(np.mean([p.t_valid for p in cohort])) if cohort else None,
               "positives_with_visible_onset": int(sum(p.onset_index is not None for p in cohort))}
    run.write_json("summary.json", summary)


def cmd_train(run: Run, objs, cfg, args) -> None:
    from . import training
    from .model import CTFormer, make_batch
    stage = args["stage"]
    src = Path(args.get("from") or run.path)
    tc, mc = objs["train"], objs["model"]
    cohort = _cohort(objs, cfg, run=run)
    splits, stats = _splits(objs, cohort)
    run.write_json("normalization.json", stats.to_json())
    run.write_json("splits.json", {k: [p.patient_id for p in getattr(splits, k)] for k in ("train", "val", "test")})
    metrics_out = {}
    if stage in ("1", "all"):
        model = CTFormer(mc, seed=tc.seed)
        with run.ndjson("train_log.ndjson") as fh:
            res = training.train_stage1(model, splits.train, splits.val, tc, fh)
        training.save_checkpoint(run.path / "stage1.ckpt", model, "stage1",
                                 {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run})
        tb = make_batch(splits.test)
        p1 = training.stage1_predict(model, tb)
        metrics_out["stage1"] = training.evaluate_probs(tb.y, p1)
        _curves(run, "stage1_", tb.y.tolist(), p1)
        if mc.has_stage2:
            cache = training.extract_representations(model, splits.train + splits.val + splits.test)
            training.save_tuple_cache(run.path / "tuples.zip", cache)
        run.log(f"stage 1 done: {metrics_out['stage1']}")
    if stage in ("2", "all"):
        if not mc.has_stage2:
            raise CLIError("no_stage2", "variant no_transformer has no Stage 2")
        for name in ("stage1.ckpt", "tuples.zip"):
            if not (src / name).exists():
                raise CLIError("missing_artifact", f"{src / name} not found; produce it with `ctformer train --stage 1`")
        base, _ = training.load_checkpoint(src / "stage1.ckpt")
        cache = training.load_tuple_cache(src / "tuples.zip")
        model = CTFormer(mc, seed=tc.seed)
        model.load_arrays({**{k: v.data for k, v in model.named_parameters().items()},
                           **{f"stage1.{k}": v.data for k, v in base.stage1.items()}})
        tr, va, te = (cache.subset([p.patient_id for p in getattr(splits, k)]) for k in ("train", "val", "test"))
        with run.ndjson("train_log.ndjson") as fh:
            res = training.train_stage2(model, tr, va, tc, fh)
        training.save_checkpoint(run.path / "stage2.ckpt", model, "stage2",
                                 {"best_epoch": res.best_epoch, "epochs_run": res.epochs_run})
        p2 = training.stage2_predict(model, te)
        metrics_out["stage2"] = training.evaluate_probs(te.y, p2)
        _curves(run, "", te.y.tolist(), p2)
        _export_causal(run, model, te)
        run.log(f"stage 2 done: {metrics_out['stage2']}")
    run.write_json(f"metrics_stage{stage}.json", metrics_out)


def _parse_list(text: str, name: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CLIError("bad_flag", f"{name} must be a comma-separated list of integers, got {text!r}") from None


def _parse_range(text: str, name: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise CLIError("bad_flag", f"{name} must look like a..b, got {text!r}") from None
    if a > b:
        raise CLIError("bad_flag", f"{name}: empty range {text!r}")
    return list(range(a, b + 1))


def _seeds(args, objs) -> list[int]:
    return _parse_list(args["seeds"], "--seeds") if args.get("seeds") else [objs["train"].seed]


def _fit(objs, cfg, run, lead_time, seed, model_cfg, variants=("full",)):
    from . import training
    objs = dict(objs)
    objs["data"] = dataclasses.replace(objs["data"], rng_seed=seed)
    objs["train"] = dataclasses.replace(objs["train"], seed=seed)
    cohort = _cohort(objs, cfg, lead_time=lead_time, run=run)
    splits, _ = _splits(objs, cohort)
    return training.fit_two_stage(splits, model_cfg, objs["train"], stage2_variants=variants)


def cmd_evaluate(run: Run, objs, cfg, args) -> None:
    import numpy as np
    lead_times = _parse_list(args["lead_times"], "--lead-times")
    seeds = _seeds(args, objs)
    rows = []
    with run.ndjson("metrics.ndjson") as fh:
        for w in lead_times:
            per = []
            for seed in seeds:
                out = _fit(objs, cfg, run, w, seed, objs["model"])
                m = out["variants"]["full"][2] if out["variants"] else out["stage1_test"]
                fh.write(json.dumps({"lead_time": w, "seed": seed, **m, "stage1": out["stage1_test"]}) + "\n")
                per.append((m["auroc"], m["auprc"]))
                run.log(f"W={w} seed={seed}: {m}")
            a = np.array(per)
            rows.append([w, float(a[:, 0].mean()), float(a[:, 1].mean()), len(seeds)])
    run.write_csv("summary.csv", ["lead_time", "auroc", "auprc", "n_seeds"], rows)


def cmd_ablate(run: Run, objs, cfg, args) -> None:
    from . import training
    from .model import VARIANTS
    variants = [v.strip() for v in args["variant"].split(",")]
    for v in variants:
        if v not in VARIANTS:
            raise CLIError("unknown_variant", f"unknown variant {v!r}; valid: {', '.join(VARIANTS)}")
    cohort = _cohort(objs, cfg, run=run)
    splits, _ = _splits(objs, cohort)
    rows = []
    with run.ndjson("metrics.ndjson") as fh:
        for v in variants:
            rep = training.run_ablation(v, splits, objs["model"], objs["train"])
            fh.write(json.dumps(rep, sort_keys=True) + "\n")
            rows.append([v, rep["auroc"], rep["auprc"], rep["causal_fields"]])
            run.log(f"{v}: {rep['auroc']:.4f}")
    run.write_csv("ablation.csv", ["variant", "auroc", "auprc", "causal_fields"], rows)


def cmd_depth_grid(run: Run, objs, cfg, args) -> None:
    cfc_layers = _parse_range(args["cfc_layers"], "--cfc-layers")
    trans_layers = _parse_range(args["transformer_layers"], "--transformer-layers")
    rows = []
    with run.ndjson("metrics.ndjson") as fh:
        for c in cfc_layers:
            for t in trans_layers:
                mc = dataclasses.replace(objs["model"], cfc_layers=c, n_layers=t)
                out = _fit(objs, cfg, run, None, objs["train"].seed, mc)
                m = out["variants"]["full"][2] if out["variants"] else out["stage1_test"]
                fh.write(json.dumps({"cfc_layers": c, "transformer_layers": t, **m}) + "\n")
                rows.append([c, t, m["auroc"], m["auprc"]])
                run.log(f"cfc={c} trans={t}: {m['auroc']:.4f}")
    run.write_csv("depth_grid.csv", ["cfc_layers", "transformer_layers", "auroc", "auprc"], rows)


def _trained(args, objs, cfg, run):
    """Stage-2 model plus normalized test split of a finished training run."""
    from . import training
    src = args.get("from")
    if not src:
        raise CLIError("bad_flag", "--from RUN_DIR (a `ctformer train --stage all` run) is required")
    src = Path(src)
    if not (src / "stage2.ckpt").exists():
        raise CLIError("missing_artifact", f"{src / 'stage2.ckpt'} not found; produce it with `ctformer train --stage all`")
    model, _ = training.load_checkpoint(src / "stage2.ckpt")
    stored = json.loads((src / "config.json").read_text())["config"]
    sobjs = build(stored)
    splits, _ = _splits(sobjs, _cohort(sobjs, stored, run=run))
    return model, splits


def cmd_explain(run: Run, objs, cfg, args) -> None:
    from . import attribution
    from . import engine as E
    from .model import make_batch
    model, splits = _trained(args, objs, cfg, run)
    pool = {p.patient_id: p for p in splits.train + splits.val + splits.test}
    if args.get("patient"):
        if args["patient"] not in pool:
            raise CLIError("unknown_patient", f"patient {args['patient']!r} not in the cohort")
        targets = [pool[args["patient"]]]
    else:
        targets = splits.test[: args["limit"]] if args.get("limit") else splits.test
    acfg = objs["attribution"]
    with run.ndjson("reports.ndjson") as fh:
        for seq in targets:
            rep = attribution.explain(seq, model, acfg)
            rep.write(run.path / "patients")
            with E.no_grad():
                out = model.forward(make_batch([seq]))
            tv = seq.t_valid
            _write_matrix_csv(run.path / "patients" / f"{seq.patient_id}_B.csv", out["B"].data[0, :tv, :tv])
            fh.write(json.dumps({"patient_id": seq.patient_id, "pruning_index": rep.pruning_index,
                                 "full_value": rep.full_value, "efficiency_gaps": rep.efficiency_gaps()}) + "\n")


def cmd_align_check(run: Run, objs, cfg, args) -> None:
    import numpy as np
    from . import attribution
    model, splits = _trained(args, objs, cfg, run)
    pos = [p for p in splits.test if p.label == 1 and p.onset_index is not None]
    if args.get("limit"):
        pos = pos[: args["limit"]]
    rows = []
    for seq in pos:
        r = attribution.alignment_check(model, seq, args["k"], objs["attribution"])
        rows.append([seq.patient_id, seq.onset_index, r["overlap"], int(seq.onset_index in r["top_alpha"]),
                     r["pruning_index"], " ".join(map(str, r["top_alpha"])), " ".join(map(str, r["top_shapley"]))])
    run.write_csv("alignment.csv", ["patient_id", "onset_index", "overlap", "onset_in_alpha_topk", "pruning_index",
                                    "top_alpha", "top_shapley"], rows)
    run.write_json("alignment_summary.json", {
        "n": len(rows), "k": args["k"],
        "mean_overlap": float(np.mean([r[2] for r in rows])) if rows else None,
        "onset_in_alpha_topk": float(np.mean([r[3] for r in rows])) if rows else None})


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
            "depth-grid": cmd_depth_grid, "explain": cmd_explain, "align-check": cmd_align_check}


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctformer", description="Continuous-time transformer with causal decoupling: data, "
                "training, evaluation and attribution.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (sections data/model/train/attribution/paths)")
        sp.add_argument("--run-dir", required=True, help="output run directory")
        sp.add_argument("overrides", nargs="*", help="section.key=value overrides")

    common(sub.add_parser("gen-data", help="generate a synthetic cohort (NDJSON)"))
    sp = sub.add_parser("train", help="two-stage training")
    sp.add_argument("--stage", choices=("1", "2", "all"), default="all")
    sp.add_argument("--from", dest="from_", help="run directory with Stage-1 artifacts (default: --run-dir)")
    common(sp)
    sp = sub.add_parser("evaluate", help="train and test at several lead times")
    sp.add_argument("--lead-times", default="0,6,12,18,24")
    sp.add_argument("--seeds", default=None, help="comma-separated seeds (default: train.seed)")
    common(sp)
    sp = sub.add_parser("ablate", help="ablation variants")
    sp.add_argument("--variant", required=True, help="comma-separated: full,no_cfc,no_transformer,g_only,l_only")
    common(sp)
    sp = sub.add_parser("depth-grid", help="AUROC over CfC x transformer depths")
    sp.add_argument("--cfc-layers", default="1..2")
    sp.add_argument("--transformer-layers", default="1..3")
    common(sp)
    sp = sub.add_parser("explain", help="Shapley attributions for patients of a trained run")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--patient")
    g.add_argument("--cohort", action="store_true", help="every test patient")
    sp.add_argument("--from", dest="from_", required=True, help="training run directory")
    sp.add_argument("--limit", type=int, default=None)
    common(sp)
    sp = sub.add_parser("align-check", help="alpha vs Shapley top-k overlap on test positives")
    sp.add_argument("--from", dest="from_", required=True, help="training run directory")
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--limit", type=int, default=None)
    common(sp)
    sp = sub.add_parser("rerun", help="re-execute a run directory from its stored config")
    sp.add_argument("source", help="run directory containing config.json")
    sp.add_argument("--run-dir", required=True)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise CLIError("bad_flag", "--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    # process-wide cap; results do not depend on it (fixed-order reductions)
    threadpool_limits(limits=n)


def run_command(command: str, args: dict, cfg: dict, run_dir) -> Path:
    objs = build(cfg)
    path = Path(run_dir)
    _fresh(path)
    run = Run(path, command, args, cfg)
    try:
        HANDLERS[command](run, objs, cfg, {k.rstrip("_"): v for k, v in args.items()})
    finally:
        run.close()
    return path


def main(argv=None) -> int:
    try:
        ns = make_parser().parse_args(argv)
        _set_threads(ns.threads)
        if ns.command == "rerun":
            src = Path(ns.source) / "config.json"
            if not src.exists():
                raise CLIError("missing_artifact", f"{src} not found")
            stored = json.loads(src.read_text())
            merge_config(default_config(), stored["config"], str(src))
            run_command(stored["command"], stored["args"], stored["config"], ns.run_dir)
            return 0
        cfg = default_config()
        if ns.config:
            try:
                loaded = json.loads(Path(ns.config).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise CLIError("bad_config", f"{ns.config}: {e}") from None
            if "command" in loaded and "config" in loaded:
                loaded = loaded["config"]
            cfg = merge_config(cfg, loaded, ns.config)
        cfg = apply_overrides(cfg, ns.overrides)
        args = {k: v for k, v in vars(ns).items()
                if k not in ("command", "config", "run_dir", "overrides", "threads")}
        run_command(ns.command, args, cfg, ns.run_dir)
        return 0
    except CLIError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
