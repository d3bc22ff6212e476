"""End-to-end experiment pipeline: train, score, prune, evaluate, compare, sweep.

Every artifact a command writes carries the full experiment configuration and
the sha256 of the checkpoint it was derived from, so any output can be traced
back to (and regenerated from) its inputs.  JSON is written with sorted keys
and no timestamps; only FPS-related fields differ between reruns.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import dataset as D
from . import figures
from . import graph as G
from . import metrics as M
from . import pruner as P
from . import scorer as S
from .config import ExperimentConfig
from .container import file_sha256
from .train import train

log = logging.getLogger(__name__)

METHOD_LABELS = {"baseline": "Baseline", "l1": "L1-Pruned", "attribution": "Attr.-Pruned"}
MAP50_GATE = 0.5


def _write_json(path: Path, record: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def provenance(cfg: ExperimentConfig, checkpoint=None) -> dict:
    return {"config": cfg.to_dict(),
            "checkpoint_sha256": file_sha256(checkpoint) if checkpoint is not None else None}


def _csv_with_provenance(reports, prov: dict) -> str:
    header = (f"# config={json.dumps(prov['config'], sort_keys=True)}\n"
              f"# checkpoint_sha256={prov['checkpoint_sha256']}\n")
    return header + M.write_table(reports)


def model_label(model) -> str:
    m = model.meta
    return f"{m['paradigm']}-d{m['depth']}-w{m['width']}"


def model_digest(model) -> str:
    h = hashlib.sha256()
    for name, p in model.parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def validation_scenes(cfg: ExperimentConfig) -> list:
    d, m = cfg.data, cfg.model
    return D.load_or_generate(d.cache_dir or None, d.val_seed, d.val_count, m.image_size, m.grid)


def training_scenes(cfg: ExperimentConfig) -> list:
    d, m = cfg.data, cfg.model
    return D.load_or_generate(d.cache_dir or None, d.train_seed, d.train_count, m.image_size, m.grid)


def exempt_layers(cfg: ExperimentConfig, model) -> tuple:
    ids = list(cfg.prune.exempt)
    if cfg.prune.exempt_head:
        ids += [lid for lid in model.head_conv_ids if lid not in ids]
    return tuple(ids)


# ---------------------------------------------------------------- train


def cmd_train(cfg: ExperimentConfig, out) -> Path:
    """Train the configured toy detector; returns the checkpoint path."""
    out = Path(out)
    m, t = cfg.model, cfg.train
    model = G.build_toy(m.paradigm, m.depth, m.width, m.classes, m.grid, m.image_size, m.init_seed)
    history = train(model, training_scenes(cfg), epochs=t.epochs, lr=t.lr, batch_size=t.batch_size,
                    seed=t.seed, clip_norm=t.clip_norm, lr_decay_epochs=t.lr_decay_epochs)
    map50, map5095 = M.evaluate(model, validation_scenes(cfg), cfg.eval.conf_threshold,
                                interpolation=cfg.eval.interpolation)
    gate = map50 >= MAP50_GATE
    if not gate:
        log.warning("validation mAP@.50 %.3f is below the %.1f gate", map50, MAP50_GATE)
    prov = provenance(cfg)
    validation = {"map_50": map50, "map_50_95": map5095, "gate_map_50": MAP50_GATE, "gate_passed": gate}
    ckpt = G.save_checkpoint(model, out / "checkpoint.ckpt", extra={**prov, "validation": validation})
    record = {**prov, "output_checkpoint_sha256": file_sha256(ckpt), "history": history,
              "validation": validation}
    _write_json(out / "train.json", record)
    figures.plot_loss(history, out / "loss.svg", prov)
    return ckpt


# ---------------------------------------------------------------- score


def score_tables(cfg: ExperimentConfig, model) -> tuple:
    s = cfg.score
    l1 = S.l1_score(model, include_bias=s.include_bias)
    component = None if s.component == "sum" else s.component
    attr = S.attribution_score(model, validation_scenes(cfg), batches=s.batches,
                               batch_size=s.batch_size, seed=s.seed, component=component)
    return l1, attr


def cmd_score(cfg: ExperimentConfig, checkpoint, out) -> tuple:
    """Write importance_l1.json and importance_attribution.json; returns both paths."""
    out = Path(out)
    l1, attr = score_tables(cfg, G.load_checkpoint(checkpoint))
    prov = provenance(cfg, checkpoint)
    return (S.save_table(l1, out / "importance_l1.json", prov),
            S.save_table(attr, out / "importance_attribution.json", prov))


# ---------------------------------------------------------------- prune


def eligible_only(table, exempt) -> S.ImportanceTable:
    """The table without exempt layers, so rank comparisons cover exactly what a plan may prune."""
    keep = [lid for lid in table.scores if lid not in exempt]
    return S.ImportanceTable(table.method, {k: table.scores[k] for k in keep},
                             {k: table.order[k] for k in keep}, table.samples_used, dict(table.notes))


def plan_for(cfg: ExperimentConfig, model, table, rate: float) -> P.PrunePlan:
    exempt = exempt_layers(cfg, model)
    if rate == 0.0:
        return P.PrunePlan.empty(table.method, exempt)
    return P.make_plan(table, rate, exempt)


def cmd_prune(cfg: ExperimentConfig, checkpoint, table_path, out, rate: float | None = None) -> tuple:
    """Prune at ``rate`` (default: config rate) using a saved importance table."""
    out = Path(out)
    model = G.load_checkpoint(checkpoint)
    table = S.load_table(table_path)
    plan = plan_for(cfg, model, table, cfg.prune.rate if rate is None else rate)
    pruned = P.apply_plan(model, plan)
    prov = provenance(cfg, checkpoint)
    prov["table_sha256"] = file_sha256(table_path)
    ckpt = G.save_checkpoint(pruned, out / f"pruned_{plan.method}.ckpt", extra={**prov, "plan": plan.to_record()})
    plan_path = _write_json(out / f"plan_{plan.method}.json",
                            {**prov, "plan": plan.to_record(), "output_checkpoint_sha256": file_sha256(ckpt)})
    return ckpt, plan_path


# ---------------------------------------------------------------- eval


@dataclass
class Evaluator:
    """Evaluates models on the validation split, memoizing by parameter content.

    Bitwise-identical models (for example every rate-0 variant and the baseline)
    therefore share one measurement, so their rows agree exactly.
    """

    cfg: ExperimentConfig
    scenes: list
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, model, method: str) -> M.EvalReport:
        key = model_digest(model)
        if key not in self._cache:
            e = self.cfg.eval
            map50, map5095 = M.evaluate(model, self.scenes, e.conf_threshold, interpolation=e.interpolation)
            tp = M.measure_fps(model, passes=e.fps_passes, warmup=e.fps_warmup, batch=e.fps_batch)
            info = {"fps_ci95": tp.fps_ci95, "fps_relative_ci95": tp.relative_ci95,
                    "fps_pass_std_s": tp.pass_std_s, "fps_passes": tp.passes, "fps_warmup": tp.warmup,
                    "fps_batch": tp.batch, "hardware": M.hardware_stanza()}
            self._cache[key] = (map50, map5095, tp.fps, info)
        map50, map5095, fps, info = self._cache[key]
        return M.EvalReport(model_label(model), method, map50, map5095, fps,
                            M.param_count(model), M.flops(model), None, dict(info))


def cmd_eval(cfg: ExperimentConfig, checkpoint, out, method: str = "Baseline") -> M.EvalReport:
    out = Path(out)
    report = Evaluator(cfg, validation_scenes(cfg))(G.load_checkpoint(checkpoint), method)
    prov = provenance(cfg, checkpoint)
    _write_json(out / "eval.json", {**prov, "report": report.to_record()})
    (out / "eval.csv").write_text(_csv_with_provenance([report], prov))
    return report


# ---------------------------------------------------------------- compare / sweep


def _checkpoint_or_train(cfg, checkpoint, out: Path) -> Path:
    if checkpoint is not None:
        return Path(checkpoint)
    log.info("no checkpoint given; training one under %s", out / "train")
    return cmd_train(cfg, out / "train")


def cmd_compare(cfg: ExperimentConfig, out, checkpoint=None, rate: float | None = None) -> dict:
    """Baseline, L1-pruned and attribution-pruned rows at one rate on one checkpoint."""
    out = Path(out)
    checkpoint = _checkpoint_or_train(cfg, checkpoint, out)
    rate = cfg.prune.rate if rate is None else rate
    model = G.load_checkpoint(checkpoint)
    l1, attr = score_tables(cfg, model)
    plans = {t.method: plan_for(cfg, model, t, rate) for t in (l1, attr)}
    evaluator = Evaluator(cfg, validation_scenes(cfg))
    baseline = evaluator(model, METHOD_LABELS["baseline"])
    rows = [baseline]
    for method, plan in plans.items():
        rows.append(evaluator(P.apply_plan(model, plan), METHOD_LABELS[method]).against(baseline))

    k = max(1, plans["l1"].prune_count)
    exempt = set(exempt_layers(cfg, model))
    ranks = S.compare_rankings(eligible_only(l1, exempt), eligible_only(attr, exempt), k=k)
    diff = sorted(P.plan_diff(plans["l1"], plans["attribution"]))
    l1_set, attr_set = set(plans["l1"].pruned), set(plans["attribution"].pruned)
    if l1_set == attr_set:
        relation = "identical"
    elif not l1_set & attr_set:
        relation = "disjoint"
    else:
        relation = "overlapping"

    prov = provenance(cfg, checkpoint)
    record = {
        **prov,
        "rate": rate,
        "columns": list(M.TABLE_COLUMNS),
        "rows": [r.to_record() for r in rows],
        "plans": {m: p.to_record() for m, p in plans.items()},
        "pruned_sets": relation,
        "plan_diff": diff,
        "rank_comparison": ranks.to_record(),
        "importance": {"l1": l1.to_record(), "attribution": attr.to_record()},
    }
    _write_json(out / "compare.json", record)
    (out / "compare.csv").write_text(_csv_with_provenance(rows, prov))
    figures.plot_ranks(ranks.to_record(), out / "ranks.svg", prov)
    return record


def cmd_sweep(cfg: ExperimentConfig, out, checkpoint=None) -> dict:
    """Prune at every configured rate with both methods; record and plot the mAP drop."""
    out = Path(out)
    checkpoint = _checkpoint_or_train(cfg, checkpoint, out)
    model = G.load_checkpoint(checkpoint)
    l1, attr = score_tables(cfg, model)
    evaluator = Evaluator(cfg, validation_scenes(cfg))
    baseline = evaluator(model, METHOD_LABELS["baseline"])
    base = baseline.map_50_95

    methods, rows = {}, [baseline]
    for table in (l1, attr):
        points = []
        for rate in cfg.prune.sweep_rates:
            plan = plan_for(cfg, model, table, rate)
            rep = evaluator(P.apply_plan(model, plan), f"{METHOD_LABELS[table.method]}@{rate:g}").against(baseline)
            drop = 100.0 * (base - rep.map_50_95) / base if base else 0.0
            points.append({"rate": rate, "map_50": rep.map_50, "map_50_95": rep.map_50_95, "fps": rep.fps,
                           "map_drop_percent": drop, "fps_ci95": rep.info["fps_ci95"],
                           "pruned": list(plan.pruned)})
            if rate > 0:
                rows.append(rep)
        methods[table.method] = points

    prov = provenance(cfg, checkpoint)
    record = {**prov, "rates": list(cfg.prune.sweep_rates), "baseline": baseline.to_record(), "methods": methods}
    _write_json(out / "sweep.json", record)
    (out / "sweep.csv").write_text(_csv_with_provenance(rows, prov))
    figures.plot_sweep(record, out / "sweep.svg", prov)
    return record
