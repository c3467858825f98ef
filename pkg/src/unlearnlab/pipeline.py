"""Config-driven pipeline: generate -> pretrain -> unlearn -> analyze -> attack -> report.

Every stage writes its outputs under one run directory and records itself in
``manifest.json`` once complete, so an interrupted run resumes from the first
unfinished stage. No output carries a timestamp; reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import attacks as AT
from . import attribution as AB
from . import corpus as C
from . import metrics as M
from . import model as MD
from . import unlearn as U

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
STAGES = ("generate", "pretrain", "unlearn", "analyze", "attack", "report")
DEPENDS = {
    "generate": (),
    "pretrain": ("generate",),
    "unlearn": ("pretrain",),
    "analyze": ("unlearn",),
    "attack": ("unlearn",),
    "report": ("unlearn",),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    num_entities: int = 50
    num_relations: int = 4
    fractions: tuple[float, float, float] = (0.05, 0.10, 0.70)
    values_per_relation: int | None = None
    benign_size: int = 1000


@dataclass(frozen=True)
class AnalysisConfig:
    influence_variation: bool = True
    grids: bool = True
    lens: bool = True
    correlation: bool = True
    top_m: int = 100
    grid_top_k: int = 100


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    corpus: CorpusConfig = CorpusConfig()
    model: MD.ModelConfig = MD.ModelConfig()
    pretrain: MD.PretrainSettings = MD.PretrainSettings()
    unlearn: tuple[U.UnlearnConfig, ...] = ()
    attacks: tuple[AT.AttackConfig, ...] = ()
    analysis: AnalysisConfig = AnalysisConfig()
    out_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        body = self.to_dict()
        body.pop("out_dir")  # where a run lives does not change what it computes
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {unknown}")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version!r} (expected {CONFIG_VERSION})")
    kw: dict[str, Any] = {"version": version}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed: expected an integer")
        kw["seed"] = data["seed"]
    if "out_dir" in data:
        kw["out_dir"] = str(data["out_dir"])
    for name, cls in (("corpus", CorpusConfig), ("model", MD.ModelConfig),
                      ("pretrain", MD.PretrainSettings), ("analysis", AnalysisConfig)):
        if name in data:
            kw[name] = _build(cls, data[name], name)
    if "unlearn" in data:
        if not isinstance(data["unlearn"], list):
            raise ConfigError("unlearn: expected a list")
        kw["unlearn"] = tuple(_build(U.UnlearnConfig, u, f"unlearn[{i}]") for i, u in enumerate(data["unlearn"]))
        methods = [u.method for u in kw["unlearn"]]
        if len(set(methods)) != len(methods):
            raise ConfigError(f"unlearn: duplicate methods {methods}")
    if "attacks" in data:
        if not isinstance(data["attacks"], list):
            raise ConfigError("attacks: expected a list")
        kw["attacks"] = tuple(_build(AT.AttackConfig, a, f"attacks[{i}]") for i, a in enumerate(data["attacks"]))
    cfg = PipelineConfig(**kw)
    if len(C.build_vocab(1, 1, 1)) > cfg.model.vocab_size:
        raise ConfigError("model.vocab_size too small for the corpus glue vocabulary")
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def sub_seed(seed: int, name: str) -> int:
    """Independent, reproducible stream per named consumer."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# ------------------------------------------------------------------ run directory helpers


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")


def _load(path: Path):
    return json.loads(path.read_text())


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])


class Run:
    """One pipeline execution bound to a run directory."""

    def __init__(self, config: PipelineConfig, out_dir: str | Path | None = None):
        self.config = config
        self.dir = Path(out_dir if out_dir is not None else config.out_dir)
        self.manifest_path = self.dir / "manifest.json"
        self._splits = None
        self._benign = None

    # manifest -------------------------------------------------------------

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return _load(self.manifest_path)
        return {"config_hash": self.config.hash(), "version": CONFIG_VERSION, "stages": {}}

    def _mark(self, stage: str, status: str, detail: str = "") -> None:
        m = self.manifest()
        m["stages"][stage] = {"status": status, **({"detail": detail} if detail else {})}
        _dump(self.manifest_path, m)

    def completed(self, stage: str) -> bool:
        return self.manifest()["stages"].get(stage, {}).get("status") == "done"

    def _check_hash(self) -> None:
        m = self.manifest()
        if m["stages"] and m["config_hash"] != self.config.hash():
            raise ConfigError(
                f"{self.dir} holds a run of a different config (hash {m['config_hash'][:12]}); use a fresh --out"
            )

    # lazy artifacts --------------------------------------------------------

    @property
    def splits(self) -> C.CorpusSplits:
        if self._splits is None:
            self._splits, self._benign = C.import_corpus(self.dir / "corpus.jsonl")
        return self._splits

    @property
    def benign(self) -> list[C.BenignItem]:
        self.splits
        return self._benign

    def base(self) -> MD.ModelSnapshot:
        return MD.load_checkpoint(self.dir / "pretrain" / "model.ckpt")

    def unlearned(self, method: str) -> MD.ModelSnapshot:
        return MD.load_checkpoint(self.dir / "unlearn" / method / "model.ckpt")

    def methods(self) -> list[str]:
        return [u.method for u in self.config.unlearn]

    # stages ----------------------------------------------------------------

    def stage_generate(self) -> None:
        cc = self.config.corpus
        splits = C.generate(
            sub_seed(self.config.seed, "corpus"), cc.num_entities, cc.num_relations, cc.fractions,
            cc.values_per_relation, vocab_limit=self.config.model.vocab_size,
        )
        benign = C.benign_corpus(sub_seed(self.config.seed, "benign"), cc.benign_size, splits)
        C.export_corpus(splits, self.dir / "corpus.jsonl", benign)
        self._splits = None

    def stage_pretrain(self) -> None:
        mc = dataclasses.replace(self.config.model, init_seed=sub_seed(self.config.seed, "init"))
        settings = dataclasses.replace(self.config.pretrain, seed=sub_seed(self.config.seed, "pretrain"))
        pairs = [f.pair(t) for f in self.splits.all_facts() for t in range(len(f.questions))]
        res = MD.pretrain(MD.ModelSnapshot.initial(mc), pairs, settings)
        MD.save_checkpoint(res.snapshot, self.dir / "pretrain" / "model.ckpt")
        scores = M.score(res.snapshot, self.splits)
        _dump(self.dir / "pretrain" / "summary.json", {
            "steps": res.steps, "accuracy": res.accuracy, "reached": res.reached, "scores": scores.to_dict(),
        })
        _write_rows(self.dir / "pretrain" / "loss.csv", ["step", "loss"], list(enumerate(res.losses)))

    def stage_unlearn(self) -> None:
        base = self.base()
        for uc in self.config.unlearn:
            uc = dataclasses.replace(uc, seed=sub_seed(self.config.seed, f"unlearn/{uc.method}"))
            out, trace = U.unlearn(base, self.splits, uc)
            d = self.dir / "unlearn" / uc.method
            MD.save_checkpoint(out, d / "model.ckpt")
            _dump(d / "trace.json", trace.to_dict())
            scores = M.score(out, self.splits)
            retain = MD.answer_accuracy(out, self.splits.retain) if self.splits.retain else None
            _dump(d / "scores.json", {**scores.to_dict(), "rs_retain": retain,
                                     "stop_step": trace.stop_step, "stop_reason": trace.stop_reason})

    def stage_analyze(self) -> None:
        an = self.config.analysis
        base = self.base()
        splits = self.splits
        lens_seed = sub_seed(self.config.seed, "distractors")
        d = self.dir / "analyze"
        if an.lens:
            M.lens_profile(base, splits.forget, splits, lens_seed).write_csv(d / "base" / "lens.csv")
        before = None
        index = AB.NeuronIndex.for_snapshot(base)
        if an.influence_variation or an.grids:
            before = AB.attribute_facts(base, splits.forget, index.sites)
        for method in self.methods():
            out = self.unlearned(method)
            md = d / method
            summary: dict[str, Any] = {}
            if before is not None:
                try:
                    after = AB.attribute_facts(out, splits.forget, index.sites)
                except AB.AttributionError as e:
                    summary["variation_error"] = str(e)
                else:
                    var = AB.variation_from_maps(before, after, index)
                    summary["minus_clamp"] = var.metadata["minus_clamp"]
                    if an.influence_variation:
                        m = min(an.top_m, index.size)
                        for direction in ("plus", "minus"):
                            curve = AB.cumulative_top_m(var, direction, m)
                            _write_rows(md / f"top_m_{direction}.csv", ["m", "cumulative"],
                                        [(int(a), float(b)) for a, b in curve])
                            summary[f"top_{m}_{direction}"] = float(curve[-1, 1])
                        AB.write_neuron_table(md / "variation.csv", index, {
                            "d_plus": var.d_plus, "d_minus": var.d_minus,
                            "d_plus_clamped": var.d_plus_clamped, "d_minus_clamped": var.d_minus_clamped,
                        })
                        summary["clamps_nonnegative"] = bool(
                            (var.d_plus_clamped >= 0).all() and (var.d_minus_clamped >= 0).all()
                        )
                    if an.grids:
                        grid = AB.module_layer_grid(var, an.grid_top_k)
                        for direction, g in grid.items():
                            _write_rows(md / f"grid_{direction}.csv", ["layer", *MD.MODULE_KINDS],
                                        [(l, *map(float, row)) for l, row in enumerate(g)])
            if an.lens:
                prof = M.lens_profile(out, splits.forget, splits, lens_seed)
                prof.write_csv(md / "lens.csv")
                summary["lens"] = prof.accuracy
                summary["lens_below_chance"] = [l for l, a in enumerate(prof.accuracy) if a < prof.chance]
            _dump(md / "analysis.json", summary)

    def stage_attack(self) -> None:
        splits = self.splits
        an = self.config.analysis
        for method in self.methods():
            out = self.unlearned(method)
            md = self.dir / "attack" / method
            results: dict[str, Any] = {}
            for ac in self.config.attacks:
                name = attack_name(ac)
                seeds = tuple(sub_seed(self.config.seed, f"attack/{name}/{s}") for s in ac.seeds)
                run_cfg = dataclasses.replace(ac, seeds=seeds)
                try:
                    if ac.kind == "harmful":
                        rep = AT.harmful_attack(out, splits, run_cfg)
                    else:
                        rep = AT.benign_attack(out, self.benign, splits, run_cfg)
                except AT.AttackError as e:
                    results[name] = {"error": str(e)}
                    continue
                rep.write_trajectories(md / f"{name}_trajectories.csv")
                entry = rep.to_dict()
                entry.pop("runs")
                if ac.kind == "harmful":
                    entry["disjoint"] = all(
                        not set(a) & set(h) for a, h in rep.metadata["subsets"].values()
                    )
                if an.correlation and ac.kind == "harmful" and "correlation" not in results:
                    results["correlation"] = self._correlation(out, rep, name, md)
                results[name] = entry
            _dump(md / "attacks.json", results)

    def _correlation(self, unlearned: MD.ModelSnapshot, rep: AT.AttackReport, name: str, out_dir: Path) -> dict:
        facts = self.splits.forget
        index = AB.NeuronIndex.for_snapshot(unlearned)
        try:
            pre = AB.aggregate_from_maps(AB.attribute_facts(unlearned, facts, index.sites), index)
        except AB.AttributionError as e:
            return {"attack": name, "error": str(e)}
        rhos, columns = {}, {"pre": pre}
        # post-attack means the end of training; the max-FS snapshot can be step 0 when nothing recovers
        for seed, snap in sorted(rep.final.items()):
            try:
                post = AB.aggregate_from_maps(AB.attribute_facts(snap, facts, index.sites), index)
                rhos[str(seed)] = AB.distribution_correlation(pre, post)
                columns[f"post_seed{seed}"] = post
            except AB.AttributionError:
                rhos[str(seed)] = math.nan
        AB.write_neuron_table(out_dir / f"{name}_distribution.csv", index, columns)
        vals = [v for v in rhos.values() if not math.isnan(v)]
        return {"attack": name, "per_seed": rhos, "mean": float(np.mean(vals)) if vals else math.nan, "post": "end of the max-FS run"}

    def stage_report(self) -> None:
        write_report(self.dir, self.config)

    # driver ------------------------------------------------------------------

    def execute(self, stages: tuple[str, ...] = STAGES, force: bool = False) -> int:
        """Run ``stages`` plus any unfinished prerequisites. Returns an exit status."""
        self._check_hash()
        self.dir.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.dir / "config.json")
        if not self.manifest_path.exists():
            _dump(self.manifest_path, self.manifest())
        wanted = _closure(stages)
        failed: set[str] = set()
        for stage in STAGES:
            if stage not in wanted:
                continue
            if any(dep in failed for dep in DEPENDS[stage]):
                self._mark(stage, "skipped", "dependency failed")
                failed.add(stage)
                continue
            if self.completed(stage) and not (force and stage in stages):
                log.info("stage %s already complete", stage)
                continue
            log.info("stage %s", stage)
            try:
                getattr(self, f"stage_{stage}")()
            except Exception as e:  # recorded, later stages skipped
                log.exception("stage %s failed", stage)
                self._mark(stage, "failed", f"{type(e).__name__}: {e}")
                failed.add(stage)
                continue
            self._mark(stage, "done")
        return 1 if failed else 0


def _closure(stages) -> set[str]:
    out: set[str] = set()
    todo = list(stages)
    while todo:
        s = todo.pop()
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; expected one of {STAGES}")
        if s not in out:
            out.add(s)
            todo.extend(DEPENDS[s])
    return out


def attack_name(ac: AT.AttackConfig) -> str:
    return f"harmful_p{ac.p:g}" if ac.kind == "harmful" else "benign"


# ------------------------------------------------------------------ report


SUMMARY_COLUMNS = ("method", "fs", "rs", "us", "harmful_p0.1", "harmful_p0.3", "benign",
                   "stop_step", "stop_reason", "rho")


def write_report(run_dir: str | Path, config: PipelineConfig | None = None) -> Path:
    """Collect per-method outputs into summary.csv and report.json."""
    run_dir = Path(run_dir)
    unlearn_dir = run_dir / "unlearn"
    methods = sorted(p.name for p in unlearn_dir.iterdir() if (p / "scores.json").exists()) if unlearn_dir.exists() else []
    if not methods:
        raise FileNotFoundError(f"no runs found in {run_dir}")
    if config is None and (run_dir / "config.json").exists():
        config = load_config(run_dir / "config.json")
    if config is not None:
        order = [m for m in (u.method for u in config.unlearn) if m in methods]
        methods = order + [m for m in methods if m not in order]
    rows, per_method = [], {}
    for m in methods:
        scores = _load(unlearn_dir / m / "scores.json")
        attacks_path = run_dir / "attack" / m / "attacks.json"
        attacks = _load(attacks_path) if attacks_path.exists() else {}
        analysis_path = run_dir / "analyze" / m / "analysis.json"
        analysis = _load(analysis_path) if analysis_path.exists() else {}

        def atk(name):
            a = attacks.get(name)
            return None if a is None or "error" in a else a["mean_max_fs"]

        rho = attacks.get("correlation", {}).get("mean")
        rows.append((m, scores["fs"], scores["rs"], scores["us"], atk("harmful_p0.1"), atk("harmful_p0.3"),
                     atk("benign"), scores["stop_step"], scores["stop_reason"], rho))
        per_method[m] = {"scores": scores, "attacks": attacks, "analysis": analysis}
    _write_rows(run_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    pre = run_dir / "pretrain" / "summary.json"
    report = {
        "version": CONFIG_VERSION,
        "config_hash": config.hash() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "pretrain": _load(pre) if pre.exists() else None,
        "methods": per_method,
    }
    _dump(run_dir / "report.json", report)
    return run_dir / "summary.csv"


def default_config(**overrides) -> PipelineConfig:
    """Six-method study with the harmful (p = 0.1, 0.3) and benign attacks."""
    methods = [U.UnlearnConfig(method=m, **U.DEFAULT_RATES[m]) for m in U.METHODS]
    attacks_ = (
        AT.AttackConfig(kind="harmful", p=0.1, **AT.DEFAULT_ATTACK),
        AT.AttackConfig(kind="harmful", p=0.3, **AT.DEFAULT_ATTACK),
        AT.AttackConfig(kind="benign", learning_rates=AT.BENIGN_LRS, batch_size=AT.BENIGN_BATCH, **AT.DEFAULT_ATTACK),
    )
    return dataclasses.replace(PipelineConfig(unlearn=tuple(methods), attacks=attacks_), **overrides)
