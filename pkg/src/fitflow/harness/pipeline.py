"""Stage-by-stage experiment pipeline over one run directory.

Every stage runs inside an oracle-audit phase named after its CLI
subcommand. Only ``evaluate`` scores sequences with the oracle.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from ..bootstrap import bootstrap_round, synthetic_csv
from ..errors import ConfigError, FitflowError
from ..flowmatch import SamplerConfig, VelocityModel, calibrate_target, default_target_grid, generate, train_flow
from ..landscape import (
    ORACLE_AUDIT,
    BenchmarkSubset,
    Landscape,
    RankingPredictor,
    build_benchmark,
    make_landscape,
    rank_topk,
    train_ranker,
)
from ..latentcodec import Codec, train_codec
from ..seqkit import evaluate_set, read_sequences, write_sequences
from . import artifacts as art
from .config import RunConfig, config_hash, stage_hash
from .report import SCHEMA_VERSION, aggregate, chart_csv, render_figures, validate_report

log = logging.getLogger(__name__)

TARGET_VARIANTS = ("low", "mid", "high")
BOOTSTRAP_VARIANT = "bootstrap"


def samples_file(variant: str, seed: int, kind: str = "samples") -> str:
    # The headline variant keeps the plain names.
    if variant == "high":
        return f"{kind}_seed{seed}.txt"
    return f"{kind}_{variant}_seed{seed}.txt"


class Pipeline:
    def __init__(self, cfg: RunConfig, out: Path | str | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out = cfg.resolve_out(str(out) if out is not None else None)
        self.out.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, object] = {}
        self._phase_start: dict[str, int] = {}
        art.write_json(self.out / "config.json", {"config_hash": config_hash(cfg), "config": cfg.to_dict()})

    # ------------------------------------------------------------ bookkeeping

    @contextmanager
    def _phase(self, name: str) -> Iterator[None]:
        start = ORACLE_AUDIT.snapshot().get(name, 0)
        self._phase_start[name] = start
        t0 = time.perf_counter()
        with ORACLE_AUDIT.phase(name):
            yield
        calls = ORACLE_AUDIT.snapshot().get(name, 0) - start
        art.merge_counts(self.out / "audit.json", {name: calls})
        art.merge_counts(self.out / "timings.json", {name: round(time.perf_counter() - t0, 3)})

    def _h(self, stage: str) -> str:
        return stage_hash(self.cfg, stage)

    # ------------------------------------------------------------ loaders

    def landscape(self) -> Landscape:
        if "landscape" not in self._cache:
            d = art.load_stamped(self.out, "landscape.json", self._h("landscape"))
            self._cache["landscape"] = Landscape.from_dict(d["landscape"])
        return self._cache["landscape"]

    def benchmark(self) -> BenchmarkSubset:
        if "benchmark" not in self._cache:
            d = art.load_stamped(self.out, "benchmark.json", self._h("benchmark"))
            self._cache["benchmark"] = BenchmarkSubset.from_dict(d["subset"])
        return self._cache["benchmark"]

    def codec(self) -> Codec:
        if "codec" not in self._cache:
            meta, state = art.load_model(self.out, "codec", self._h("codec"))
            codec = Codec.from_meta(meta["codec"], state)
            codec.store.freeze()
            self._cache["codec"] = codec
        return self._cache["codec"]

    def ranker(self) -> RankingPredictor:
        if "ranker" not in self._cache:
            meta, state = art.load_model(self.out, "ranker", self._h("ranker"))
            self._cache["ranker"] = RankingPredictor.from_meta(meta, state)
        return self._cache["ranker"]

    def flow(self, name: str = "flow") -> VelocityModel:
        if name not in self._cache:
            stage = "flow" if name == "flow" else "bootstrap"
            meta, state = art.load_model(self.out, name, self._h(stage))
            self._cache[name] = VelocityModel.from_meta(meta["flow"], state)
        return self._cache[name]

    # ------------------------------------------------------------ stages

    def landscape_gen(self) -> Landscape:
        with self._phase("landscape-gen"):
            ls = make_landscape(self.cfg.landscape)
            art.save_stamped(
                self.out,
                "landscape.json",
                {"landscape_id": ls.landscape_id(), "landscape": ls.to_dict()},
                self._h("landscape"),
            )
        self._cache["landscape"] = ls
        return ls

    def benchmark_build(self) -> BenchmarkSubset:
        with self._phase("benchmark-build"):
            b = self.cfg.benchmark
            subset = build_benchmark(self.landscape(), b.difficulty, b.size, b.min_gap, b.seed)
            art.save_stamped(self.out, "benchmark.json", {"subset": subset.to_dict()}, self._h("benchmark"))
            (self.out / "benchmark.csv").write_text(subset.to_csv())
        self._cache["benchmark"] = subset
        return subset

    def train_codec(self) -> Codec:
        with self._phase("train-codec"):
            codec, history = train_codec(self.benchmark().sequences, self.cfg.codec)
            art.save_model(
                self.out,
                "codec",
                codec.store.state_dict(),
                {"codec": codec.meta(), "history": history.to_dict()},
                self._h("codec"),
            )
        self._cache["codec"] = codec
        return codec

    def train_flow(self) -> VelocityModel:
        with self._phase("train-flow"):
            subset, codec = self.benchmark(), self.codec()
            seqs = subset.sequences
            logvar = None
            if self.cfg.flow.stochastic_latents:
                _, lv = codec.compress(codec.embed(codec.codes(seqs)))
                logvar = lv.data
            model, history = train_flow(codec.latents(seqs), subset.fitness, self.cfg.flow, latent_logvar=logvar)
            art.save_model(
                self.out,
                "flow",
                model.store.state_dict(),
                {
                    "flow": model.meta(),
                    "p": self.cfg.flow.p,
                    "train_config": asdict(self.cfg.flow),
                    "history": history.summary(),
                },
                self._h("flow"),
            )
            ranker = train_ranker(subset, self.cfg.ranker)
            art.save_model(self.out, "ranker", ranker.store.state_dict(), ranker.meta(), self._h("ranker"))
        self._cache["flow"], self._cache["ranker"] = model, ranker
        return model

    def _calibrate(self, model: VelocityModel, train_fitness: np.ndarray) -> tuple[float, list[dict]]:
        s, c = self.cfg.sampler, self.cfg.calibration
        if s.target is not None:
            return float(s.target), []
        grid = default_target_grid(train_fitness, c.n_candidates, c.span)
        return calibrate_target(model, self.codec(), self.ranker(), grid, s.w, s.K, c.n, c.top_k, c.seed)

    def _draw(self, model: VelocityModel, variant: str, target: float, incomplete: dict) -> None:
        s = self.cfg.sampler
        for seed in self.cfg.seeds:
            try:
                cfg = SamplerConfig(K=s.K, w=s.w, target=target, n=s.n, top_k=s.top_k, seed=seed)
                seqs = generate(model, self.codec(), cfg)
                top = rank_topk(self.ranker(), seqs, s.top_k)
            except FitflowError as exc:
                log.error("variant %s seed %d failed: %s", variant, seed, exc)
                incomplete.setdefault(variant, {})[str(seed)] = f"{type(exc).__name__}: {exc}"
                continue
            write_sequences(self.out / samples_file(variant, seed), seqs)
            write_sequences(self.out / samples_file(variant, seed, "topk"), top)

    def sample(self) -> dict:
        with self._phase("sample"):
            f = self.benchmark().fitness
            high, table = self._calibrate(self.flow(), f)
            low = float(np.median(f))
            targets = {"low": low, "mid": (low + high) / 2, "high": high}
            incomplete: dict = {}
            for variant in TARGET_VARIANTS:
                self._draw(self.flow(), variant, targets[variant], incomplete)
            payload = {"targets": targets, "table": table, "incomplete": incomplete}
            art.save_stamped(self.out, "calibration.json", payload, self._h("sample"))
        return payload

    def bootstrap(self) -> dict:
        if self.cfg.bootstrap is None:
            raise ConfigError("the bootstrap section is null; nothing to do")
        with self._phase("bootstrap"):
            subset, codec = self.benchmark(), self.codec()
            calib = art.load_stamped(self.out, "calibration.json", self._h("sample"))
            f = subset.fitness
            interval = self.cfg.bootstrap.interval or (float(f.min()), float(calib["targets"]["high"]))
            if not interval[0] < interval[1]:
                interval = (float(f.min()), float(f.max()))
            before = codec.store.state_dict()
            res = bootstrap_round(subset, codec, self.cfg.flow, self.cfg.bootstrap, interval, pre_model=self.flow())
            unchanged = all(np.array_equal(before[k], v) for k, v in codec.store.state_dict().items())
            art.save_model(
                self.out,
                "flow_boot",
                res.post_model.store.state_dict(),
                {
                    "flow": res.post_model.meta(),
                    "p": self.cfg.bootstrap.p,
                    "history": res.post_history.summary() if res.post_history else None,
                },
                self._h("bootstrap"),
            )
            (self.out / "synthetic.csv").write_text(synthetic_csv(res.augmented.synthetic))
            # The retrained model's own training labels define its calibration grid.
            target, table = self._calibrate(res.post_model, res.augmented.fitness)
            incomplete: dict = {}
            self._draw(res.post_model, BOOTSTRAP_VARIANT, target, incomplete)
            payload = {
                "summary": res.summary,
                "target": target,
                "table": table,
                "incomplete": incomplete,
                "codec_unchanged": unchanged,
            }
            art.save_stamped(self.out, "bootstrap.json", payload, self._h("bootstrap"))
        self._cache["flow_boot"] = res.post_model
        return payload

    def evaluate(self) -> dict:
        with self._phase("evaluate"):
            ls, subset = self.landscape(), self.benchmark()
            calib = art.load_stamped(self.out, "calibration.json", self._h("sample"))
            variants = {v: (calib["targets"][v], calib["incomplete"].get(v, {})) for v in TARGET_VARIANTS}
            boot = None
            if self.cfg.bootstrap is not None and (self.out / "bootstrap.json").exists():
                boot = art.load_stamped(self.out, "bootstrap.json", self._h("bootstrap"))
                variants[BOOTSTRAP_VARIANT] = (boot["target"], boot["incomplete"].get(BOOTSTRAP_VARIANT, {}))
            train = subset.sequences
            out_variants = {}
            for name, (target, incomplete) in variants.items():
                incomplete = dict(incomplete)
                per_seed = []
                for seed in self.cfg.seeds:
                    if str(seed) in incomplete:
                        continue
                    path = self.out / samples_file(name, seed, "topk")
                    try:
                        art.require(self.out, [path.name])
                        top = read_sequences(path)
                        mr = evaluate_set(top, ls.oracle_score(top), train, seed)
                    except FitflowError as exc:
                        incomplete[str(seed)] = f"{type(exc).__name__}: {exc}"
                        continue
                    per_seed.append({**mr.to_dict(), "target": float(target)})
                out_variants[name] = {
                    "target": float(target),
                    "per_seed": per_seed,
                    "aggregate": aggregate(per_seed),
                    "incomplete": incomplete,
                }
            audit = art.read_json(self.out / "audit.json") if (self.out / "audit.json").exists() else {}
            audit["evaluate"] = ORACLE_AUDIT.snapshot().get("evaluate", 0) - self._phase_start["evaluate"]
            f = subset.fitness
            codec_side = art.read_json(self.out / "codec.json")["meta"]
            flow_side = art.read_json(self.out / "flow.json")["meta"]
            ranker_side = art.read_json(self.out / "ranker.json")["meta"]
            models = {
                "codec": codec_side["history"],
                "flow": flow_side["history"],
                "ranker": {"val_mse": ranker_side["val_mse"], "val_spearman": ranker_side["val_spearman"]},
            }
            if boot is not None:
                models["flow_bootstrap"] = art.read_json(self.out / "flow_boot.json")["meta"]["history"]
            report = art.clean(
                {
                    "schema_version": SCHEMA_VERSION,
                    "config_hash": config_hash(self.cfg),
                    "landscape_id": ls.landscape_id(),
                    "benchmark": {
                        "difficulty": subset.difficulty,
                        "size": len(subset),
                        "min_gap": subset.min_gap,
                        "percentile_window": list(subset.percentile_window),
                        "fitness_window": list(subset.fitness_window),
                        "train_fitness": {
                            "min": float(f.min()),
                            "median": float(np.median(f)),
                            "max": float(f.max()),
                        },
                    },
                    "targets": {name: v["target"] for name, v in out_variants.items()},
                    "calibration": calib["table"],
                    "bootstrap": None if boot is None else {**boot["summary"], "calibration": boot["table"]},
                    "variants": out_variants,
                    "audit": audit,
                    "models": models,
                }
            )
            validate_report(report)
            (self.out / "report.json").write_text(art.dumps(report))
            (self.out / "chart.csv").write_text(chart_csv(report))
        return report

    def report(self) -> list[Path]:
        art.require(self.out, ["report.json"])
        report = art.read_json(self.out / "report.json")
        validate_report(report)
        (self.out / "chart.csv").write_text(chart_csv(report))
        return [self.out / "chart.csv", *render_figures(report, self.out)]

    def run(self, figures: bool = True) -> dict:
        self.landscape_gen()
        self.benchmark_build()
        self.train_codec()
        self.train_flow()
        self.sample()
        if self.cfg.bootstrap is not None:
            self.bootstrap()
        report = self.evaluate()
        if figures:
            self.report()
        return report


def run_experiment(cfg: RunConfig, out: Path | str | None = None, figures: bool = True) -> dict:
    """Full protocol: build data, train codec/flow/ranker, sample, optionally bootstrap, evaluate."""
    return Pipeline(cfg, out).run(figures=figures)
