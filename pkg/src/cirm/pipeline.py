"""Pipeline stages over a work directory.

Each stage reads the artifacts of earlier stages, checks their lineage and
writes its own outputs under fixed names.  Missing inputs raise
:class:`StageError` naming the earliest stage that has not run.  Artifacts
carry the hashes of their inputs (embedded for JSON, in a ``.lineage.json``
sidecar otherwise), so later stages can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from . import bench
from .config import dump_config
from .corpus import CorpusConfig, generate_candidates, generate_corpus, read_jsonl, write_jsonl
from .errors import CorpusFormatError, LineageError, StageError
from .features import BIASES, QueryResponse
from .model import ModelConfig, init_model, load_model, save_model
from .probe import ActivationMatrix, InterventionManifest, NeuronRanking, all_medians, collect_activations
from .scoring import ScoredPair
from .search import KConfig, Objective, grid_search, normalize_grids, tpe_search
from .train import TrainConfig, train, write_loss_curve

log = logging.getLogger("cirm")

STAGES = ("gen-corpus", "init-model", "train", "collect", "identify", "tune", "score", "annotate", "eval", "report")

# artifact name -> (relative path, producing stage)
ARTIFACTS = {
    "train_corpus": ("corpus/train.jsonl", "gen-corpus"),
    "val_corpus": ("corpus/val.jsonl", "gen-corpus"),
    "test_corpus": ("corpus/test.jsonl", "gen-corpus"),
    "candidates": ("corpus/candidates.jsonl", "gen-corpus"),
    "init_model": ("model/init.cirm", "init-model"),
    "model": ("model/trained.cirm", "train"),
    "loss_curve": ("model/loss_curve.csv", "train"),
    "activations": ("probe/activations.npy", "collect"),
    "rankings": ("probe/rankings.json", "identify"),
    "manifest": ("manifest.json", "tune"),
    "search_trace": ("search_trace.csv", "tune"),
    "scores": ("scores.json", "score"),
    "annotations": ("annotations.jsonl", "annotate"),
    "eval": ("eval.json", "eval"),
    "report": ("report.json", "report"),
    "histogram": ("histogram.csv", "report"),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


class Workdir:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["out"])

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name][0]

    def require(self, stage: str, *names: str) -> None:
        """Raise for the missing input whose producer comes first in the pipeline."""
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            first = min(missing, key=lambda n: STAGES.index(ARTIFACTS[n][1]))
            producer = ARTIFACTS[first][1]
            raise StageError(
                f"{stage} needs {ARTIFACTS[first][0]}, which is produced by `{producer}`; run `cirm {producer}` first",
                producer,
            )

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return p

    def hash(self, name: str) -> str:
        return sha256_file(self.path(name))

    def lineage_path(self, name: str) -> Path:
        p = self.path(name)
        return p.with_name(p.name + ".lineage.json")

    def write_lineage(self, name: str, inputs: dict, settings=None) -> None:
        doc = {"artifact": ARTIFACTS[name][0], "sha256": self.hash(name), "inputs": inputs}
        if settings is not None:
            doc["settings"] = settings
        self.lineage_path(name).write_text(_dumps(doc))

    def read_lineage(self, name: str) -> dict:
        p = self.lineage_path(name)
        if not p.exists():
            raise LineageError(f"{ARTIFACTS[name][0]} has no lineage record; rerun `{ARTIFACTS[name][1]}`")
        return json.loads(p.read_text())

    def check_inputs(self, stage: str, recorded: dict) -> None:
        """Compare recorded input hashes against the files on disk now."""
        for name, digest in recorded.items():
            if name not in ARTIFACTS:
                continue
            if not self.path(name).exists():
                self.require(stage, name)
            now = self.hash(name)
            if now != digest:
                raise LineageError(
                    f"{stage}: {ARTIFACTS[name][0]} changed since it was used (recorded {digest[:12]}, now {now[:12]}); "
                    f"rerun the stages after `{ARTIFACTS[name][1]}`"
                )


# -- stages --------------------------------------------------------------------------------


def _corpus_config(cfg, n, seed, strengths="bias_strength") -> CorpusConfig:
    c = cfg["corpus"]
    return CorpusConfig(n_pairs=n, bias_strength=dict(c[strengths]), seed=seed)


def gen_corpus(wd: Workdir) -> None:
    c = wd.cfg["corpus"]
    for name, n, seed, strengths in (
        ("train_corpus", c["n_train"], c["train_seed"], "bias_strength"),
        ("val_corpus", c["n_val"], c["val_seed"], "val_bias_strength"),
        ("test_corpus", c["n_test"], c["test_seed"], "bias_strength"),
    ):
        pairs = generate_corpus(_corpus_config(wd.cfg, n, seed, strengths))
        wd.path(name).parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(pairs, wd.path(name))
        wd.write_lineage(name, {}, {"corpus": c})
        log.info("wrote %d pairs to %s", n, wd.path(name))
    sets = generate_candidates(_corpus_config(wd.cfg, 1, c["candidate_seed"]), c["n_candidate_sets"], c["n_candidates"])
    lines = [json.dumps({"query": q, "responses": r, "qualities": qu}, ensure_ascii=False) for q, r, qu in sets]
    wd.write_text("candidates", "".join(line + "\n" for line in lines))
    wd.write_lineage("candidates", {}, {"corpus": c})


def init_model_stage(wd: Workdir) -> None:
    m = wd.cfg["model"]
    model = init_model(ModelConfig(**m))
    wd.path("init_model").parent.mkdir(parents=True, exist_ok=True)
    save_model(model, wd.path("init_model"))
    wd.write_lineage("init_model", {}, {"model": m})


def train_stage(wd: Workdir) -> None:
    wd.require("train", "train_corpus", "init_model")
    model = load_model(wd.path("init_model"))
    pairs = read_jsonl(wd.path("train_corpus"))
    tc = TrainConfig(**wd.cfg["train"])
    trained, curve = train(model, pairs, tc, wd.cfg["template"], log=log.info)
    save_model(trained, wd.path("model"))
    write_loss_curve(curve, wd.path("loss_curve"))
    inputs = {"init_model": wd.hash("init_model"), "train_corpus": wd.hash("train_corpus")}
    wd.write_lineage("model", inputs, {"train": wd.cfg["train"]})
    wd.write_lineage("loss_curve", inputs, {"train": wd.cfg["train"]})


def _val_dataset(pairs) -> list[QueryResponse]:
    return [qr for p in pairs for qr in (p.preference.a, p.preference.b)]


def collect_stage(wd: Workdir) -> None:
    wd.require("collect", "model", "val_corpus")
    model = load_model(wd.path("model"))
    val = read_jsonl(wd.path("val_corpus"))
    matrix = collect_activations(model, _val_dataset(val), wd.cfg["template"])
    wd.path("activations").parent.mkdir(parents=True, exist_ok=True)
    matrix.save(wd.path("activations").with_suffix(""))
    wd.write_lineage("activations", {"model": wd.hash("model"), "val_corpus": wd.hash("val_corpus")})


def _load_matrix(wd: Workdir) -> ActivationMatrix:
    return ActivationMatrix.load(wd.path("activations").with_suffix(""))


def identify_stage(wd: Workdir) -> None:
    """Spearman rankings of every neuron for every bias, plus all medians."""
    wd.require("identify", "model", "activations")
    wd.check_inputs("identify", wd.read_lineage("activations")["inputs"])
    matrix = _load_matrix(wd)
    from .probe import rank_all

    rankings = rank_all(matrix)
    medians = np.median(matrix.values, axis=0)
    doc = {
        "lineage": {"activations": wd.hash("activations"), "model": wd.hash("model")},
        "model_checksum": matrix.model_checksum,
        "valset_hash": matrix.valset_hash,
        "rho": {b: [float(x) for x in rankings[b].rho] for b in BIASES},
        "degenerate": {b: [bool(x) for x in rankings[b].degenerate] for b in BIASES},
        "medians": [float(x) for x in medians],
    }
    wd.write_text("rankings", _dumps(doc))


def _load_rankings(wd: Workdir, config: ModelConfig) -> tuple[dict, dict]:
    doc = json.loads(wd.path("rankings").read_text())
    wd.check_inputs("tune", doc["lineage"])
    rankings = {
        b: NeuronRanking(b, config, np.array(doc["rho"][b]), np.array(doc["degenerate"][b], dtype=bool)) for b in BIASES
    }
    medians = {config.address(i): v for i, v in enumerate(doc["medians"])}
    return rankings, medians


def search_grids(cfg: dict) -> dict:
    s = cfg["search"]
    if s["grids"]:
        return normalize_grids(s["grids"])
    return normalize_grids({b: s["grid"] for b in BIASES})


def tune_stage(wd: Workdir) -> None:
    wd.require("tune", "model", "val_corpus", "activations", "rankings")
    s = wd.cfg["search"]
    model = load_model(wd.path("model"))
    val = read_jsonl(wd.path("val_corpus"))
    matrix = _load_matrix(wd)
    rankings, medians = _load_rankings(wd, model.config)
    obj = Objective(model, matrix, [p.preference for p in val], wd.cfg["template"], rankings, medians)
    grids = search_grids(wd.cfg)
    if s["sampler"] == "grid":
        best, trace = grid_search(obj, grids, s["budget_cap"])
    elif s["sampler"] == "tpe":
        best, trace = tpe_search(obj, grids, s["budget"], s["seed"])
    else:
        raise StageError(f"unknown sampler {s['sampler']!r}")
    log.info("best k %s objective %.4f after %d trials", best.to_dict(), trace.best()[1], len(trace))
    obj.manifest(best).save(wd.path("manifest"))
    trace.to_csv(wd.path("search_trace"))
    inputs = {
        "model": wd.hash("model"),
        "val_corpus": wd.hash("val_corpus"),
        "activations": wd.hash("activations"),
        "rankings": wd.hash("rankings"),
    }
    wd.write_lineage("manifest", inputs, {"search": s})
    wd.write_lineage("search_trace", inputs, {"search": s})


def _load_manifest(wd: Workdir, model) -> InterventionManifest:
    manifest = InterventionManifest.load(wd.path("manifest"))
    manifest.check_model(model)
    return manifest


def _scorers(wd: Workdir, model, manifest, val):
    """Vanilla, CIRM, zero, LP (alpha tuned on validation) and LWR scorers."""
    sc = wd.cfg["scoring"]
    t = wd.cfg["template"]
    plain = bench.vanilla_scorer(model, t)
    memo: dict = {}

    def cached(qr):
        if qr not in memo:
            memo[qr] = plain.reward(qr)
        return memo[qr]

    vanilla = bench.Scorer("vanilla", cached)
    cirm = bench.cirm_scorer(model, manifest, t)
    zero = bench.zero_scorer(model, manifest, t)
    alpha, alpha_scores = bench.tune_lp_alpha(vanilla, val, sc["lp_alphas"])
    calib = bench.fit_lwr(vanilla, _val_dataset(val), sc["lwr_frac"])
    scorers = {
        "vanilla": vanilla,
        "cirm": cirm,
        "zero": zero,
        "lp": bench.lp_scorer(vanilla, alpha),
        "lp_fixed": bench.Scorer("lp_fixed", lambda qr: bench.lp_score(vanilla.reward(qr), qr, sc["lp_alpha"])),
        "lwr": bench.lwr_scorer(vanilla, calib),
    }
    info = {"lp_alpha": alpha, "lp_alpha_scores": {repr(a): v for a, v in alpha_scores.items()}, "lp_alpha_fixed": sc["lp_alpha"]}
    return scorers, info


def score_stage(wd: Workdir) -> None:
    wd.require("score", "model", "val_corpus", "test_corpus", "manifest")
    wd.check_inputs("score", wd.read_lineage("manifest")["inputs"])
    model = load_model(wd.path("model"))
    manifest = _load_manifest(wd, model)
    val = read_jsonl(wd.path("val_corpus"))
    test = read_jsonl(wd.path("test_corpus"))
    scorers, info = _scorers(wd, model, manifest, val)
    swap = bench.swap_scorer(model, manifest, wd.cfg["template"], wd.cfg["scoring"]["swap_direction"])
    methods = {}
    for name, s in scorers.items():
        methods[name] = [[s.reward(p.preference.a), s.reward(p.preference.b)] for p in test]
    methods["swap"] = [[r.reward_a, r.reward_b] for r in (swap(p.preference) for p in test)]
    doc = {
        "lineage": {
            "model": wd.hash("model"),
            "manifest": wd.hash("manifest"),
            "val_corpus": wd.hash("val_corpus"),
            "test_corpus": wd.hash("test_corpus"),
        },
        "settings": {**info, "lwr_frac": wd.cfg["scoring"]["lwr_frac"], "swap_direction": wd.cfg["scoring"]["swap_direction"]},
        "rewards": methods,
    }
    wd.write_text("scores", _dumps(doc))


def _candidate_sets(wd: Workdir) -> list[bench.CandidateSet]:
    out = []
    with open(wd.path("candidates"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                d = json.loads(line)
                out.append(bench.CandidateSet(d["query"], d["responses"], d.get("qualities")))
            except (ValueError, KeyError) as exc:
                raise CorpusFormatError(f"{wd.path('candidates')}:{lineno}: {exc}") from exc
    return out


def annotate_stage(wd: Workdir) -> None:
    wd.require("annotate", "model", "candidates", "manifest")
    wd.check_inputs("annotate", wd.read_lineage("manifest")["inputs"])
    model = load_model(wd.path("model"))
    manifest = _load_manifest(wd, model)
    sets = _candidate_sets(wd)
    t = wd.cfg["template"]
    pairs = []
    for scorer in (bench.vanilla_scorer(model, t), bench.cirm_scorer(model, manifest, t)):
        pairs.extend(bench.annotate(scorer, sets))
    write_jsonl(pairs, wd.path("annotations"))
    wd.write_lineage(
        "annotations",
        {"model": wd.hash("model"), "manifest": wd.hash("manifest"), "candidates": wd.hash("candidates")},
    )


def eval_stage(wd: Workdir) -> None:
    wd.require("eval", "model", "test_corpus", "manifest", "scores")
    scores = json.loads(wd.path("scores").read_text())
    wd.check_inputs("eval", scores["lineage"])
    test = read_jsonl(wd.path("test_corpus"))
    methods = {}
    for name, rewards in scores["rewards"].items():
        if len(rewards) != len(test):
            raise LineageError(f"scores for {name} cover {len(rewards)} pairs, test corpus has {len(test)}")
        decided = iter([ScoredPair.decide(ra, rb, name) for ra, rb in rewards])
        methods[name] = bench.evaluate(lambda _p: next(decided), test, name).to_dict()
    doc = {
        "lineage": {**scores["lineage"], "scores": wd.hash("scores")},
        "conventions": bench.CONVENTIONS,
        "settings": scores["settings"],
        "methods": methods,
    }
    wd.write_text("eval", _dumps(doc))


def report_stage(wd: Workdir) -> None:
    wd.require("report", "model", "manifest", "rankings", "eval", "annotations")
    ev = json.loads(wd.path("eval").read_text())
    wd.check_inputs("report", ev["lineage"])
    wd.check_inputs("report", {**wd.read_lineage("annotations")["inputs"], "eval": wd.hash("eval")})
    model = load_model(wd.path("model"))
    manifest = _load_manifest(wd, model)
    annotations = read_jsonl(wd.path("annotations"))
    by_method: dict[str, list] = {}
    for p in annotations:
        by_method.setdefault(p.extra.get("method", "unknown"), []).append(p)
    annotation = {}
    for method, pairs in by_method.items():
        annotation[method] = {
            "n_sets": len(pairs),
            "degenerate": sum(bool(p.extra.get("degenerate")) for p in pairs),
            "bias_ratio": {b: bench.bias_ratio(pairs, b).to_dict() for b in BIASES},
            "chosen_feature_means": bench.feature_means([p.chosen for p in pairs], [p.query for p in pairs]),
        }

    rows = bench.histogram_rows(manifest.per_bias)
    bench.write_histogram_csv(rows, wd.path("histogram"))
    top_n = wd.cfg["report"]["histogram_top_n"]
    rankings, _ = _load_rankings(wd, model.config)
    from .probe import select_bias_neurons

    ranked_sets = {b: select_bias_neurons(rankings[b], top_n) for b in BIASES}
    ranked_rows = bench.histogram_rows(ranked_sets)
    bench.write_histogram_csv(ranked_rows, wd.root / "histogram_ranking.csv")

    def layer_counts(sets):
        out = {}
        for b in BIASES:
            if sets.get(b):
                by_layer, _ = bench.layer_histogram(sets[b])
                out[b] = {str(k): v for k, v in by_layer.items()}
            else:
                out[b] = {}
        return out

    report = {
        "lineage": {
            "model": wd.hash("model"),
            "manifest": wd.hash("manifest"),
            "eval": wd.hash("eval"),
            "annotations": wd.hash("annotations"),
            "rankings": wd.hash("rankings"),
            "model_checksum": manifest.model_checksum,
            "valset_hash": manifest.valset_hash,
        },
        "conventions": bench.CONVENTIONS,
        "settings": {**ev["settings"], "k_per_bias": manifest.k_per_bias, "histogram_top_n": top_n},
        "methods": ev["methods"],
        "manifest": {
            "n_addresses": len(manifest),
            "target_sum_2k": sum(2 * k for k in manifest.k_per_bias.values()),
            "per_bias_size": {b: len(manifest.per_bias.get(b, [])) for b in BIASES},
            "truncated": manifest.truncated,
        },
        "annotation": annotation,
        "histogram": {"manifest": layer_counts(manifest.per_bias), f"ranking_top{top_n}": layer_counts(ranked_sets)},
        "config": dump_config({k: v for k, v in wd.cfg.items() if k != "out"}),
    }
    wd.write_text("report", _dumps(report))


STAGE_FUNCS: dict[str, Callable[[Workdir], None]] = {
    "gen-corpus": gen_corpus,
    "init-model": init_model_stage,
    "train": train_stage,
    "collect": collect_stage,
    "identify": identify_stage,
    "tune": tune_stage,
    "score": score_stage,
    "annotate": annotate_stage,
    "eval": eval_stage,
    "report": report_stage,
}


def run_stage(cfg: dict, stage: str) -> Workdir:
    wd = Workdir(cfg)
    wd.root.mkdir(parents=True, exist_ok=True)
    STAGE_FUNCS[stage](wd)
    return wd


def run_all(cfg: dict, stages=STAGES) -> Workdir:
    wd = Workdir(cfg)
    for stage in stages:
        log.info("stage %s", stage)
        run_stage(cfg, stage)
    return wd
