"""End-to-end experiment pipeline: ingest, stage, train, forecast, evaluate, fairness."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dataset import (DataError, InteractionLog, PopularityTable, StagedInteractions, chrono_split,
                      compute_quality_ratio, load_interactions, popularity_floor, popularity_table,
                      split_stages, write_interactions)
from .evaluation import (FairnessReport, RankingReport, accuracy_metrics, build_groups, fairness_report,
                         ground_truth_sets, rank_matrix)
from .model import FactorModel, ScoreParams, bin_mean_popularity, load_checkpoint, save_checkpoint
from .popularity import drift_series, forecast_popularity
from .synth import GroundTruth, SynthConfig, generate
from .training import (FitResult, TrainConfig, fit, item_quality_and_popularity, mbd_matrix, pd_matrix,
                       pda_matrix, validation_metric)

logger = logging.getLogger(__name__)

EXPERIMENT_MODES = ("PD", "PDA", "MBD", "ESMM-eq", "ablation-doI", "ablation-doQ")
MBD_FAMILY = ("MBD", "ESMM-eq", "ablation-doI", "ablation-doQ")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Named sub-stream of the root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: str = ""
    data_header: bool = False
    data_min_interactions: int = 0
    data_stages: int = 10
    data_popularity_from: str = "clicks"
    data_split: tuple = (0.8, 0.1, 0.1)
    data_log_base: str = "e"
    mode: str = "PD"
    train_learning_rate: float = 0.01
    train_l2: float = 1e-4
    train_epochs_max: int = 100
    train_patience: int = 10
    train_batch_size: int = 256
    train_neg_per_pos: int = 1
    train_dim: int = 32
    train_optimizer: str = "sgd"
    train_val_k: int = 50
    train_select: str = "best"
    train_full_ridge: bool = False
    train_variant: str = "standard"
    score_gamma: float = 0.1
    score_gamma_tilde: float = -1.0  # negative: same as score_gamma
    score_gamma_r: float = 1.0
    score_gamma_z: float = 1.0
    score_gamma_zc: float = 0.0
    pda_alpha: float = 0.0
    eval_k: tuple = (50, 100)
    fair_k: int = 50
    fair_bins: int = 5
    fair_subgroups: int = 3
    fair_edges: tuple = ()
    grid_gamma: tuple = ()
    grid_alpha: tuple = ()
    grid_gamma_r: tuple = ()
    grid_gamma_z: tuple = ()
    synth_num_users: int = 200
    synth_num_items: int = 100
    synth_T: int = 10
    synth_d_true: int = 8
    synth_gamma_true: float = 1.0
    synth_exposure_strength: float = 2.0
    synth_drift_rate: float = 0.3
    synth_interactions_per_stage: int = 2000
    synth_pop_spread: float = 0.5
    synth_match_scale: float = 2.0
    synth_mbd: bool = False
    synth_rho_T: float = 0.0
    synth_gamma_post: float = 0.5
    synth_quality_spread: float = 1.5
    seed: int = 0
    threads: int = 1
    out: str = "out"

    def validate(self) -> None:
        if self.mode not in EXPERIMENT_MODES:
            raise ConfigError(f"mode must be one of {EXPERIMENT_MODES}, got {self.mode!r}")
        if self.data_stages < 1:
            raise ConfigError("data.stages must be >= 1")
        if self.data_popularity_from not in ("clicks", "post"):
            raise ConfigError("data.popularity_from must be clicks or post")
        if self.data_log_base not in ("e", "2"):
            raise ConfigError("data.log_base must be e or 2")
        for name in ("score_gamma", "score_gamma_r", "score_gamma_z", "score_gamma_zc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{_key(name)} must be >= 0")
        for name in ("grid_gamma", "grid_gamma_r", "grid_gamma_z"):
            if any(v < 0 for v in getattr(self, name)):
                raise ConfigError(f"{_key(name)} values must be >= 0")
        if not self.eval_k or any(k < 1 for k in self.eval_k):
            raise ConfigError("eval.k must list positive integers")
        if self.data_path and not Path(self.data_path).exists():
            raise ConfigError(f"data.path {self.data_path} does not exist")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def gamma_tilde(self) -> float:
        return self.score_gamma if self.score_gamma_tilde < 0 else self.score_gamma_tilde

    def score_params(self) -> ScoreParams:
        if self.mode == "ESMM-eq":
            return ScoreParams(gamma=self.score_gamma, gamma_tilde=self.gamma_tilde)
        return ScoreParams(self.score_gamma, self.gamma_tilde, self.score_gamma_r, self.score_gamma_z,
                           self.score_gamma_zc)

    def train_config(self) -> TrainConfig:
        mode = "MBD" if self.mode in MBD_FAMILY else self.mode
        return TrainConfig(learning_rate=self.train_learning_rate, l2=self.train_l2,
                           epochs_max=self.train_epochs_max, patience=self.train_patience,
                           batch_size=self.train_batch_size, seed=self.seed, mode=mode,
                           params=self.score_params(), neg_per_pos=self.train_neg_per_pos,
                           dim=self.train_dim, optimizer=self.train_optimizer, val_k=self.train_val_k,
                           full_ridge=self.train_full_ridge, variant=self.train_variant,
                           select=self.train_select)

    def synth_config(self) -> SynthConfig:
        kwargs = {f.name[len("synth_"):]: getattr(self, f.name) for f in fields(self) if f.name.startswith("synth_")}
        return SynthConfig(seed=int(rng_for(self.seed, "synth").integers(2 ** 31)), **kwargs)

    def to_text(self) -> str:
        lines = [f"# popdebias {__version__} resolved configuration"]
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{_key(f.name)}={value}")
        return "\n".join(lines) + "\n"


_SECTIONS = ("data", "train", "score", "pda", "eval", "fair", "grid", "synth")


def _key(attr: str) -> str:
    for sec in _SECTIONS:
        if attr.startswith(sec + "_"):
            return f"{sec}.{attr[len(sec) + 1:]}"
    return attr


_ALIASES = {"train.lr": "train.learning_rate"}


def _attr(key: str) -> str:
    key = key.strip()
    return _ALIASES.get(key, key).replace(".", "_")


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value: str) -> Any:
    default = _FIELD_TYPES[name].default
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if name in ("eval_k",):
            return _ints(value)
        return _floats(value)
    return str(value).strip()


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse flat ``section.key=value`` lines (``#`` comments allowed)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        name = _attr(key)
        if name not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key.strip()!r}")
        try:
            values[name] = _coerce(name, value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key.strip()}: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            values[_attr(key)] = _coerce(_attr(key), value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


# ---------------------------------------------------------------- pipeline pieces

@dataclass
class Prepared:
    log: InteractionLog
    train: InteractionLog
    valid: InteractionLog
    test: InteractionLog
    staged: StagedInteractions
    pop: PopularityTable
    truth: GroundTruth | None = None


def prepare(cfg: ExperimentConfig) -> Prepared:
    truth = None
    if cfg.data_path:
        log, _ = load_interactions(cfg.data_path, header=cfg.data_header,
                                   min_interactions=cfg.data_min_interactions)
    else:
        log, truth = generate(cfg.synth_config())
    train, valid, test = chrono_split(log, cfg.data_split)
    staged = split_stages(train, min(cfg.data_stages, len(train)))
    pop = popularity_table(staged, cfg.data_popularity_from)
    return Prepared(log, train, valid, test, staged, pop, truth)


def train_models(cfg: ExperimentConfig, prep: Prepared) -> FitResult:
    return fit(cfg.train_config(), prep.staged, prep.valid,
               rng_init=rng_for(cfg.seed, "init"), rng_neg=rng_for(cfg.seed, "negatives"),
               popularity_source=cfg.data_popularity_from)


def _counts(log: InteractionLog, source: str) -> np.ndarray:
    counts = log.item_counts(source)
    return counts if counts.sum() else log.item_counts("clicks")


def forecast_for_test(cfg: ExperimentConfig, prep: Prepared, alpha: float | None = None) -> np.ndarray:
    """m~ for the test period from the validation stage and the last training stage."""
    alpha = cfg.pda_alpha if alpha is None else alpha
    counts = _counts(prep.valid, cfg.data_popularity_from)
    m_last = counts / counts.sum()
    m_prev = prep.pop.m[-1]
    return forecast_popularity(m_last, m_prev, alpha, popularity_floor(counts)).m_tilde


def forecast_for_valid(cfg: ExperimentConfig, prep: Prepared, alpha: float) -> np.ndarray:
    """m~ for the validation period from the last two training stages."""
    T = prep.pop.T
    if T < 2:
        prev = prep.pop.m[-1]
    else:
        prev = prep.pop.m[-2]
    return forecast_popularity(prep.pop.m[-1], prev, alpha, prep.pop.floor(T - 1)).m_tilde


def quality_bins(cfg: ExperimentConfig, train: InteractionLog) -> np.ndarray:
    r_raw, defined = compute_quality_ratio(train)
    spec = build_groups(np.flatnonzero(defined), np.nan_to_num(r_raw), train.item_counts("clicks"),
                        cfg.fair_bins, 1)
    return spec.item_bin


def score_matrix(cfg: ExperimentConfig, prep: Prepared, models: dict, users, m_tilde=None) -> np.ndarray:
    params = cfg.score_params()
    if cfg.mode == "PD":
        return pd_matrix(models["matching"], users)
    if cfg.mode == "PDA":
        m_tilde = forecast_for_test(cfg, prep) if m_tilde is None else m_tilde
        return pda_matrix(models["matching"], users, m_tilde, cfg.gamma_tilde)
    r, z = item_quality_and_popularity(prep.train)
    scores = mbd_matrix(models["ctr"], models["cvr"], users, r, params.gamma_r)
    if cfg.mode == "ablation-doQ":
        scores = scores * np.power(z, params.gamma_z)[None, :]
    elif cfg.mode == "ablation-doI":
        factor = bin_mean_popularity(z, params.gamma_z, quality_bins(cfg, prep.train))
        # items without a quality bin (no clicks) fall back to their own factor
        factor = np.where(np.isnan(factor), np.power(z, params.gamma_z), factor)
        scores = scores * factor[None, :]
    return scores


def test_label(cfg: ExperimentConfig) -> str:
    return "post_clicked" if cfg.mode in MBD_FAMILY else "clicked"


def evaluate_models(cfg: ExperimentConfig, prep: Prepared, models: dict) -> RankingReport:
    label = test_label(cfg)
    mask = (prep.test.post_clicked if label == "post_clicked" else prep.test.clicked) == 1
    users = np.unique(prep.test.users[mask])
    if len(users) == 0:
        raise DataError(f"test partition has no {label} positives")
    seen = InteractionLog.concat([prep.train, prep.valid]).user_item_sets()
    exclude = [seen[u] for u in users]
    K = max(cfg.eval_k)
    scores = score_matrix(cfg, prep, models, users)
    lists = rank_matrix(scores, exclude, K)
    truth = ground_truth_sets(prep.test, users, label, exclude)
    metrics = {}
    for k in sorted(cfg.eval_k):
        recall, hr, ndcg = accuracy_metrics(lists, truth, k)
        metrics[("recall", k)] = recall
        metrics[("hit_ratio", k)] = hr
        metrics[("ndcg", k)] = ndcg
    return RankingReport(users, lists, K, metrics)


def fairness_for(cfg: ExperimentConfig, prep: Prepared, models: dict) -> tuple[FairnessReport, Any]:
    users = np.arange(prep.train.num_users)
    seen = prep.train.user_item_sets()
    lists = rank_matrix(score_matrix(cfg, prep, models, users), seen, cfg.fair_k)
    r_raw, defined = compute_quality_ratio(prep.train)
    clicks, posts = prep.train.item_counts("clicks"), prep.train.item_counts("post")
    report = fairness_report(lists, prep.train.num_items, r_raw, defined, clicks, posts,
                             cfg.fair_bins, cfg.fair_subgroups, cfg.fair_edges or None)
    groups = build_groups(np.flatnonzero(defined), np.nan_to_num(r_raw), clicks, cfg.fair_bins,
                          cfg.fair_subgroups, cfg.fair_edges or None)
    return report, groups


# ---------------------------------------------------------------- run / grid

def _ckpt_names(models: dict) -> dict:
    return {role: f"{role}.ckpt" for role in models}


def save_models(models: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for role, name in _ckpt_names(models).items():
        save_checkpoint(models[role], directory / name)


def as_saved(models: dict) -> dict:
    """Models rounded through the float32 checkpoint format."""
    return {role: FactorModel(m.user_emb.astype(np.float32).astype(np.float64),
                              m.item_emb.astype(np.float32).astype(np.float64), m.role, m.params)
            for role, m in models.items()}


def load_models(directory: Path) -> dict:
    models = {}
    for path in sorted(Path(directory).glob("*.ckpt")):
        model = load_checkpoint(path)
        models[model.role] = model
    if not models:
        raise FileNotFoundError(f"no checkpoints in {directory}")
    return models


def write_popularity(pop: PopularityTable, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("stage\titem\tcount\tm\n")
        for t in range(pop.T):
            for i, (c, m) in enumerate(zip(pop.D[t].tolist(), pop.m[t].tolist())):
                fh.write(f"{t}\t{i}\t{c}\t{m:.12g}\n")


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # tagged and re-raised
        raise StageError(name, exc) from exc


def run(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run the whole pipeline and write every artifact to ``out_dir``."""
    cfg.validate()
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    (out / "manifest.cfg").write_text(cfg.to_text())
    try:
        prep = _stage("ingest", prepare, cfg)
        if prep.truth is not None:
            write_interactions(prep.log, out / "interactions.tsv")
        write_popularity(prep.pop, out / "popularity.tsv")
        if prep.pop.T >= 2:
            _stage("drift", lambda: drift_series(prep.pop, cfg.data_log_base).to_csv(out / "drift.csv"))
        result = _stage("train", train_models, cfg, prep)
        result.trace.to_csv(out / "trace.csv")
        save_models(result.models, out / "checkpoints")
        models = load_models(out / "checkpoints")
        if cfg.mode == "PDA":
            m_tilde = forecast_for_test(cfg, prep)
            with open(out / "forecast.tsv", "w") as fh:
                fh.write("item\tm_tilde\n")
                for i, v in enumerate(m_tilde.tolist()):
                    fh.write(f"{i}\t{v:.12g}\n")
        report = _stage("evaluate", evaluate_models, cfg, prep, models)
        report.to_csv(out / "ranking.csv")
        report.lists_to_tsv(out / "lists.tsv")
        if (prep.train.post_clicked == 1).any():
            fair, groups = _stage("fairness", fairness_for, cfg, prep, models)
            fair.to_csv(out / "fairness.csv")
            groups.to_tsv(out / "groups.tsv")
    except Exception as exc:
        (out / "FAILED").write_text(f"{exc}\n")
        raise
    return out


def validation_score(cfg: ExperimentConfig, prep: Prepared, models: dict, alpha: float) -> float:
    """Recall@K + HR@K on the validation partition with the mode's inference scorer.

    PDA uses the popularity forecast for the validation period with ``alpha``.
    """
    label = test_label(cfg)
    mask = (prep.valid.post_clicked if label == "post_clicked" else prep.valid.clicked) == 1
    users = np.unique(prep.valid.users[mask])
    seen = prep.train.user_item_sets()
    exclude = [seen[u] for u in users]
    K = min(cfg.train_val_k, prep.train.num_items - max(len(s) for s in exclude))
    m_tilde = forecast_for_valid(cfg, prep, alpha) if cfg.mode == "PDA" else None
    scores = score_matrix(cfg, prep, models, users, m_tilde)
    truth = ground_truth_sets(prep.valid, users, label, exclude)
    return validation_metric(rank_matrix(scores, exclude, K), truth, K)


def _grid_points(cfg: ExperimentConfig) -> list[dict]:
    if cfg.mode in MBD_FAMILY and cfg.mode != "ESMM-eq":
        grs = cfg.grid_gamma_r or (cfg.score_gamma_r,)
        gzs = cfg.grid_gamma_z or (cfg.score_gamma_z,)
        return [{"score_gamma_r": a, "score_gamma_z": b} for a in grs for b in gzs]
    return [{"score_gamma": g} for g in (cfg.grid_gamma or (cfg.score_gamma,))]


def _grid_worker(cfg: ExperimentConfig, point: dict, alphas: tuple) -> list[tuple]:
    cfg = replace(cfg, **point)
    prep = prepare(cfg)
    models = as_saved(train_models(cfg, prep).models)
    return [(point, a, validation_score(cfg, prep, models, a)) for a in alphas]


def grid_search(cfg: ExperimentConfig, out_dir=None) -> tuple[dict, list]:
    """Exhaustive grid; returns the best point and the full table (also written as grid.csv)."""
    cfg.validate()
    alphas = cfg.grid_alpha or (cfg.pda_alpha,)
    points = _grid_points(cfg)
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            chunks = list(pool.map(_grid_worker, [cfg] * len(points), points, [alphas] * len(points)))
    else:
        chunks = [_grid_worker(cfg, p, alphas) for p in points]
    table = [row for chunk in chunks for row in chunk]
    best = max(range(len(table)), key=lambda k: (table[k][2], -k))
    best_point = dict(table[best][0], pda_alpha=table[best][1])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = list(table[0][0])
        with open(out / "grid.csv", "w") as fh:
            fh.write(",".join([_key(k) for k in keys] + ["pda.alpha", "val_metric", "best"]) + "\n")
            for k, (point, a, val) in enumerate(table):
                cells = [repr(float(point[key])) for key in keys] + [repr(float(a)), f"{val:.12g}", str(int(k == best))]
                fh.write(",".join(cells) + "\n")
    return best_point, table
