"""
Episodic evaluation harness, ablation sweeps and reporting.

Every episode e is drawn from an RNG seeded by (master_seed, e) and replayed
for every variant with the same fine-tune seed, so per-episode accuracies are
paired across variants. Results are keyed by episode index, which makes the
summaries identical for serial runs and runs spread over worker processes.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.stats
from tqdm import tqdm

from data import Episode, EpisodeSpec, LabeledDataset, load_dataset, make_synthetic_splits, sample_episode
from errors import ConfigurationError, ReportError, TrainingError, UsageError
from model import ModelState, embed, freeze_backbone
from pipeline import (EpisodeFeatures, FinetuneConfig, FinetuneResult, TrainConfig, Variant, embed_episode,
                      evaluate_episode, finetune, train_backbone)
from replacement import BlockAug, BlockDef, ReplacementSettings, with_max_blocks

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["variant", "n", "k", "t", "u", "episodes", "mean_acc", "ci95", "seed"]
EMBEDDING_COLUMNS = ["episode_index", "variant", "epoch", "role", "id", "label", "source_id"]
ALL_VARIANTS = tuple(Variant)


@dataclass
class SyntheticSource:
    classes: int = 40
    per_class: int = 100
    side: int = 32
    seed: int = 7
    test_classes: int = 10
    val_classes: int = 0


@dataclass
class RunConfig:
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    variants: Tuple[Variant, ...] = ALL_VARIANTS
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    replacement: ReplacementSettings = field(default_factory=ReplacementSettings)
    dataset_root: Optional[str] = None
    split_file: Optional[str] = None
    side: int = 32
    synthetic: SyntheticSource = field(default_factory=SyntheticSource)
    train_seed: int = 0
    num_episodes: int = 600
    master_seed: int = 0
    out_dir: str = "results"
    checkpoint: Optional[str] = None
    workers: int = 1
    trace: bool = False
    embeddings: bool = False
    embedding_episodes: int = 1
    progress: bool = False

    def __post_init__(self):
        if self.num_episodes < 1:
            raise UsageError(f"bench.episodes must be >= 1, got {self.num_episodes}")
        if self.workers < 1 or self.embedding_episodes < 0:
            raise UsageError(f"bench.workers must be >= 1 and bench.embedding_episodes >= 0, "
                             f"got {self.workers} and {self.embedding_episodes}")
        self.variants = tuple(Variant.parse(v) for v in self.variants)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "backbone.ckpt"

    @property
    def image_side(self) -> int:
        return self.side if self.dataset_root else self.synthetic.side


@dataclass
class Summary:
    variant: str
    mean_acc: float
    ci95: float
    num_episodes: int
    accuracies: np.ndarray
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    seed: int = 0

    def row(self) -> dict:
        return {"variant": self.variant, "n": self.episode.n, "k": self.episode.k, "t": self.episode.t,
                "u": self.episode.u, "episodes": self.num_episodes, "mean_acc": self.mean_acc,
                "ci95": self.ci95, "seed": self.seed}


@dataclass
class ProtocolResult:
    summaries: Dict[str, Summary]
    accuracies: Dict[str, np.ndarray]
    losses: Dict[str, np.ndarray]
    traces: List[dict] = field(default_factory=list)
    embeddings: Optional[pd.DataFrame] = None


def ci95(accuracies: Sequence[float]) -> float:
    """1.96 * s / sqrt(N) with the sample standard deviation s"""
    values = np.asarray(accuracies, dtype=np.float64)
    if len(values) < 2:
        raise UsageError(f"a confidence interval needs >= 2 values, got {len(values)}")
    return float(1.96 * scipy.stats.sem(values, ddof=1))


def summarize(variant: str, accuracies: np.ndarray, episode: EpisodeSpec, seed: int) -> Summary:
    interval = ci95(accuracies) * 100 if len(accuracies) >= 2 else float("nan")
    return Summary(variant=variant, mean_acc=float(np.mean(accuracies) * 100), ci95=interval,
                   num_episodes=len(accuracies), accuracies=np.asarray(accuracies), episode=episode, seed=seed)


def load_datasets(config: RunConfig) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    if config.dataset_root:
        if not config.split_file:
            raise UsageError("dataset.root needs dataset.split_file")
        return load_dataset(config.dataset_root, config.split_file, side=config.side)
    s = config.synthetic
    return make_synthetic_splits(s.classes, s.per_class, s.side, s.seed, s.test_classes, s.val_classes)


def train_for_run(config: RunConfig, train: LabeledDataset) -> ModelState:
    return train_backbone(train, config.train, np.random.default_rng(config.train_seed))


def _feature_frame(features: np.ndarray, **columns) -> pd.DataFrame:
    frame = pd.DataFrame(features, columns=[f"f{i}" for i in range(features.shape[1])])
    for position, name in enumerate(EMBEDDING_COLUMNS):
        frame.insert(position, name, columns[name])
    return frame


def episode_embeddings(index: int, episode: Episode, features: EpisodeFeatures,
                       results: Dict[str, FinetuneResult]) -> pd.DataFrame:
    """Support and query features of one episode plus every synthesized support set of every variant"""
    classes = np.asarray(episode.class_map)
    support_labels = classes[episode.support_labels]
    frames = [
        _feature_frame(features.support, episode_index=index, variant="", epoch=0, role="support",
                       id=episode.support_ids, label=support_labels, source_id=-1),
        _feature_frame(features.query, episode_index=index, variant="", epoch=0, role="query",
                       id=episode.query_ids, label=classes[episode.query_labels], source_id=-1),
    ]
    for name, result in results.items():
        for record in result.synthesized:
            frames.append(_feature_frame(record.features, episode_index=index, variant=name, epoch=record.epoch,
                                         role="synthesized", id=episode.support_ids, label=support_labels,
                                         source_id=record.source_ids))
    return pd.concat(frames, ignore_index=True)


class EpisodeRunner:
    """Fine-tunes and scores every configured variant on one paired episode"""

    def __init__(self, config: RunConfig, model: ModelState, test: LabeledDataset):
        self.config = config
        self.model = model
        self.test = test
        self.checksum = model.theta.checksum()

    def __call__(self, index: int) -> Tuple[int, Dict[str, Tuple[float, FinetuneResult]], Optional[pd.DataFrame]]:
        config = self.config
        rng = np.random.default_rng([config.master_seed, index])
        episode = sample_episode(self.test, config.episode, rng)
        features = embed_episode(self.model, episode)
        finetune_seed = int(rng.integers(0, 2 ** 63 - 1))
        capture = config.embeddings and index < config.embedding_episodes
        outcome = {}
        for variant in config.variants:
            ft_config = replace(config.finetune, variant=variant, trace=config.trace, capture=capture)
            result = finetune(self.model, episode, ft_config, np.random.default_rng(finetune_seed),
                              features=features)
            outcome[variant.value] = (evaluate_episode(self.model, result.head, episode, features), result)
        if self.model.theta.checksum() != self.checksum:
            raise TrainingError(f"backbone parameters changed during fine-tuning of episode {index}")
        frame = episode_embeddings(index, episode, features, {k: r for k, (_, r) in outcome.items()}) \
            if capture else None
        return index, outcome, frame


# set once per worker process by _init_worker
_worker_runner: Optional[EpisodeRunner] = None


def _init_worker(runner: EpisodeRunner) -> None:
    global _worker_runner
    freeze_backbone(runner.model)
    _worker_runner = runner


def _run_in_worker(index: int):
    return _worker_runner(index)


def run_protocol(config: RunConfig, model: ModelState, test: LabeledDataset) -> ProtocolResult:
    """
    Fine-tune and score every variant on num_episodes paired episodes.

    With workers > 1 the episodes are spread over that many processes, each
    holding its own copy of the frozen backbone and the test split.
    """
    if model is None:
        raise UsageError("run_protocol needs a trained backbone")
    freeze_backbone(model)
    runner = EpisodeRunner(config, model, test)

    indices = range(config.num_episodes)
    if config.workers > 1:
        chunksize = max(1, config.num_episodes // (config.workers * 8))
        with ProcessPoolExecutor(max_workers=config.workers, initializer=_init_worker,
                                 initargs=(runner,)) as pool:
            results = list(tqdm(pool.map(_run_in_worker, indices, chunksize=chunksize),
                                total=config.num_episodes, desc="episodes", disable=not config.progress))
    else:
        results = [runner(i) for i in tqdm(indices, desc="episodes", disable=not config.progress)]
    if model.theta.checksum() != runner.checksum:
        raise TrainingError("backbone parameters changed during the protocol")

    by_index = {index: outcome for index, outcome, _ in results}
    frames = [frame for _, _, frame in results if frame is not None]
    names = [variant.value for variant in config.variants]
    accuracies = {name: np.array([by_index[i][name][0] for i in indices]) for name in names}
    losses = {name: np.array([by_index[i][name][1].losses for i in indices]) for name in names}
    traces = [dict(episode_index=i, variant=name, **record)
              for i in indices for name in names for record in by_index[i][name][1].trace]
    summaries = {name: summarize(name, accuracies[name], config.episode, config.master_seed) for name in names}
    for summary in summaries.values():
        logger.info("%s: %.2f +- %.2f over %d episodes", summary.variant, summary.mean_acc, summary.ci95,
                    summary.num_episodes)
    return ProtocolResult(summaries=summaries, accuracies=accuracies, losses=losses, traces=traces,
                          embeddings=pd.concat(frames, ignore_index=True) if frames else None)


def ablation_grid(train_blocks: Sequence[int], ft_blocks: Sequence[int], config: RunConfig,
                  train: LabeledDataset, test: LabeledDataset) -> Dict[Tuple[int, int], Summary]:
    """One backbone per training block cap, each scored with CLR at every fine-tune block cap"""
    for stage, method in (("training", config.train.method), ("fine-tune", config.finetune.method)):
        if not isinstance(method, (BlockAug, BlockDef)):
            raise ConfigurationError(f"the block-count grid needs blockaug or blockdef, but the {stage} operator "
                                     f"is {type(method).__name__}")
    grid = {}
    for train_cap in train_blocks:
        train_config = replace(config.train, method=with_max_blocks(config.train.method, train_cap))
        model = train_backbone(train, train_config, np.random.default_rng(config.train_seed))
        for ft_cap in ft_blocks:
            run = replace(config, variants=(Variant.CLR,),
                          finetune=replace(config.finetune, method=with_max_blocks(config.finetune.method, ft_cap)))
            grid[(train_cap, ft_cap)] = run_protocol(run, model, test).summaries[Variant.CLR.value]
            logger.info("grid train=%d finetune=%d: %.2f", train_cap, ft_cap, grid[(train_cap, ft_cap)].mean_acc)
    return grid


def compare_methods(methods: Sequence[str], config: RunConfig, model: ModelState,
                    test: LabeledDataset) -> Dict[str, Summary]:
    """
    CLR with each replacement operator on the same paired episodes.

    Operators are built from config.replacement, so the grid, the random
    erasing ranges, the deformation mix and the fine-tune block cap all follow
    the run's replace.* settings.
    """
    summaries = {}
    for name in methods:
        method = config.replacement.finetune_method(name)
        run = replace(config, variants=(Variant.CLR,), finetune=replace(config.finetune, method=method))
        summary = run_protocol(run, model, test).summaries[Variant.CLR.value]
        summaries[f"CLR_{name.lower()}"] = replace(summary, variant=f"CLR_{name.lower()}")
    return summaries


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _ensure_dir(out_dir) -> Path:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"could not create output directory '{out_dir}': {e}") from e
    return out_dir


def format_table(summaries: Sequence[Summary]) -> str:
    rows = [("Method", "Setting", "Accuracy (%)")]
    for s in summaries:
        rows.append((s.variant, f"{s.episode.n}-way {s.episode.k}-shot", f"{s.mean_acc:.2f} ± {s.ci95:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = [" | ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * width for width in widths))
    return "\n".join(lines) + "\n"


def write_report(result: ProtocolResult, out_dir) -> List[Path]:
    """summary.csv, episodes.csv, summary.txt and, when traced, trace.jsonl"""
    out_dir = _ensure_dir(out_dir)
    summaries = list(result.summaries.values())
    paths = [out_dir / "summary.csv", out_dir / "episodes.csv", out_dir / "summary.txt"]
    episodes = pd.DataFrame([{"episode_index": i, "variant": name, "accuracy": float(acc)}
                             for name, values in result.accuracies.items() for i, acc in enumerate(values)],
                            columns=["episode_index", "variant", "accuracy"])
    try:
        pd.DataFrame([s.row() for s in summaries], columns=SUMMARY_COLUMNS).to_csv(paths[0], index=False)
        episodes.sort_values(["episode_index", "variant"], kind="stable").to_csv(paths[1], index=False)
        paths[2].write_text(format_table(summaries), encoding="utf-8")
        if result.traces:
            paths.append(out_dir / "trace.jsonl")
            with open(paths[-1], "w", encoding="utf-8") as f:
                for record in result.traces:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise ReportError(f"could not write report to '{out_dir}': {e}") from e
    return paths


def read_summary(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise ReportError(f"could not read summary '{path}': {e}") from e


def write_grid_report(grid: Dict[Tuple[int, int], Summary], out_dir) -> List[Path]:
    """grid.csv plus a text matrix with one row per training block cap"""
    out_dir = _ensure_dir(out_dir)
    rows = [{"train_blocks": tb, "finetune_blocks": fb, "mean_acc": s.mean_acc, "ci95": s.ci95,
             "episodes": s.num_episodes} for (tb, fb), s in sorted(grid.items())]
    frame = pd.DataFrame(rows, columns=["train_blocks", "finetune_blocks", "mean_acc", "ci95", "episodes"])
    matrix = frame.pivot(index="train_blocks", columns="finetune_blocks", values="mean_acc") if rows else frame
    text = "mean accuracy (%), rows: max train blocks, columns: max fine-tune blocks\n"
    text += matrix.to_string(float_format=lambda v: f"{v:.2f}") + "\n"
    paths = [out_dir / "grid.csv", out_dir / "grid.txt"]
    try:
        frame.to_csv(paths[0], index=False)
        paths[1].write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"could not write grid report to '{out_dir}': {e}") from e
    return paths


def dump_embeddings(model: ModelState, dataset: LabeledDataset, path,
                    episodes: Optional[pd.DataFrame] = None) -> Path:
    """
    Feature vectors for external visualization, one row each with
    EMBEDDING_COLUMNS in front of f0..f(d-1).

    Every sample of dataset comes first (role = the dataset role, episode_index
    -1), followed by the captured episode rows: support, query and the
    synthesized support of every epoch, labeled with global class ids.
    """
    features = embed(model, dataset.images)
    frame = _feature_frame(features, episode_index=-1, variant="", epoch=0, role=dataset.role, id=dataset.ids,
                           label=dataset.labels, source_id=-1)
    if episodes is not None:
        frame = pd.concat([frame, episodes], ignore_index=True)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise ReportError(f"could not write embeddings to '{path}': {e}") from e
    return path
