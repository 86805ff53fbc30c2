"""End-to-end federated experiment orchestration.

One experiment: build a seeded world (partition, corrupt, init), then run T
rounds of broadcast / local training / aggregation. Gradient norms are
collected the first time each client participates; once every client has
been scored the clean/noisy clustering fires exactly once and its labels
stay frozen for the rest of the run.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .aggregation import AggregationPlan, ClientUpdate, Strategy, aggregate
from .data import (
    ClientDataset,
    CorruptionSpec,
    Dataset,
    Label,
    corrupt_client,
    load_idx,
    partition_dirichlet,
    partition_iid,
    synth_blobs,
)
from .detection import (
    ClientScore,
    client_score,
    detection_accuracy,
    kmeans_1d,
    label_clusters,
    write_detection_jsonl,
    write_norms_histogram,
)
from .errors import DegenerateScoresError
from .model import (
    ModelLayout,
    ModelParams,
    NormOrder,
    OptConfig,
    dataset_loss,
    evaluate,
    init_params,
    local_train,
)

# Sub-seed stream tags; every RNG in an experiment is derived from
# (experiment seed, tag, ...) so streams never interfere.
_SEED_SYNTH_TRAIN = 1
_SEED_SYNTH_TEST = 2
_SEED_SUBSET_TRAIN = 3
_SEED_SUBSET_TEST = 4
_SEED_PARTITION = 5
_SEED_NOISY_PICK = 6
_SEED_INIT = 7
_SEED_SAMPLING = 8
_SEED_TRAIN = 9
_SEED_CORRUPT = 10


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit sub-seed from a tuple of integers."""
    ss = np.random.SeedSequence(entropy=tuple(int(p) for p in parts))
    return int(ss.generate_state(1, np.uint64)[0])


class PartitionScheme(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


class DetectionStatus(str, Enum):
    PENDING = "pending"
    DONE = "done"
    ABSTAINED = "abstained"


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" | "idx"
    synth_classes: int = 4
    synth_train_per_class: int = 500
    synth_test_per_class: int = 100
    synth_side: int = 8
    synth_sigma: float = 0.1
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    idx_train_limit: int = 0  # 0 = use everything
    idx_test_limit: int = 0
    partition: PartitionScheme = PartitionScheme.IID
    dirichlet_alpha: float = 0.5


@dataclass
class FederationConfig:
    num_clients: int = 20
    noisy_clients: int = 15
    rounds: int = 30
    participation: float = 1.0
    first_round_participation: float = 1.0
    strategy: Strategy = Strategy.FEDAVG
    ns_enabled: bool = True
    alpha: float = 2.0
    beta: float = 0.3
    trim_ratio: float = 0.2


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    corruption: CorruptionSpec = field(
        default_factory=lambda: CorruptionSpec(kinds=(), noise_level=0.0)
    )
    federation: FederationConfig = field(default_factory=FederationConfig)
    hidden_dims: tuple[int, ...] = (128,)
    opt: OptConfig = field(default_factory=OptConfig)
    norm_order: NormOrder = NormOrder.L1
    norm_batch: int = 32
    seed: int = 0

    def validate(self) -> None:
        fed = self.federation
        if fed.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 <= fed.noisy_clients <= fed.num_clients:
            raise ValueError("noisy_clients must be in [0, num_clients]")
        if fed.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for name, frac in (
            ("participation", fed.participation),
            ("first_round_participation", fed.first_round_participation),
        ):
            if not 0.0 < frac <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")
        if _round_half_up(fed.participation * fed.num_clients) < 1:
            raise ValueError("participation * num_clients rounds to zero clients")
        if self.norm_batch < 1:
            raise ValueError("norm_batch must be >= 1")
        if self.data.source not in ("synth", "idx"):
            raise ValueError(f"unknown data source {self.data.source!r}")
        if self.data.source == "idx":
            missing = [
                name
                for name in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels")
                if not getattr(self.data, name)
            ]
            if missing:
                raise ValueError(f"idx source requires {', '.join(missing)}")
        if self.data.partition == PartitionScheme.DIRICHLET and self.data.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if fed.noisy_clients > 0 and self.corruption.noise_level > 0 and not self.corruption.kinds:
            raise ValueError("corruption kinds must be non-empty for a noisy world")


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    participating: list[int]
    global_loss: float
    detection: DetectionStatus


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rounds: list[RoundMetrics]
    detection_labels: dict[int, Label]
    detection_accuracy: float
    detection_status: DetectionStatus
    scores: dict[int, float]
    norm_traces: dict[int, list[float]]
    truth: dict[int, Label]
    transcript: list[dict]
    wall_seconds: float

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].test_accuracy


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _seeded_subset(d: Dataset, limit: int, seed: int) -> Dataset:
    if limit <= 0 or limit >= len(d):
        return d
    idx = np.sort(np.random.default_rng(seed).choice(len(d), size=limit, replace=False))
    return Dataset(samples=d.samples[idx], labels=d.labels[idx], num_classes=d.num_classes)


def _load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    data = cfg.data
    if data.source == "synth":
        train = synth_blobs(
            data.synth_classes,
            data.synth_train_per_class,
            data.synth_side,
            data.synth_sigma,
            derive_seed(cfg.seed, _SEED_SYNTH_TRAIN),
        )
        test = synth_blobs(
            data.synth_classes,
            data.synth_test_per_class,
            data.synth_side,
            data.synth_sigma,
            derive_seed(cfg.seed, _SEED_SYNTH_TEST),
        )
        return train, test
    train = load_idx(data.idx_train_images, data.idx_train_labels)
    test = load_idx(data.idx_test_images, data.idx_test_labels)
    num_classes = max(train.num_classes, test.num_classes)
    train = _seeded_subset(train, data.idx_train_limit, derive_seed(cfg.seed, _SEED_SUBSET_TRAIN))
    test = _seeded_subset(test, data.idx_test_limit, derive_seed(cfg.seed, _SEED_SUBSET_TEST))
    train.num_classes = test.num_classes = num_classes
    return train, test


def build_world(cfg: ExperimentConfig) -> tuple[ModelParams, list[ClientDataset], Dataset]:
    """Materialize the experiment: global init params, client shards (the
    chosen M corrupted with per-client sub-seeds), and a clean test set."""
    cfg.validate()
    train, test = _load_data(cfg)
    if cfg.data.partition == PartitionScheme.IID:
        clients = partition_iid(train, cfg.federation.num_clients, derive_seed(cfg.seed, _SEED_PARTITION))
    else:
        clients = partition_dirichlet(
            train,
            cfg.federation.num_clients,
            cfg.data.dirichlet_alpha,
            derive_seed(cfg.seed, _SEED_PARTITION),
        )
    if cfg.federation.noisy_clients > 0:
        rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_NOISY_PICK))
        noisy_ids = set(
            int(i)
            for i in rng.choice(cfg.federation.num_clients, size=cfg.federation.noisy_clients, replace=False)
        )
        clients = [
            corrupt_client(
                c,
                dataclasses.replace(cfg.corruption, seed=derive_seed(cfg.seed, _SEED_CORRUPT, c.client_id)),
            )
            if c.client_id in noisy_ids
            else c
            for c in clients
        ]
    input_dim = int(np.prod(train.samples.shape[1:]))
    layout = ModelLayout(input_dim, cfg.hidden_dims, train.num_classes)
    params = init_params(layout, derive_seed(cfg.seed, _SEED_INIT))
    return params, clients, test


def sample_round(
    cfg: ExperimentConfig, round_idx: int, undetected: set[int], rng: np.random.Generator
) -> list[int]:
    """Pick this round's participants.

    Round 0 uses max(first_round_participation, participation); later rounds
    use the participation rate, filling the quota from still-unscored
    clients first so detection can complete.
    """
    fed = cfg.federation
    if round_idx == 0:
        frac = max(fed.first_round_participation, fed.participation)
    else:
        frac = fed.participation
    quota = max(1, _round_half_up(frac * fed.num_clients))
    pending = sorted(i for i in undetected if 0 <= i < fed.num_clients)
    if pending:
        if len(pending) >= quota:
            picked = rng.choice(pending, size=quota, replace=False)
        else:
            rest = [i for i in range(fed.num_clients) if i not in undetected]
            extra = rng.choice(rest, size=quota - len(pending), replace=False)
            picked = np.concatenate([np.asarray(pending), extra])
    else:
        picked = rng.choice(fed.num_clients, size=quota, replace=False)
    return sorted(int(i) for i in picked)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the full protocol and collect per-round metrics.

    Until the clustering fires, every participant is treated as clean, which
    makes the sifted weights coincide exactly with the base ones.
    """
    start = time.perf_counter()
    global_params, clients, test = build_world(cfg)
    fed = cfg.federation
    num_clients = fed.num_clients
    truth = {c.client_id: c.truth_tag for c in clients}
    sampling_rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_SAMPLING))

    scores: dict[int, ClientScore] = {}
    norm_traces: dict[int, list[float]] = {}
    labels: dict[int, Label] | None = None
    status = DetectionStatus.PENDING
    rounds: list[RoundMetrics] = []
    transcript: list[dict] = []

    for t in range(fed.rounds):
        undetected = set(range(num_clients)) - scores.keys() if status == DetectionStatus.PENDING else set()
        participants = sample_round(cfg, t, undetected, sampling_rng)
        updates: list[ClientUpdate] = []
        traced: list[int] = []
        for cid in participants:
            collect = cfg.norm_order if status == DetectionStatus.PENDING and cid not in scores else None
            trained, trace, steps = local_train(
                global_params,
                clients[cid],
                cfg.opt,
                collect_norms=collect,
                norm_batch=cfg.norm_batch,
                seed=derive_seed(cfg.seed, _SEED_TRAIN, t, cid),
            )
            updates.append(ClientUpdate(cid, trained, len(clients[cid]), steps))
            if trace is not None:
                scores[cid] = client_score(trace)
                norm_traces[cid] = list(trace.per_batch_norms)
                traced.append(cid)
        transcript.append({"round": t, "down": list(participants), "up": list(participants), "traces": traced})

        if status == DetectionStatus.PENDING and len(scores) == num_clients:
            try:
                assignment = kmeans_1d(list(scores.values()))
                labels = label_clusters(assignment)
                status = DetectionStatus.DONE
            except DegenerateScoresError:
                labels = {cid: Label.CLEAN for cid in range(num_clients)}
                status = DetectionStatus.ABSTAINED

        agg_labels = labels if labels is not None else {cid: Label.CLEAN for cid in participants}
        plan = AggregationPlan(
            strategy=fed.strategy,
            alpha=fed.alpha,
            beta=fed.beta,
            trim_ratio=fed.trim_ratio,
            ns_enabled=fed.ns_enabled,
            labels=agg_labels,
        )
        global_params = aggregate(plan, global_params, updates)
        rounds.append(
            RoundMetrics(
                round=t,
                test_accuracy=evaluate(global_params, test),
                participating=participants,
                global_loss=dataset_loss(global_params, test, cfg.opt.temperature),
                detection=status,
            )
        )

    final_labels = labels if labels is not None else {cid: Label.CLEAN for cid in range(num_clients)}
    return ExperimentReport(
        config=cfg,
        rounds=rounds,
        detection_labels=final_labels,
        detection_accuracy=detection_accuracy(final_labels, truth),
        detection_status=status,
        scores={cid: s.score for cid, s in scores.items()},
        norm_traces=norm_traces,
        truth=truth,
        transcript=transcript,
        wall_seconds=time.perf_counter() - start,
    )


def export_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write metrics.jsonl, detection.jsonl, norms_hist.csv and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    try:
        with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
            for rm in report.rounds:
                record = {
                    "round": rm.round,
                    "test_accuracy": rm.test_accuracy,
                    "participating": rm.participating,
                    "global_loss": rm.global_loss,
                    "detection": rm.detection.value,
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
        detection_path = out / "detection.jsonl"
        write_detection_jsonl(report.scores, report.detection_labels, report.truth, detection_path)
        hist_path = out / "norms_hist.csv"
        write_norms_histogram(report.norm_traces, report.truth, hist_path)
        summary_path = out / "summary.txt"
        fed = report.config.federation
        with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
            ns = f"+NS(alpha={fed.alpha}, beta={fed.beta})" if fed.ns_enabled else "bare"
            f.write(f"strategy = {fed.strategy.value} {ns}\n")
            f.write(f"clients = {fed.num_clients} (noisy {fed.noisy_clients})\n")
            f.write(f"rounds = {fed.rounds}\n")
            f.write(f"final_test_accuracy = {report.final_accuracy:.6f}\n")
            f.write(f"final_global_loss = {report.rounds[-1].global_loss:.6f}\n")
            f.write(f"detection_status = {report.detection_status.value}\n")
            f.write(f"detection_accuracy = {report.detection_accuracy:.6f}\n")
            f.write(f"wall_seconds = {report.wall_seconds:.3f}\n")
    except OSError as exc:
        raise OSError(f"failed writing report files under {out}: {exc}") from exc
    return [metrics_path, detection_path, hist_path, summary_path]
