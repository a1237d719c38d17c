"""Two-stage training: consistency-regularised source pre-training, then
target-only adaptation with an EMA mean teacher.

Stage I consumes only the source and unlabeled-target pools.  Stage II
clones the stage-I model into a teacher and a student, trains the student on
anchor supervision plus soft distillation from the teacher's weak-view
predictions (optionally re-applying the gated consistency term), and updates
the teacher as an EMA of the student's previous parameters - the teacher
never receives gradients.  Source samples are never touched in stage II.

All per-iteration randomness is keyed by (seed, purpose, iteration), and
batch streams carry an explicit (pass, position) state, so a checkpointed
run resumes on exactly the trajectory of an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugPolicy, augment_batch, default_policy
from .data import (
    Benchmark,
    BatchStream,
    SamplePool,
    ShiftSpec,
    SsdaSplit,
    generate_shifted_domains,
    load_benchmark_files,
    sample_anchors,
)
from .losses import (
    HyperParams,
    composite_gradients,
    consistency_unlabeled,
    distillation,
    ssl_composite,
    supervised_source,
    supervised_target,
    uda_composite,
)
from .metrics import ExperimentReport, accuracy, per_class_accuracy, pseudo_label_report
from .model import (
    Arch,
    CheckpointError,
    Gradients,
    ModelParams,
    TrainingFault,
    decode_params,
    ema_update,
    encode_params,
    forward_batch,
    init_params,
    sgd_step,
    sidecar_path,
)

CHECKPOINT_MAGIC = b"SSDACKP1"
CHECKPOINT_VERSION = 1

STAGE_UDA = "UDA"
STAGE_SSL = "SSL"


def default_dataset_dict() -> dict:
    return {
        "kind": "synthetic",
        "num_classes": 4,
        "input_dim": 16,
        "samples_per_class_source": 500,
        "samples_per_class_target": 500,
        "shift_kind": "rotation",
        "shift_magnitude": 0.9,
        "cluster_spread": 0.6,
    }


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 32)
    lr: float = 0.05
    momentum: float = 0.0
    iterations_stage1: int = 2000
    iterations_stage2: int = 1000
    batch_source: int = 32
    batch_unlabeled: int = 32
    batch_anchor: int = 32
    k_shot: int = 3
    eval_every: int = 100
    eval_model: str = "student"
    stage2_consistency_on: bool = True
    stage1_use_anchors: bool = False
    stage1_augment_source: bool = True
    checkpoint_dir: str | None = None
    preset: str = "custom"
    hyper: HyperParams = field(default_factory=HyperParams)
    policy: AugPolicy = field(default_factory=default_policy)
    dataset: dict = field(default_factory=default_dataset_dict)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))


def config_to_dict(config: TrainConfig) -> dict:
    d = {
        "seed": config.seed,
        "hidden_dims": list(config.hidden_dims),
        "lr": config.lr,
        "momentum": config.momentum,
        "iterations_stage1": config.iterations_stage1,
        "iterations_stage2": config.iterations_stage2,
        "batch_source": config.batch_source,
        "batch_unlabeled": config.batch_unlabeled,
        "batch_anchor": config.batch_anchor,
        "k_shot": config.k_shot,
        "eval_every": config.eval_every,
        "eval_model": config.eval_model,
        "stage2_consistency_on": config.stage2_consistency_on,
        "stage1_use_anchors": config.stage1_use_anchors,
        "stage1_augment_source": config.stage1_augment_source,
        "checkpoint_dir": config.checkpoint_dir,
        "preset": config.preset,
        "hyper": {
            "alpha": config.hyper.alpha,
            "gamma": config.hyper.gamma,
            "eta": config.hyper.eta,
            "mu": config.hyper.mu,
            "sigma": config.hyper.sigma,
            "stage2_consistency_weight": config.hyper.stage2_consistency_weight,
        },
        "policy": {
            "weak_ops": [{"kind": op.kind, "magnitude_range": list(op.magnitude_range)}
                         for op in config.policy.weak_ops],
            "strong_ops": [{"kind": op.kind, "magnitude_range": list(op.magnitude_range)}
                           for op in config.policy.strong_ops],
            "strong_ops_per_draw": config.policy.strong_ops_per_draw,
        },
        "dataset": json.loads(json.dumps(config.dataset)),
    }
    return d


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# ablation presets


PRESETS: dict[str, dict] = {
    # stage I only (no adaptation stage)
    "source-only": {"alpha": 0.0, "stage1_augment_source": False, "iterations_stage2": 0},
    "uda": {"iterations_stage2": 0},
    # stage II variants on top of the full stage I
    "mt": {"gamma": 0.0, "stage2_consistency_on": False},
    "fixmatch": {"gamma": 0.0, "eta": 0.0, "stage2_consistency_on": True},
    "anchors": {"eta": 0.0, "stage2_consistency_on": False},
    "anchors-fixmatch": {"eta": 0.0, "stage2_consistency_on": True},
    "anchors-mt": {"stage2_consistency_on": False},
    "clmt": {"stage2_consistency_on": True},
}


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    """Return a config with the named frozen bundle of weight settings applied."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    spec = dict(PRESETS[preset])
    hyper_updates = {k: spec.pop(k) for k in ("alpha", "gamma", "eta") if k in spec}
    hyper = dataclasses.replace(config.hyper, **hyper_updates) if hyper_updates else config.hyper
    return dataclasses.replace(config, preset=preset, hyper=hyper, **spec)


# ---------------------------------------------------------------------------
# metric history


@dataclass
class MetricsRow:
    iteration: int
    stage: str
    loss_s: float | None = None
    loss_u: float | None = None
    loss_t: float | None = None
    loss_d: float | None = None
    pass_rate: float | None = None
    target_acc: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "MetricsRow":
        return MetricsRow(**d)


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    cols = ["iteration", "stage", "loss_s", "loss_u", "loss_t", "loss_d", "pass_rate", "target_acc"]
    lines = [",".join(cols)]
    for row in rows:
        d = row.to_dict()
        lines.append(",".join("" if d[c] is None else
                              (d[c] if isinstance(d[c], str) else repr(d[c]) if isinstance(d[c], float) else str(d[c]))
                              for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# train state and checkpoints


@dataclass
class TrainState:
    stage: str
    iteration: int
    student: ModelParams
    teacher: ModelParams | None
    velocity: Gradients | None
    stream_states: dict[str, tuple[int, int]]
    history: list[MetricsRow]
    config_hash: str
    seed: int


def save_checkpoint(state: TrainState, path) -> None:
    """Binary parameter blocks plus a JSON sidecar holding loop state."""
    path = Path(path)
    blocks: list[tuple[str, bytes]] = [("student", encode_params(state.student))]
    if state.teacher is not None:
        blocks.append(("teacher", encode_params(state.teacher)))
    if state.velocity is not None:
        blocks.append(("velocity", encode_params(ModelParams(state.student.arch, state.velocity.layers))))
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blocks))]
    for name, payload in blocks:
        encoded = name.encode("ascii")
        out.append(struct.pack("<B", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    path.write_bytes(b"".join(out))
    meta = {
        "format": "ssda-checkpoint",
        "schema_version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "iteration": state.iteration,
        "config_hash": state.config_hash,
        "seed": state.seed,
        "stream_states": {k: list(v) for k, v in state.stream_states.items()},
        "history": [row.to_dict() for row in state.history],
        "blocks": [name for name, _ in blocks],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < len(CHECKPOINT_MAGIC) or buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    n_blocks = struct.unpack("<I", take(4))[0]
    blocks: dict[str, ModelParams] = {}
    for _ in range(n_blocks):
        name_len = struct.unpack("<B", take(1))[0]
        name = take(name_len).decode("ascii")
        payload_len = struct.unpack("<Q", take(8))[0]
        payload = take(payload_len)
        params, used = decode_params(payload)
        if used != len(payload):
            raise CheckpointError(f"{path}: block {name!r} has trailing bytes")
        params.validate()
        blocks[name] = params
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    if "student" not in blocks:
        raise CheckpointError(f"{path}: checkpoint is missing the student block")

    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"{path}: metadata sidecar {side.name} is missing")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{side}: corrupt metadata ({exc})") from exc
    if meta.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{side}: unsupported metadata version {meta.get('schema_version')}")

    velocity = None
    if "velocity" in blocks:
        velocity = Gradients(blocks["velocity"].layers)
    return TrainState(
        stage=meta["stage"],
        iteration=int(meta["iteration"]),
        student=blocks["student"],
        teacher=blocks.get("teacher"),
        velocity=velocity,
        stream_states={k: (int(v[0]), int(v[1])) for k, v in meta["stream_states"].items()},
        history=[MetricsRow.from_dict(d) for d in meta["history"]],
        config_hash=meta["config_hash"],
        seed=int(meta["seed"]),
    )


# ---------------------------------------------------------------------------
# training loops


def _stream_seed(seed: int, tag: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}/{tag}".encode("utf-8")).digest()[:8], "little")


def _descend(params: ModelParams, grads: Gradients, config: TrainConfig,
             velocity: Gradients | None) -> tuple[ModelParams, Gradients | None]:
    if config.momentum > 0.0:
        if velocity is None:
            velocity = Gradients.zeros(params)
        velocity = velocity.scaled(config.momentum)
        velocity.axpy(grads, 1.0)
        return sgd_step(params, velocity, config.lr), velocity
    return sgd_step(params, grads, config.lr), None


def _arch_for(split: SsdaSplit, config: TrainConfig) -> Arch:
    if len(split.source) == 0:
        raise ValueError("split has no source samples")
    input_dim = int(split.source.samples[0].features.shape[0])
    return Arch(input_dim, config.hidden_dims, split.num_classes)


def _labels_array(batch) -> np.ndarray:
    return np.array([s.label for s in batch], dtype=np.int64)


def _maybe_record(history, config, eval_hook, it, stage, **losses) -> None:
    if config.eval_every > 0 and it % config.eval_every == 0:
        acc = eval_hook(it) if eval_hook is not None else None
        history.append(MetricsRow(iteration=it, stage=stage, target_acc=acc, **losses))


def train_stage1(
    split: SsdaSplit,
    config: TrainConfig,
    eval_hook=None,
    resume: TrainState | None = None,
) -> tuple[ModelParams, list[MetricsRow]]:
    """Source + unlabeled-target pre-training; anchors are untouched unless
    the explicit stage1_use_anchors baseline knob merges them into the
    supervised pool.

    ``eval_hook(params, iteration)`` may return a target accuracy to record.
    """
    split.validate()
    arch = _arch_for(split, config)
    hyper = config.hyper
    cfg_hash = config_hash(config)

    if config.stage1_use_anchors:
        supervised_pool = SamplePool(
            list(split.source.samples) + list(split.target_labeled.samples), "source+anchors"
        )
        if len(supervised_pool) == 0:
            raise ValueError("no supervised samples available")
    else:
        supervised_pool = split.source

    if resume is not None:
        if resume.stage != STAGE_UDA:
            raise ValueError(f"cannot resume stage I from a {resume.stage} checkpoint")
        if resume.config_hash != cfg_hash:
            raise CheckpointError("checkpoint was produced by a different configuration")
        params = resume.student.copy()
        velocity = resume.velocity
        start = resume.iteration
        history = list(resume.history)
        src_state = resume.stream_states.get("source")
        unl_state = resume.stream_states.get("unlabeled")
    else:
        params = init_params(arch, config.seed)
        velocity = None
        start = 0
        history = []
        src_state = unl_state = None

    src_stream = BatchStream(supervised_pool, config.batch_source,
                             _stream_seed(config.seed, "s1-source"), state=src_state)
    unl_stream = None
    if hyper.alpha != 0.0:
        unl_stream = BatchStream(split.target_unlabeled, config.batch_unlabeled,
                                 _stream_seed(config.seed, "s1-unlabeled"), state=unl_state)

    for it in range(start + 1, config.iterations_stage1 + 1):
        batch = src_stream.next_batch()
        if config.stage1_augment_source:
            X = augment_batch(batch, config.policy, "strong", (config.seed, "s1-src-aug", it))
        else:
            X = np.stack([s.features for s in batch])
        loss_s = supervised_source(params, X, _labels_array(batch))

        loss_u = None
        if unl_stream is not None:
            u_batch = unl_stream.next_batch()
            Xw, Xs = augment_batch(u_batch, config.policy, "both", (config.seed, "s1-unl-aug", it))
            loss_u = consistency_unlabeled(params, Xw, Xs, hyper.mu)

        composite = uda_composite(loss_s, loss_u, hyper.alpha)
        if not np.isfinite(composite.scalar):
            raise TrainingFault(f"non-finite stage-I loss at iteration {it}", iteration=it)
        try:
            grads = composite_gradients(params, composite)
            params, velocity = _descend(params, grads, config, velocity)
        except TrainingFault as fault:
            fault.iteration = it
            raise

        hook = (lambda it, p=params: eval_hook(p, it)) if eval_hook is not None else None
        _maybe_record(
            history, config, hook, it, STAGE_UDA,
            loss_s=loss_s.scalar,
            loss_u=None if loss_u is None else loss_u.scalar,
            pass_rate=None if loss_u is None else float(loss_u.per_sample_mask.mean()),
        )

    if config.checkpoint_dir is not None:
        state = TrainState(
            stage=STAGE_UDA, iteration=config.iterations_stage1, student=params,
            teacher=None, velocity=velocity,
            stream_states={"source": src_stream.state,
                           **({"unlabeled": unl_stream.state} if unl_stream else {})},
            history=history, config_hash=cfg_hash, seed=config.seed,
        )
        out_dir = Path(config.checkpoint_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out_dir / "stage1.ckpt")
    return params, history


def train_stage2(
    uda_model: ModelParams,
    split: SsdaSplit,
    config: TrainConfig,
    eval_hook=None,
    resume: TrainState | None = None,
) -> tuple[ModelParams, ModelParams, list[MetricsRow]]:
    """Target-only adaptation: the stage-I model is cloned into teacher and
    student; the student trains on anchors + distillation (+ optional
    consistency), the teacher follows by EMA of the student's previous
    parameters.  Source samples are never drawn.
    """
    split.validate()
    if len(split.target_labeled) == 0:
        raise ValueError("stage II requires a non-empty anchor pool")
    arch = _arch_for(split, config)
    if uda_model.arch != arch:
        raise ValueError(f"stage-I model arch {uda_model.arch} does not match config arch {arch}")
    hyper = config.hyper
    cfg_hash = config_hash(config)

    if resume is not None:
        if resume.stage != STAGE_SSL:
            raise ValueError(f"cannot resume stage II from a {resume.stage} checkpoint")
        if resume.config_hash != cfg_hash:
            raise CheckpointError("checkpoint was produced by a different configuration")
        if resume.teacher is None:
            raise CheckpointError("stage-II checkpoint is missing the teacher block")
        student = resume.student.copy()
        teacher = resume.teacher.copy()
        velocity = resume.velocity
        start = resume.iteration
        history = list(resume.history)
        anc_state = resume.stream_states.get("anchor")
        unl_state = resume.stream_states.get("unlabeled")
    else:
        student = uda_model.copy()
        teacher = uda_model.copy()
        velocity = None
        start = 0
        history = []
        anc_state = unl_state = None

    anchor_stream = BatchStream(split.target_labeled, config.batch_anchor,
                                _stream_seed(config.seed, "s2-anchor"), state=anc_state)
    unl_stream = BatchStream(split.target_unlabeled, config.batch_unlabeled,
                             _stream_seed(config.seed, "s2-unlabeled"), state=unl_state)
    lambda_u = hyper.stage2_consistency_weight if config.stage2_consistency_on else 0.0

    for it in range(start + 1, config.iterations_stage2 + 1):
        a_batch = anchor_stream.next_batch()
        Xa = augment_batch(a_batch, config.policy, "strong", (config.seed, "s2-anchor-aug", it))
        loss_t = supervised_target(student, Xa, _labels_array(a_batch))

        u_batch = unl_stream.next_batch()
        Xw, Xs = augment_batch(u_batch, config.policy, "both", (config.seed, "s2-unl-aug", it))
        teacher_probs = forward_batch(teacher, Xw).probs  # constants: no gradient path
        student_cache = forward_batch(student, Xs)
        loss_d = distillation(teacher_probs, student_cache.logits)
        loss_d.cache = student_cache

        loss_u = None
        if config.stage2_consistency_on:
            loss_u = consistency_unlabeled(student, Xw, Xs, hyper.mu)

        composite = ssl_composite(loss_t, loss_d, loss_u, hyper.gamma, hyper.eta, lambda_u)
        if not np.isfinite(composite.scalar):
            raise TrainingFault(f"non-finite stage-II loss at iteration {it}", iteration=it)
        try:
            grads = composite_gradients(student, composite)
            previous_student = student
            student, velocity = _descend(student, grads, config, velocity)
        except TrainingFault as fault:
            fault.iteration = it
            raise
        teacher = ema_update(teacher, previous_student, hyper.sigma)

        eval_params = teacher if config.eval_model == "teacher" else student
        hook = (lambda it, p=eval_params: eval_hook(p, it)) if eval_hook is not None else None
        _maybe_record(
            history, config, hook, it, STAGE_SSL,
            loss_t=loss_t.scalar,
            loss_d=loss_d.scalar,
            loss_u=None if loss_u is None else loss_u.scalar,
            pass_rate=None if loss_u is None else float(loss_u.per_sample_mask.mean()),
        )

    if config.checkpoint_dir is not None:
        state = TrainState(
            stage=STAGE_SSL, iteration=config.iterations_stage2, student=student,
            teacher=teacher, velocity=velocity,
            stream_states={"anchor": anchor_stream.state, "unlabeled": unl_stream.state},
            history=history, config_hash=cfg_hash, seed=config.seed,
        )
        out_dir = Path(config.checkpoint_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out_dir / "stage2.ckpt")
    return student, teacher, history


# ---------------------------------------------------------------------------
# end-to-end experiment


def build_benchmark_from_config(config: TrainConfig) -> Benchmark:
    ds = dict(config.dataset)
    kind = ds.pop("kind", "synthetic")
    if kind == "synthetic":
        seed = ds.pop("seed", config.seed)
        spec = ShiftSpec(seed=seed, **ds)
        return generate_shifted_domains(spec)
    if kind == "files":
        return load_benchmark_files(ds["source"], ds["target"], ds["manifest"])
    raise ValueError(f"unknown dataset kind {kind!r}")


def run_experiment(config: TrainConfig) -> ExperimentReport:
    """Build the benchmark, run both stages, evaluate, and assemble a report."""
    started = time.perf_counter()
    benchmark = build_benchmark_from_config(config)
    benchmark = sample_anchors(benchmark, config.k_shot, config.seed)
    split = benchmark.split
    heldout = benchmark.heldout
    mu = config.hyper.mu
    pseudo_series: list[dict] = []

    def make_hook(stage: str):
        def hook(params: ModelParams, iteration: int) -> float:
            stats = pseudo_label_report(params, split.target_unlabeled.samples,
                                        benchmark.eval_labels, mu)
            pseudo_series.append({"iteration": iteration, "stage": stage, **stats.to_dict()})
            return accuracy(params, heldout)

        return hook

    stage1_params, history1 = train_stage1(split, config, eval_hook=make_hook(STAGE_UDA))
    stage1_acc = accuracy(stage1_params, heldout)
    stage1_stats = pseudo_label_report(stage1_params, split.target_unlabeled.samples,
                                       benchmark.eval_labels, mu)

    student = teacher = None
    history2: list[MetricsRow] = []
    stage2_stats = None
    if config.iterations_stage2 > 0:
        student, teacher, history2 = train_stage2(
            stage1_params, split, config, eval_hook=make_hook(STAGE_SSL)
        )
        stage2_stats = pseudo_label_report(student, split.target_unlabeled.samples,
                                           benchmark.eval_labels, mu)

    if student is None:
        final_params = stage1_params
    else:
        final_params = teacher if config.eval_model == "teacher" else student

    report = ExperimentReport(
        preset=config.preset,
        seed=config.seed,
        k_shot=config.k_shot,
        config=config_to_dict(config),
        config_hash=config_hash(config),
        benchmark_manifest=benchmark.manifest,
        eval_model=config.eval_model,
        stage1_target_accuracy=stage1_acc,
        stage2_student_target_accuracy=None if student is None else accuracy(student, heldout),
        stage2_teacher_target_accuracy=None if teacher is None else accuracy(teacher, heldout),
        final_target_accuracy=accuracy(final_params, heldout),
        per_class_accuracy=per_class_accuracy(final_params, heldout, split.num_classes),
        stage1_pseudo_stats=stage1_stats.to_dict(),
        stage2_pseudo_stats=None if stage2_stats is None else stage2_stats.to_dict(),
        pseudo_label_series=pseudo_series,
        history=[row.to_dict() for row in history1 + history2],
        wall_clock_seconds=time.perf_counter() - started,
    )
    return report
