"""Training orchestration: config, the epoch loop, checkpoint cadence, ablation.

Every random decision is drawn from a stream derived from (seed, purpose,
epoch[, batch]) rather than from one consumed generator, so a run resumed
from a checkpoint sees exactly the batches and dropout masks the
uninterrupted run would have seen.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

from . import checkpoint, data, metrics, models, optim, tensor
from .errors import ArgumentError, ConfigError, StepError
from .metrics import EvalReport
from .tensor import Rng

LOSS_CSV_HEADER = "epoch,train_loss,val_loss,lr"
ABLATION_ORDER = ("adadelta", "rmsprop", "sgd", "adam", "adamw")
DEFAULT_SPLIT = (0.7, 0.15, 0.15)

# rng stream tags
_TAG_SPLIT = 1
_TAG_INIT = 2
_TAG_SHUFFLE = 3
_TAG_DROPOUT = 4


@dataclass(frozen=True)
class RunConfig:
    model: str = "vgg-mini"            # vgg19 | vgg-mini | mlp
    optimizer: str = "adam"
    base_lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    seed: int | None = None
    precision: str = "f32"
    data: str = "synth:train=128,val=32,test=32,hw=32"
    out_dir: str = "runs/exp"
    deterministic: bool = True
    input_hw: int = 32                 # resize target for manifest data (vgg19 forces 224)
    checkpoint_every: int = 25
    resume: str | None = None
    mlp_hidden: tuple[int, ...] = (128, 64)
    lr_decay: float = 0.9
    lr_period: int = 20
    weight_decay: float = 0.01
    split_fractions: tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if self.model not in ("vgg19", "vgg-mini", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.optimizer not in optim.ALGORITHMS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size out of range: {self.epochs}/{self.batch_size}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.deterministic and self.seed is None:
            raise ConfigError("deterministic mode requires an explicit seed")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    config: RunConfig
    records: list[EpochRecord]
    report: EvalReport
    first_batch_loss: float | None
    loss_csv_path: str
    checkpoint_path: str
    model: models.Model
    state: optim.OptimizerState

    @property
    def final_train_loss(self) -> float | None:
        return self.records[-1].train_loss if self.records else None


@dataclass(frozen=True)
class SynthSpec:
    train: int = 128
    val: int = 32
    test: int = 32
    hw: int = 32


def parse_data_source(source: str) -> SynthSpec | str:
    """'synth:key=value,...' or a manifest path."""
    if not source:
        raise ConfigError("data source must be a manifest path or a synth spec")
    if not source.startswith("synth:") and source != "synth":
        return source
    spec = SynthSpec()
    body = source[len("synth:"):] if source.startswith("synth:") else ""
    for assignment in filter(None, body.split(",")):
        if "=" not in assignment:
            raise ConfigError(f"bad synth spec entry {assignment!r} (expected key=value)")
        key, value = assignment.split("=", 1)
        if key not in ("train", "val", "test", "hw"):
            raise ConfigError(f"unknown synth spec key {key!r}")
        try:
            spec = replace(spec, **{key: int(value)})
        except ValueError as exc:
            raise ConfigError(f"synth spec value for {key!r} must be an integer") from exc
    for name in ("train", "test"):
        if getattr(spec, name) < 2:
            raise ConfigError(f"synth {name} split needs at least 2 samples")
    if spec.train % 2 or spec.val % 2 or spec.test % 2:
        raise ConfigError("synth split sizes must be even (balanced classes)")
    return spec


def _synth_split(rng: Rng, count: int, hw: int, tag: str) -> tuple[list, list, list]:
    images, labels = data.synth_generate(rng, count // 2, hw)
    ids = [f"{tag}-{lbl}-{i:05d}" for i, lbl in enumerate(labels)]
    return images, labels, ids


def resolve_data(cfg: RunConfig, rng: Rng) -> tuple[data.ArrayDataset, data.ArrayDataset | None,
                                                    data.ArrayDataset, data.NormStats, int]:
    """Materialize (train, val, test) datasets plus training-split stats and the input size."""
    source = parse_data_source(cfg.data)
    target_hw = 224 if cfg.model == "vgg19" else cfg.input_hw
    if isinstance(source, SynthSpec):
        target_hw = 224 if cfg.model == "vgg19" else source.hw
        splits = {}
        for k, (name, count) in enumerate((("train", source.train), ("val", source.val),
                                           ("test", source.test))):
            if count == 0:
                splits[name] = None
                continue
            splits[name] = _synth_split(rng.child(k), count, source.hw, name)
        stats = data.compute_norm_stats(splits["train"][0])
        out = {}
        for name, triple in splits.items():
            if triple is None:
                out[name] = None
                continue
            images, labels, ids = triple
            out[name] = data.dataset_from_images(
                images, labels, ids, stats, data.CLASS_NAMES,
                target_hw if target_hw != source.hw else None)
        return out["train"], out["val"], out["test"], stats, target_hw

    manifest = data.load_manifest(source)
    root = os.path.dirname(os.path.abspath(source))
    train_m, val_m, test_m = data.split_manifest(manifest, cfg.split_fractions, rng.child(0))
    index = manifest.class_to_index

    def materialize(m: data.DatasetManifest) -> data.ArrayDataset | None:
        if len(m) == 0:
            return None
        images = data.load_images(m, root)
        prepared = []
        for img in images:
            side = min(img.width, img.height)
            img = data.center_crop(img, side, side)
            prepared.append(data.resize_bilinear(img, target_hw, target_hw))
        labels = [index[label] for _, label in m.entries]
        ids = [rel for rel, _ in m.entries]
        return prepared, labels, ids

    prepared = {name: materialize(m) for name, m in (("train", train_m), ("val", val_m),
                                                     ("test", test_m))}
    if prepared["train"] is None or prepared["test"] is None:
        raise ConfigError("manifest produced an empty train or test split")
    stats = data.compute_norm_stats(prepared["train"][0])
    stats_path = source + ".stats"
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write(stats.to_text())
    out = {}
    for name, triple in prepared.items():
        if triple is None:
            out[name] = None
            continue
        images, labels, ids = triple
        out[name] = data.dataset_from_images(images, labels, ids, stats, manifest.class_names)
    return out["train"], out["val"], out["test"], stats, target_hw


def build_model(cfg: RunConfig, num_classes: int, input_hw: int) -> models.Model:
    if cfg.model == "vgg19":
        return models.build_vgg19(num_classes, in_channels=1)
    if cfg.model == "vgg-mini":
        return models.build_vgg_mini(num_classes, in_channels=1, input_hw=input_hw)
    return models.build_mlp(num_classes, input_hw * input_hw, cfg.mlp_hidden,
                            input_shape=(1, input_hw, input_hw))


def _mean_loss(model: models.Model, dataset: data.ArrayDataset, batch_size: int) -> float:
    total, count = 0.0, 0
    for batch in data.batches(dataset, batch_size, rng=None, shuffle=False):
        n = batch.x.shape[0]
        total += models.forward_loss(model, batch.x, batch.y_onehot) * n
        count += n
    return total / count


def _checkpoint_extra(stats: data.NormStats, class_names, input_hw: int) -> dict:
    return {
        "norm_mu": stats.mu,
        "norm_sigma": stats.sigma,
        "class_names": list(class_names),
        "input_hw": input_hw,
    }


def train_run(cfg: RunConfig) -> TrainResult:
    seed = cfg.seed if cfg.seed is not None else int.from_bytes(os.urandom(8), "little")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with tensor.precision(cfg.precision):
        root = Rng(seed)
        train_ds, val_ds, test_ds, stats, input_hw = resolve_data(cfg, root.child(_TAG_SPLIT))
        num_classes = len(train_ds.class_names)
        schedule = optim.LrSchedule(cfg.base_lr, cfg.lr_decay, cfg.lr_period)
        hyper = optim.Hyperparams(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)

        start_epoch = 0
        if cfg.resume:
            model, state, start_epoch, _ = checkpoint.load_checkpoint(cfg.resume)
            expected = build_model(cfg, num_classes, input_hw)
            if model.config != expected.config:
                raise ConfigError("checkpoint architecture does not match the run configuration")
            if state.algorithm != cfg.optimizer:
                raise ConfigError(
                    f"checkpoint optimizer {state.algorithm!r} != configured {cfg.optimizer!r}"
                )
            if start_epoch > cfg.epochs:
                raise ConfigError(f"checkpoint is at epoch {start_epoch}, past --epochs {cfg.epochs}")
            model.train()
        else:
            model = build_model(cfg, num_classes, input_hw)
            models.init_params(model, root.child(_TAG_INIT))
            state = optim.new_state(cfg.optimizer, model.params, hyper)

        extra = _checkpoint_extra(stats, train_ds.class_names, input_hw)
        csv_path = os.path.join(cfg.out_dir, "loss_curve.csv")
        records: list[EpochRecord] = []
        first_batch_loss: float | None = None
        with open(csv_path, "w", encoding="utf-8", newline="\n") as csv:
            csv.write(LOSS_CSV_HEADER + "\n")
            for epoch in range(start_epoch, cfg.epochs):
                started = time.perf_counter()
                lr = optim.lr_at(schedule, epoch)
                model.train()
                batch_losses = []
                batch_iter = data.batches(train_ds, cfg.batch_size,
                                          root.child(_TAG_SHUFFLE, epoch), shuffle=True)
                for bi, batch in enumerate(batch_iter):
                    dropout_rng = root.child(_TAG_DROPOUT, epoch, bi)
                    loss, grads = models.loss_and_gradients(model, batch.x, batch.y_onehot,
                                                            dropout_rng)
                    if not math.isfinite(loss):
                        raise StepError(f"non-finite loss at epoch {epoch}, batch {bi}")
                    if epoch == 0 and bi == 0:
                        first_batch_loss = loss
                    batch_losses.append(loss)
                    optim.step(state, model.params, grads, lr)
                train_loss = sum(batch_losses) / len(batch_losses)
                model.eval()
                val_loss = _mean_loss(model, val_ds, cfg.batch_size) if val_ds else train_loss
                records.append(EpochRecord(epoch, train_loss, val_loss, lr,
                                           time.perf_counter() - started))
                csv.write(f"{epoch},{train_loss!r},{val_loss!r},{lr!r}\n")
                csv.flush()
                done = epoch + 1
                if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                    checkpoint.save_checkpoint(
                        model, state, done,
                        os.path.join(cfg.out_dir, f"ckpt_epoch_{done:04d}.cvfg"), extra)

        final_path = os.path.join(cfg.out_dir, "checkpoint.cvfg")
        checkpoint.save_checkpoint(model, state, cfg.epochs, final_path, extra)
        model.eval()
        report = metrics.evaluate(model, test_ds, cfg.batch_size)
        with open(os.path.join(cfg.out_dir, "report.kv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_kv())
        with open(os.path.join(cfg.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(render_report_table([(cfg.model, report)]))
        return TrainResult(config=cfg, records=records, report=report,
                           first_batch_loss=first_batch_loss, loss_csv_path=csv_path,
                           checkpoint_path=final_path, model=model, state=state)


@dataclass
class AblationRow:
    optimizer: str
    report: EvalReport | None
    first_batch_loss: float | None
    final_train_loss: float | None
    error: str | None = None


def ablate_run(cfg: RunConfig) -> list[AblationRow]:
    """Five identically seeded runs, one per optimizer; a failing row does not stop the rest."""
    rows = []
    for name in ABLATION_ORDER:
        sub = replace(cfg, optimizer=name, out_dir=os.path.join(cfg.out_dir, name))
        try:
            result = train_run(sub)
            rows.append(AblationRow(name, result.report, result.first_batch_loss,
                                    result.final_train_loss))
        except (ArgumentError, ConfigError, StepError, OSError) as exc:
            rows.append(AblationRow(name, None, None, None, error=str(exc)))
    return rows


def render_report_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Aligned text table in the reported-metrics column order: ACC AUC F1 Recall."""
    header = f"{'Model':<12} {'ACC':>8} {'AUC':>8} {'F1':>8} {'Recall':>8}"
    lines = [header]
    for name, report in rows:
        auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
        lines.append(f"{name:<12} {report.accuracy:>8.4f} {auc:>8} "
                     f"{report.f1_positive:>8.4f} {report.recall_positive:>8.4f}")
    return "\n".join(lines) + "\n"


def render_ablation_table(rows: list[AblationRow]) -> str:
    header = (f"{'Optimizer':<12} {'ACC':>8} {'AUC':>8} {'F1':>8} {'Recall':>8} "
              f"{'FinalTrainLoss':>15}")
    lines = [header]
    for row in rows:
        if row.error is not None or row.report is None:
            lines.append(f"{row.optimizer:<12} {'failed: ' + (row.error or 'unknown')}")
            continue
        r = row.report
        auc = "n/a" if r.auc is None else f"{r.auc:.4f}"
        lines.append(f"{row.optimizer:<12} {r.accuracy:>8.4f} {auc:>8} {r.f1_positive:>8.4f} "
                     f"{r.recall_positive:>8.4f} {row.final_train_loss:>15.6f}")
    return "\n".join(lines) + "\n"
