"""Training assembly: composite loss, Adam with linear decay, the
train/eval loops, run reports, and checkpoint/sidecar handling.

A run directory holds three files: `model.ckpt` (binary checkpoint),
`vocab.txt` (one token per line, id order), and `config.cfg` (the same
`key = value` grammar the CLI's --config flag accepts), which together
are sufficient to rebuild the model for eval/predict.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mmner import autodiff as ad
from mmner.autodiff import ContractError, Tensor, backward
from mmner.checkpoint import load_checkpoint, save_checkpoint
from mmner.data import Corpus, ImageStore, Vocabulary, make_batches, parse_iob2
from mmner.metrics import EvalReport, evaluate
from mmner.model import PRESETS, ModelConfig, MultimodalNerModel


@dataclass
class TrainConfig:
    alpha: float = 0.8
    lr: float = 5e-5
    batch_size: int = 16
    dropout: float = 0.1
    tau: float = 0.07
    epochs: int = 10
    seed: int = 0
    preset: str = "desk"
    use_vit: bool = True
    use_resnet: bool = True
    use_contrastive: bool = True
    mask_invalid_transitions: bool = False
    repair: bool = False
    stop_at_f1: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if self.preset not in PRESETS:
            raise ContractError(f"unknown preset {self.preset!r}")

    def model_config(self) -> ModelConfig:
        return PRESETS[self.preset](
            dropout=self.dropout,
            use_vit=self.use_vit,
            use_resnet=self.use_resnet,
            use_contrastive=self.use_contrastive,
            mask_invalid_transitions=self.mask_invalid_transitions,
        )


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Line-oriented `key = value` (# comments and blank lines ignored)."""
    values: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_TYPES:
            raise ContractError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def _coerce(key: str, value: str):
    kind = _CONFIG_TYPES[key]
    if kind == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"config key {key}: expected boolean, got {value!r}")
    if kind == "int":
        return int(value)
    if kind == "str":
        return value
    if value.lower() == "none":
        return None
    return float(value)


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimization


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from base_lr at step 0 to exactly 0 at total_steps."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step > total_steps:
        warnings.warn(f"lr_at: step {step} past total {total_steps}; clamping to 0")
        return 0.0
    return base_lr * (1.0 - step / total_steps)


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def clip_global_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total_sq = 0.0
    for p in params.values():
        if p.grad is not None:
            total_sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(total_sq)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def total_loss(crf_nll: Tensor, cl_vit: Tensor, cl_conv: Tensor, alpha: float) -> Tensor:
    """alpha * L_crf + (1 - alpha) * (L_cl' + L_cl'').

    The alpha = 1 and alpha = 0 endpoints return the respective terms
    themselves, so the identities hold bitwise.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return crf_nll
    contrastive = ad.add(cl_vit, cl_conv)
    if alpha == 0.0:
        return contrastive
    return ad.add(ad.mul(Tensor(alpha), crf_nll),
                  ad.mul(Tensor(1.0 - alpha), contrastive))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: MultimodalNerModel, corpus: Corpus,
                   vocab: Vocabulary, images: ImageStore) -> EvalReport:
    """Viterbi-decode every sentence and score spans against gold."""
    gold, pred = [], []
    for ex in corpus.examples:
        ids = vocab.encode(ex.tokens)
        tags = model.predict(ids, images.load(ex.image_ref))
        if len(tags) < len(ex.labels):  # truncated sentence: pad with O
            tags = tags + ["O"] * (len(ex.labels) - len(tags))
        gold.append(ex.labels)
        pred.append(tags)
    return evaluate(gold, pred)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class EpochLog:
    epoch: int
    loss: float
    crf_nll: float
    cl_vit: float
    cl_conv: float
    eval_f1: float


@dataclass
class TrainResult:
    epoch_logs: list[EpochLog]
    best_epoch: int
    best_f1: float
    final_report: EvalReport
    counters: dict[str, int]
    out_dir: Path | None
    eval_split: str

    def report_text(self) -> str:
        lines = []
        for log in self.epoch_logs:
            lines.append(
                f"epoch {log.epoch}: loss={log.loss:.6f} crf={log.crf_nll:.6f} "
                f"cl_vit={log.cl_vit:.6f} cl_conv={log.cl_conv:.6f} "
                f"{self.eval_split}_f1={log.eval_f1:.4f}"
            )
        lines.append(f"best epoch {self.best_epoch} ({self.eval_split} F1 {self.best_f1:.4f})")
        lines.append("counters: " + " ".join(f"{k}={v}" for k, v in self.counters.items()))
        lines.append(self.final_report.format_table())
        return "\n".join(lines)

    def kv_lines(self) -> str:
        lines = []
        for log in self.epoch_logs:
            prefix = f"epoch.{log.epoch}"
            lines.append(f"{prefix}.loss={log.loss:.12g}")
            lines.append(f"{prefix}.crf_nll={log.crf_nll:.12g}")
            lines.append(f"{prefix}.cl_vit={log.cl_vit:.12g}")
            lines.append(f"{prefix}.cl_conv={log.cl_conv:.12g}")
            lines.append(f"{prefix}.{self.eval_split}_f1={log.eval_f1:.12g}")
        lines.append(f"best.epoch={self.best_epoch}")
        lines.append(f"best.f1={self.best_f1:.12g}")
        for key, value in self.counters.items():
            lines.append(f"counter.{key}={value}")
        lines.append(self.final_report.kv_lines())
        return "\n".join(lines)


def save_run_artifacts(out_dir: Path, model: MultimodalNerModel,
                       vocab: Vocabulary, config: TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.parameters(), out_dir / "model.ckpt")
    (out_dir / "vocab.txt").write_text(
        "\n".join(vocab.tokens_in_order()) + "\n", encoding="utf-8")
    (out_dir / "config.cfg").write_text(format_config(config), encoding="utf-8")


def load_run(out_dir: str | Path) -> tuple[MultimodalNerModel, Vocabulary, TrainConfig]:
    """Rebuild the trained model from a run directory's three artifacts."""
    out_dir = Path(out_dir)
    config = TrainConfig(**parse_config_text((out_dir / "config.cfg").read_text()))
    tokens = (out_dir / "vocab.txt").read_text(encoding="utf-8").splitlines()
    vocab = Vocabulary.from_token_list([t for t in tokens if t])
    model = MultimodalNerModel(config.model_config(), len(vocab), config.seed)
    model.load_parameters(load_checkpoint(out_dir / "model.ckpt"))
    return model, vocab, config


def load_split(root: Path, split: str, repair: bool = False) -> Corpus | None:
    path = root / f"{split}.iob2"
    if not path.exists():
        return None
    return parse_iob2(path, repair=repair, split=split)


def train(config: TrainConfig, data_root: str | Path,
          images_dir: str | Path | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Full training run; returns per-epoch logs and the best-model report.

    Model selection is by dev-split overall F1 (train-split F1 when no dev
    file exists), ties broken toward the earlier epoch. The best model's
    checkpoint and sidecars are written to out_dir as they improve, and
    the in-memory model is restored to the best checkpoint at the end.
    """
    root = Path(data_root)
    train_corpus = load_split(root, "train", repair=config.repair)
    if train_corpus is None or len(train_corpus) == 0:
        raise ContractError(f"no training data at {root / 'train.iob2'}")
    dev_corpus = load_split(root, "dev", repair=config.repair)
    eval_corpus = dev_corpus if dev_corpus is not None and len(dev_corpus) else train_corpus
    eval_split = "dev" if eval_corpus is dev_corpus else "train"

    vocab = Vocabulary.from_corpus(train_corpus)
    model_cfg = config.model_config()
    model = MultimodalNerModel(model_cfg, len(vocab), config.seed)
    images = ImageStore(
        Path(images_dir) if images_dir is not None else root / "images",
        model_cfg.image_size,
    )
    params = model.parameters()
    optimizer = Adam(params)
    dropout_rng = np.random.default_rng([config.seed, 104729])

    steps_per_epoch = math.ceil(len(train_corpus) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    out_path = Path(out_dir) if out_dir is not None else None

    logs: list[EpochLog] = []
    best_f1 = -1.0
    best_epoch = -1
    best_arrays: dict[str, np.ndarray] | None = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        sums = {"loss": 0.0, "crf": 0.0, "vit": 0.0, "conv": 0.0}
        batches = 0
        for batch in make_batches(train_corpus, config.batch_size,
                                  [config.seed, epoch], True, vocab, images):
            crf_nll, cl_vit, cl_conv = model.batch_losses(
                batch, train=True, rng=dropout_rng, tau=config.tau)
            loss = total_loss(crf_nll, cl_vit, cl_conv, config.alpha)
            backward(loss)
            clip_global_norm(params, 1.0)
            optimizer.step(lr_at(step, total_steps, config.lr))
            step += 1
            sums["loss"] += loss.item()
            sums["crf"] += crf_nll.item()
            sums["vit"] += cl_vit.item()
            sums["conv"] += cl_conv.item()
            batches += 1
        report = evaluate_model(model, eval_corpus, vocab, images)
        f1 = report.overall.f1
        logs.append(EpochLog(
            epoch=epoch,
            loss=sums["loss"] / batches,
            crf_nll=sums["crf"] / batches,
            cl_vit=sums["vit"] / batches,
            cl_conv=sums["conv"] / batches,
            eval_f1=f1,
        ))
        if f1 > best_f1:
            best_f1 = f1
            best_epoch = epoch
            if out_path is not None:
                save_run_artifacts(out_path, model, vocab, config)
                best_arrays = None  # checkpoint on disk is authoritative
            else:
                best_arrays = {k: p.data.copy() for k, p in params.items()}
        if config.stop_at_f1 is not None and f1 >= config.stop_at_f1:
            break

    # restore the best parameters for the final report
    if out_path is not None and (out_path / "model.ckpt").exists():
        model.load_parameters(load_checkpoint(out_path / "model.ckpt"))
    elif best_arrays is not None:
        model.load_parameters(best_arrays)
    final_report = evaluate_model(model, eval_corpus, vocab, images)

    counters = {
        "unk_tokens": vocab.unk_count,
        "truncated_sentences": model.truncation_count + model.text.truncation_count,
        "missing_images": images.missing_count,
        "repaired_labels": train_corpus.repaired_labels
        + (dev_corpus.repaired_labels if dev_corpus is not None else 0),
    }
    return TrainResult(
        epoch_logs=logs,
        best_epoch=best_epoch,
        best_f1=best_f1,
        final_report=final_report,
        counters=counters,
        out_dir=out_path,
        eval_split=eval_split,
    )
