"""Training loop, two-pass inference, evaluation, and model selection.

One training run is single-threaded and fully deterministic: every random
draw (init, batch sampling, dropout) derives from the run seed. Validation
uses the exact inference function later used on the target domain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import objectives, optim, prompting, vit
from . import tensor as T
from .config import ConfigError, RunConfig, TrainConfig, VARIANTS
from .datagen import DomainBatch, SyntheticDataset
from .objectives import LossBreakdown
from .prompting import AdapterParams, PromptBank
from .tensor import Tensor
from .vit import ViTConfig, ViTParams

__all__ = [
    "ModelState",
    "NumericalError",
    "SelectionRecord",
    "evaluate_accuracy",
    "infer",
    "infer_prompt_averaged",
    "infer_with_domain_prompt",
    "init_state",
    "predict_logits",
    "run_experiment",
    "train_step",
]

EVAL_BATCH = 128

# Variants that train or use the prompt adapter.
ADAPTER_VARIANTS = ("doprompt", "no_lw", "no_ladapt", "frozen_backbone")


class NumericalError(RuntimeError):
    """A loss component became non-finite during training."""


@dataclass
class ModelState:
    """Everything a training run mutates, checkpointable bit-exactly."""

    cfg: ViTConfig
    params: ViTParams
    bank: PromptBank | None
    adapter: AdapterParams | None
    opt: optim.AdamWState
    step: int = 0

    def named_params(self) -> dict:
        out = dict(self.params.named())
        if self.bank is not None:
            out.update(self.bank.named())
        if self.adapter is not None:
            out.update(self.adapter.named())
        return out

    def trainable_names(self, variant: str) -> list:
        names = list(self.named_params())
        if variant == "erm":
            names = [n for n in names if not n.startswith(("prompts.", "adapter."))]
        elif variant == "no_adapter":
            names = [n for n in names if not n.startswith("adapter.")]
        elif variant == "frozen_backbone":
            names = [n for n in names if not n.startswith("vit.")]
        return names

    def save(self, path, include_optimizer: bool = False) -> None:
        arrays = {name: p.data for name, p in self.named_params().items()}
        if include_optimizer:
            for name in list(arrays):
                arrays[f"opt.m.{name}"] = self.opt.m[name]
                arrays[f"opt.v.{name}"] = self.opt.v[name]
            arrays["opt.t"] = np.array([self.opt.t], dtype=np.float32)
            arrays["opt.step"] = np.array([self.step], dtype=np.float32)
        ckpt.save_arrays(path, arrays)

    @classmethod
    def load(cls, path, cfg: ViTConfig, num_domains: int, prompt_length: int) -> "ModelState":
        arrays = ckpt.load_arrays(path)
        named = {n: Tensor(a, requires_grad=True) for n, a in arrays.items() if not n.startswith("opt.")}
        params = vit.vit_params_from_named(cfg, named)
        bank = adapter = None
        if "prompts.bank" in named:
            bank = PromptBank(named["prompts.bank"])
        if "adapter.l1.w" in named:
            adapter = AdapterParams(
                w1=named["adapter.l1.w"],
                b1=named["adapter.l1.b"],
                w2=named["adapter.l2.w"],
                b2=named["adapter.l2.b"],
                num_domains=num_domains,
                length=prompt_length,
            )
        state = cls(cfg=cfg, params=params, bank=bank, adapter=adapter,
                    opt=optim.init_adamw_state(named), step=0)
        for name in named:
            m = arrays.get(f"opt.m.{name}")
            v = arrays.get(f"opt.v.{name}")
            if m is not None:
                state.opt.m[name] = m
            if v is not None:
                state.opt.v[name] = v
        if "opt.t" in arrays:
            state.opt.t = int(arrays["opt.t"][0])
        if "opt.step" in arrays:
            state.step = int(arrays["opt.step"][0])
        return state


@dataclass
class SelectionRecord:
    """Validation accuracy per evaluated checkpoint; best step wins, ties earliest."""

    steps: list
    val_accuracies: list

    @property
    def chosen_step(self) -> int:
        best = int(np.argmax(self.val_accuracies))  # argmax takes the earliest max
        return self.steps[best]

    @property
    def best_accuracy(self) -> float:
        return max(self.val_accuracies)


def init_state(cfg: ViTConfig, num_domains: int, prompt_length: int, seed: int,
               with_prompts: bool = True) -> ModelState:
    root = np.random.SeedSequence(seed)
    init_rng = np.random.default_rng(root.spawn(1)[0])
    params = vit.init_vit_params(cfg, init_rng)
    bank = adapter = None
    if with_prompts:
        bank = prompting.init_prompt_bank(num_domains, prompt_length, cfg.embed_dim, init_rng)
        adapter = prompting.init_adapter_params(cfg.embed_dim, num_domains, prompt_length, init_rng)
    state = ModelState(cfg=cfg, params=params, bank=bank, adapter=adapter, opt=None)
    state.opt = optim.init_adamw_state(state.named_params())
    return state


def _check_finite(breakdown: LossBreakdown) -> None:
    for name, value in (
        ("l_prompt", breakdown.l_prompt),
        ("l_w", breakdown.l_w),
        ("l_adapt", breakdown.l_adapt),
        ("total", breakdown.total),
    ):
        if not np.isfinite(value.item()):
            raise NumericalError(f"loss component {name} is non-finite ({value.item()})")


def train_step(
    state: ModelState,
    batch: DomainBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    variant: str = "doprompt",
) -> tuple[ModelState, LossBreakdown]:
    """One optimization step on one multi-domain batch.

    The batch carries one sub-batch per source domain. Computes the variant's
    objective, backpropagates, and applies AdamW to the variant's trainable
    parameters. Raises NumericalError if any component goes non-finite.
    """
    params, cfg = state.params, state.cfg
    zero = Tensor(0.0)

    if variant == "erm":
        l_erm = objectives.loss_erm(params, cfg, batch, train=True, rng=rng)
        breakdown = LossBreakdown(l_prompt=l_erm, l_w=zero, l_adapt=zero, lam=0.0, total=l_erm)
    elif variant == "no_adapter":
        l_p = objectives.loss_prompt(params, cfg, state.bank, batch, train=True, rng=rng)
        breakdown = LossBreakdown(l_prompt=l_p, l_w=zero, l_adapt=zero, lam=0.0, total=l_p)
    elif variant == "no_lw":
        breakdown = objectives.total_loss(
            params, cfg, state.bank, state.adapter, batch, lam=0.0, train=True, rng=rng
        )
    elif variant == "no_ladapt":
        feat, _ = vit.forward(params, cfg, Tensor(batch.images), None, True, rng)
        weights = prompting.adapter_forward(state.adapter, T.detach(feat))
        l_p = objectives.loss_prompt(params, cfg, state.bank, batch, train=True, rng=rng)
        l_w = objectives.loss_w(weights, batch.domains)
        total = l_p + l_w * config.lam
        breakdown = LossBreakdown(l_prompt=l_p, l_w=l_w, l_adapt=zero, lam=config.lam, total=total)
    elif variant in ("doprompt", "frozen_backbone"):
        breakdown = objectives.total_loss(
            params, cfg, state.bank, state.adapter, batch, lam=config.lam, train=True, rng=rng
        )
    else:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")

    _check_finite(breakdown)
    named = state.named_params()
    optim.zero_grads(named)
    T.backward(breakdown.total)
    optim.step_params(
        named,
        state.opt,
        state.trainable_names(variant),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    optim.zero_grads(named)
    state.step += 1
    return state, breakdown


# ---------------------------------------------------------------------------
# inference


def infer(state: ModelState, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass adapted-prompt inference; returns (logits BxC, weights BxLxK).

    Pass 1 runs prompt-free to get the class feature, the adapter maps it to
    simplex weights, pass 2 runs with the composed adapted prompts. Records
    no gradients.
    """
    with T.no_grad():
        feat, _ = vit.forward(state.params, state.cfg, Tensor(images))
        weights = prompting.adapter_forward(state.adapter, feat)
        adapted = prompting.compose_adapted_prompts(state.bank, weights)
        _, logits = vit.forward(state.params, state.cfg, Tensor(images), adapted)
    return logits.data, weights.data


def infer_with_domain_prompt(state: ModelState, images: np.ndarray, d: int) -> np.ndarray:
    """Single forward with domain d's own prompts."""
    with T.no_grad():
        tokens = prompting.domain_prompts(state.bank, d)
        _, logits = vit.forward(state.params, state.cfg, Tensor(images), tokens)
    return logits.data


def infer_prompt_averaged(state: ModelState, images: np.ndarray) -> np.ndarray:
    """Mean of single-domain-prompt logits over all source domains."""
    acc = None
    for d in range(state.bank.num_domains):
        logits = infer_with_domain_prompt(state, images, d)
        acc = logits if acc is None else acc + logits
    return acc / state.bank.num_domains


def infer_prompt_free(state: ModelState, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        _, logits = vit.forward(state.params, state.cfg, Tensor(images))
    return logits.data


def predict_logits(state: ModelState, images: np.ndarray, variant: str) -> np.ndarray:
    """The variant's test-time logits; validation uses this same function."""
    if variant == "erm":
        return infer_prompt_free(state, images)
    if variant == "no_adapter":
        return infer_prompt_averaged(state, images)
    return infer(state, images)[0]


def evaluate_accuracy(state: ModelState, images, labels, variant: str) -> float:
    correct = 0
    for start in range(0, len(labels), EVAL_BATCH):
        chunk = slice(start, start + EVAL_BATCH)
        logits = predict_logits(state, images[chunk], variant)
        correct += int((logits.argmax(axis=1) == labels[chunk]).sum())
    return correct / len(labels)


def extract_features(state: ModelState, images: np.ndarray) -> np.ndarray:
    """Prompt-free class-token features, the representation the adapter sees."""
    feats = []
    with T.no_grad():
        for start in range(0, len(images), EVAL_BATCH):
            feat, _ = vit.forward(state.params, state.cfg, Tensor(images[start : start + EVAL_BATCH]))
            feats.append(feat.data)
    return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# experiment harness


def split_domain(n: int, val_fraction: float, rng: np.random.Generator):
    """Seeded shuffle, then an (1 - val_fraction)/val_fraction split."""
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def sample_step_batch(
    dataset: SyntheticDataset, source_domains, train_idx, batch_per_domain, rng
) -> DomainBatch:
    """Equal-size sub-batch from every source domain, concatenated."""
    parts = []
    for d in source_domains:
        pool = train_idx[d]
        replace = len(pool) < batch_per_domain
        sel = rng.choice(pool, size=batch_per_domain, replace=replace)
        parts.append(dataset.batch(d, sel))
    return DomainBatch(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        domains=np.concatenate([p.domains for p in parts]),
    )


def run_experiment(
    dataset: SyntheticDataset,
    target_domain: int,
    variant: str,
    run_cfg: RunConfig,
    out_dir=None,
) -> dict:
    """Leave-one-domain-out training with training-domain validation.

    Splits every source domain into train/validation, trains for the
    configured number of steps, selects the checkpoint with the best pooled
    validation accuracy (ties resolved toward the earliest step), and reports
    accuracy on the held-out target domain.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if not 0 <= target_domain < dataset.num_domains:
        raise ConfigError(f"target_domain {target_domain} out of range [0, {dataset.num_domains})")
    source_domains = [d for d in range(dataset.num_domains) if d != target_domain]
    if variant in ADAPTER_VARIANTS and len(source_domains) < 2:
        raise ConfigError(f"variant {variant!r} needs >= 2 source domains, got {len(source_domains)}")

    tc = run_cfg.train
    # domains keep their dataset indices; the bank/adapter index source slots
    domain_slot = {d: i for i, d in enumerate(source_domains)}

    root = np.random.SeedSequence(tc.seed)
    split_seq, batch_seq, dropout_seq = root.spawn(3)
    split_rng = np.random.default_rng(split_seq)
    batch_rng = np.random.default_rng(batch_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    train_idx, val_idx = {}, {}
    for d in source_domains:
        train_idx[d], val_idx[d] = split_domain(dataset.domain_size(d), tc.val_fraction, split_rng)

    vit_cfg = run_cfg.vit
    state = init_state(
        vit_cfg,
        num_domains=len(source_domains),
        prompt_length=tc.prompt_length,
        seed=tc.seed,
        with_prompts=variant != "erm",
    )

    val_images = np.concatenate([dataset.images[d][val_idx[d]] for d in source_domains])
    val_labels = np.concatenate([dataset.labels[d][val_idx[d]] for d in source_domains])

    loss_rows = []
    selection = SelectionRecord(steps=[], val_accuracies=[])
    best_snapshot = None

    def remap(batch: DomainBatch) -> DomainBatch:
        slots = np.array([domain_slot[int(d)] for d in batch.domains], dtype=np.int64)
        return DomainBatch(batch.images, batch.labels, slots)

    def evaluate_and_record(step: int):
        nonlocal best_snapshot
        acc = evaluate_accuracy(state, val_images, val_labels, variant)
        selection.steps.append(step)
        selection.val_accuracies.append(acc)
        if selection.chosen_step == step:  # strictly better than every earlier eval
            best_snapshot = {n: p.data.copy() for n, p in state.named_params().items()}

    for step in range(1, tc.steps + 1):
        batch = remap(sample_step_batch(dataset, source_domains, train_idx, tc.batch_per_domain, batch_rng))
        state, breakdown = train_step(state, batch, tc, dropout_rng, variant)
        loss_rows.append(breakdown.csv_row(step))
        if step % tc.eval_interval == 0 or step == tc.steps:
            evaluate_and_record(step)

    # restore the selected checkpoint before the target evaluation
    named = state.named_params()
    for name, arr in best_snapshot.items():
        named[name].data = arr
    test_acc = evaluate_accuracy(
        state, dataset.images[target_domain], dataset.labels[target_domain], variant
    )

    report = {
        "variant": variant,
        "target_domain": int(target_domain),
        "source_domains": source_domains,
        "seed": int(tc.seed),
        "chosen_step": int(selection.chosen_step),
        "val_acc": float(selection.best_accuracy),
        "test_acc": float(test_acc),
        "val_fraction": tc.val_fraction,
        "loss_curve_csv_path": None,
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "loss_curve.csv"
        csv_path.write_text(LossBreakdown.CSV_HEADER + "\n" + "\n".join(loss_rows) + "\n")
        report["loss_curve_csv_path"] = str(csv_path)
        state.save(out_dir / "checkpoint.dpt")
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    report["_state"] = state
    report["_selection"] = selection
    return report
