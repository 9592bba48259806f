"""Replaced-token-detection pretraining.

A depth-reduced generator fills masked positions by sampling from its own
MLM distribution; the discriminator classifies every non-padding token as
original vs replaced. Token and position embeddings are shared storage; the
discriminator's optimizer owns them, but gradients from both losses flow in
before each step. Total loss = generator CE + disc_weight * discriminator BCE.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .checkpoint import apply_arrays, load_checkpoint, params_to_arrays, save_checkpoint
from .encoder import EncoderConfig, LongformerEncoder, make_roles
from .errors import ConfigError, NumericError, UsageError
from .optim import AdamW
from .rng import generator_state, restore_generator, substream
from .tensor import (
    Parameter,
    Tensor,
    add,
    bce_with_logits,
    cross_entropy,
    gelu,
    matmul,
    mul,
    reshape,
    transpose,
)

CKPT_KIND = "rtd-pretrain"


def generator_config(disc: EncoderConfig, depth_divisor: int) -> EncoderConfig:
    """Same widths as the discriminator, depth divided (floor, minimum 1)."""
    if depth_divisor < 1:
        raise ConfigError(f"depth_divisor must be >= 1, got {depth_divisor}")
    return EncoderConfig(
        vocab_size=disc.vocab_size,
        hidden=disc.hidden,
        layers=max(1, disc.layers // depth_divisor),
        heads=disc.heads,
        intermediate=disc.intermediate,
        window=disc.window,
        max_positions=disc.max_positions,
        dropout=disc.dropout,
    )


def mask_tokens(
    ids: np.ndarray,
    mask_id: int,
    special_ids: set[int],
    mlm_probability: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Independently mask each non-special position with the given probability.

    Returns (generator_input, masked_positions). No 80/10/10 split: every
    selected position becomes the mask id; replacement is the generator's job.
    """
    if not 0.0 <= mlm_probability < 1.0:
        raise UsageError(f"mlm_probability must be in [0, 1), got {mlm_probability}")
    eligible = ~np.isin(ids, sorted(special_ids))
    masked = eligible & (rng.random(ids.shape) < mlm_probability)
    generator_input = np.where(masked, mask_id, ids)
    return generator_input, masked


def sample_replacements(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of [N, V] logits, temperature 1.

    Operates on raw arrays: no gradient flows through the samples.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("generator logits are not finite")
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    c = np.cumsum(p, axis=-1)
    u = rng.random((z.shape[0], 1))
    return np.minimum((c < u).sum(axis=-1), z.shape[-1] - 1).astype(np.int64)


def build_disc_labels(
    original_ids: np.ndarray, corrupted_ids: np.ndarray, masked_positions: np.ndarray
) -> np.ndarray:
    """1 iff the position was masked and the sample differs from the original."""
    if not (original_ids.shape == corrupted_ids.shape == masked_positions.shape):
        raise UsageError("shapes of ids and mask must agree")
    return (masked_positions & (corrupted_ids != original_ids)).astype(np.int64)


def rtd_loss(gen_ce, disc_bce, disc_weight: float = 50.0):
    """Combined objective: gen_ce + disc_weight * disc_bce. Accepts floats or tensors."""
    if isinstance(gen_ce, Tensor) or isinstance(disc_bce, Tensor):
        return add(gen_ce, mul(disc_bce, disc_weight))
    return gen_ce + disc_weight * disc_bce


@dataclass
class RtdBatch:
    original_ids: np.ndarray
    masked_positions: np.ndarray
    generator_input: np.ndarray
    corrupted_ids: np.ndarray
    disc_labels: np.ndarray
    padding_mask: np.ndarray  # True at padding positions

    def validate(self, mask_id: int) -> None:
        assert self.disc_labels[~self.masked_positions].sum() == 0
        assert np.array_equal(
            self.corrupted_ids[~self.masked_positions], self.original_ids[~self.masked_positions]
        )
        assert np.all(self.generator_input[self.masked_positions] == mask_id)
        assert np.array_equal(
            self.generator_input[~self.masked_positions], self.original_ids[~self.masked_positions]
        )
        assert not np.any(self.masked_positions & self.padding_mask)
        recomputed = self.masked_positions & (self.corrupted_ids != self.original_ids)
        assert np.array_equal(self.disc_labels.astype(bool), recomputed)


@dataclass
class PretrainHyper:
    batch_size: int = 32
    base_lr: float = 5e-4
    warmup_steps: int = 10000
    total_steps: int = 100000
    disc_weight: float = 50.0
    mlm_probability: float = 0.25
    depth_divisor: int = 4


class RtdPretrainer:
    """Owns both models, both optimizers, and the per-purpose rng streams."""

    def __init__(
        self,
        config: EncoderConfig,
        hyper: PretrainHyper,
        seed: int,
        mask_id: int = 4,
        pad_id: int = 2,
        special_ids: tuple = (0, 1, 2, 3, 4),
    ):
        if mask_id >= config.vocab_size or pad_id >= config.vocab_size:
            raise ConfigError("mask/pad ids must fall inside the vocabulary")
        self.config = config
        self.hyper = hyper
        self.seed = seed
        self.mask_id = mask_id
        self.pad_id = pad_id
        self.special_ids = set(int(i) for i in special_ids)

        H, V = config.hidden, config.vocab_size
        init_rng = substream(seed, "init")
        self.disc = LongformerEncoder(config, init_rng, prefix="disc")
        gen_cfg = generator_config(config, hyper.depth_divisor)
        self.gen = LongformerEncoder(
            gen_cfg,
            init_rng,
            prefix="gen",
            shared_token_embedding=self.disc.tok_emb,
            shared_position_embedding=self.disc.pos_emb,
        )
        # generator MLM head: tied output projection plus a vocab bias
        self.gen_head_bias = Parameter(np.zeros(V, np.float32), "gen.head.bias")
        # discriminator head: hidden transform then a single logit per token
        self.disc_head_w1 = Parameter(
            init_rng.normal(0.0, 0.02, (H, H)).astype(np.float32), "disc.head.w1"
        )
        self.disc_head_b1 = Parameter(np.zeros(H, np.float32), "disc.head.b1")
        self.disc_head_w2 = Parameter(
            init_rng.normal(0.0, 0.02, (H, 1)).astype(np.float32), "disc.head.w2"
        )
        self.disc_head_b2 = Parameter(np.zeros(1, np.float32), "disc.head.b2")

        gen_params = self.gen.params(include_embeddings=False) + [self.gen_head_bias]
        disc_params = self.disc.params() + [
            self.disc_head_w1, self.disc_head_b1, self.disc_head_w2, self.disc_head_b2
        ]
        self.gen_opt = AdamW(gen_params, hyper.base_lr, hyper.warmup_steps, hyper.total_steps)
        self.disc_opt = AdamW(disc_params, hyper.base_lr, hyper.warmup_steps, hyper.total_steps)

        self.mask_rng = substream(seed, "mask")
        self.sample_rng = substream(seed, "sample")
        self.batch_rng = substream(seed, "batches")
        self.dropout_rng = substream(seed, "dropout")
        self.step_count = 0
        self.loss_history: deque = deque(maxlen=100)
        self._gen_logits = None

    def build_batch(self, ids: np.ndarray) -> RtdBatch:
        ids = np.asarray(ids)
        padding = ids == self.pad_id
        gen_input, masked = mask_tokens(
            ids, self.mask_id, self.special_ids, self.hyper.mlm_probability, self.mask_rng
        )
        roles = make_roles(ids, pad_id=self.pad_id)
        gen_hidden = self.gen.forward(gen_input, roles, train=True, rng=self.dropout_rng)
        gen_logits = add(matmul(gen_hidden, transpose(self.disc.tok_emb, (1, 0))), self.gen_head_bias)

        flat_logits = gen_logits.data.reshape(-1, self.config.vocab_size)
        masked_flat = masked.reshape(-1)
        corrupted = ids.copy()
        if masked_flat.any():
            samples = sample_replacements(flat_logits[masked_flat], self.sample_rng)
            corrupted.reshape(-1)[masked_flat] = samples
        labels = build_disc_labels(ids, corrupted, masked)
        batch = RtdBatch(ids, masked, gen_input, corrupted, labels, padding)
        # keep the graph for the loss pass without recomputing the forward
        self._gen_logits = gen_logits
        return batch

    def step(self, ids: np.ndarray, dump_dir=None) -> dict:
        """One optimization step over a [B, L] id batch; returns the metrics record."""
        batch = self.build_batch(ids)
        B, L = batch.original_ids.shape
        V = self.config.vocab_size

        targets = np.where(batch.masked_positions, batch.original_ids, -100).reshape(-1)
        gen_ce = cross_entropy(reshape(self._gen_logits, (B * L, V)), targets)

        roles = make_roles(batch.corrupted_ids, pad_id=self.pad_id)
        disc_hidden = self.disc.forward(batch.corrupted_ids, roles, train=True, rng=self.dropout_rng)
        h = gelu(add(matmul(disc_hidden, self.disc_head_w1), self.disc_head_b1))
        disc_logits = reshape(add(matmul(h, self.disc_head_w2), self.disc_head_b2), (B, L))
        disc_bce = bce_with_logits(
            disc_logits, batch.disc_labels.astype(np.float32), ignore_mask=batch.padding_mask
        )

        total = rtd_loss(gen_ce, disc_bce, self.hyper.disc_weight)
        if not np.isfinite(total.data):
            path = self._dump_diagnostic(batch, dump_dir)
            raise NumericError(f"non-finite loss at step {self.step_count}; batch dumped to {path}")

        total.backward()
        lr = self.gen_opt.step()
        self.disc_opt.step()
        self.step_count += 1

        nonpad = ~batch.padding_mask
        preds = disc_logits.data > 0.0
        labels_b = batch.disc_labels.astype(bool)
        replaced = labels_b & nonpad
        metrics = {
            "step": self.step_count,
            "lr": lr,
            "gen_loss": float(gen_ce.data),
            "disc_loss": float(disc_bce.data),
            "total": float(total.data),
            "masked_fraction": float(batch.masked_positions[nonpad].mean()) if nonpad.any() else 0.0,
            "replaced_fraction": float(replaced.sum() / max(nonpad.sum(), 1)),
            "disc_accuracy": float((preds == labels_b)[nonpad].mean()) if nonpad.any() else 0.0,
            "replaced_recall": float(preds[replaced].mean()) if replaced.any() else 0.0,
        }
        self.loss_history.append(metrics["total"])
        self._gen_logits = None
        return metrics

    def run(self, chunks: np.ndarray, steps: int, dump_dir=None):
        """Yield one metrics record per step, sampling chunk rows with replacement."""
        if chunks.shape[0] == 0:
            raise UsageError("cannot pretrain on an empty chunk set")
        for _ in range(steps):
            rows = self.batch_rng.integers(0, chunks.shape[0], size=self.hyper.batch_size)
            yield self.step(chunks[rows], dump_dir=dump_dir)

    def _dump_diagnostic(self, batch: RtdBatch, dump_dir) -> str:
        import os

        d = dump_dir if dump_dir is not None else "."
        os.makedirs(d, exist_ok=True)
        path = os.path.join(str(d), f"diagnostic_batch_step{self.step_count}.npz")
        np.savez(
            path,
            original_ids=batch.original_ids,
            masked_positions=batch.masked_positions,
            generator_input=batch.generator_input,
            corrupted_ids=batch.corrupted_ids,
            disc_labels=batch.disc_labels,
        )
        return path

    # --- persistence ---------------------------------------------------------

    def _all_arrays(self) -> dict[str, np.ndarray]:
        params = self.disc_opt.params + self.gen_opt.params
        arrays = params_to_arrays(params)
        for tag, opt in (("disc", self.disc_opt), ("gen", self.gen_opt)):
            for name, arr in opt.moment_arrays().items():
                arrays[f"opt.{tag}.{name}"] = arr
        return arrays

    def export_encoder(self, directory) -> None:
        """Save the discriminator tower alone, for downstream fine-tuning."""
        from .encoder import save_encoder_checkpoint

        save_encoder_checkpoint(
            directory, self.disc, extra={"pretrain_step": self.step_count, "seed": self.seed}
        )

    def checkpoint(self, directory) -> None:
        from dataclasses import asdict

        extra = {
            "kind": CKPT_KIND,
            "step": self.step_count,
            "seed": self.seed,
            "mask_id": self.mask_id,
            "pad_id": self.pad_id,
            "special_ids": sorted(self.special_ids),
            "hyper": asdict(self.hyper),
            "opt": {"gen": self.gen_opt.state_dict(), "disc": self.disc_opt.state_dict()},
            "rng": {
                "mask": generator_state(self.mask_rng),
                "sample": generator_state(self.sample_rng),
                "batches": generator_state(self.batch_rng),
                "dropout": generator_state(self.dropout_rng),
            },
            "loss_history": list(self.loss_history),
        }
        save_checkpoint(directory, self._all_arrays(), asdict(self.config), extra)

    @classmethod
    def resume(cls, directory) -> "RtdPretrainer":
        config_dict, arrays, extra = load_checkpoint(directory)
        if extra.get("kind") != CKPT_KIND:
            raise UsageError(f"{directory}: not a pretrain checkpoint")
        trainer = cls(
            EncoderConfig(**config_dict),
            PretrainHyper(**extra["hyper"]),
            seed=extra["seed"],
            mask_id=extra["mask_id"],
            pad_id=extra["pad_id"],
            special_ids=tuple(extra["special_ids"]),
        )
        params = trainer.disc_opt.params + trainer.gen_opt.params
        apply_arrays(params, arrays)
        for tag, opt in (("disc", trainer.disc_opt), ("gen", trainer.gen_opt)):
            moments = {
                name[len(f"opt.{tag}."):]: arr
                for name, arr in arrays.items()
                if name.startswith(f"opt.{tag}.")
            }
            opt.load_state_dict(extra["opt"][tag], moments)
        trainer.mask_rng = restore_generator(extra["rng"]["mask"])
        trainer.sample_rng = restore_generator(extra["rng"]["sample"])
        trainer.batch_rng = restore_generator(extra["rng"]["batches"])
        trainer.dropout_rng = restore_generator(extra["rng"]["dropout"])
        trainer.step_count = extra["step"]
        trainer.loss_history = deque(extra["loss_history"], maxlen=100)
        return trainer
