"""Encoder-decoder summarization: fine-tuning and beam-search generation.

The pretrained long-context encoder is paired with a randomly initialized
transformer decoder (causal self-attention plus cross-attention over the
encoder output, pre-norm blocks, output projection tied to the decoder input
embedding). Training is teacher-forced cross-entropy with early stopping on
validation loss; generation is length-normalized beam search with an n-gram
repetition ban.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import apply_arrays, load_checkpoint, params_to_arrays, save_checkpoint
from .encoder import (
    ENCODER_KIND,
    EncoderConfig,
    LongformerEncoder,
    _init_weight,
    make_roles,
)
from .errors import ConfigError, FormatError, RangeError, UsageError
from .optim import AdamW
from .pretrain import CKPT_KIND as PRETRAIN_KIND
from .rng import substream
from .tensor import (
    NEG_INF,
    Parameter,
    Tensor,
    add,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
)

SEQ2SEQ_KIND = "seq2seq"


@dataclass(frozen=True)
class DecoderConfig:
    """Shape of the target-side transformer. hidden must equal the encoder's."""

    hidden: int
    layers: int = 6
    heads: int = 12
    intermediate: int = 3072
    max_target_positions: int = 1024

    def __post_init__(self):
        for name in ("hidden", "layers", "heads", "intermediate", "max_target_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def decoder_for_encoder(enc: EncoderConfig, layers: int = 6, max_target_positions: int = 1024) -> DecoderConfig:
    """Default decoder shape: 6 layers, encoder widths, 4x feed-forward."""
    return DecoderConfig(
        hidden=enc.hidden,
        layers=layers,
        heads=enc.heads,
        intermediate=4 * enc.hidden,
        max_target_positions=max_target_positions,
    )


@dataclass(frozen=True)
class GenerationParams:
    num_beams: int = 4
    no_repeat_ngram_size: int = 3
    max_input_length: int = 1024
    max_target_length: int = 256
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.num_beams < 1:
            raise ConfigError(f"num_beams must be >= 1, got {self.num_beams}")
        if self.no_repeat_ngram_size < 0:
            raise ConfigError("no_repeat_ngram_size must be >= 0 (0 disables the ban)")
        if self.max_input_length < 1 or self.max_target_length < 1:
            raise ConfigError("max_input_length and max_target_length must be >= 1")
        if not math.isfinite(self.length_penalty):
            raise ConfigError("length_penalty must be finite")


GENERATION_PROFILES = {
    "billsum-short": GenerationParams(max_input_length=1024, max_target_length=256),
    "billsum-long": GenerationParams(max_input_length=4096, max_target_length=1024),
    "pubmed": GenerationParams(max_input_length=4096, max_target_length=512),
}


@dataclass
class EarlyStopState:
    """Stops once `patience` consecutive epochs fail to improve the best loss."""

    patience: int = 3
    best_validation_loss: float = math.inf
    epochs_since_improvement: int = 0

    def update(self, validation_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if validation_loss < self.best_validation_loss:
            self.best_validation_loss = validation_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


@dataclass
class FinetuneHyper:
    batch_size: int = 32
    lr: float = 7e-5
    patience: int = 3
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise UsageError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise UsageError("batch_size, max_epochs and patience must be positive")


class Seq2SeqModel:
    """Long-context encoder + dense transformer decoder."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        seed: int,
        bos_id: int = 0,
        eos_id: int = 1,
        pad_id: int = 2,
        dtype=np.float32,
    ):
        if decoder_config.hidden != encoder_config.hidden:
            raise ConfigError(
                f"decoder hidden {decoder_config.hidden} != encoder hidden {encoder_config.hidden}"
            )
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.seed = seed
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.dtype = dtype

        self.encoder = LongformerEncoder(encoder_config, substream(seed, "enc-init"), prefix="enc", dtype=dtype)

        rng = substream(seed, "dec-init")
        d = decoder_config
        H, I = d.hidden, d.intermediate
        self.dec_tok_emb = Parameter(
            _init_weight(rng, (encoder_config.vocab_size, H), dtype), "dec.tok_emb", dtype=dtype
        )
        self.dec_pos_emb = Parameter(
            _init_weight(rng, (d.max_target_positions, H), dtype), "dec.pos_emb", dtype=dtype
        )
        self.dec_layers = []
        for l in range(d.layers):
            lp = f"dec.layers.{l}"
            layer = {}
            for block in ("self", "cross"):
                for proj in ("q", "k", "v", "out"):
                    layer[f"{block}.{proj}.w"] = Parameter(
                        _init_weight(rng, (H, H), dtype), f"{lp}.{block}.{proj}.w", dtype=dtype
                    )
                    layer[f"{block}.{proj}.b"] = Parameter(np.zeros(H, dtype), f"{lp}.{block}.{proj}.b", dtype=dtype)
            for ln in ("ln1", "ln2", "ln3"):
                layer[f"{ln}.g"] = Parameter(np.ones(H, dtype), f"{lp}.{ln}.g", dtype=dtype)
                layer[f"{ln}.b"] = Parameter(np.zeros(H, dtype), f"{lp}.{ln}.b", dtype=dtype)
            layer["ffn.w1"] = Parameter(_init_weight(rng, (H, I), dtype), f"{lp}.ffn.w1", dtype=dtype)
            layer["ffn.b1"] = Parameter(np.zeros(I, dtype), f"{lp}.ffn.b1", dtype=dtype)
            layer["ffn.w2"] = Parameter(_init_weight(rng, (I, H), dtype), f"{lp}.ffn.w2", dtype=dtype)
            layer["ffn.b2"] = Parameter(np.zeros(H, dtype), f"{lp}.ffn.b2", dtype=dtype)
            self.dec_layers.append(layer)
        self.dec_ln_f_g = Parameter(np.ones(H, dtype), "dec.ln_f.g", dtype=dtype)
        self.dec_ln_f_b = Parameter(np.zeros(H, dtype), "dec.ln_f.b", dtype=dtype)

    def decoder_params(self) -> list[Parameter]:
        out = [self.dec_tok_emb, self.dec_pos_emb]
        for layer in self.dec_layers:
            out.extend(layer.values())
        out.extend([self.dec_ln_f_g, self.dec_ln_f_b])
        return out

    def params(self) -> list[Parameter]:
        return self.encoder.params() + self.decoder_params()

    # --- forward -------------------------------------------------------------

    def encode(self, input_ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Run the encoder; the lead token gets global attention."""
        input_ids = np.asarray(input_ids)
        roles = make_roles(input_ids, pad_id=self.pad_id, first_token_global=True)
        memory = self.encoder.forward(input_ids, roles)
        return memory, input_ids == self.pad_id

    def _mha(self, x_q: Tensor, x_kv: Tensor, layer: dict, block: str, bias: np.ndarray | None) -> Tensor:
        d = self.decoder_config
        B, T = x_q.shape[0], x_q.shape[1]
        S = x_kv.shape[1]

        def heads(x, name, L):
            h = add(matmul(x, layer[f"{block}.{name}.w"]), layer[f"{block}.{name}.b"])
            return transpose(reshape(h, (B, L, d.heads, d.head_dim)), (0, 2, 1, 3))

        q = heads(x_q, "q", T)
        k = heads(x_kv, "k", S)
        v = heads(x_kv, "v", S)
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d.head_dim))
        if bias is not None:
            scores = add(scores, bias.astype(scores.dtype))
        ctx = matmul(softmax(scores, axis=-1), v)
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, d.hidden))
        return add(matmul(merged, layer[f"{block}.out.w"]), layer[f"{block}.out.b"])

    def decode(self, target_in: np.ndarray, memory: Tensor, memory_padding: np.ndarray) -> Tensor:
        """Logits [B, T, V] for each next-token position of `target_in`."""
        target_in = np.asarray(target_in)
        B, T = target_in.shape
        d = self.decoder_config
        if T > d.max_target_positions:
            raise RangeError(f"target length {T} exceeds max_target_positions {d.max_target_positions}")

        causal = np.triu(np.full((1, 1, T, T), NEG_INF, dtype=np.float64), k=1)
        cross = np.where(memory_padding, NEG_INF, 0.0)[:, None, None, :]

        x = add(embedding(self.dec_tok_emb, target_in), embedding(self.dec_pos_emb, np.arange(T)))
        for layer in self.dec_layers:
            ln1 = layer_norm(x, layer["ln1.g"], layer["ln1.b"])
            x = add(x, self._mha(ln1, ln1, layer, "self", causal))
            ln2 = layer_norm(x, layer["ln2.g"], layer["ln2.b"])
            x = add(x, self._mha(ln2, memory, layer, "cross", cross))
            ln3 = layer_norm(x, layer["ln3.g"], layer["ln3.b"])
            h = gelu(add(matmul(ln3, layer["ffn.w1"]), layer["ffn.b1"]))
            h = add(matmul(h, layer["ffn.w2"]), layer["ffn.b2"])
            x = add(x, h)
        x = layer_norm(x, self.dec_ln_f_g, self.dec_ln_f_b)
        return matmul(x, transpose(self.dec_tok_emb, (1, 0)))

    def loss_on_batch(self, input_seqs, target_seqs) -> tuple[Tensor, int]:
        """Teacher-forced mean CE over non-padding target tokens."""
        inp = pad_batch(input_seqs, self.pad_id)
        tgt = pad_batch(target_seqs, self.pad_id)
        dec_in = tgt[:, :-1]
        labels = np.where(tgt[:, 1:] == self.pad_id, -100, tgt[:, 1:])
        memory, mem_pad = self.encode(inp)
        logits = self.decode(dec_in, memory, mem_pad)
        B, T, V = logits.shape
        loss = cross_entropy(reshape(logits, (B * T, V)), labels.reshape(-1))
        return loss, int((labels != -100).sum())

    # --- persistence ---------------------------------------------------------

    def checkpoint(self, directory, extra: dict | None = None) -> None:
        payload = dict(extra or {})
        payload.update(
            kind=SEQ2SEQ_KIND, seed=self.seed,
            bos_id=self.bos_id, eos_id=self.eos_id, pad_id=self.pad_id,
        )
        config = {"encoder": asdict(self.encoder_config), "decoder": asdict(self.decoder_config)}
        save_checkpoint(directory, params_to_arrays(self.params()), config, payload)

    @classmethod
    def load(cls, directory) -> "Seq2SeqModel":
        config, arrays, extra = load_checkpoint(directory)
        if extra.get("kind") != SEQ2SEQ_KIND:
            raise UsageError(f"{directory}: not a seq2seq checkpoint")
        model = cls(
            EncoderConfig(**config["encoder"]),
            DecoderConfig(**config["decoder"]),
            seed=extra["seed"],
            bos_id=extra["bos_id"],
            eos_id=extra["eos_id"],
            pad_id=extra["pad_id"],
        )
        apply_arrays(model.params(), arrays)
        return model


def build_seq2seq(encoder_checkpoint, decoder_config: DecoderConfig, seed: int, **model_kw) -> Seq2SeqModel:
    """Pretrained encoder + freshly initialized decoder.

    Accepts an exported encoder checkpoint or a full pretraining checkpoint
    (the discriminator tower is taken). Decoder and cross-attention weights
    are drawn from `seed`.
    """
    config, arrays, extra = load_checkpoint(encoder_checkpoint)
    kind = extra.get("kind")
    if kind == ENCODER_KIND:
        enc_arrays = {k: v for k, v in arrays.items() if k.startswith("enc.")}
    elif kind == PRETRAIN_KIND:
        config = dict(config)
        enc_arrays = {
            "enc." + k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("disc.")
        }
    else:
        raise UsageError(f"{encoder_checkpoint}: expected an encoder or pretraining checkpoint, got kind {kind!r}")
    enc_cfg = EncoderConfig(**config)
    if enc_cfg.hidden != decoder_config.hidden:
        raise ConfigError(
            f"checkpoint hidden width {enc_cfg.hidden} != decoder hidden {decoder_config.hidden}"
        )
    model = Seq2SeqModel(enc_cfg, decoder_config, seed, **model_kw)
    apply_arrays(model.encoder.params(), enc_arrays)
    return model


# --- data plumbing -----------------------------------------------------------


def pad_batch(seqs, pad_id: int) -> np.ndarray:
    longest = max(len(s) for s in seqs)
    out = np.full((len(seqs), longest), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def encode_clipped(tokenizer, text: str, max_length: int, bos_id: int, eos_id: int) -> np.ndarray:
    """<s> body </s>, body truncated so the total stays within max_length."""
    body = tokenizer.encode(text)[: max(max_length - 2, 0)]
    return np.asarray([bos_id] + list(body) + [eos_id], dtype=np.int64)


def prepare_pairs(records, tokenizer, max_input_length: int, max_target_length: int,
                  bos_id: int = 0, eos_id: int = 1):
    """JSONL-style records -> [(input_ids, target_ids)]. Empty text/summary is an error."""
    pairs = []
    for i, rec in enumerate(records):
        text = rec.get("text")
        summary = rec.get("summary")
        if not text or not summary:
            rid = rec.get("id", f"line-{i + 1}")
            raise UsageError(f"record {rid}: finetuning needs non-empty text and summary")
        pairs.append(
            (
                encode_clipped(tokenizer, text, max_input_length, bos_id, eos_id),
                encode_clipped(tokenizer, summary, max_target_length, bos_id, eos_id),
            )
        )
    return pairs


def validation_loss(model: Seq2SeqModel, pairs, batch_size: int) -> float:
    """Token-weighted mean CE over the whole pair list."""
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start : start + batch_size]
        loss, n = model.loss_on_batch([p[0] for p in batch], [p[1] for p in batch])
        total += loss.item() * n
        count += n
    return total / max(count, 1)


def finetune(model: Seq2SeqModel, train_pairs, val_pairs, hyper: FinetuneHyper,
             checkpoint_dir=None) -> dict:
    """Epoch loop with early stopping; leaves `model` holding the best weights.

    lr 0 runs the schedule without touching any parameter (evaluation-only
    epochs), since the optimizer itself requires a positive rate.
    """
    if not train_pairs or not val_pairs:
        raise UsageError("finetuning needs non-empty train and validation sets")
    opt = AdamW(model.params(), base_lr=hyper.lr) if hyper.lr > 0 else None
    stopper = EarlyStopState(patience=hyper.patience)
    order_rng = substream(hyper.seed, "finetune-order")
    best = {p.name: p.data.copy() for p in model.params()}
    best_epoch = 0
    history = []
    stopped_early = False

    for epoch in range(1, hyper.max_epochs + 1):
        order = order_rng.permutation(len(train_pairs))
        train_total, train_count = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            rows = order[start : start + hyper.batch_size]
            batch = [train_pairs[r] for r in rows]
            loss, n = model.loss_on_batch([p[0] for p in batch], [p[1] for p in batch])
            train_total += loss.item() * n
            train_count += n
            if opt is not None:
                loss.backward()
                opt.step()
        val = validation_loss(model, val_pairs, hyper.batch_size)
        improved = val < stopper.best_validation_loss
        stop = stopper.update(val)
        if improved:
            best = {p.name: p.data.copy() for p in model.params()}
            best_epoch = epoch
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_total / max(train_count, 1),
                "validation_loss": val,
                "improved": improved,
            }
        )
        if stop:
            stopped_early = True
            break

    for p in model.params():
        p.data[...] = best[p.name]
    result = {
        "best_epoch": best_epoch,
        "best_validation_loss": stopper.best_validation_loss,
        "epochs_run": len(history),
        "stopped_early": stopped_early,
        "history": history,
    }
    if checkpoint_dir is not None:
        model.checkpoint(
            checkpoint_dir,
            extra={"best_epoch": best_epoch, "best_validation_loss": stopper.best_validation_loss},
        )
    return result


# --- generation ----------------------------------------------------------------


def banned_next_tokens(seq, n: int) -> set:
    """Tokens that would complete an n-gram already present in `seq`."""
    if n <= 0:
        return set()
    grams = {tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)}
    prefix = tuple(seq[len(seq) - n + 1 :]) if n > 1 else ()
    return {g[-1] for g in grams if g[:-1] == prefix}


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def beam_search_generate(model: Seq2SeqModel, input_ids, params: GenerationParams,
                         return_score: bool = False):
    """Best generated token sequence (without start/end markers).

    Scores are summed token log-probabilities divided by length**penalty; a
    token scoring -inf under the repetition ban never extends a beam. Beams
    that emit the end token retire; search runs until all beams retire or the
    length cap is reached.
    """
    input_ids = np.asarray(input_ids, dtype=np.int64)[: params.max_input_length]
    memory, mem_pad = model.encode(input_ids[None, :])
    memory = memory.detach()
    V = model.encoder_config.vocab_size

    def norm(score: float, length: int) -> float:
        return score / (length ** params.length_penalty)

    live = [((model.bos_id,), 0.0)]
    done: list[tuple[tuple, float]] = []
    for t in range(params.max_target_length):
        k = len(live)
        dec_in = np.asarray([seq for seq, _ in live], dtype=np.int64)
        mem_k = Tensor(np.repeat(memory.data, k, axis=0), dtype=memory.data.dtype)
        pad_k = np.repeat(mem_pad, k, axis=0)
        logits = model.decode(dec_in, mem_k, pad_k).data[:, -1, :]
        candidates = []
        for b, (seq, score) in enumerate(live):
            logp = _log_softmax(logits[b])
            for tok in banned_next_tokens(seq, params.no_repeat_ngram_size):
                logp[tok] = -np.inf
            top = np.argsort(logp)[::-1][: params.num_beams]
            for tok in top:
                if np.isfinite(logp[tok]):
                    candidates.append((seq + (int(tok),), score + float(logp[tok])))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for seq, score in candidates[: params.num_beams]:
            if seq[-1] == model.eos_id:
                done.append((seq, norm(score, len(seq) - 1)))
            else:
                live.append((seq, score))
        if not live:
            break
    for seq, score in live:
        done.append((seq, norm(score, len(seq) - 1)))

    best_seq, best_score = max(done, key=lambda c: (c[1], c[0]))
    out = list(best_seq[1:])
    if out and out[-1] == model.eos_id:
        out = out[:-1]
    return (out, best_score) if return_score else out


def summarize_file(model: Seq2SeqModel, tokenizer, params: GenerationParams,
                   input_path, output_path) -> dict:
    """One output record per input record, order preserved.

    A record that fails to generate produces an error entry and the run
    continues; records are independent, so this loop parallelizes per record.
    """
    written = errors = 0
    with open(input_path, "r", encoding="utf-8") as src, open(output_path, "w", encoding="utf-8") as dst:
        for lineno, line in enumerate(src, start=1):
            if not line.strip():
                continue
            rid = f"line-{lineno}"
            try:
                rec = json.loads(line)
                got = rec.get("id")
                if isinstance(got, str) and got:
                    rid = got
                text = rec.get("text")
                if not isinstance(text, str) or not text:
                    raise FormatError("record has no text")
                ids = encode_clipped(tokenizer, text, params.max_input_length, model.bos_id, model.eos_id)
                out_ids = beam_search_generate(model, ids, params)
                entry = {
                    "id": rid,
                    "summary": tokenizer.decode(out_ids),
                    "token_count": len(out_ids),
                }
                written += 1
            except Exception as exc:  # record-level isolation
                entry = {"id": rid, "error": f"{type(exc).__name__}: {exc}"}
                errors += 1
            dst.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return {"written": written, "errors": errors}
