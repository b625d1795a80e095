"""The encoder-decoder vision-language model.

The encoder input is the text prompt (token + position embedding) followed by
the region slots (projected features + projected box). The decoder predicts
the target text with teacher forcing, its output projection is tied to the
token embedding.
"""

import copy
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from fewvlm.config import ModelConfig
from fewvlm.data import RegionFeatures, Vocab
from fewvlm.nncore.checkpoint import load_checkpoint, save_checkpoint
from fewvlm.nncore.layers import (
    DecoderLayer,
    Dropout,
    Embedding,
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    causal_mask,
)
from fewvlm.nncore.tensor import (
    Tensor,
    add,
    concat,
    gather_last,
    log_softmax,
    matmul,
    mul,
    no_grad,
    transpose,
    tsum,
)
from fewvlm.utils.errors import (
    ConfigError,
    EmptyTarget,
    FeatureDimMismatch,
    SequenceTooLong,
    ShapeMismatch,
)
from fewvlm.utils.logging import logger


class FewVLMModel(Module):
    """
    Sequence-to-sequence transformer conditioned on region features.

    Parameters
    ----------
    config : ModelConfig
        Architecture hyperparameters.
    seed : int
        Seed of the weight initialization.

    Attributes
    ----------
    token_emb : Embedding
        Token embedding, shared with the output projection.
    enc_pos, dec_pos : Embedding
        Learned absolute position embeddings of encoder text and decoder input.
    feat_proj : Linear
        Region feature projection, feature_dim -> hidden_dim.
    box_proj : Linear
        Box projection, 4 -> hidden_dim, added to the projected features.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        d = config.hidden_dim
        self.config = config
        self.token_emb = Embedding(config.vocab_size, d, rng, std=1.0)
        self.enc_pos = Embedding(config.max_text_len, d, rng, std=0.1)
        self.dec_pos = Embedding(config.max_text_len, d, rng, std=0.1)
        self.feat_proj = Linear(config.feature_dim, d, rng)
        self.box_proj = Linear(4, d, rng)
        self.emb_drop = Dropout(config.dropout)
        self.encoder = [
            EncoderLayer(d, config.ff_dim, config.n_heads, config.dropout, rng)
            for _ in range(config.n_enc_layers)
        ]
        self.enc_ln = LayerNorm(d)
        self.decoder = [
            DecoderLayer(d, config.ff_dim, config.n_heads, config.dropout, rng)
            for _ in range(config.n_dec_layers)
        ]
        self.dec_ln = LayerNorm(d)
        for name, p in self.named_parameters().items():
            p.name = name
        logger.debug(f"Created FewVLMModel with {self.n_parameters()} parameters, {config=}")

    @property
    def output_weight(self) -> Tensor:
        return self.token_emb.weight

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))

    # ------------------------------------------------------------------ inputs
    def _check_regions(self, regions: RegionFeatures) -> None:
        if regions.dim != self.config.feature_dim:
            raise FeatureDimMismatch(
                f"Region features have dim {regions.dim}, model expects {self.config.feature_dim}"
            )
        if regions.n_regions > self.config.n_regions:
            raise ShapeMismatch(
                f"{regions.n_regions} regions exceed the model's {self.config.n_regions} slots"
            )

    def _check_text(self, ids: Sequence[int], what: str) -> None:
        if len(ids) > self.config.max_text_len:
            raise SequenceTooLong(
                f"{what} has {len(ids)} tokens, max_text_len is {self.config.max_text_len}"
            )

    def _pack_regions(self, batch: Sequence[RegionFeatures]):
        r, f = self.config.n_regions, self.config.feature_dim
        feats = np.zeros((len(batch), r, f), dtype=np.float32)
        boxes = np.zeros((len(batch), r, 4), dtype=np.float32)
        for i, reg in enumerate(batch):
            self._check_regions(reg)
            feats[i, : reg.n_regions] = reg.features
            boxes[i, : reg.n_regions] = reg.boxes
        # all-zero slots are padding
        mask = (np.abs(feats).sum(-1) + np.abs(boxes).sum(-1)) > 0
        return feats, boxes, mask

    @staticmethod
    def _pad(seqs: Sequence[Sequence[int]], pad_id: int = 0):
        t = max((len(s) for s in seqs), default=0)
        ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), t), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = list(s)
            mask[i, : len(s)] = True
        return ids, mask

    # ------------------------------------------------------------------ encoder
    def _encode(self, regions: Sequence[RegionFeatures], input_ids: Sequence[Sequence[int]]):
        for s in input_ids:
            self._check_text(s, "Input")
        ids, text_mask = self._pad(input_ids)
        feats, boxes, region_mask = self._pack_regions(regions)
        b, t = ids.shape

        region_h = add(self.feat_proj(Tensor(feats)), self.box_proj(Tensor(boxes)))
        if t > 0:
            text_h = add(self.token_emb(ids), self.enc_pos(np.arange(t)))
            h = concat([text_h, region_h], axis=1)
        else:
            h = region_h
        mask = np.concatenate([text_mask, region_mask], axis=1)

        h = self.emb_drop(h)
        key_mask = mask[:, None, :]
        for layer in self.encoder:
            h = layer(h, key_mask)
        return self.enc_ln(h), mask

    def encode(self, regions: RegionFeatures, input_ids: Sequence[int]) -> Tensor:
        """
        Encoder states of one example.

        Returns
        -------
        Tensor
            Shape (len(input_ids) + n_regions, hidden_dim), text positions first.
        """
        h, _ = self._encode([regions], [list(input_ids)])
        return h.reshape(h.shape[1:])

    # ------------------------------------------------------------------ decoder
    def _decode(self, memory: Tensor, memory_mask: np.ndarray, dec_ids: np.ndarray,
                dec_mask: np.ndarray) -> Tensor:
        b, t = dec_ids.shape
        y = add(self.token_emb(dec_ids), self.dec_pos(np.arange(t)))
        y = self.emb_drop(y)
        self_mask = causal_mask(t)[None, :, :] & dec_mask[:, None, :]
        mem_mask = memory_mask[:, None, :]
        for layer in self.decoder:
            y = layer(y, memory, self_mask, mem_mask)
        y = mul(self.dec_ln(y), self.config.hidden_dim**-0.5)
        return matmul(y, transpose(self.output_weight, (1, 0)))

    def _shift_right(self, targets: Sequence[Sequence[int]], bos_id: int):
        for s in targets:
            if len(s) == 0:
                raise EmptyTarget("Target sequence is empty")
            self._check_text(s, "Target")
        tgt, tgt_mask = self._pad(targets)
        dec_in = np.concatenate([np.full((len(targets), 1), bos_id), tgt[:, :-1]], axis=1)
        return dec_in, tgt, tgt_mask

    def logits(self, regions: RegionFeatures, input_ids: Sequence[int],
               target_ids: Sequence[int], bos_id: int) -> Tensor:
        """Teacher-forced logits of one example, shape (len(target_ids), vocab_size)"""
        memory, mem_mask = self._encode([regions], [list(input_ids)])
        dec_in, _, dec_mask = self._shift_right([list(target_ids)], bos_id)
        out = self._decode(memory, mem_mask, dec_in, dec_mask)
        return out.reshape(out.shape[1:])

    def batch_losses(self, regions: Sequence[RegionFeatures], input_ids: Sequence[Sequence[int]],
                     target_ids: Sequence[Sequence[int]], bos_id: int) -> Tensor:
        """
        Per-example negative log-likelihood of a padded batch, shape (batch,).

        Each entry is the sum of -log P(y_i | y_<i, x, v) over the target
        positions of that example; padded positions contribute nothing.
        """
        if not (len(regions) == len(input_ids) == len(target_ids)):
            raise ShapeMismatch(
                f"Batch parts differ in length: {len(regions)}, {len(input_ids)}, {len(target_ids)}"
            )
        memory, mem_mask = self._encode(regions, [list(s) for s in input_ids])
        dec_in, tgt, tgt_mask = self._shift_right([list(s) for s in target_ids], bos_id)
        logp = log_softmax(self._decode(memory, mem_mask, dec_in, tgt_mask), axis=-1)
        picked = gather_last(logp, tgt)
        return -tsum(mul(picked, tgt_mask.astype(picked.data.dtype)), axis=1)

    def batch_loss(self, regions, input_ids, target_ids, bos_id: int) -> Tensor:
        """Sum of the per-example losses of a batch"""
        return tsum(self.batch_losses(regions, input_ids, target_ids, bos_id))

    def nll_loss(self, regions: RegionFeatures, input_ids: Sequence[int],
                 target_ids: Sequence[int], bos_id: int) -> Tensor:
        return self.batch_loss([regions], [input_ids], [target_ids], bos_id)

    # ------------------------------------------------------------------ generation
    def _step_logprobs(self, memory: Tensor, mem_mask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        dec_mask = np.ones(prefixes.shape, dtype=bool)
        out = self._decode(memory, mem_mask, prefixes, dec_mask)
        return log_softmax(out, axis=-1).data[:, -1, :]

    def generate(self, regions: RegionFeatures, input_ids: Sequence[int], max_len: int,
                 bos_id: int, eos_id: int, beam_size: int = 1) -> list[int]:
        """
        Decode a target text.

        Parameters
        ----------
        regions : RegionFeatures
            Image regions of the example.
        input_ids : Sequence[int]
            Prompted input tokens.
        max_len : int
            Number of decoding steps, a terminating eos counts as one.
        bos_id, eos_id : int
            Decoder start token and stop token.
        beam_size : int
            1 for greedy decoding, k > 1 for beam search of width k.

        Returns
        -------
        list[int]
            Generated ids without the eos token. eos is not allowed as the first
            token, so the result holds at least one id.
        """
        if max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {max_len=}")
        if beam_size > 1:
            return self.beam_search(regions, input_ids, max_len, bos_id, eos_id, beam_size)
        return self.generate_batch([regions], [input_ids], max_len, bos_id, eos_id)[0]

    def generate_batch(self, regions: Sequence[RegionFeatures], input_ids: Sequence[Sequence[int]],
                       max_len: int, bos_id: int, eos_id: int) -> list[list[int]]:
        """Greedy decoding of a batch, argmax per step, ties go to the lower id, no eos first"""
        max_len = min(max_len, self.config.max_text_len)
        with no_grad():
            memory, mem_mask = self._encode(regions, [list(s) for s in input_ids])
            b = len(regions)
            prefixes = np.full((b, 1), bos_id, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            outs: list[list[int]] = [[] for _ in range(b)]
            for step in range(max_len):
                logp = self._step_logprobs(memory, mem_mask, prefixes)
                if step == 0:
                    logp[:, eos_id] = -np.inf
                nxt = logp.argmax(axis=-1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == eos_id:
                        done[i] = True
                    else:
                        outs[i].append(int(nxt[i]))
                if done.all():
                    break
                prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        return outs

    def beam_search(self, regions: RegionFeatures, input_ids: Sequence[int], max_len: int,
                    bos_id: int, eos_id: int, k: int) -> list[int]:
        """Beam search of width k, best completed sequence by total log-probability"""
        max_len = min(max_len, self.config.max_text_len)
        with no_grad():
            memory, mem_mask = self._encode([regions], [list(input_ids)])
            # (score, tokens, finished); ranked by higher score, then smaller tokens
            beams: list[tuple[float, tuple, bool]] = [(0.0, (), False)]
            for step in range(max_len):
                live = [bm for bm in beams if not bm[2]]
                if not live:
                    break
                prefixes = np.array([(bos_id,) + bm[1] for bm in live], dtype=np.int64)
                mem = Tensor(np.repeat(memory.data, len(live), axis=0))
                mmask = np.repeat(mem_mask, len(live), axis=0)
                logp = self._step_logprobs(mem, mmask, prefixes)
                if step == 0:
                    logp[:, eos_id] = -np.inf
                cands = [bm for bm in beams if bm[2]]
                for (score, toks, _), row in zip(live, logp):
                    for tok in np.argsort(-row, kind="stable")[:k]:
                        cands.append((score + float(row[tok]), toks + (int(tok),), bool(tok == eos_id)))
                cands.sort(key=lambda c: (-c[0], c[1]))
                beams = cands[:k]
        finished = [bm for bm in beams if bm[2]] or beams
        best = min(finished, key=lambda c: (-c[0], c[1]))
        toks = list(best[1])
        return toks[:-1] if best[2] else toks

    # ------------------------------------------------------------------ state
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeMismatch(f"State lacks parameters {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ShapeMismatch(f"{k}: stored {state[k].shape}, model {p.data.shape}")
            p.data = np.asarray(state[k], dtype=p.data.dtype).copy()

    def clone(self) -> "FewVLMModel":
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    def seed_dropout(self, seed: int) -> None:
        """Give every dropout layer the same generator seeded with `seed`"""
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def save(self, path: Path | str, vocab: Vocab | None = None, **meta) -> None:
        header = {"config": asdict(self.config), **meta}
        if vocab is not None:
            header["vocab"] = list(vocab.tokens)
            header["n_sentinels"] = vocab.n_sentinels
        save_checkpoint(path, self.state_dict(), header)
        logger.info(f"Saved checkpoint to {path}")


def load_model(path: Path | str) -> tuple[FewVLMModel, Vocab | None, dict]:
    """
    Restore a model saved with `FewVLMModel.save`.

    Returns
    -------
    tuple[FewVLMModel, Vocab | None, dict]
        The model in eval mode, its vocabulary if one was stored, and the
        remaining header metadata.
    """
    tensors, meta = load_checkpoint(path)
    meta = dict(meta)
    config = ModelConfig(**meta.pop("config"))
    vocab = None
    if "vocab" in meta:
        vocab = Vocab(tuple(meta.pop("vocab")), meta.pop("n_sentinels"))
    model = FewVLMModel(config)
    model.load_state_dict(tensors)
    model.eval()
    return model, vocab, meta
