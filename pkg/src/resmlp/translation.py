"""Toy transduction tasks, parallel-text corpora and the seq2seq training loop."""
from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NonFiniteError
from .seq2seq import (BOS, EOS, Seq2SeqModel, TokenBatch, Vocabulary, beam_search, greedy_decode,
                      seq2seq_forward)
from .tensor import GradientTape
from .training import TrainConfig, cross_entropy, lr_at, make_optimizer

log = logging.getLogger(__name__)

Pair = tuple[list[int], list[int]]


def toy_task(kind: str, n: int, vocab_size: int = 32, min_len: int = 5, max_len: int = 20,
             seed: int = 0) -> list[Pair]:
    """``copy`` or ``reverse`` pairs over the non-reserved ids."""
    if kind not in ("copy", "reverse"):
        raise DataError(f"unknown toy task {kind!r}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        src = rng.integers(3, vocab_size, size=L).tolist()
        pairs.append((src, src[::-1] if kind == "reverse" else list(src)))
    return pairs


def read_parallel_text(path, vocab: Vocabulary | None = None, grow: bool = True):
    """UTF-8 file with one ``source<TAB>target`` pair per line, tokens split on spaces."""
    vocab = vocab if vocab is not None else Vocabulary()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected one tab-separated pair")
            sides = []
            for side in parts:
                toks = side.split()
                sides.append([vocab.add(t) for t in toks] if grow else vocab.encode(toks))
            pairs.append((sides[0], sides[1]))
    return pairs, vocab


def write_parallel_text(path, pairs: Sequence[Pair], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(" ".join(vocab.decode(s)) + "\t" + " ".join(vocab.decode(t)) + "\n")


def make_batch(pairs: Sequence[Pair]) -> tuple[TokenBatch, TokenBatch, np.ndarray, np.ndarray]:
    """Source batch, decoder input ([bos] + y), decoder target (y + [eos]) and its mask."""
    src = TokenBatch.from_sequences([s for s, _ in pairs])
    tgt_in = TokenBatch.from_sequences([[BOS] + t for _, t in pairs])
    out = TokenBatch.from_sequences([t + [EOS] for _, t in pairs])
    return src, tgt_in, out.ids, out.mask


def sequence_loss(model: Seq2SeqModel, pairs: Sequence[Pair], smoothing: float = 0.0):
    src, tgt_in, target, mask = make_batch(pairs)
    logits = seq2seq_forward(model, src, tgt_in)
    return cross_entropy(logits, target, smoothing, mask=mask)


@dataclass
class Seq2SeqReport:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    seconds: float = 0.0
    steps: int = 0


def fit_seq2seq(model: Seq2SeqModel, pairs: Sequence[Pair], cfg: TrainConfig,
                valid: Sequence[Pair] | None = None, time_budget: float | None = None,
                log_every: int = 0) -> Seq2SeqReport:
    """Train in place on shuffled batches; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    steps_per_epoch = max(math.ceil(len(pairs) / cfg.batch_size), 1)
    total = steps_per_epoch * cfg.epochs
    report = Seq2SeqReport()
    t0 = time.perf_counter()
    step = 0
    params = model.named_parameters()
    plist = [p for _, p in params]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        running, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            with GradientTape() as tape:
                loss = sequence_loss(model, batch, cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"loss became {value} at step {step}")
            tape.backward(loss, plist)
            opt.step(params, lr_at(step, total, cfg, steps_per_epoch))
            running += value
            count += 1
            step += 1
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f (%.0fs)", step, running / count, time.perf_counter() - t0)
            if time_budget is not None and time.perf_counter() - t0 > time_budget:
                break
        report.losses.append(running / max(count, 1))
        if valid is not None:
            report.accuracies.append(exact_match(model, valid, beam=1))
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            break
    report.seconds = time.perf_counter() - t0
    report.steps = step
    return report


def translate(model: Seq2SeqModel, sources: Sequence[Sequence[int]], beam: int = 4,
              batch_size: int = 256) -> list[list[int]]:
    if beam == 1:
        out = []
        for start in range(0, len(sources), batch_size):
            out.extend(greedy_decode(model, list(sources[start:start + batch_size])))
        return out
    return [beam_search(model, s, beam=beam) for s in sources]


def exact_match(model: Seq2SeqModel, pairs: Sequence[Pair], beam: int = 1) -> float:
    hyps = translate(model, [s for s, _ in pairs], beam=beam)
    return float(np.mean([h == list(t) for h, (_, t) in zip(hyps, pairs)])) if pairs else 0.0


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU with a single reference per segment and the usual brevity penalty."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
            r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_prec)


def save_pairs_vocab(out_dir, vocab: Vocabulary) -> Path:
    path = Path(out_dir) / "vocab.txt"
    vocab.save(path)
    return path
