"""Two-phase training, evaluation, attention analysis and the ablation study."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, decoding, losses, metrics
from . import model as M
from .autodiff import no_grad
from .data import Vocabulary
from .optim import Adagrad, clip_grad_norm

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "rouge1",
    "rouge2",
    "rougeL",
    "dup1",
    "dup2",
    "dup3",
    "dup4",
    "mean_local_variance",
    "mean_global_g",
)
RUN_LOG_COLUMNS = ("iteration", "phase", "mle", "local", "global", "total", "lambda_local", "lambda_global", "grad_norm")
STATS_COLUMNS = ("example", "steps", "positions", "mean_local_variance", "mean_gate", "mean_g", "max_g", "global_variance")


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    emb_dim: int = 32
    vocab_size: int = 200
    batch_size: int = 8
    lr: float = 0.15
    initial_accumulator: float = 0.1
    pretrain_iters: int = 1500
    finetune_iters: int = 500
    lambda_local: float = losses.LAMBDA_LOCAL
    lambda_global: float = losses.LAMBDA_GLOBAL
    eps: float = losses.DEFAULT_EPS
    refine: bool = True
    gate_form: str = "broadcast"
    beam_size: int = 4
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    clip_norm: float = 2.0
    eval_every: int = 100
    patience: int = 5
    max_decode_len: int = 0  # 0 resolves to twice the mean training target length
    block_trigrams: bool = True
    init_scale: float = 0.05

    def __post_init__(self):
        positive = ("hidden", "emb_dim", "batch_size", "lr", "eps", "beam_size", "eval_every", "init_scale")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ("initial_accumulator", "pretrain_iters", "finetune_iters", "lambda_local", "lambda_global",
                  "clip_norm", "patience", "max_decode_len")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.vocab_size <= len(data.RESERVED):
            raise ValueError("vocab_size must exceed the reserved ids")
        if self.gate_form not in M.GATE_FORMS:
            raise ValueError(f"gate_form must be one of {M.GATE_FORMS}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _parse_like(getattr(defaults, k), k, v) for k, v in mapping.items()})

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_like(default, key: str, text: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return type(default)(text)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {text!r}") from None


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, breakdown: losses.LossBreakdown | None, reason: str):
        self.iteration = iteration
        self.breakdown = breakdown
        parts = "" if breakdown is None else (
            f" (mle={breakdown.mle!r}, local={breakdown.local!r}, global={breakdown.global_!r}, total={breakdown.total!r})"
        )
        super().__init__(f"training aborted at iteration {iteration}: {reason}{parts}")


class VocabularyMismatch(ValueError):
    pass


# -- training --------------------------------------------------------------------------
@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    params: M.ModelParams
    optimizer: Adagrad
    iteration: int = 0
    epoch: int = 0
    cursor: int = 0
    log: list[dict] = field(default_factory=list)
    val_log: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def copy(self) -> "TrainState":
        params = self.params.copy()
        opt = Adagrad(list(params), self.optimizer.lr, 0.0)
        opt.accumulators = [a.copy() for a in self.optimizer.accumulators]
        return TrainState(params, opt, self.iteration, self.epoch, self.cursor,
                          list(self.log), list(self.val_log), self.stopped_early)


@dataclass
class TrainResult:
    params: M.ModelParams
    vocab: Vocabulary
    config: TrainConfig
    log: list[dict]
    val_log: list[dict]
    phase1_digest: str
    phase2_start_digest: str | None
    stopped_early: bool
    max_decode_len: int
    checkpoints: list[Path]


@dataclass
class Prepared:
    vocab: Vocabulary
    train: list[data.ExtendedExample]
    val: list[data.ExtendedExample]
    max_decode_len: int


def prepare(config: TrainConfig, train_pairs, val_pairs=(), vocab: Vocabulary | None = None) -> Prepared:
    if not train_pairs:
        raise ValueError("training corpus is empty")
    if vocab is None:
        vocab = data.build_vocab([s for s, _ in train_pairs] + [t for _, t in train_pairs], config.vocab_size)
    train = [data.make_example(s, t, vocab) for s, t in train_pairs]
    val = [data.make_example(s, t, vocab) for s, t in val_pairs]
    max_len = config.max_decode_len or math.ceil(2 * np.mean([len(t) for _, t in train_pairs]))
    return Prepared(vocab, train, val, max(int(max_len), 1))


def model_config(config: TrainConfig, vocab_size: int, seed: int) -> M.ModelConfig:
    return M.ModelConfig(
        vocab_size=vocab_size,
        emb_dim=config.emb_dim,
        hidden=config.hidden,
        refine=config.refine,
        gate_form=config.gate_form,
        init_scale=config.init_scale,
        seed=seed,
    )


def init_state(config: TrainConfig, prepared: Prepared, seed: int | None = None) -> TrainState:
    seed = config.seed if seed is None else seed
    params = M.ModelParams.initialize(model_config(config, len(prepared.vocab), seed))
    return TrainState(params, Adagrad(list(params), config.lr, config.initial_accumulator))


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def _val_mle(params: M.ModelParams, examples, batch_size: int, vocab_size: int) -> float:
    total, count = 0.0, 0
    with no_grad():
        for k in range(0, len(examples), batch_size):
            chunk = examples[k : k + batch_size]
            trace = M.teacher_forced(params, data.collate(chunk, vocab_size))
            total += losses.mle_loss(trace.decode_trace()).item() * len(chunk)
            count += len(chunk)
    return total / count


def run_phase(
    state: TrainState,
    config: TrainConfig,
    prepared: Prepared,
    phase: int,
    iterations: int,
    lambdas: tuple[float, float],
    seed: int,
    early_stop: bool,
) -> TrainState:
    """Advance ``state`` by up to ``iterations`` optimizer steps in place."""
    V = len(prepared.vocab)
    params = list(state.params)
    best, stale = math.inf, 0
    end = state.iteration + iterations
    batches = data.make_batches(prepared.train, config.batch_size, _epoch_seed(seed, state.epoch), V)
    while state.iteration < end:
        if state.cursor >= len(batches):
            state.epoch, state.cursor = state.epoch + 1, 0
            batches = data.make_batches(prepared.train, config.batch_size, _epoch_seed(seed, state.epoch), V)
        batch = batches[state.cursor]
        state.cursor += 1
        it = state.iteration + 1
        try:
            trace = M.teacher_forced(state.params, batch)
            total, br = losses.mixed_loss(trace.decode_trace(), *lambdas, config.eps)
        except M.DegenerateGateError as err:
            raise TrainingAborted(it, None, str(err)) from err
        if not math.isfinite(br.total):
            raise TrainingAborted(it, br, "non-finite loss")
        state.optimizer.zero_grad()
        total.backward()
        norm = clip_grad_norm(params, config.clip_norm)
        state.optimizer.step()
        state.iteration = it
        state.log.append(
            {"iteration": it, "phase": phase, "mle": br.mle, "local": br.local, "global": br.global_,
             "total": br.total, "lambda_local": lambdas[0], "lambda_global": lambdas[1], "grad_norm": norm}
        )
        if prepared.val and it % config.eval_every == 0:
            v = _val_mle(state.params, prepared.val, config.batch_size, V)
            state.val_log.append({"iteration": it, "phase": phase, "val_mle": v, "val_rouge1": ""})
            log.info("iteration %d phase %d loss %.4f val_mle %.4f", it, phase, br.total, v)
            if v < best:
                best, stale = v, 0
            else:
                stale += 1
            if early_stop and config.patience and stale >= config.patience:
                state.stopped_early = True
                log.info("phase %d stopped early at iteration %d", phase, it)
                break
    return state


def _val_rouge(state: TrainState, config: TrainConfig, prepared: Prepared, phase: int, n: int = 20):
    if not prepared.val:
        return
    subset = prepared.val[:n]
    outs = decode_examples(state.params, subset, config.beam_size, prepared.max_decode_len, config.block_trigrams)
    r1 = float(np.mean([metrics.rouge_n(data.decode_ids(h.output, prepared.vocab, e.oovs), e.target, 1).f1
                        for h, e in zip(outs, subset)]))
    state.val_log.append({"iteration": state.iteration, "phase": phase, "val_mle": "", "val_rouge1": r1})


def pretrain(config: TrainConfig, prepared: Prepared, seed: int | None = None) -> TrainState:
    """Phase 1: maximum likelihood only, with early stopping on validation MLE."""
    seed = config.seed if seed is None else seed
    state = init_state(config, prepared, seed)
    run_phase(state, config, prepared, 1, config.pretrain_iters, (0.0, 0.0), seed, early_stop=True)
    _val_rouge(state, config, prepared, 1)
    return state


def finetune(state: TrainState, config: TrainConfig, prepared: Prepared, seed: int | None = None) -> TrainState:
    """Phase 2: the mixed objective, continuing from ``state`` for the full budget."""
    seed = config.seed if seed is None else seed
    lambdas = (config.lambda_local, config.lambda_global)
    run_phase(state, config, prepared, 2, config.finetune_iters, lambdas, seed, early_stop=False)
    _val_rouge(state, config, prepared, 2)
    return state


def _checkpoint_extra(config: TrainConfig, max_len: int) -> dict:
    extra = {f"train.{k}": _format_value(v) for k, v in dataclasses.asdict(config).items()}
    extra["train.resolved_max_decode_len"] = max_len
    return extra


def train(
    config: TrainConfig,
    train_pairs,
    val_pairs=(),
    out_dir=None,
    seed: int | None = None,
    phase1: TrainState | None = None,
    prepared: Prepared | None = None,
) -> TrainResult:
    """MLE pretraining then variance-loss fine-tuning.

    ``phase1`` reuses an already pretrained state (copied, so it can be shared).
    With ``out_dir`` the run writes config.echo, run.log, valid.log, timing.log,
    vocab.txt and checkpoints at the phase boundary and at the end.
    """
    seed = config.seed if seed is None else seed
    prepared = prepared or prepare(config, train_pairs, val_pairs)
    t0 = time.perf_counter()
    state = phase1.copy() if phase1 is not None else pretrain(config, prepared, seed)
    t1 = time.perf_counter()
    phase1_digest = state.params.digest()
    out = Path(out_dir) if out_dir is not None else None
    checkpoints = []
    extra = _checkpoint_extra(config.replace(seed=seed), prepared.max_decode_len)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(config.replace(seed=seed).echo() + f"resolved_max_decode_len = {prepared.max_decode_len}\n")
        prepared.vocab.save(out / "vocab.txt")
        checkpoints.append(out / "phase1.ckpt")
        M.save_checkpoint(checkpoints[-1], state.params, prepared.vocab.itos, extra)
    phase2_start = None
    if config.finetune_iters:
        phase2_start = state.params.digest()
        finetune(state, config, prepared, seed)
    t2 = time.perf_counter()
    if out is not None:
        checkpoints.append(out / "final.ckpt")
        M.save_checkpoint(checkpoints[-1], state.params, prepared.vocab.itos, extra)
        write_csv(out / "run.log", RUN_LOG_COLUMNS, state.log)
        write_csv(out / "valid.log", ("iteration", "phase", "val_mle", "val_rouge1"), state.val_log)
        # wall-clock lives apart from run.log so that run.log stays reproducible
        (out / "timing.log").write_text(f"phase,seconds\n1,{t1 - t0:.3f}\n2,{t2 - t1:.3f}\n")
    return TrainResult(
        state.params, prepared.vocab, config.replace(seed=seed), state.log, state.val_log,
        phase1_digest, phase2_start, state.stopped_early, prepared.max_decode_len, checkpoints,
    )


# -- reports -------------------------------------------------------------------------
def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def score_outputs(candidates, references, attention=None) -> dict:
    """Mean ROUGE F1, duplication rates and attention summaries over examples.

    ``attention`` is an optional list of (refined, gate) matrices per example.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        raise ValueError("nothing to score")
    row = {
        "rouge1": np.mean([metrics.rouge_n(c, r, 1).f1 for c, r in zip(candidates, references)]),
        "rouge2": np.mean([metrics.rouge_n(c, r, 2).f1 for c, r in zip(candidates, references)]),
        "rougeL": np.mean([metrics.rouge_l(c, r).f1 for c, r in zip(candidates, references)]),
    }
    for n in range(1, 5):
        row[f"dup{n}"] = np.mean([metrics.duplication_rate(c, n) for c in candidates])
    if attention:
        stats = [metrics.attention_stats(refined, gate) for refined, gate in attention]
        row["mean_local_variance"] = np.mean([s.local_variance.mean() for s in stats])
        row["mean_global_g"] = np.mean([s.gap.mean() for s in stats])
    else:
        row["mean_local_variance"] = row["mean_global_g"] = float("nan")
    return {k: float(v) for k, v in row.items()}


def decode_examples(params, examples, beam_size, max_len, block_trigrams=False) -> list[decoding.Hypothesis]:
    return [
        decoding.beam_search(decoding.ModelStepper(params, e), beam_size, max_len, block_trigrams).best
        for e in examples
    ]


@dataclass
class EvalResult:
    row: dict
    outputs: list[list[str]]
    hypotheses: list[decoding.Hypothesis]


def check_vocab(checkpoint: M.Checkpoint, vocab: Vocabulary | None) -> Vocabulary:
    ck_vocab = Vocabulary(checkpoint.vocab_tokens) if checkpoint.vocab_tokens else None
    if ck_vocab is None and vocab is None:
        raise VocabularyMismatch("checkpoint carries no vocabulary and none was given")
    if ck_vocab is not None and vocab is not None and ck_vocab != vocab:
        raise VocabularyMismatch("corpus vocabulary does not match the checkpoint vocabulary")
    vocab = vocab or ck_vocab
    if len(vocab) != checkpoint.params.config.vocab_size:
        raise VocabularyMismatch(
            f"vocabulary has {len(vocab)} entries but the model expects {checkpoint.params.config.vocab_size}"
        )
    return vocab


def default_max_len(checkpoint: M.Checkpoint, pairs) -> int:
    value = checkpoint.echo.get("train.resolved_max_decode_len")
    if value:
        return int(value)
    return max(1, math.ceil(2 * np.mean([len(t) for _, t in pairs])))


def evaluate(
    params: M.ModelParams,
    vocab: Vocabulary,
    pairs,
    beam_size: int = 4,
    max_len: int = 40,
    block_trigrams: bool = False,
    model_name: str = "model",
    split: str = "test",
    out_dir=None,
) -> EvalResult:
    """Beam-decode every example and score it against its reference.

    Writes metrics.csv and decoded.txt when ``out_dir`` is given.
    """
    examples = [data.make_example(s, t, vocab) for s, t in pairs]
    hyps = decode_examples(params, examples, beam_size, max_len, block_trigrams)
    outputs = [data.decode_ids(h.output, vocab, e.oovs) for h, e in zip(hyps, examples)]
    attention = [(np.stack([x[2] for x in h.extras]), np.stack([x[1] for x in h.extras])) for h in hyps]
    row = {"model": model_name, "split": split, **score_outputs(outputs, [e.target for e in examples], attention)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", ("model", "split") + METRIC_COLUMNS, [row])
        (out / "decoded.txt").write_text("".join(" ".join(o) + "\n" for o in outputs), encoding="utf-8")
    return EvalResult(row, outputs, hyps)


def evaluate_checkpoint(path, pairs, vocab=None, beam_size=4, max_len=None, block_trigrams=None,
                        split="test", out_dir=None) -> EvalResult:
    """``max_len`` and ``block_trigrams`` default to the values the checkpoint was trained with."""
    ck = M.load_checkpoint(path)
    vocab = check_vocab(ck, vocab)
    max_len = max_len or default_max_len(ck, pairs)
    if block_trigrams is None:
        block_trigrams = ck.echo.get("train.block_trigrams", "False") == "True"
    return evaluate(ck.params, vocab, pairs, beam_size, max_len, block_trigrams, Path(path).stem, split, out_dir)


def decode_sources(params, vocab, sources, beam_size=4, max_len=40, block_trigrams=False) -> list[list[str]]:
    outs = []
    for src in sources:
        ex = data.make_example(src, [], vocab)
        hyp = decoding.beam_search(decoding.ModelStepper(params, ex), beam_size, max_len, block_trigrams).best
        outs.append(data.decode_ids(hyp.output, vocab, ex.oovs))
    return outs


# -- attention analysis -------------------------------------------------------------------
DUMP_NAMES = ("raw", "gate", "refined", "renormed")


def write_attention_dump(path, matrices: dict[str, np.ndarray]):
    """Each matrix as a ``name T D`` header line followed by T rows."""
    lines = []
    for name in DUMP_NAMES:
        m = matrices[name]
        lines.append(f"{name} {m.shape[0]} {m.shape[1]}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in m)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_attention_dump(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out, pos = {}, 0
    while pos < len(lines):
        name, T, D = lines[pos].split()
        T, D = int(T), int(D)
        rows = [[float(x) for x in ln.split()] for ln in lines[pos + 1 : pos + 1 + T]]
        out[name] = np.array(rows, dtype=np.float64).reshape(T, D)
        pos += 1 + T
    return out


def analyze_attention(params: M.ModelParams, vocab: Vocabulary, pairs, out_dir=None) -> list[dict]:
    """Teacher-forced a_t, r_t, a_t^r and ã_t per example with summary statistics.

    With ``out_dir``, writes attention/exNNNNN.txt dumps and attention_stats.csv.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "attention").mkdir(parents=True, exist_ok=True)
    rows, V = [], len(vocab)
    for idx, (src, tgt) in enumerate(pairs):
        ex = data.make_example(src, tgt, vocab)
        with no_grad():
            tr = M.teacher_forced(params, data.collate([ex], V))
        mats = {name: getattr(tr, name).data[0] for name in DUMP_NAMES}
        if out is not None:
            write_attention_dump(out / "attention" / f"ex{idx:05d}.txt", mats)
        rows.append(stats_row(idx, mats))
    if out is not None:
        write_csv(out / "attention_stats.csv", STATS_COLUMNS, rows)
    return rows


def stats_row(idx: int, mats: dict[str, np.ndarray]) -> dict:
    st = metrics.attention_stats(mats["refined"], mats["gate"])
    g = st.gap
    return {
        "example": idx,
        "steps": mats["refined"].shape[0],
        "positions": mats["refined"].shape[1],
        "mean_local_variance": float(st.local_variance.mean()),
        "mean_gate": float(st.gate_mean.mean()),
        "mean_g": float(g.mean()),
        "max_g": float(g.max()),
        "global_variance": float(np.mean((g - np.median(g)) ** 2)),
    }


def analyze_checkpoint(path, pairs, vocab=None, out_dir=None) -> list[dict]:
    ck = M.load_checkpoint(path)
    return analyze_attention(ck.params, check_vocab(ck, vocab), pairs, out_dir)


# -- ablation --------------------------------------------------------------------------------
def ablation_variants(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    l1, l2 = config.lambda_local, config.lambda_global
    return [
        ("pgn", config.replace(refine=False, lambda_local=0.0, lambda_global=0.0)),
        ("pgn+aru", config.replace(refine=True, lambda_local=0.0, lambda_global=0.0)),
        ("pgn+aru+local", config.replace(refine=True, lambda_local=l1, lambda_global=0.0)),
        ("pgn+aru+local+global", config.replace(refine=True, lambda_local=l1, lambda_global=l2)),
    ]


def _ablation_seed(config: TrainConfig, train_pairs, val_pairs, test_pairs, seed: int, out_dir) -> list[dict]:
    rows = []
    variants = ablation_variants(config)
    prepared = prepare(config, train_pairs, val_pairs)
    # the three gated variants share an identical phase 1, so it is trained once
    shared = pretrain(variants[1][1], prepared, seed)
    for name, cfg in variants:
        run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
        res = train(cfg, train_pairs, val_pairs, run_dir, seed,
                    phase1=None if not cfg.refine else shared, prepared=prepared)
        ev = evaluate(res.params, res.vocab, test_pairs, cfg.beam_size, res.max_decode_len,
                      cfg.block_trigrams, name, "test", run_dir)
        rows.append({"variant": name, "seed": seed, **{k: ev.row[k] for k in METRIC_COLUMNS}})
    return rows


def run_ablation(config: TrainConfig, train_pairs, val_pairs, test_pairs, out_dir=None, workers: int = 1) -> list[dict]:
    """Four variants per seed plus one mean row per variant.

    Variants: baseline pointer-generator, +refinement gate, +local variance
    loss, +global variance loss. With ``workers > 1`` seeds run in parallel
    processes; results do not depend on the worker count.
    """
    jobs = [(config, train_pairs, val_pairs, test_pairs, s, out_dir) for s in config.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_seed = list(pool.map(_ablation_seed, *zip(*jobs)))
    else:
        per_seed = [_ablation_seed(*job) for job in jobs]
    rows = [r for chunk in per_seed for r in chunk]
    rows.sort(key=lambda r: ([v for v, _ in ablation_variants(config)].index(r["variant"]), r["seed"]))
    means = []
    for name, _ in ablation_variants(config):
        mine = [r for r in rows if r["variant"] == name]
        means.append({"variant": name, "seed": "mean", **{k: float(np.mean([r[k] for r in mine])) for k in METRIC_COLUMNS}})
    table = rows + means
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "ablation.csv", ("variant", "seed") + METRIC_COLUMNS, table)
    return table
