"""Training loop: joint steps with front-end skipping, data scheduling,
two-stage pre-training, evaluation, early stopping and checkpoint/resume."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..augment import wav_augment
from ..autodiff import ComplexTensor, SingularMatrixError, Tensor
from ..autodiff import tensor as T
from ..autodiff.tensor import grad
from ..config import ExperimentConfig, from_dict
from ..ctccrf import LabelLm, crf_loss, ctc_loss, error_rate, greedy_decode
from ..frontend import DegenerateStatisticsError
from ..signal.stft import Waveform
from . import checkpoint
from .data import BatchSource, SpectrumCache, Utterance, make_batches, schedule_batches
from .model import FLOWS, Model
from .optim import Adam, clip_global_norm

log = logging.getLogger(__name__)

BCE_FLOOR = 1e-7


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class StepResult:
    flow: str
    loss: float
    grad_norm: float = float("nan")
    aborted: bool = False
    error: str | None = None


@dataclass
class EpochStats:
    epoch: int
    losses: dict = field(default_factory=dict)  # flow -> mean loss over finished steps
    counts: dict = field(default_factory=dict)  # flow -> number of steps
    joint_fraction: float | None = None
    aborted: int = 0
    steps: int = 0
    dev: dict | None = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "losses": self.losses,
            "counts": self.counts,
            "joint_fraction": self.joint_fraction,
            "aborted": self.aborted,
            "steps": self.steps,
            "dev": self.dev,
        }


def ibm_targets(noisy: np.ndarray, clean: np.ndarray) -> np.ndarray:
    """Speech target 1 where |clean|^2 > |noisy - clean|^2, per (t, f, c)."""
    if noisy.shape != clean.shape:
        raise ValueError(f"clean/noisy spectra differ in shape: {clean.shape} vs {noisy.shape}")
    noise = noisy - clean
    return (np.abs(clean) ** 2 > np.abs(noise) ** 2).astype(float)


def mask_bce(m: Tensor, target: np.ndarray) -> Tensor:
    pos = T.log(T.maximum(m, BCE_FLOOR))
    neg = T.log(T.maximum(1.0 - m, BCE_FLOOR))
    return -(pos * target + neg * (1.0 - target)).mean()


def _pad_to(w: Waveform, n: int) -> Waveform:
    if w.n_samples == n:
        return w
    out = np.zeros((w.channels, n))
    out[:, : min(n, w.n_samples)] = w.samples[:, :n]
    return Waveform(out, w.sample_rate)


class Trainer:
    def __init__(self, cfg: ExperimentConfig, model: Model, seed: int | None = None):
        self.cfg = cfg
        self.model = model
        self.seed = cfg.train.seed if seed is None else int(seed)
        self.rng = np.random.default_rng([self.seed, 2])
        lr = cfg.train.lr
        if cfg.train.scheduling_mode == "separate_optimizers":
            self.opts = {"multi": Adam(lr), "single": Adam(lr)}
        else:
            self.opts = {"shared": Adam(lr)}
        self.cache = SpectrumCache(cfg.features.fft_size, cfg.features.frame_shift)
        self.epoch = 0
        self.steps = 0
        self.history: list[dict] = []
        self.failures: list[dict] = []
        self.best_dev = math.inf
        self.bad_epochs = 0
        self.meta: dict = {}  # free-form metadata carried in checkpoints (e.g. units)

    @classmethod
    def create(cls, cfg: ExperimentConfig, transcripts: Sequence[Sequence[int]] = (), seed: int | None = None) -> Trainer:
        seed = cfg.train.seed if seed is None else int(seed)
        lm = None
        if cfg.train.loss == "crf":
            lm = LabelLm.train(transcripts, cfg.am.vocab, cfg.train.lm_order, cfg.train.lm_smoothing)
        return cls(cfg, Model.create(cfg, seed, lm), seed)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.model.params

    def optimizer_for(self, source: str) -> Adam:
        if "shared" in self.opts:
            return self.opts["shared"]
        return self.opts[source]

    # -- batch preparation ------------------------------------------------
    def _spectra(self, batch: BatchSource, train: bool) -> np.ndarray:
        policy = self.cfg.augment
        if train and policy.enabled and any((policy.wav.gain_p, policy.wav.speed_p, policy.wav.noise_p)):
            base = int(self.rng.integers(2**62))
            waves = [wav_augment(u.wave, policy, np.random.default_rng([base, i])) for i, u in enumerate(batch.utts)]
            n = max(w.n_samples for w in waves)
            # speed changes alter lengths; trailing zeros keep the batch rectangular
            return np.stack([self.cache.compute(_pad_to(w, n)) for w in waves])
        return np.stack([self.cache.get(u) for u in batch.utts])

    # -- steps --------------------------------------------------------------
    def _update(self, flow: str, batch: BatchSource, opt: Adam, train_rng=None) -> StepResult:
        spec = self._spectra(batch, train=True)
        labels = [u.labels for u in batch.utts]
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                out = self.model.run_flow(flow, spec, labels, train_rng or self.rng, train=True)
                value = float(out.loss.data)
                names = sorted(out.tracked)
                grads = dict(zip(names, grad(out.loss, [out.tracked[k] for k in names])))
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalFailure("non-finite loss or gradient")
        except (NumericalFailure, DegenerateStatisticsError, SingularMatrixError, FloatingPointError) as exc:
            ids = [u.utt_id for u in batch.utts]
            self.failures.append({"epoch": self.epoch, "step": self.steps, "flow": flow, "batch": ids, "error": str(exc)})
            log.warning("step %d aborted (%s) on batch %s: %s", self.steps, flow, ids, exc)
            return StepResult(flow, float("nan"), aborted=True, error=str(exc))
        grads, norm = clip_global_norm(grads, self.cfg.train.clip_norm)
        opt.step(self.model.params, grads)
        return StepResult(flow, value, norm)

    def joint_step(self, batch: BatchSource) -> StepResult:
        """Beamformer flow with probability skip_p, otherwise one random raw channel."""
        if batch.tag != "multi":
            raise ValueError("joint_step needs a multi-channel batch")
        flow = "joint" if self.rng.random() < self.cfg.train.skip_p else "channel"
        res = self._update(flow, batch, self.optimizer_for("multi"))
        self.steps += 1
        return res

    def single_step(self, batch: BatchSource) -> StepResult:
        if batch.tag != "single":
            raise ValueError("single_step needs a mono batch")
        res = self._update("single", batch, self.optimizer_for("single"))
        self.steps += 1
        return res

    def scheduled_step(self, batch: BatchSource) -> StepResult:
        return self.joint_step(batch) if batch.tag == "multi" else self.single_step(batch)

    # -- epochs -------------------------------------------------------------
    def _batches(self, utts: Sequence[Utterance], tag: str) -> list[BatchSource]:
        return make_batches(utts, self.cfg.train.batch_size, self.rng, tag)

    def train_epoch(self, multi: Sequence[Utterance], single: Sequence[Utterance] = ()) -> EpochStats:
        self.epoch += 1
        if self.cfg.train.scheduling_mode == "none":
            single = ()
        mb = self._batches(multi, "multi")
        sb = self._batches(single, "single")
        results = [self.scheduled_step(b) for b in schedule_batches(mb, sb, self.rng)]
        return self._summarize(results)

    def _summarize(self, results: list[StepResult]) -> EpochStats:
        stats = EpochStats(self.epoch, steps=len(results))
        for flow in FLOWS:
            mine = [r for r in results if r.flow == flow]
            done = [r.loss for r in mine if not r.aborted]
            stats.counts[flow] = len(mine)
            stats.losses[flow] = float(np.mean(done)) if done else None
        stats.aborted = sum(r.aborted for r in results)
        multi_steps = stats.counts["joint"] + stats.counts["channel"]
        stats.joint_fraction = stats.counts["joint"] / multi_steps if multi_steps else None
        return stats

    def _eval_batches(self, utts: Sequence[Utterance]):
        """Deterministic inference batches: (chunk, log-probs) with no dropout or augmentation."""
        groups: dict[tuple[int, int], list[Utterance]] = {}
        for u in utts:
            groups.setdefault((u.wave.n_samples, u.channels), []).append(u)
        bsz = self.cfg.train.batch_size
        consts = self.model._tensors([])
        for key in sorted(groups):
            members = groups[key]
            flow = "joint" if key[1] > 1 else "single"
            for i in range(0, len(members), bsz):
                chunk = members[i : i + bsz]
                spec = np.stack([self.cache.get(u) for u in chunk])
                yield chunk, self.model.log_probs(flow, spec, consts)

    def evaluate_hyps(self, utts: Sequence[Utterance]) -> dict[str, list[int]]:
        return {u.utt_id: greedy_decode(lp) for chunk, logp in self._eval_batches(utts) for u, lp in zip(chunk, logp.data)}

    def evaluate(self, dev: Sequence[Utterance], with_hyps: bool = False) -> dict:
        """Joint flow without skipping, augmentation or dropout; greedy decoding."""
        if not dev:
            return {"loss": None, "token_error_rate": None, "n_utts": 0}
        losses, hyps, refs, ids = [], [], [], []
        for chunk, logp in self._eval_batches(dev):
            losses.extend(self._per_utt_loss(logp, [u.labels for u in chunk]))
            for u, lp in zip(chunk, logp.data):
                hyps.append(greedy_decode(lp))
                refs.append(list(u.labels))
                ids.append(u.utt_id)
        stats = error_rate(hyps, refs)
        report = {"loss": float(np.mean(losses)), "token_error_rate": stats.rate, "n_utts": len(dev)}
        if with_hyps:
            report["hyps"] = dict(zip(ids, hyps))
        return report

    def _per_utt_loss(self, logp: Tensor, labels: list[list[int]]) -> list[float]:
        m = self.model
        if m.cfg.train.loss == "ctc":
            return list(ctc_loss(logp, labels, reduction="none").data)
        return list(crf_loss(logp, labels, m.lm, m.den, reduction="none").data)

    def fit(
        self,
        multi: Sequence[Utterance],
        single: Sequence[Utterance] = (),
        dev: Sequence[Utterance] = (),
        epochs: int | None = None,
        ckpt_dir: str | Path | None = None,
    ) -> list[dict]:
        """Train up to ``epochs`` (total, counting epochs already done); early stop on dev loss."""
        total = self.cfg.train.epochs if epochs is None else epochs
        patience = self.cfg.train.early_stop
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        while self.epoch < total:
            if dev and patience > 0 and self.bad_epochs >= patience:
                break
            stats = self.train_epoch(multi, single)
            if dev:
                stats.dev = self.evaluate(dev)
                loss = stats.dev["loss"]
                if loss < self.best_dev:
                    self.best_dev, self.bad_epochs = loss, 0
                else:
                    self.bad_epochs += 1
            self.history.append(stats.as_dict())
            if ckpt_dir is not None:
                self.save(Path(ckpt_dir) / f"epoch{self.epoch:03d}.ckpt")
        return self.history

    # -- pre-training stages --------------------------------------------------
    def pretrain_backend(self, single: Sequence[Utterance], epochs: int, ckpt_dir: str | Path | None = None) -> list[dict]:
        """Stage one: AM on mono data only; the front-end is never touched."""
        if any(u.channels != 1 for u in single):
            raise ValueError("back-end pre-training expects mono utterances")
        out = []
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        for _ in range(epochs):
            self.epoch += 1
            results = [self.single_step(b) for b in self._batches(single, "single")]
            stats = self._summarize(results).as_dict()
            stats["stage"] = "backend"
            self.history.append(stats)
            out.append(stats)
            if ckpt_dir is not None:
                self.save(Path(ckpt_dir) / f"backend{self.epoch:03d}.ckpt")
        return out

    def frontend_bce(self, utts: Sequence[Utterance], train: bool = False, tensors=None):
        """Mean BCE of the speech and noise masks against ideal binary masks."""
        total = 0.0
        for u in utts:
            noisy, clean = self._parallel(u)
            x = noisy[None]
            target = ibm_targets(noisy, clean)[None]
            masks = self.model.masks(ComplexTensor.from_numpy(x), tensors, self.rng if train else None, train)
            loss = mask_bce(masks.speech, target) + mask_bce(masks.noise, 1.0 - target)
            total = loss if isinstance(total, float) else total + loss
        return total / float(len(utts))

    def _parallel(self, u: Utterance) -> tuple[np.ndarray, np.ndarray]:
        if u.clean is None:
            raise ValueError(f"{u.utt_id}: front-end pre-training needs a clean reference")
        clean = u.clean.samples
        if clean.shape[-1] != u.wave.n_samples:
            raise ValueError(f"{u.utt_id}: clean has {clean.shape[-1]} samples, noisy has {u.wave.n_samples}")
        if clean.shape[0] == 1 and u.channels > 1:
            clean = np.repeat(clean, u.channels, axis=0)
        elif clean.shape[0] != u.channels:
            raise ValueError(f"{u.utt_id}: clean has {clean.shape[0]} channels, noisy has {u.channels}")
        return self.cache.get(u), self.cache.compute(Waveform(clean, u.wave.sample_rate))

    def pretrain_frontend(self, parallel: Sequence[Utterance], epochs: int) -> list[dict]:
        """Mask networks trained on (noisy, clean) pairs with IBM targets."""
        out = []
        names = self.model.frontend_names
        opt = self.optimizer_for("multi")
        bsz = self.cfg.train.batch_size
        for _ in range(epochs):
            self.epoch += 1
            order = self.rng.permutation(len(parallel))
            values = []
            for i in range(0, len(order), bsz):
                chunk = [parallel[j] for j in order[i : i + bsz]]
                tensors = self.model._tensors(names)
                loss = self.frontend_bce(chunk, train=True, tensors=tensors)
                g = dict(zip(names, grad(loss, [tensors[k] for k in names])))
                g, _ = clip_global_norm(g, self.cfg.train.clip_norm)
                opt.step(self.model.params, g)
                self.steps += 1
                values.append(float(loss.data))
            stats = {"epoch": self.epoch, "stage": "frontend", "losses": {"bce": float(np.mean(values))}, "steps": len(values)}
            self.history.append(stats)
            out.append(stats)
        return out

    # -- persistence ---------------------------------------------------------------
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"param/{k}": v for k, v in self.model.params.items()}
        opt_meta = {}
        for name, opt in self.opts.items():
            opt_meta[name] = opt.state()
            arrays.update({f"opt/{name}/m/{k}": v for k, v in opt.m.items()})
            arrays.update({f"opt/{name}/v/{k}": v for k, v in opt.v.items()})
        lm = self.model.lm
        if lm is not None:
            arrays["lm/table"] = lm.table
        meta = {
            "kind": "trainer",
            "config": _jsonable(self.cfg.to_dict()),
            "seed": self.seed,
            "epoch": self.epoch,
            "steps": self.steps,
            "optimizers": opt_meta,
            "rng": self.rng.bit_generator.state,
            "history": _jsonable(self.history),
            "failures": self.failures,
            "early_stop": {"best": None if math.isinf(self.best_dev) else self.best_dev, "bad_epochs": self.bad_epochs},
            "lm": None if lm is None else {"order": lm.order, "vocab": lm.vocab},
            "meta": self.meta,
        }
        return meta, arrays

    def save(self, path: str | Path) -> None:
        meta, arrays = self.state()
        checkpoint.save(path, meta, arrays)

    @classmethod
    def restore(cls, path: str | Path) -> Trainer:
        meta, arrays = checkpoint.load(path)
        if meta.get("kind") != "trainer":
            raise checkpoint.CheckpointError(f"{path}: not a trainer checkpoint")
        cfg = from_dict(meta["config"])
        params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
        lm = None
        if meta["lm"] is not None:
            lm = LabelLm(meta["lm"]["order"], meta["lm"]["vocab"], arrays["lm/table"])
        tr = cls(cfg, Model(cfg, params, lm), meta["seed"])
        for name, st in meta["optimizers"].items():
            m = {k.split("/", 3)[3]: v for k, v in arrays.items() if k.startswith(f"opt/{name}/m/")}
            v = {k.split("/", 3)[3]: a for k, a in arrays.items() if k.startswith(f"opt/{name}/v/")}
            tr.opts[name].load(st, m, v)
        tr.rng.bit_generator.state = meta["rng"]
        tr.epoch, tr.steps = meta["epoch"], meta["steps"]
        tr.history, tr.failures = meta["history"], meta["failures"]
        best = meta["early_stop"]["best"]
        tr.best_dev = math.inf if best is None else best
        tr.bad_epochs = meta["early_stop"]["bad_epochs"]
        tr.meta = meta.get("meta", {})
        return tr


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x
