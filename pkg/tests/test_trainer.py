import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcbeam.autodiff import Tensor
from mcbeam.signal.stft import Waveform
from mcbeam.trainer import (
    Adam,
    BatchSource,
    CheckpointError,
    SpectrumCache,
    StepResult,
    Trainer,
    Utterance,
    clip_global_norm,
    global_norm,
    ibm_targets,
    make_batches,
    mask_bce,
    schedule_batches,
)
from mcbeam.trainer import checkpoint
from toydata import multi, short_multi, short_single, single, toy_cfg


class RecordingAdam(Adam):
    """Adam that keeps a copy of every gradient dict it applies."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.seen = []

    def step(self, params, grads):
        self.seen.append({k: np.array(g) for k, g in grads.items()})
        super().step(params, grads)


def _trainer(seed=0, utts=None, **train):
    utts = short_multi() if utts is None else utts
    cfg = toy_cfg(batch_size=4, **train)
    return Trainer.create(cfg, [u.labels for u in list(utts) + list(short_single())], seed=seed)


def _digest(params, names):
    h = hashlib.sha256()
    for k in names:
        h.update(params[k].tobytes())
    return h.hexdigest()


def _record(tr):
    for name, opt in list(tr.opts.items()):
        rec = RecordingAdam(opt.lr)
        tr.opts[name] = rec
    return tr


def _multi_batches(tr, utts=None):
    return make_batches(list(short_multi() if utts is None else utts), 4, np.random.default_rng(0), "multi")


def _single_batches(tr):
    return make_batches(list(short_single()), 4, np.random.default_rng(1), "single")


# -- optimizer ---------------------------------------------------------------
def test_adam_matches_hand_computation():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    opt = Adam(lr, b1, b2, eps)
    params = {"x": np.array([1.0])}
    opt.step(params, {"x": np.array([0.5])})
    # first step: bias-corrected moments are g and g^2
    x1 = 1.0 - lr * 0.5 / (0.5 + eps)
    assert params["x"][0] == pytest.approx(x1, abs=1e-15)
    opt.step(params, {"x": np.array([-0.2])})
    m = b1 * (1 - b1) * 0.5 + (1 - b1) * -0.2
    v = b2 * (1 - b2) * 0.25 + (1 - b2) * 0.04
    x2 = x1 - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
    assert params["x"][0] == pytest.approx(x2, abs=1e-15)
    assert opt.steps == 2


def test_adam_touches_only_given_names():
    opt = Adam(0.1)
    params = {"a": np.ones(2), "b": np.ones(2)}
    opt.step(params, {"a": np.ones(2)})
    np.testing.assert_array_equal(params["b"], np.ones(2))
    assert set(opt.m) == {"a"}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_clipping_bounds_global_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=3) * 10, "b": rng.normal(size=(2, 2))}
    clipped, pre = clip_global_norm(grads, max_norm)
    assert pre == pytest.approx(global_norm(grads))
    assert global_norm(clipped) <= max_norm + 1e-9
    if pre <= max_norm:
        assert clipped is grads


def test_clipping_disabled():
    grads = {"a": np.full(4, 100.0)}
    out, norm = clip_global_norm(grads, None)
    assert out is grads and norm == pytest.approx(200.0)


# -- data ------------------------------------------------------------------------
def _dummy(i, channels=2, n=4):
    return Utterance(f"u{i}", Waveform(np.zeros((channels, n)), 8000), [1])


def _sources(n, tag):
    ch = 2 if tag == "multi" else 1
    return [BatchSource(tag, [_dummy(f"{tag}{i}", ch)], i) for i in range(n)]


def test_batch_source_validation():
    with pytest.raises(ValueError):
        BatchSource("single", [_dummy(0, 2)])
    with pytest.raises(ValueError):
        BatchSource("multi", [_dummy(0, 1)])
    with pytest.raises(ValueError):
        BatchSource("other", [_dummy(0, 1)])


def test_make_batches_buckets_and_covers():
    utts = [_dummy(i, n=4 + i % 3) for i in range(20)]
    batches = make_batches(utts, 3, np.random.default_rng(0), "multi")
    seen = [u.utt_id for b in batches for u in b.utts]
    assert sorted(seen) == sorted(u.utt_id for u in utts)
    for b in batches:
        assert len(b.utts) <= 3
        assert len({u.wave.n_samples for u in b.utts}) == 1
    assert make_batches([], 3, np.random.default_rng(0), "multi") == []


def test_schedule_empty_single_is_all_multi():
    out = list(schedule_batches(_sources(7, "multi"), [], np.random.default_rng(0)))
    assert [b.tag for b in out] == ["multi"] * 7


def test_schedule_covers_each_batch_once():
    m, s = _sources(13, "multi"), _sources(5, "single")
    out = list(schedule_batches(m, s, np.random.default_rng(3)))
    assert len(out) == 18
    assert [b for b in out if b.tag == "multi"] == m
    assert [b for b in out if b.tag == "single"] == s


def test_schedule_balanced_sets_fraction():
    m, s = _sources(100, "multi"), _sources(100, "single")
    # fraction among the first half of the epoch, where it is random
    out = list(schedule_batches(m, s, np.random.default_rng(5)))[:100]
    frac = np.mean([b.tag == "multi" for b in out])
    sigma = np.sqrt(0.25 / 100)
    assert abs(frac - 0.5) <= 3 * sigma


def test_spectrum_cache():
    u = short_multi()[0]
    cache = SpectrumCache(128, 64)
    a = cache.get(u)
    assert cache.get(u) is a
    np.testing.assert_array_equal(a, cache.compute(u.wave))
    assert a.shape[-1] == 2


def test_spectrum_cache_reused_id_recomputes():
    u, v = short_multi()[0], short_multi(8, 5)[0]
    twin = dataclasses.replace(v, utt_id=u.utt_id)
    cache = SpectrumCache(128, 64)
    cache.get(u)
    np.testing.assert_array_equal(cache.get(twin), cache.compute(v.wave))


# -- steps and flows -----------------------------------------------------------------
def test_skip_one_always_updates_frontend():
    tr = _record(_trainer(skip_p=1.0))
    fe = tr.model.frontend_names
    for b in _multi_batches(tr):
        assert tr.joint_step(b).flow == "joint"
    for grads in tr.opts["shared"].seen:
        assert all(k in grads for k in fe)
        assert all(np.any(grads[k] != 0) for k in fe)


def test_skip_zero_never_touches_frontend():
    tr = _record(_trainer(skip_p=0.0))
    fe = tr.model.frontend_names
    before = _digest(tr.params, fe)
    for b in _multi_batches(tr) * 2:
        assert tr.joint_step(b).flow == "channel"
    assert _digest(tr.params, fe) == before
    assert not any(k in g for g in tr.opts["shared"].seen for k in fe)


def test_flow_choice_follows_one_draw_per_step(monkeypatch):
    tr = _trainer(skip_p=0.3)
    monkeypatch.setattr(tr, "_update", lambda flow, batch, opt: StepResult(flow, 0.0))
    replay = np.random.default_rng()
    replay.bit_generator.state = tr.rng.bit_generator.state
    batch = _multi_batches(tr)[0]
    flows = [tr.joint_step(batch).flow for _ in range(200)]
    assert flows == ["joint" if replay.random() < 0.3 else "channel" for _ in range(200)]
    assert tr.steps == 200


def test_step_rejects_wrong_source():
    tr = _trainer()
    with pytest.raises(ValueError):
        tr.joint_step(_single_batches(tr)[0])
    with pytest.raises(ValueError):
        tr.single_step(_multi_batches(tr)[0])


def test_in_loop_clipping():
    tr = _record(_trainer(clip_norm=1e-3, skip_p=0.5))
    for b in _multi_batches(tr):
        res = tr.joint_step(b)
        assert res.grad_norm > 1e-3
    for grads in tr.opts["shared"].seen:
        assert global_norm(grads) <= 1e-3 + 1e-9


def test_shared_counter_counts_every_batch():
    tr = _trainer(scheduling_mode="shared_optimizer")
    mb, sb = _multi_batches(tr), _single_batches(tr)
    for b in schedule_batches(mb, sb, np.random.default_rng(0)):
        tr.scheduled_step(b)
    assert tr.opts["shared"].steps == len(mb) + len(sb)


def test_separate_counters_follow_sources():
    tr = _trainer(scheduling_mode="separate_optimizers")
    mb, sb = _multi_batches(tr), _single_batches(tr)
    for b in schedule_batches(mb, sb, np.random.default_rng(0)):
        tr.scheduled_step(b)
    assert tr.opts["single"].steps == len(sb)
    assert tr.opts["multi"].steps == len(mb)


def test_separate_single_step_isolates_multi_state():
    tr = _trainer(scheduling_mode="separate_optimizers", skip_p=1.0)
    tr.scheduled_step(_multi_batches(tr)[0])
    multi = tr.opts["multi"]
    snap = (multi.steps, {k: v.copy() for k, v in multi.m.items()}, {k: v.copy() for k, v in multi.v.items()})
    fe = _digest(tr.params, tr.model.frontend_names)
    tr.scheduled_step(_single_batches(tr)[0])
    assert multi.steps == snap[0]
    for k in snap[1]:
        np.testing.assert_array_equal(multi.m[k], snap[1][k])
        np.testing.assert_array_equal(multi.v[k], snap[2][k])
    assert _digest(tr.params, tr.model.frontend_names) == fe


def _run_sequence(mode):
    tr = _trainer(scheduling_mode=mode, skip_p=0.5)
    m, s = _multi_batches(tr), _single_batches(tr)
    snaps = []
    for b in [m[0], s[0], m[1]]:
        tr.scheduled_step(b)
        snaps.append({k: v.copy() for k, v in tr.params.items()})
    return snaps


def test_modes_diverge_but_each_is_reproducible():
    shared, shared2 = _run_sequence("shared_optimizer"), _run_sequence("shared_optimizer")
    sep, sep2 = _run_sequence("separate_optimizers"), _run_sequence("separate_optimizers")
    for a, b in [(shared, shared2), (sep, sep2)]:
        for x, y in zip(a, b):
            assert all(np.array_equal(x[k], y[k]) for k in x)
    # the first update is identical (both optimizers are fresh), the trajectories split afterwards
    assert all(np.array_equal(shared[0][k], sep[0][k]) for k in shared[0])
    assert any(not np.array_equal(shared[2][k], sep[2][k]) for k in shared[2])


def test_nan_step_is_aborted_and_reported():
    tr = _trainer()
    tr.params["am.out.b"] = np.full_like(tr.params["am.out.b"], np.nan)
    before = {k: v.copy() for k, v in tr.params.items()}
    batches = _multi_batches(tr)
    res = tr.joint_step(batches[0])
    assert res.aborted and res.error
    assert tr.failures[-1]["batch"] == [u.utt_id for u in batches[0].utts]
    for k, v in before.items():
        np.testing.assert_array_equal(tr.params[k], v)
    stats = tr.train_epoch(list(short_multi()))
    assert stats.aborted == stats.steps


def test_mode_none_ignores_single_data():
    tr = _trainer(scheduling_mode="none")
    stats = tr.train_epoch(list(short_multi()), list(short_single()))
    assert stats.counts["single"] == 0
    assert stats.counts["joint"] + stats.counts["channel"] == 2


def test_wav_augmentation_changes_inputs_reproducibly():
    base = toy_cfg(batch_size=4)
    policy = dataclasses.replace(base.augment, wav=dataclasses.replace(base.augment.wav, gain_p=1.0, speed_p=1.0))
    cfg = dataclasses.replace(base, augment=policy)
    batch = _multi_batches(None)[0]
    runs = []
    for _ in range(2):
        tr = Trainer.create(cfg, [u.labels for u in short_multi()], seed=1)
        runs.append(tr._spectra(batch, train=True))
    np.testing.assert_array_equal(runs[0], runs[1])
    plain = np.stack([SpectrumCache(128, 64).get(u) for u in batch.utts])
    assert runs[0].shape != plain.shape or not np.allclose(runs[0], plain)


# -- pre-training -----------------------------------------------------------------------
def test_pretrain_backend_decreases_loss_and_keeps_frontend(tmp_path):
    tr = _trainer(lr=1e-3)
    fe = _digest(tr.params, tr.model.frontend_names)
    hist = tr.pretrain_backend(list(short_single(16)), epochs=5, ckpt_dir=tmp_path)
    losses = [h["losses"]["single"] for h in hist]
    assert all(b < a for a, b in zip(losses[:-1], losses[1:])), losses
    assert _digest(tr.params, tr.model.frontend_names) == fe
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"backend{i:03d}.ckpt" for i in range(1, 6)]
    with pytest.raises(ValueError):
        tr.pretrain_backend(list(short_multi()), epochs=1)


CONVERGED_TER = 0.1


def _epochs_to_converge(tr, train, dev, limit):
    """Joint epochs until dev TER first reaches CONVERGED_TER (inf if never within limit)."""
    for n in range(1, limit + 1):
        tr.fit(train, (), dev, tr.epoch + 1)
        if tr.history[-1]["dev"]["token_error_rate"] <= CONVERGED_TER:
            return n
    return np.inf


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backend_pretraining_speeds_up_joint_training(seed):
    # paired runs: same seed, corpus and init; only stage one differs
    utts = list(multi(200, 100 + seed))
    train, dev = utts[:160], utts[160:]
    cfg = toy_cfg(early_stop=0, seed=seed)
    runs = {}
    for name in ("scratch", "pretrained"):
        tr = Trainer.create(cfg, [u.labels for u in train], seed=seed)
        if name == "pretrained":
            tr.pretrain_backend(list(single(160, 500 + seed)), epochs=5)
        runs[name] = _epochs_to_converge(tr, train, dev, limit=10)
    assert runs["pretrained"] < runs["scratch"], runs


def test_ibm_examples():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3, 2)) + 1j * rng.normal(size=(4, 3, 2))
    np.testing.assert_array_equal(ibm_targets(z, z), 1.0)
    np.testing.assert_array_equal(ibm_targets(z, np.zeros_like(z)), 0.0)
    with pytest.raises(ValueError):
        ibm_targets(z, z[:3])


def test_mask_bce_values():
    m = Tensor(np.full((2, 3), 0.5))
    assert mask_bce(m, np.ones((2, 3))).item() == pytest.approx(np.log(2))
    assert mask_bce(Tensor(np.ones(4)), np.ones(4)).item() == pytest.approx(0.0, abs=1e-6)
    assert np.isfinite(mask_bce(Tensor(np.zeros(4)), np.ones(4)).item())


def test_pretrain_frontend_beats_constant_mask():
    train, held = list(short_multi(24, 3)), list(short_multi(8, 4))
    tr = _trainer(lr=1e-2, utts=train)
    be = _digest(tr.params, tr.model.backend_names)
    tr.pretrain_frontend(train, epochs=8)
    bce = tr.frontend_bce(held).item()
    assert bce < 2 * np.log(2)
    assert _digest(tr.params, tr.model.backend_names) == be


def test_pretrain_frontend_length_mismatch():
    u = short_multi()[0]
    bad = dataclasses.replace(u, utt_id="bad", clean=Waveform(u.clean.samples[:, :-10], u.wave.sample_rate))
    tr = _trainer()
    with pytest.raises(ValueError):
        tr.pretrain_frontend([bad], epochs=1)
    with pytest.raises(ValueError):
        tr.pretrain_frontend([dataclasses.replace(u, utt_id="noclean", clean=None)], epochs=1)


# -- evaluation -------------------------------------------------------------------------
def test_random_model_error_bounded():
    tr = _trainer()
    rep = tr.evaluate(list(short_multi(8, 5)))
    assert 0.0 <= rep["token_error_rate"] <= 1.5
    assert np.isfinite(rep["loss"]) and rep["n_utts"] == 8
    assert tr.evaluate([])["token_error_rate"] is None


def test_perfect_model_scores_zero():
    tr = _trainer()
    dev = list(short_multi(6, 6))
    vocab = tr.cfg.am.vocab
    by_spec = {tr.cache.get(u).tobytes(): u.labels for u in dev}

    def oracle_log_probs(flow, spec, tensors, rng=None, train=False):
        out = []
        for s in spec:
            labels = by_spec[s.tobytes()]
            frames = (s.shape[0] + 2) // 3
            path = np.zeros(frames, dtype=int)
            path[: 2 * len(labels) : 2] = labels
            out.append(np.log(np.eye(vocab)[path] * (1 - 1e-6 * vocab) + 1e-6))
        return Tensor(np.stack(out))

    tr.model.log_probs = oracle_log_probs
    rep = tr.evaluate(dev, with_hyps=True)
    assert rep["token_error_rate"] == 0.0
    assert rep["hyps"] == {u.utt_id: u.labels for u in dev}


# -- checkpoints ----------------------------------------------------------------------
def test_checkpoint_layout():
    buf = checkpoint.dumps({"kind": "x", "n": 3}, {"b": np.arange(3.0), "a": np.eye(2)})
    assert buf[:8] == b"MCBCKPT\0"
    version, reserved, hlen = np.frombuffer(buf[8:12], "<u4")[0], np.frombuffer(buf[12:16], "<u4")[0], np.frombuffer(buf[16:24], "<u8")[0]
    assert (version, reserved) == (1, 0)
    payload = 24 + int(hlen) + (-(24 + int(hlen))) % 8
    assert payload % 8 == 0
    np.testing.assert_array_equal(np.frombuffer(buf[payload : payload + 32], "<f8"), np.eye(2).ravel())
    np.testing.assert_array_equal(np.frombuffer(buf[payload + 32 :], "<f8"), np.arange(3.0))
    meta, arrays = checkpoint.loads(buf)
    assert meta == {"kind": "x", "n": 3}
    np.testing.assert_array_equal(arrays["a"], np.eye(2))


def test_checkpoint_corruption():
    good = checkpoint.dumps({"k": 1}, {"a": np.ones(4)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(b"NOTACKPT" + good[8:])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:8] + (2).to_bytes(4, "little") + good[12:])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:-8])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:10])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:24] + b"[" + good[25:])
    with pytest.raises(CheckpointError):
        checkpoint.loads(good[:16] + (10**6).to_bytes(8, "little") + good[24:])
    with pytest.raises(CheckpointError):
        checkpoint.dumps({"arrays": 1}, {})


def test_trainer_state_round_trip(tmp_path):
    tr = _trainer(scheduling_mode="separate_optimizers")
    tr.fit(list(short_multi()), list(short_single()), epochs=1)
    tr.meta["units"] = ["<blk>", "a"]
    path = tmp_path / "t.ckpt"
    tr.save(path)
    back = Trainer.restore(path)
    assert back.epoch == 1 and back.steps == tr.steps and back.meta == tr.meta
    for k, v in tr.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    for name in tr.opts:
        assert back.opts[name].steps == tr.opts[name].steps
        for k in tr.opts[name].m:
            np.testing.assert_array_equal(back.opts[name].m[k], tr.opts[name].m[k])
    assert back.rng.random() == tr.rng.random()
    back2 = tmp_path / "u.ckpt"
    Trainer.restore(path).save(back2)
    assert back2.read_bytes() == path.read_bytes()
    checkpoint.save(tmp_path / "other.ckpt", {"kind": "tensors"}, {})
    with pytest.raises(CheckpointError):
        Trainer.restore(tmp_path / "other.ckpt")


def test_resume_matches_uninterrupted(tmp_path):
    multi, single = list(short_multi()), list(short_single())
    full = _trainer(seed=4)
    full.fit(multi, single, epochs=2, ckpt_dir=tmp_path / "full")
    part = _trainer(seed=4)
    part.fit(multi, single, epochs=1, ckpt_dir=tmp_path / "part")
    resumed = Trainer.restore(tmp_path / "part" / "epoch001.ckpt")
    resumed.fit(multi, single, epochs=2, ckpt_dir=tmp_path / "part")
    assert (tmp_path / "part" / "epoch002.ckpt").read_bytes() == (tmp_path / "full" / "epoch002.ckpt").read_bytes()


def test_early_stopping_patience():
    tr = _trainer(early_stop=1, lr=0.0)
    tr.fit(list(short_multi()), dev=list(short_multi(4, 9)), epochs=6)
    # zero learning rate: dev loss never improves after the first epoch
    assert len(tr.history) == 2
