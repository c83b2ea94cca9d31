"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary."""

import math
import time

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

import conftest
from conftest import central_difference, relative_error, tiny_cfm_cfg, tiny_s2tt_cfg, tiny_tts_cfg
from twopass_s2st.audio import TARGET_MEL, Waveform, log_mel
from twopass_s2st.config import load_config
from twopass_s2st.corpus import ingest, make_synthetic_corpus
from twopass_s2st.metrics import CorpusOracleTranscriber, asr_bleu, corpus_bleu, normalize
from twopass_s2st.pipeline import Pipeline, speech_to_text, translate_end_to_end
from twopass_s2st.s2tt import AdaptedFeatures, S2TTModel, SpeechAdapter, s2tt_logits, s2tt_loss
from twopass_s2st.speech_tokens import Codebook, SpeechTokenSequence, detokenize, tokenize
from twopass_s2st.synth import (
    ChunkExample, SpeakerEmbedding, SynthesisSettings, VelocityNet, cfm_generate_chunk, cfm_train_step,
    flow_matching_loss, interpolate, stream_synthesize, synthesize,
)
from twopass_s2st.text import EOS, TextSequence
from twopass_s2st.training import chunk_examples, train
from twopass_s2st.tts_lm import TtsExample, TtsTokenLM, tts_loss


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title} | {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _unit(dim, seed):
    v = np.random.default_rng(seed).normal(size=dim)
    return SpeakerEmbedding(v / np.linalg.norm(v))


# 1 ------------------------------------------------------------------------


def test_criterion_1_adapter():
    t0 = time.perf_counter()
    ad = SpeechAdapter(1, 1, hidden=1, stack_factor=1).double()
    with torch.no_grad():
        for layer in ad.layers:
            layer.weight.fill_(1.0)
            layer.bias.zero_()
    out = ad(torch.tensor([[[-1.0]]], dtype=torch.float64)).item()
    expected = -1.0
    for _ in range(4):
        expected = 0.1 * expected if expected < 0 else expected
    trace_ok = out == expected and abs(out + 0.0001) < 1e-18

    torch.manual_seed(0)
    model = S2TTModel(tiny_s2tt_cfg(), n_mels=6).double()
    params = list(model.adapter.parameters())
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        for p in params:
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    mels = torch.randn(2, 12, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    lens, targets = torch.tensor([12, 9]), [[4, 5, 6, EOS], [7, EOS]]

    def f():
        return model.batch_loss(mels, lens, targets)

    model.zero_grad()
    f().backward()
    err = relative_error([p.grad.clone() for p in params], central_difference(f, params))
    elapsed = time.perf_counter() - t0
    record(1, "adapter hand trace and gradient check", trace_ok and err < 1e-4 and elapsed < 60,
           f"H4(-1) = {out!r}, grad rel. err {err:.2e} over {sum(p.numel() for p in params)} params, {elapsed:.1f}s")


# 2 ------------------------------------------------------------------------


def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(100):
        torch.manual_seed(k)
        s2tt = S2TTModel(tiny_s2tt_cfg(), n_mels=6).double()
        a = AdaptedFeatures(torch.randn(int(rng.integers(1, 5)), 8, dtype=torch.float64))
        ids = rng.integers(0, 12, size=int(rng.integers(1, 8))).tolist()
        logits = s2tt_logits(a, TextSequence(ids), s2tt)[0].detach().numpy()
        oracle = -sum(logits[i, t] - logsumexp(logits[i]) for i, t in enumerate(ids))
        worst = max(worst, abs(s2tt_loss(a, TextSequence(ids), s2tt).item() - oracle))

        tts = TtsTokenLM(tiny_tts_cfg(), 64, 12).double()
        text = rng.integers(3, 12, size=int(rng.integers(1, 6))).tolist()
        speech = rng.integers(0, 64, size=int(rng.integers(0, 10))).tolist() + [64]
        logits = tts.logits([text], [speech])[0].detach().numpy()
        oracle = -sum(logits[i, y] - logsumexp(logits[i]) for i, y in enumerate(speech))
        worst = max(worst, abs(tts_loss(TtsExample(TextSequence(text), SpeechTokenSequence(speech)), tts).item()
                               - oracle))

    s2tt = S2TTModel(tiny_s2tt_cfg(text_vocab_size=50), n_mels=6).double()
    tts = TtsTokenLM(tiny_tts_cfg(), 64, 12).double()
    with torch.no_grad():
        for head in (s2tt.lm.head, tts.lm.head):
            head.weight.zero_()
            head.bias.zero_()
    a = AdaptedFeatures(torch.randn(3, 8, dtype=torch.float64))
    u1 = abs(s2tt_loss(a, TextSequence([7]), s2tt).item() - math.log(50))
    u2 = abs(tts_loss(TtsExample(TextSequence([4, EOS]), SpeechTokenSequence([64])), tts).item() - math.log(65))
    record(2, "loss oracles", worst < 1e-6 and u1 < 1e-9 and u2 < 1e-9,
           f"max |loss - oracle| {worst:.1e} on 2x100 instances; uniform |ln50 err| {u1:.1e}, |ln65 err| {u2:.1e}")


# 3 ------------------------------------------------------------------------


def test_criterion_3_causality():
    t0 = time.perf_counter()
    violations = 0
    checks = 0
    torch.manual_seed(0)
    s2tt = S2TTModel(tiny_s2tt_cfg(), n_mels=6).double()
    tts = TtsTokenLM(tiny_tts_cfg(), 16, 12).double()
    rng = np.random.default_rng(0)
    for trial in range(10):
        a = AdaptedFeatures(torch.randn(3, 8, dtype=torch.float64))
        base = rng.integers(3, 12, size=7).tolist()
        for j in range(len(base)):
            edit = list(base)
            edit[j] = 3 + (edit[j] - 2) % 9
            la = s2tt_logits(a, TextSequence(base), s2tt)[0]
            lb = s2tt_logits(a, TextSequence(edit), s2tt)[0]
            violations += not torch.equal(la[: j + 1], lb[: j + 1])
            checks += 1
        text = rng.integers(3, 12, size=4).tolist()
        speech = rng.integers(0, 16, size=8).tolist() + [16]
        for j in range(len(speech) - 1):
            edit = list(speech)
            edit[j] = (edit[j] + 1) % 16
            la, lb = tts.logits([text], [speech])[0], tts.logits([text], [edit])[0]
            violations += not torch.equal(la[: j + 1], lb[: j + 1])
            checks += 1

    torch.manual_seed(1)
    net = VelocityNet(tiny_cfm_cfg(), 80, 16, 2)
    settings = SynthesisSettings(chunk_size=4, ode_steps=2, context_frames=6, griffin_lim_iterations=2)
    ids = rng.integers(0, 16, size=16).tolist()
    ref = synthesize(SpeechTokenSequence(ids), _unit(4, 0), net, settings)
    for j in range(1, 4):
        for pos in range(j * 4, 16):
            edit = list(ids)
            edit[pos] = (edit[pos] + 3) % 16
            out = synthesize(SpeechTokenSequence(edit), _unit(4, 0), net, settings)
            for i in range(j):
                violations += not (np.array_equal(out.segments[i].mel, ref.segments[i].mel)
                                   and np.array_equal(out.segments[i].waveform.samples,
                                                      ref.segments[i].waveform.samples))
                checks += 1
    elapsed = time.perf_counter() - t0
    record(3, "causality suite", violations == 0 and elapsed < 120,
           f"{violations} violations in {checks} perturbation checks (text LM, speech LM, chunks), {elapsed:.1f}s")


# 4 ------------------------------------------------------------------------


def test_criterion_4_tokenizer_contract():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(64, 80)))
    bad_rt = 0
    for _ in range(1000):
        ids = rng.integers(0, 64, size=int(rng.integers(0, 60))).tolist()
        bad_rt += tokenize(detokenize(SpeechTokenSequence(ids), cb), cb).token_ids != ids
    worst = 0.0
    for d in rng.uniform(0.2, 10.0, size=40):
        w = Waveform(rng.uniform(-0.3, 0.3, int(round(d * 22050))), 22050)
        m = len(tokenize(log_mel(w, TARGET_MEL), cb))
        worst = max(worst, abs(m - 25 * w.duration))
    record(4, "tokenizer contract", bad_rt == 0 and worst <= 1,
           f"{bad_rt}/1000 roundtrip failures; max |M - 25 d| = {worst:.3f} over 40 durations in [0.2, 10] s")


# 5 ------------------------------------------------------------------------


def test_criterion_5_cfm():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    x0, x1 = torch.randn(4, 6, 8, generator=g), torch.randn(4, 6, 8, generator=g)
    endpoints = torch.equal(interpolate(x0, x1, torch.zeros(4)), x0) and \
        torch.equal(interpolate(x0, x1, torch.ones(4)), x1)

    mu, sigma = torch.tensor([1.5, -0.5, 2.0, 0.0]), 0.7
    c = torch.zeros(4, requires_grad=True)
    opt = torch.optim.Adam([c], lr=0.05)
    for _ in range(400):
        batch = mu + sigma * torch.randn(256, 4, generator=g)
        loss = flow_matching_loss(lambda x_t, t: c.expand_as(x_t), batch, generator=g)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        batch = mu + sigma * torch.randn(200_000, 4, generator=g)
        final = flow_matching_loss(lambda x_t, t: c.expand_as(x_t), batch, generator=g).item()
    optimum = sigma**2 + 1
    gap = abs(final - optimum) / optimum

    torch.manual_seed(1)
    net = VelocityNet(tiny_cfm_cfg(width=4, speaker_dim=2), 3, 5, 2).double()
    rng = np.random.default_rng(0)
    spk = _unit(2, 1).vector
    ex = [ChunkExample([1, 2], rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), spk),
          ChunkExample([4], rng.normal(size=(2, 3)), np.zeros((0, 3)), spk)]
    params = list(net.parameters())

    def f():
        return cfm_train_step(ex, net, seed=9)

    net.zero_grad()
    f().backward()
    grads = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    err = relative_error(grads, central_difference(f, params))
    elapsed = time.perf_counter() - t0
    record(5, "CFM properties", endpoints and gap < 0.05 and err < 1e-4 and elapsed < 300,
           f"endpoints exact={endpoints}; constant-predictor loss {final:.4f} vs optimum {optimum:.4f} "
           f"({100 * gap:.2f}% gap); grad rel. err {err:.2e}; {elapsed:.1f}s")


# 6 ------------------------------------------------------------------------


class _Counting:
    def __init__(self, ids):
        self.ids, self.pulled = list(ids), 0

    def __iter__(self):
        for t in self.ids:
            self.pulled += 1
            yield t


def test_criterion_6_streaming():
    torch.manual_seed(0)
    net = VelocityNet(tiny_cfm_cfg(), 80, 16, 2)
    rng = np.random.default_rng(0)
    results = []
    for k in (1, 5, 25):
        for trial in range(3):
            ids = rng.integers(0, 16, size=int(rng.integers(k, 60))).tolist()
            settings = SynthesisSettings(k, 2, 6, 2, seed=int(rng.integers(1 << 30)))
            src = _Counting(ids)
            gen = stream_synthesize(src, _unit(4, trial), net, settings)
            first = next(gen)
            at = src.pulled
            segs = [first] + list(gen)
            batch = synthesize(SpeechTokenSequence(ids), _unit(4, trial), net, settings)
            same = np.array_equal(np.concatenate([s.waveform.samples for s in segs]), batch.waveform.samples)
            results.append((k, at, same))
    ok = all(same and at == k for k, at, same in results)
    record(6, "streaming equivalence and latency", ok,
           "; ".join(f"K={k}: first at {at}, identical={same}" for k, at, same in results[::3]) +
           f" ({len(results)} runs)")


# 7 ------------------------------------------------------------------------

OVERFIT_STEPS = {"s2tt": 1500, "tts": 600, "cfm": 2000}


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    cfg = load_config(overrides={f"train.{s}.max_steps": n for s, n in OVERFIT_STEPS.items()}, env={})
    ds = ingest(make_synthetic_corpus(8, 0, root / "corpus"))
    ds.fit_codebook(cfg.tokenizer, seed=cfg.run.seed)
    t0 = time.perf_counter()
    models = {}
    for stage in ("s2tt", "tts", "cfm"):
        models[stage] = train(stage, cfg, ds, out_dir=root / "ckpt")
    return Pipeline.load(root / "ckpt"), ds, cfg, models, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_end_to_end_overfit(overfit):
    p, ds, cfg, models, train_seconds = overfit
    t0 = time.perf_counter()
    texts, audio = [], []
    for it in ds.items:
        res = translate_end_to_end(it.source, p)
        texts.append(res.text)
        audio.append(res.waveform)
    exact = sum(t == it.target_text for t, it in zip(texts, ds.items))
    oracle = CorpusOracleTranscriber([(it.target_text, it.target) for it in ds.items], TARGET_MEL)
    bleu = asr_bleu(audio, [it.target_text for it in ds.items], oracle).score

    net = models["cfm"].model
    mses = []
    for i, ex in enumerate(chunk_examples(ds, cfg)):
        gen = cfm_generate_chunk(ex.tokens, ex.context, SpeakerEmbedding(ex.speaker), net, cfg.cfm.ode_steps, seed=i)
        mses.append(float(((net.normalize(gen) - net.normalize(ex.mel)) ** 2).mean()))
    total = train_seconds + time.perf_counter() - t0
    ok = exact == len(ds.items) and bleu == 100.0 and max(mses) < 0.05 and total < 1800
    record(7, "end-to-end overfit", ok,
           f"{exact}/{len(ds.items)} transcripts exact; oracle ASR-BLEU {bleu:.1f}; "
           f"max chunk MSE {max(mses):.4f} (mean {np.mean(mses):.4f}, {len(mses)} chunks); "
           f"steps {OVERFIT_STEPS}; {total / 60:.1f} min")


# 8 ------------------------------------------------------------------------


def _brute_bleu(cands, refs):
    match, total, c_len, r_len = [0] * 4, [0] * 4, 0, 0
    for c, r in zip(cands, refs):
        c, r = normalize(c), normalize(r)
        c_len, r_len = c_len + len(c), r_len + len(r)
        for n in range(1, 5):
            cg = [tuple(c[i : i + n]) for i in range(len(c) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            total[n - 1] += len(cg)
            match[n - 1] += sum(min(cg.count(x), rg.count(x)) for x in set(cg))
    p = [m / t if t else 0.0 for m, t in zip(match, total)]
    if min(p) == 0 or c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * math.exp(sum(map(math.log, p)) / 4)


def test_criterion_8_bleu_oracle():
    rng = np.random.default_rng(0)
    words = ["a", "b", "c", "d", "e", "f"]
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 6))
        cands = [" ".join(rng.choice(words, size=int(rng.integers(1, 10)))) for _ in range(n)]
        refs = [" ".join(rng.choice(words, size=int(rng.integers(1, 10)))) for _ in range(n)]
        worst = max(worst, abs(corpus_bleu(cands, refs).score - _brute_bleu(cands, refs)))
    refs = ["the black cat eats bread", "small dog drinks the milk"]
    ident = corpus_bleu(refs, refs).score
    zero = corpus_bleu(["cat eats the bread now"], ["the cat eats a bread"]).score
    record(8, "BLEU oracle", worst < 1e-9 and ident == 100.0 and zero == 0.0,
           f"max |BLEU - brute force| {worst:.1e} on 50 corpora; identity {ident}; zero-4-gram {zero}")


# 9 ------------------------------------------------------------------------


def test_criterion_9_determinism_and_resume(corpus8, tmp_path):
    over = conftest.tiny_overrides()
    over.update({f"train.{s}.batch_size": 3 for s in ("s2tt", "tts", "cfm")})
    cfg = load_config(overrides=over, env={})
    ds = ingest(corpus8)
    ds.fit_codebook(cfg.tokenizer)
    identical, worst = [], 0.0
    for stage in ("s2tt", "tts", "cfm"):
        a = train(stage, cfg, ds, max_steps=5).checkpoint.to_bytes()
        b = train(stage, cfg, ds, max_steps=5).checkpoint.to_bytes()
        identical.append(a == b)
        full = train(stage, cfg, ds, max_steps=8).losses
        part = train(stage, cfg, ds, out_dir=tmp_path / stage, max_steps=4).losses
        rest = train(stage, cfg, ds, out_dir=tmp_path / stage, resume=tmp_path / stage / f"{stage}.ckpt",
                     max_steps=8).losses
        worst = max(worst, max(abs(x[1] - y[1]) for x, y in zip(full, part + rest)))
    record(9, "determinism and resumption", all(identical) and worst < 1e-6,
           f"bitwise-identical checkpoints {identical}; max resumed-loss deviation {worst:.1e}")
