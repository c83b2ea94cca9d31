import math

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from conftest import central_difference, relative_error, tiny_tts_cfg
from twopass_s2st.errors import VocabError
from twopass_s2st.speech_tokens import SpeechTokenSequence
from twopass_s2st.text import EOS, TextSequence
from twopass_s2st.tts_lm import TokenStream, TtsExample, TtsTokenLM, generate_tokens, tts_loss, with_eos


def _model(seed=0, speech_vocab=64, text_vocab=12, **kw):
    torch.manual_seed(seed)
    return TtsTokenLM(tiny_tts_cfg(**kw), speech_vocab, text_vocab).double()


def test_special_ids():
    m = _model()
    assert m.eos == 64 and m.bos == 65 and m.output_size == 65


def test_uniform_single_token_is_ln_65():
    m = _model()
    with torch.no_grad():
        m.lm.head.weight.zero_()
        m.lm.head.bias.zero_()
    ex = TtsExample(TextSequence([4, 5, EOS]), SpeechTokenSequence([m.eos]))
    assert abs(tts_loss(ex, m).item() - math.log(65)) < 1e-9


def test_loss_matches_external_recomputation():
    rng = np.random.default_rng(0)
    m = _model(1)
    for _ in range(20):
        text = rng.integers(3, 12, size=int(rng.integers(1, 6))).tolist()
        speech = rng.integers(0, 64, size=int(rng.integers(0, 8))).tolist() + [m.eos]
        logits = m.logits([text], [speech])[0].detach().numpy()
        oracle = -sum(logits[i, y] - logsumexp(logits[i]) for i, y in enumerate(speech))
        loss = tts_loss(TtsExample(TextSequence(text), SpeechTokenSequence(speech)), m)
        assert abs(loss.item() - oracle) < 1e-6


def test_duplicated_batch_gives_same_loss():
    m = _model(2)
    text, speech = [4, 5, 6], [1, 2, 3, m.eos]
    single = m.batch_loss([text], [speech])
    double = m.batch_loss([text, text], [speech, speech])
    assert torch.allclose(single, double, atol=1e-12)


def test_vocab_violations():
    m = _model()
    with pytest.raises(VocabError):
        m.logits([[4]], [[65]])
    with pytest.raises(VocabError):
        m.logits([[12]], [[1]])


def test_speech_causality_by_perturbation():
    m = _model(3)
    text = [4, 5, 6]
    base = [10, 11, 12, 13, 14, m.eos]
    for j in range(len(base) - 1):
        edited = list(base)
        edited[j] = 40
        la, lb = m.logits([text], [base])[0], m.logits([text], [edited])[0]
        assert torch.equal(la[: j + 1], lb[: j + 1])
        assert not torch.allclose(la[j + 1 :], lb[j + 1 :])


def test_text_fully_visible():
    m = _model(3)
    a = m.logits([[4, 5, 6]], [[1, m.eos]])[0, 0]
    b = m.logits([[4, 5, 7]], [[1, m.eos]])[0, 0]
    assert not torch.equal(a, b)


def test_gradient_matches_finite_differences():
    m = _model(4, speech_vocab=6, text_vocab=8, width=4, heads=2)
    texts, targets = [[3, 4, 5], [6, 7]], [[1, 2, 6], [0, 6]]

    def f():
        return m.batch_loss(texts, targets)

    params = list(m.parameters())
    m.zero_grad()
    f().backward()
    analytic = [p.grad.clone() for p in params]
    assert relative_error(analytic, central_difference(f, params)) < 1e-4


def test_greedy_generation_deterministic():
    m = _model(5)
    t = TextSequence([4, 5, EOS])
    a, b = generate_tokens(t, m, 10), generate_tokens(t, m, 10)
    assert a.token_ids == b.token_ids
    assert a.truncated == (len(a) == 10)


def test_seeded_sampling_reproducible():
    m = _model(5)
    t = TextSequence([4, 5, EOS])
    a = generate_tokens(t, m, 15, temperature=0.8, seed=7)
    b = generate_tokens(t, m, 15, temperature=0.8, seed=7)
    c = generate_tokens(t, m, 15, temperature=0.8, seed=8)
    assert a.token_ids == b.token_ids
    assert a.token_ids != c.token_ids


def test_stream_matches_batch_generation():
    m = _model(6)
    t = TextSequence([4, 6, EOS])
    batch = generate_tokens(t, m, 12, temperature=0.8, seed=3)
    seen = []
    stream = TokenStream(t, m, 12, temperature=0.8, seed=3)
    for tok in stream:
        seen.append(tok)
        assert stream.tokens == seen  # available before generation finishes
    assert seen == batch.token_ids and stream.truncated == batch.truncated


def test_callback_fires_per_token():
    m = _model(6)
    calls = []
    out = generate_tokens(TextSequence([4, EOS]), m, 5, on_token=lambda i, tok: calls.append((i, tok)))
    assert calls == list(enumerate(out.token_ids))


def test_eos_stops_generation():
    m = _model()
    with torch.no_grad():
        m.lm.head.weight.zero_()
        m.lm.head.bias.zero_()
        m.lm.head.bias[m.eos] = 5.0
    out = generate_tokens(TextSequence([4, EOS]), m, 10)
    assert out.token_ids == [] and not out.truncated


def test_max_tokens_must_be_positive():
    with pytest.raises(ValueError):
        generate_tokens(TextSequence([4]), _model(), 0)


def test_with_eos():
    m = _model()
    assert with_eos(SpeechTokenSequence([1, 2]), m).token_ids == [1, 2, 64]
