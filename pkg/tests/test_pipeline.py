import numpy as np
import pytest

from twopass_s2st.audio import Waveform
from twopass_s2st.config import load_config
from twopass_s2st.corpus import ingest
from twopass_s2st.errors import ConfigError
from twopass_s2st.pipeline import Pipeline, speech_to_text, translate_end_to_end
from twopass_s2st.training import train

from conftest import tiny_overrides


@pytest.fixture(scope="module")
def pipeline(corpus8, tmp_path_factory):
    cfg = load_config(overrides=tiny_overrides(), env={})
    ds = ingest(corpus8)
    ds.fit_codebook(cfg.tokenizer)
    out = tmp_path_factory.mktemp("ckpt")
    for stage in ("s2tt", "tts", "cfm"):
        train(stage, cfg, ds, out_dir=out, max_steps=2)
    return Pipeline.load(out), ds, out


def test_silence_is_flagged_not_fatal(pipeline):
    p, _, _ = pipeline
    res = translate_end_to_end(Waveform(np.zeros(16000), 16000), p)
    assert res.low_confidence
    assert res.waveform.sample_rate == 22050
    assert len(res.waveform) == sum(len(s.waveform) for s in res.segments)


def test_same_seeds_same_output(pipeline):
    p, ds, _ = pipeline
    src = ds.items[0].source
    a = translate_end_to_end(src, p, K=3, seed=4)
    b = translate_end_to_end(src, p, K=3, seed=4)
    assert a.text == b.text and a.speech_tokens.token_ids == b.speech_tokens.token_ids
    assert np.array_equal(a.waveform.samples, b.waveform.samples)
    assert a.seeds == {"tts": 4, "cfm": 4, "chunk_size": 3}


def test_segments_arrive_through_callback(pipeline):
    p, ds, _ = pipeline
    seen = []
    res = translate_end_to_end(ds.items[1].source, p, K=2, on_segment=lambda seg, n: seen.append((seg.index, n)))
    assert [i for i, _ in seen] == list(range(len(res.segments)))
    # a full chunk is emitted once its K-th token exists; the flush happens at the end
    for (i, n), seg in zip(seen, res.segments):
        assert n >= seg.end_token


def test_speech_to_text_confidence_range(pipeline):
    p, ds, _ = pipeline
    text, conf = speech_to_text(ds.items[0].source, p)
    assert 0.0 <= conf <= 1.0 and len(text.token_ids) <= p.cfg.s2tt.max_len


def test_incompatible_checkpoints_rejected(pipeline):
    from twopass_s2st.checkpoint import Checkpoint

    _, _, out = pipeline
    s2tt, tts, cfm = (Checkpoint.load(out / f"{s}.ckpt") for s in ("s2tt", "tts", "cfm"))
    with pytest.raises(ConfigError):
        Pipeline.from_checkpoints(tts, s2tt, cfm)
    cfm.extras = dict(cfm.extras, vocab='{"chars": ["q"], "vocab_size": 256}')
    with pytest.raises(ConfigError):
        Pipeline.from_checkpoints(s2tt, tts, cfm)
