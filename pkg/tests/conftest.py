import numpy as np
import pytest
import torch

from twopass_s2st.config import CFMConfig, Config, S2TTConfig, TTSConfig, load_config
from twopass_s2st.corpus import ingest, make_synthetic_corpus

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_overrides() -> dict:
    return {
        "s2tt.encoder_layers": 1, "s2tt.encoder_width": 16, "s2tt.encoder_heads": 2,
        "s2tt.lm_layers": 1, "s2tt.lm_width": 16, "s2tt.lm_heads": 2, "s2tt.max_len": 8,
        "tts.layers": 1, "tts.width": 16, "tts.heads": 2, "tts.max_tokens": 12,
        "cfm.layers": 1, "cfm.width": 16, "cfm.heads": 2, "cfm.ode_steps": 2,
        "tokenizer.speech_vocab": 8, "tokenizer.kmeans_iters": 10, "audio.griffin_lim_iterations": 2,
    }


@pytest.fixture
def tiny_cfg() -> Config:
    return load_config(overrides=tiny_overrides(), env={})


def tiny_s2tt_cfg(**kw) -> S2TTConfig:
    base = dict(encoder_layers=1, encoder_width=8, encoder_heads=2, stack_factor=2, lm_layers=1,
                lm_width=8, lm_heads=2, text_vocab_size=12)
    base.update(kw)
    return S2TTConfig(**base)


def tiny_tts_cfg(**kw) -> TTSConfig:
    base = dict(layers=1, width=8, heads=2)
    base.update(kw)
    return TTSConfig(**base)


def tiny_cfm_cfg(**kw) -> CFMConfig:
    base = dict(width=8, layers=1, heads=2, speaker_dim=4, context_frames=6)
    base.update(kw)
    return CFMConfig(**base)


def central_difference(f, params, h=1e-4):
    """Numerical gradient of the scalar ``f()`` w.r.t. each tensor in ``params`` (edited in place)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(f())
                flat[i] = orig - h
                down = float(f())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).norm() / max(float(a.norm()), float(n.norm()), 1e-30))


@pytest.fixture(scope="session")
def corpus8(tmp_path_factory):
    manifest = make_synthetic_corpus(8, 0, tmp_path_factory.mktemp("corpus8"))
    return manifest


@pytest.fixture(scope="session")
def dataset8(corpus8):
    return ingest(corpus8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
