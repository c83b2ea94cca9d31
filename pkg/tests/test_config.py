import configparser

import pytest

from twopass_s2st.config import Config, frames_per_token, load_config
from twopass_s2st.errors import ConfigError
from twopass_s2st.text import EOS, CharTokenizer, TextSequence, check_ids
from twopass_s2st.errors import VocabError


def test_desk_defaults():
    cfg = load_config(env={})
    assert cfg.run.profile == "desk"
    t = cfg.train("s2tt")
    assert (t.learning_rate, t.batch_size, t.max_steps) == (1e-3, 8, 3000)
    assert cfg.cfm.chunk_size == 25 and cfg.tokenizer.speech_vocab == 64
    assert cfg.s2tt.negative_slope == 0.1 and cfg.s2tt.stack_factor == 4


def test_full_profile(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nprofile = full\n")
    cfg = load_config(p, env={})
    assert cfg.train("s2tt").learning_rate == 1e-5 and cfg.train("s2tt").batch_size == 32
    assert cfg.train("tts").batch_size == 128
    assert all(cfg.train(s).max_steps == 100_000 for s in ("s2tt", "tts", "cfm"))


def test_file_env_and_override_precedence(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train.s2tt]\nmax_steps = 10\nlearning_rate = 0.5\n[cfm]\nchunk_size = 5\n")
    env = {"TWOPASS__TRAIN_S2TT__MAX_STEPS": "20", "HOME": "/x"}
    cfg = load_config(p, overrides={"cfm.chunk_size": "7"}, env=env)
    assert cfg.train("s2tt").max_steps == 20
    assert cfg.train("s2tt").learning_rate == 0.5
    assert cfg.cfm.chunk_size == 7


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[cfm]\nbogus = 1\n", "[cfm]\nchunk_size = many\n"])
def test_bad_config_files(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p, env={})


def test_bad_env_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(env={"TWOPASS__CFM": "1"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini", env={})
    with pytest.raises(ConfigError):
        load_config(env={"TWOPASS__RUN__PROFILE": "cluster"})


def test_ini_roundtrip_is_complete(tmp_path):
    cfg = load_config(overrides={"s2tt.prompt": "translate:", "train.cfm.freeze": "stack"}, env={})
    cfg.save(tmp_path / "echo.ini")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(tmp_path / "echo.ini")
    assert set(parser.sections()) == {"run", "audio", "s2tt", "tokenizer", "tts", "cfm",
                                      "train.s2tt", "train.tts", "train.cfm"}
    again = load_config(tmp_path / "echo.ini", env={})
    assert again.to_dict() == cfg.to_dict()
    assert again.train("cfm").frozen == ["stack"]
    assert Config.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_frames_per_token_contract():
    cfg = load_config(env={})
    assert cfg.frames_per_token == 2
    bad = load_config(overrides={"audio.target_hop_length": "500"}, env={})
    with pytest.raises(ConfigError):
        frames_per_token(bad.audio.target_mel(), 25)


def test_unknown_stage():
    with pytest.raises(ConfigError):
        Config().train("vocoder")


def test_char_tokenizer_roundtrip(tmp_path):
    tok = CharTokenizer.from_texts(["the cat", "a dog"])
    seq = tok.encode("the dog")
    assert seq.token_ids[-1] == EOS and tok.decode(seq) == "the dog"
    assert tok.encode("z", add_eos=False).token_ids == [3]
    tok.save(tmp_path / "v.json")
    again = CharTokenizer.load(tmp_path / "v.json")
    assert again.char_to_id == tok.char_to_id and again.vocab_size == 256
    assert tok.encode("cat", prompt="a ").prompt_prefix == tok.encode("a ", add_eos=False).token_ids
    assert TextSequence([5, EOS]).content == [5]
    with pytest.raises(VocabError):
        check_ids([256], 256)
    with pytest.raises(VocabError):
        CharTokenizer([chr(i) for i in range(300)])
