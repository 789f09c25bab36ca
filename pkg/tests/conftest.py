import numpy as np
import pytest

from metapt.model import SENTIMENT5, ModelConfig, Tokenizer, Verbalizer, init_backbone

WORDS = ("i love this movie the food was cold and service slow a film plot "
         "actor boring fun awful fine nice story").split()


@pytest.fixture(scope="session")
def tokenizer():
    return Tokenizer.build([" ".join(WORDS)], max_vocab=100, force=SENTIMENT5)


@pytest.fixture(scope="session")
def small_config(tokenizer):
    return ModelConfig(vocab_size=len(tokenizer), d_model=16, n_layers=2, n_heads=2,
                       d_ff=32, max_seq_len=40, prompt_len=4)


@pytest.fixture(scope="session")
def frozen_backbone(small_config):
    return init_backbone(small_config, seed=3).freeze()


@pytest.fixture(scope="session")
def verbalizer(tokenizer):
    return Verbalizer.from_words(SENTIMENT5, tokenizer)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_PAIRS = [("i love this movie", "great"), ("awful boring plot", "terrible"),
             ("the food was cold", "bad"), ("nice fun story", "good"), ("fine film", "maybe")]


@pytest.fixture(scope="session")
def toy_corpus(tokenizer):
    rng = np.random.default_rng(0)
    return [tokenizer.encode(f"{text} it was {lab} .")
            for text, lab in (TOY_PAIRS[rng.integers(len(TOY_PAIRS))] for _ in range(200))]


@pytest.fixture(scope="session")
def pretrained_backbone(toy_corpus, small_config):
    from metapt.model import pretrain_backbone
    return pretrain_backbone(toy_corpus, small_config, steps=400, seed=4, lr=3e-3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def record_acceptance(key: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}"
    ACCEPTANCE[key] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
