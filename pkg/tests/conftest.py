import pytest

from pathlib import Path

from phishguard.emailcore import CleanEmail

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def eml_dir() -> Path:
    return FIXTURES / "eml"


@pytest.fixture(scope="session")
def golden_corpus_path() -> Path:
    return FIXTURES / "golden_corpus.jsonl"


@pytest.fixture
def sample_email() -> CleanEmail:
    return CleanEmail(
        id="sample-1",
        subject="quarterly report ready",
        sender="alice@example.com",
        body="the quarterly report is attached for your review.",
        label="legitimate",
    )
