import pytest

from entlib.corpus import parse_corpus_text

# One utterance by Joey Tribbiani: Ross -> 335, I -> 183, you -> 335, her -> 306.
SAMPLE_SCENE = (
    "#scene s01e01c01\n"
    "#speakers Joey Tribbiani\n"
    "...\t-\n"
    "see\t-\n"
    "Ross\tE:335\tNNP\n"
    ",\t-\n"
    "because\t-\n"
    "I\tE:183\tPRP\n"
    "think\t-\n"
    "you\tE:335\tPRP\n"
    "love\t-\n"
    "her\tE:306\tPRP\n"
    ".\t-\n"
    "\n"
)


@pytest.fixture
def sample_text():
    return SAMPLE_SCENE


@pytest.fixture
def sample_scene():
    return parse_corpus_text(SAMPLE_SCENE)
