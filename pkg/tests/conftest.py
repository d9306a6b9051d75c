import numpy as np
import pytest

from inbetween.media import Sprite, SpritePath, SpriteSceneSpec, render_scene


def one_sprite_spec(
    velocity=(2.0, 0.0),
    start=(10.0, 12.0),
    size=8,
    shape="square",
    texture="flat",
    frames=5,
    canvas=(32, 32),
    background_pattern=0.0,
    seed=3,
):
    sprite = Sprite(shape, size, (0.9, 0.6, 0.3), SpritePath("linear", start, velocity), texture)
    return SpriteSceneSpec(
        canvas, (0.1, 0.15, 0.2), [sprite], frames, seed=seed, background_pattern=background_pattern
    )


@pytest.fixture
def square_scene():
    return render_scene(one_sprite_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria report

_CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
