import json
import random
from pathlib import Path

import pytest

from reasonloop.forge import PoolItem

SIMPLE = ("Remove the {} from the table.", "Add a {} to the sky.", "Replace the {} with a bicycle.",
          "Increase the brightness of the {}.", "Turn the {} blue.", "Crop the image around the {}.")
COMPLEX = ("make the {} feel like a rainy memory", "show the {} as if a century has passed",
           "symptoms of neglect on the {}", "give the {} a dreamy vintage mood")
NOUNS = ("car", "lamp", "tree", "dog", "boat", "bench", "house", "cup", "bird", "kite")


def make_pool(n_simple: int, n_complex: int, seed: int = 0) -> list[PoolItem]:
    """A synthetic raw-instruction pool with a known simple/complex split."""
    rng = random.Random(seed)
    items = []
    for i in range(n_simple):
        items.append(("s", rng.choice(SIMPLE).format(rng.choice(NOUNS))))
    for i in range(n_complex):
        items.append(("c", rng.choice(COMPLEX).format(rng.choice(NOUNS))))
    rng.shuffle(items)
    return [PoolItem(f"{kind}{i:04d}", text) for i, (kind, text) in enumerate(items)]


def write_pool(path: Path, items) -> Path:
    path.write_text("".join(json.dumps({"id": it.id, "instruction": it.instruction}) + "\n" for it in items))
    return path


@pytest.fixture
def pool_700():
    return make_pool(450, 250)


ACCEPTANCE: list[str] = []


def acceptance_line(criterion: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
