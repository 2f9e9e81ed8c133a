"""Regenerate the bundled world family under src/ekarag/data/worlds/."""

import json
from pathlib import Path

from ekarag.info_theory import bundled_family_worlds

OUT = Path(__file__).resolve().parents[1] / "src" / "ekarag" / "data" / "worlds"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for world in bundled_family_worlds():
        (OUT / f"{world.name}.json").write_text(json.dumps(world.to_dict(), indent=1) + "\n")
        print(world.name)


if __name__ == "__main__":
    main()
