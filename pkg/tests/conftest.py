import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

ASD_TINT = (0.75, 0.35, 0.30)
TD_TINT = (0.30, 0.35, 0.75)


def toy_image(label, rng, side=32, noise=0.05):
    base = np.array(ASD_TINT if label == 1 else TD_TINT)
    img = base[None, None, :] + noise * rng.standard_normal((side, side, 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_corpus(root, subjects_per_class=(2, 1), frames=4, side=32, seed=0,
                attributes=None, file_ext=".png"):
    """Write ``root/{asd,td}/<subject>/frame_XX.png`` plus labels.json.

    Returns a dict: class label -> list of subject folder names.
    ``attributes`` maps subject name -> attribute dict.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.json").write_text(json.dumps({"asd": 1, "td": 0}))
    names = {1: [], 0: []}
    n_pos, n_neg = subjects_per_class
    for label, cls, count in ((1, "asd", n_pos), (0, "td", n_neg)):
        for s in range(count):
            name = f"child_{cls}_{s:03d}"
            names[label].append(name)
            d = root / cls / name
            d.mkdir(parents=True)
            for f in range(frames):
                Image.fromarray(toy_image(label, rng, side)).save(d / f"frame_{f:02d}{file_ext}")
            if attributes and name in attributes:
                (d / "attributes.json").write_text(json.dumps(attributes[name]))
    return names


@pytest.fixture
def toy_corpus(tmp_path):
    root = tmp_path / "corpus"
    names = make_corpus(root)
    return root, names


def toy_arrays(n=32, side=28, seed=0, noise=0.05):
    """Balanced in-memory toy set: ``(images in [0, 1], labels)``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = np.stack([toy_image(int(y), rng, side, noise) for y in labels]) / 255.0
    return images, labels
