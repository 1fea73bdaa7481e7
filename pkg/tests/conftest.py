import struct

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def idx_image_bytes(images: np.ndarray) -> bytes:
    """Serialize a uint8 (N, H, W) array as an IDX image file."""
    n, h, w = images.shape
    return struct.pack(">IIII", 0x00000803, n, h, w) + images.astype(np.uint8).tobytes()


def idx_label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(int(v) for v in labels)


def pgm_bytes(img: np.ndarray, comment: bool = False) -> bytes:
    h, w = img.shape
    header = b"P5\n"
    if comment:
        header += b"# fixture image\n"
    header += f"{w} {h}\n255\n".encode()
    return header + img.astype(np.uint8).tobytes()


def write_omniglot_tree(root, alphabets=2, chars=3, samples=2, size=28):
    """Minimal alphabet/character/sample PNG tree for the loader tests."""
    from PIL import Image

    split = root / "background"
    for a in range(alphabets):
        for c in range(chars):
            d = split / f"Alphabet{a:02d}" / f"character{c:02d}"
            d.mkdir(parents=True)
            for s in range(samples):
                img = np.full((size, size), 255, dtype=np.uint8)
                img[4 + a : 12 + a, 4 + c : 12 + c] = 0  # distinct dark block per class
                img[20:24, 4 + 2 * s : 8 + 2 * s] = 0
                Image.fromarray(img, mode="L").save(d / f"{a}{c}{s:02d}.png")
    return root
