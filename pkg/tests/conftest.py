import numpy as np
import pytest

THREE_VPS = [(0.3, -0.2), (-3.0, 0.1), (0.2, 4.0)]


def pencil_segments(vp, count, rng, half_length=0.1, spread=0.8):
    """Segments whose supporting lines all pass through the finite image point vp."""
    vp = np.asarray(vp, dtype=float)
    rows = []
    while len(rows) < count:
        mid = rng.uniform(-spread, spread, size=2)
        d = vp - mid
        if np.linalg.norm(d) < 0.05:
            continue
        d /= np.linalg.norm(d)
        rows.append(np.concatenate([mid - half_length * d, mid + half_length * d]))
    return np.array(rows)


def pencil_scene(rng, vps=THREE_VPS, per_vp=20, noise=0.0, outliers=0):
    parts, labels = [], []
    for k, vp in enumerate(vps):
        parts.append(pencil_segments(vp, per_vp, rng))
        labels += [k] * per_vp
    for _ in range(outliers):
        mid = rng.uniform(-0.8, 0.8, size=2)
        angle = rng.uniform(0, np.pi)
        d = 0.1 * np.array([np.cos(angle), np.sin(angle)])
        parts.append(np.concatenate([mid - d, mid + d])[None, :])
        labels.append(-1)
    segments = np.concatenate(parts)
    if noise:
        segments = segments + rng.uniform(-noise, noise, size=segments.shape)
    return segments, np.array(labels)


def vp_vectors(vps=THREE_VPS):
    v = np.array([[x, y, 1.0] for x, y in vps])
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def three_pencils(rng):
    segments, labels = pencil_scene(rng)
    return segments, labels, vp_vectors()
