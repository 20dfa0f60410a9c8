import hashlib

import numpy as np

from coughscreen.audio_io import load_wav
from coughscreen.dataset import class_counts, load_manifest
from coughscreen.synth import generate_corpus, spectral_centroid


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_is_reproducible_and_valid(tmp_path):
    generate_corpus(tmp_path / "a", n_per_class=6, seed=4, sample_rate=16000)
    generate_corpus(tmp_path / "b", n_per_class=6, seed=4, sample_rate=16000)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    recs = load_manifest(tmp_path / "a" / "manifest.csv")
    assert class_counts(recs) == (6, 6)
    for cls in (0, 1):
        genders = [r.gender for r in recs if r.label == cls]
        assert genders.count("female") == genders.count("male") == 3
    assert sorted({r.fold for r in recs}) == [0, 1, 2, 3, 4]
    for r in recs:
        clip = load_wav(r.path)
        assert 1.0 <= clip.duration_s <= 8.0 + 1e-3


def test_class_centroids_are_far_apart(tmp_path):
    generate_corpus(tmp_path, n_per_class=10, seed=1, sample_rate=16000)
    cents = {0: [], 1: []}
    for r in load_manifest(tmp_path / "manifest.csv"):
        clip = load_wav(r.path)
        cents[r.label].append(spectral_centroid(clip.samples, clip.sample_rate_hz))
    assert np.mean(cents[1]) - np.mean(cents[0]) > 500.0
