import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttabridge.data import (
    PHOTO_TEMPLATE,
    SOUND_TEMPLATE,
    DataError,
    DatasetManifest,
    Example,
    MediaToolUnavailableError,
    FFmpegTool,
    SyntheticSpec,
    audio_window,
    ingest_video,
    load_audio,
    make_pseudo_text,
    make_synthetic_dataset,
    split,
)
from ttabridge.dsp import AudioClip, MelConfig, compute_mel, write_wav
from ttabridge.eval import MelStatsBackbone


def test_pseudo_text_templates():
    assert make_pseudo_text("violin", PHOTO_TEMPLATE) == "a photo of violin"
    assert make_pseudo_text("violin", SOUND_TEMPLATE) == "the sound of violin"
    with pytest.raises(DataError):
        make_pseudo_text("")


def manifest_of(n):
    examples = [Example(f"e{i}", f"f{i}.png", f"a{i}.wav", "x") for i in range(n)]
    return DatasetManifest(examples, ["x"])


@pytest.mark.parametrize("n,train,test", [(512, 460, 52), (1055, 949, 106)])
def test_split_arithmetic(n, train, test):
    m = split(manifest_of(n), 0.9, seed=0)
    assert (len(m.train), len(m.test)) == (train, test)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 300), ratio=st.floats(0.05, 0.95), seed=st.integers(0, 2**31 - 1))
def test_split_disjoint_cover(n, ratio, seed):
    m = split(manifest_of(n), ratio, seed)
    train = {e.id for e in m.train}
    test = {e.id for e in m.test}
    assert not train & test
    assert train | test == {f"e{i}" for i in range(n)}
    assert len(train) == math.floor(ratio * n)


def test_split_reproducible_and_validated():
    a = split(manifest_of(50), 0.9, seed=3)
    b = split(manifest_of(50), 0.9, seed=3)
    assert [e.split for e in a.examples] == [e.split for e in b.examples]
    for ratio in (0.0, 1.0, 1.5):
        with pytest.raises(DataError):
            split(manifest_of(10), ratio)


def test_manifest_invariants():
    with pytest.raises(DataError):
        DatasetManifest([Example("a", "", "", "x"), Example("a", "", "", "x")], ["x"])
    with pytest.raises(DataError):
        DatasetManifest([Example("a", "", "", "y")], ["x"])


def test_manifest_round_trip(tmp_path):
    m = make_synthetic_dataset(SyntheticSpec(per_class=3))
    m.save(tmp_path / "m.jsonl")
    back = DatasetManifest.load(tmp_path / "m.jsonl")
    assert back.labels == m.labels
    assert [e.to_record() for e in back.examples] == [e.to_record() for e in m.examples]
    (tmp_path / "bad.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "bad.jsonl")


def test_synthetic_dataset_size_and_split():
    m = make_synthetic_dataset(SyntheticSpec(per_class=64))
    assert len(m.examples) == 512 and len(m.labels) == 8
    assert (len(m.train), len(m.test)) == (460, 52)


def test_synthetic_dataset_needs_two_classes():
    spec = SyntheticSpec()
    with pytest.raises(DataError):
        make_synthetic_dataset(SyntheticSpec(classes=spec.classes[:1]))


def test_synthetic_audio_bitwise_reproducible():
    a = make_synthetic_dataset(SyntheticSpec(per_class=2, seed=7))
    b = make_synthetic_dataset(SyntheticSpec(per_class=2, seed=7))
    for ea, eb in zip(a.examples, b.examples):
        assert np.array_equal(load_audio(ea).samples, load_audio(eb).samples)
        assert load_audio(ea).duration == pytest.approx(2.048)


def test_synthetic_jitter_ranges():
    m = make_synthetic_dataset(SyntheticSpec(per_class=32))
    for e in m.examples:
        assert abs(e.audio["freq_offset"]) <= 0.02
        assert abs(e.audio["amp_offset_db"]) <= 3.0
        assert np.max(np.abs(load_audio(e).samples)) <= 1.0


def _separability(features, labels):
    labels = np.array(labels)
    classes = sorted(set(labels))
    centroids = np.stack([features[labels == c].mean(0) for c in classes])
    spread = np.mean([np.linalg.norm(features[labels == c] - centroids[i], axis=1).mean()
                      for i, c in enumerate(classes)])
    dists = [np.linalg.norm(centroids[i] - centroids[j]) for i in range(len(classes)) for j in range(i)]
    return min(dists) / spread


def test_class_separability():
    m = make_synthetic_dataset(SyntheticSpec(per_class=16))
    mels = np.stack([compute_mel(load_audio(e), MelConfig()).values.ravel() for e in m.examples])
    assert _separability(mels, [e.label for e in m.examples]) > 5.0


def test_backbone_separates_classes():
    m = make_synthetic_dataset(SyntheticSpec(per_class=16))
    bb = MelStatsBackbone()
    feats = np.stack([bb(load_audio(e)) for e in m.examples])
    assert _separability(feats, [e.label for e in m.examples]) > 1.0


# ---------------------------------------------------------------------------
# ingestion with a mock media tool


class MockTool:
    def __init__(self, duration, has_audio=True, sr=16000):
        self.duration = duration
        self.has_audio = has_audio
        self.sr = sr
        self.calls = []

    def probe(self, video):
        return self.duration, self.has_audio

    def extract_frame(self, video, timestamp, out):
        assert 0.0 <= timestamp <= self.duration
        Path(out).write_bytes(b"png")
        self.calls.append(("frame", timestamp))

    def extract_audio(self, video, start, duration, sample_rate, out):
        assert 0.0 <= start and start + duration <= self.duration + 1e-9
        write_wav(out, AudioClip(np.zeros(int(round(duration * sample_rate))), sample_rate))
        self.calls.append(("audio", start, duration))


def test_ingest_ten_second_video(tmp_path):
    tool = MockTool(10.0)
    ex = ingest_video(tmp_path / "v.mp4", tmp_path / "out", "violin", frames_per_video=1, seed=0, tool=tool)
    assert len(ex) == 1 and ex[0].label == "violin"
    (_, ts), (_, start, dur) = tool.calls
    assert 0.0 <= start and start + dur <= 10.0
    assert load_audio(ex[0]).duration == pytest.approx(2.048)


def test_ingest_reproducible_timestamps(tmp_path):
    a = ingest_video("v.mp4", tmp_path / "a", "x", frames_per_video=4, seed=5, tool=MockTool(30.0))
    b = ingest_video("v.mp4", tmp_path / "b", "x", frames_per_video=4, seed=5, tool=MockTool(30.0))
    assert [e.timestamp for e in a] == [e.timestamp for e in b]


def test_ingest_errors(tmp_path):
    with pytest.raises(DataError, match="duration"):
        ingest_video("short.mp4", tmp_path, "x", tool=MockTool(1.0))
    with pytest.raises(DataError, match="audio"):
        ingest_video("mute.mp4", tmp_path, "x", tool=MockTool(10.0, has_audio=False))


@settings(max_examples=100, deadline=None)
@given(ts=st.floats(0.0, 1.0), video=st.floats(2.048, 60.0))
def test_audio_window_inside_video(ts, video):
    start = audio_window(ts * video, 2.048, video)
    assert 0.0 <= start and start + 2.048 <= video + 1e-9


def test_ffmpeg_tool_missing_binary(tmp_path):
    tool = FFmpegTool(ffmpeg="/no/ffmpeg", ffprobe="/no/ffprobe")
    with pytest.raises(MediaToolUnavailableError):
        tool.probe(tmp_path / "v.mp4")
