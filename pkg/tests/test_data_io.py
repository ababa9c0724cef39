"""Stream/annotation/trajectory parsing, validation and round trips."""

import json

import numpy as np
import pytest

from qtrack.data_io import (
    AnnotationFormatError,
    BBox,
    GroundTruthEntry,
    GroundTruthTrack,
    StreamFormatError,
    TrajectoryEntry,
    TrajectoryOutput,
    iou,
    parse_annotations,
    parse_detection_stream,
    polygon_envelope,
    read_trajectories,
    write_annotations,
    write_detection_stream,
    write_trajectories,
)

HEADER = {"format": "qtrack-det/1", "d_q": 4, "video": "v"}


def _write_lines(path, *lines):
    path.write_text("\n".join(json.dumps(obj) for obj in lines) + "\n")


def _record(frame=0, box=(0, 0, 10, 10), score=0.9, query=(1, 0, 0, 0), **extra):
    row = {"frame": frame, "box": list(box), "score": score, "query": list(query)}
    row.update(extra)
    return row


# ---------------------------------------------------------------------------
# detection streams


def test_empty_body_parses_to_no_frames(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, HEADER)
    header, frames = parse_detection_stream(path)
    assert header.d_q == 4 and header.video == "v"
    assert frames == []


def test_stream_round_trip(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(
        path,
        HEADER,
        _record(frame=0, query=(1, 2, 3, 4), text="hi"),
        _record(frame=0, box=(5, 5, 9, 9)),
        _record(frame=2, score=0.25),
        _record(frame=2),
    )
    header, frames = parse_detection_stream(path)
    assert [f.frame_index for f in frames] == [0, 2]
    assert [len(f.records) for f in frames] == [2, 2]
    assert frames[0].records[0].text == "hi"
    np.testing.assert_allclose(frames[0].records[0].query, [1, 2, 3, 4])

    out = tmp_path / "copy.jsonl"
    write_detection_stream(out, header, frames)
    header2, frames2 = parse_detection_stream(out)
    assert header2 == header
    assert len(frames2) == len(frames)
    for a, b in zip(frames, frames2):
        assert a.frame_index == b.frame_index
        for ra, rb in zip(a.records, b.records):
            assert ra.box == rb.box and ra.score == rb.score and ra.text == rb.text
            np.testing.assert_array_equal(ra.query, rb.query)


def test_stream_score_out_of_range_names_field(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, HEADER, _record(score=1.5))
    with pytest.raises(StreamFormatError, match="score"):
        parse_detection_stream(path)


def test_stream_error_carries_line_number(tmp_path):
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps(HEADER) + "\n{not json\n")
    with pytest.raises(StreamFormatError, match=":2"):
        parse_detection_stream(path)


def test_stream_query_dimension_mismatch(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, HEADER, _record(query=(1, 2)))
    with pytest.raises(StreamFormatError, match="d_q"):
        parse_detection_stream(path)


def test_stream_nonmonotone_frames_rejected(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, HEADER, _record(frame=3), _record(frame=1))
    with pytest.raises(StreamFormatError, match="monotone"):
        parse_detection_stream(path)


def test_stream_degenerate_box_rejected(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, HEADER, _record(box=(5, 5, 5, 9)))
    with pytest.raises(StreamFormatError, match="box"):
        parse_detection_stream(path)


def test_stream_polygon_envelope_must_match_box(tmp_path):
    path = tmp_path / "s.jsonl"
    good = _record(poly=[[0, 0], [10, 0], [10, 10], [0, 10]])
    _write_lines(path, HEADER, good)
    _, frames = parse_detection_stream(path)
    assert frames[0].records[0].polygon is not None

    bad = _record(poly=[[0, 0], [8, 0], [8, 10], [0, 10]])
    _write_lines(path, HEADER, bad)
    with pytest.raises(StreamFormatError, match="envelope"):
        parse_detection_stream(path)


def test_missing_header(tmp_path):
    path = tmp_path / "s.jsonl"
    _write_lines(path, _record())
    with pytest.raises(StreamFormatError, match="header"):
        parse_detection_stream(path)


# ---------------------------------------------------------------------------
# annotations


def _annotation_doc(tracks):
    return {"video": "v", "tracks": tracks}


def test_annotations_single_track_single_frame(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps(_annotation_doc([
        {"id": 1, "category": "alphanumeric",
         "frames": {"0": {"box": [0, 0, 5, 5], "text": "hi", "box_type": "quadrilateral"}}},
    ])))
    tracks = parse_annotations(path)
    assert len(tracks) == 1
    assert tracks[0].present_frames() == [0]
    assert tracks[0].frames[0].text == "hi"


def test_annotations_gap_encodes_absence(tmp_path):
    path = tmp_path / "a.json"
    frames = {str(i): {"box": [0, 0, 5, 5], "text": "x"} for i in (1, 2, 5)}
    path.write_text(json.dumps(_annotation_doc([{"id": 3, "frames": frames}])))
    (track,) = parse_annotations(path)
    assert track.present_frames() == [1, 2, 5]
    assert 3 not in track.frames and 4 not in track.frames


def test_annotations_polygon_point_counts(tmp_path):
    path = tmp_path / "a.json"
    # 14-point polygon on a curved instance: accepted
    poly14 = [[i, 0] for i in range(7)] + [[6 - i, 3] for i in range(7)]
    doc = _annotation_doc([
        {"id": 1, "frames": {"0": {"box": [0, 0, 6, 3], "text": "x",
                                   "box_type": "polygon", "poly": poly14}}},
    ])
    path.write_text(json.dumps(doc))
    (track,) = parse_annotations(path)
    assert len(track.frames[0].polygon) == 14

    # 5-point polygon declared quadrilateral: rejected
    poly5 = [[0, 0], [6, 0], [6, 3], [3, 3], [0, 3]]
    doc = _annotation_doc([
        {"id": 1, "frames": {"0": {"box": [0, 0, 6, 3], "text": "x",
                                   "box_type": "quadrilateral", "poly": poly5}}},
    ])
    path.write_text(json.dumps(doc))
    with pytest.raises(AnnotationFormatError, match="quadrilateral"):
        parse_annotations(path)


def test_annotations_duplicate_frame_key_rejected(tmp_path):
    path = tmp_path / "a.json"
    frame = json.dumps({"box": [0, 0, 5, 5], "text": "x"})
    path.write_text(
        '{"video": "v", "tracks": [{"id": 1, "frames": {"2": %s, "2": %s}}]}' % (frame, frame)
    )
    with pytest.raises(AnnotationFormatError, match="duplicate"):
        parse_annotations(path)


def test_annotations_duplicate_track_id_rejected(tmp_path):
    path = tmp_path / "a.json"
    entry = {"id": 1, "frames": {"0": {"box": [0, 0, 5, 5], "text": "x"}}}
    path.write_text(json.dumps(_annotation_doc([entry, entry])))
    with pytest.raises(AnnotationFormatError, match="duplicate track id"):
        parse_annotations(path)


def test_annotations_unknown_category_rejected(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps(_annotation_doc([
        {"id": 1, "category": "emoji", "frames": {"0": {"box": [0, 0, 5, 5], "text": "x"}}},
    ])))
    with pytest.raises(AnnotationFormatError, match="category"):
        parse_annotations(path)


def test_annotations_round_trip(tmp_path):
    tracks = [
        GroundTruthTrack(track_id=2, category="other", frames={
            4: GroundTruthEntry(box=BBox(1, 1, 9, 5), text="zz"),
        }),
        GroundTruthTrack(track_id=1, category="alphanumeric", frames={
            0: GroundTruthEntry(box=BBox(0, 0, 5, 5), text="hi"),
            1: GroundTruthEntry(box=BBox(1, 0, 6, 5), text="hi"),
        }),
    ]
    path = tmp_path / "a.json"
    write_annotations(path, tracks, video="v")
    parsed = parse_annotations(path)
    assert [t.track_id for t in parsed] == [1, 2]
    assert parsed[1].category == "other"
    assert parsed[0].frames[1].box == BBox(1, 0, 6, 5)


# ---------------------------------------------------------------------------
# trajectories


def _traj(track_id, frames):
    return TrajectoryOutput(track_id=track_id, entries=[
        TrajectoryEntry(frame_index=f, box=BBox(f, f, f + 5, f + 5), score=0.5 + 0.01 * f, text=f"t{track_id}")
        for f in frames
    ])


@pytest.mark.parametrize("tracks", [
    [],
    [[1, [0, 1, 2]]],
    [[1, [0, 2, 4]], [7, [3]]],
])
def test_trajectory_round_trip(tmp_path, tracks):
    outs = [_traj(tid, frames) for tid, frames in tracks]
    path = tmp_path / "t.jsonl"
    write_trajectories(outs, path, video="v")
    back = read_trajectories(path)
    assert len(back) == len(outs)
    for a, b in zip(sorted(outs, key=lambda t: t.track_id), back):
        assert a.track_id == b.track_id
        assert a.frame_indices() == b.frame_indices()
        for ea, eb in zip(a.entries, b.entries):
            assert ea.box == eb.box and ea.score == eb.score and ea.text == eb.text


def test_trajectory_round_trip_random_property():
    rng = np.random.default_rng(42)
    import tempfile
    from pathlib import Path

    for trial in range(20):
        tracks = []
        for tid in range(1, int(rng.integers(1, 6)) + 1):
            n = int(rng.integers(1, 8))
            frames = sorted(rng.choice(50, size=n, replace=False).tolist())
            entries = [
                TrajectoryEntry(
                    frame_index=int(f),
                    box=BBox(*sorted(rng.uniform(0, 100, 2)), *(sorted(rng.uniform(0, 100, 2) + 101))),
                    score=float(rng.uniform(0, 1)),
                    text=None if rng.random() < 0.3 else f"w{tid}",
                )
                for f in frames
            ]
            tracks.append(TrajectoryOutput(track_id=tid, entries=entries))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "t.jsonl"
            write_trajectories(tracks, path)
            back = read_trajectories(path)
            # write is sorted, parse preserves everything bit for bit
            assert len(back) == len(tracks)
            for a, b in zip(tracks, back):
                assert a.track_id == b.track_id
                for ea, eb in zip(a.entries, b.entries):
                    assert ea.box == eb.box  # exact float round trip
                    assert ea.score == eb.score
                    assert ea.text == eb.text


def test_trajectory_writes_are_deterministic(tmp_path):
    outs = [_traj(2, [0, 1]), _traj(1, [5])]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trajectories(outs, a)
    write_trajectories(list(reversed(outs)), b)
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# geometry helpers


def test_iou_basic():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_polygon_envelope():
    env = polygon_envelope([(1, 2), (5, 0), (3, 7)])
    assert env == BBox(1, 0, 5, 7)
