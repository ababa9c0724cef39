"""Inference pipeline: NMS, two-stage short/long-term association, trajectories.

Per frame the tracker rescores and filters detections, suppresses
duplicates, then matches the survivors in two stages: first against
trajectories seen in the immediately preceding frame (short-term),
then the leftovers against every other live trajectory in the memory
bank (long-term), which is what recovers tracks across missed
detections. Whatever remains unmatched founds a new trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_io import DetectionFrame, TrajectoryEntry, TrajectoryOutput, iou
from .matcher import EmbeddingSet, embed_queries, matcher_forward
from .model import TrackerModel
from .rescoring import ScoredInstance, filter_instances

__all__ = [
    "TrackerConfig",
    "MemoryBank",
    "AssociationOutcome",
    "nms",
    "associate_frame",
    "track_sequence",
]


@dataclass
class TrackerConfig:
    assoc_threshold: float = 0.2  # theta: minimum match probability
    history_depth: int = 5  # H: frames kept in the memory bank
    nms_iou: float = 0.5
    detect_threshold: float = 0.3
    min_track_len: int = 5  # shorter trajectories are dropped at the end
    use_lt: bool = True  # disable for the short-term-only ablation

    def __post_init__(self) -> None:
        if not 0.0 < self.assoc_threshold < 1.0:
            raise ValueError(f"assoc_threshold must be in (0,1), got {self.assoc_threshold}")
        if self.history_depth < 1:
            raise ValueError("history_depth must be >= 1")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in (0,1]")
        if not 0.0 <= self.detect_threshold <= 1.0:
            raise ValueError("detect_threshold must be in [0,1]")
        if self.min_track_len < 1:
            raise ValueError("min_track_len must be >= 1")


@dataclass
class _BankEntry:
    frame: int
    embedding: np.ndarray


@dataclass
class _LiveTrack:
    track_id: int
    entries: list[_BankEntry] = field(default_factory=list)
    last_seen: int = -1


class MemoryBank:
    """Live trajectories with their embeddings from the last H frames."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self._tracks: dict[int, _LiveTrack] = {}
        self._next_id = 1

    def track_ids(self) -> list[int]:
        return sorted(self._tracks)

    def seen_at(self, frame: int) -> list[int]:
        return sorted(tid for tid, t in self._tracks.items() if t.last_seen == frame)

    def entries(self, track_id: int) -> list[_BankEntry]:
        return self._tracks[track_id].entries

    def embedding_at(self, track_id: int, frame: int) -> np.ndarray:
        for entry in self._tracks[track_id].entries:
            if entry.frame == frame:
                return entry.embedding
        raise KeyError(f"track {track_id} has no embedding at frame {frame}")

    def new_track(self, frame: int, embedding: np.ndarray) -> int:
        tid = self._next_id
        self._next_id += 1
        self._tracks[tid] = _LiveTrack(track_id=tid, entries=[_BankEntry(frame, embedding)], last_seen=frame)
        return tid

    def append(self, track_id: int, frame: int, embedding: np.ndarray) -> None:
        track = self._tracks[track_id]
        track.entries.append(_BankEntry(frame, embedding))
        track.last_seen = frame

    def evict(self, current_frame: int) -> None:
        """Drop embeddings older than the horizon; empty tracks leave the bank."""
        cutoff = current_frame - self.horizon
        dead = []
        for tid, track in self._tracks.items():
            track.entries = [e for e in track.entries if e.frame > cutoff]
            if not track.entries:
                dead.append(tid)
        for tid in dead:
            del self._tracks[tid]

    def oldest_frame(self) -> int | None:
        frames = [e.frame for t in self._tracks.values() for e in t.entries]
        return min(frames) if frames else None


@dataclass
class AssociationOutcome:
    """How one frame's instances were resolved; indices refer to the input list."""

    st_matches: list[tuple[int, int, float]]  # (instance index, track id, probability)
    lt_matches: list[tuple[int, int, float]]
    new_tracks: list[int]  # instance indices that found no trajectory
    unmatched_after_st: list[int]
    embeddings: np.ndarray  # (n, d_e) rows aligned with the input instances
    scores: dict[int, float]  # winning probability per matched instance


def nms(instances: list[ScoredInstance], iou_threshold: float) -> list[ScoredInstance]:
    """Greedy suppression in descending fused score; returns survivors in input order."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0,1], got {iou_threshold}")
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].fused_score, i))
    keep: list[int] = []
    for i in order:
        box = instances[i].record.box
        if all(iou(box, instances[j].record.box) < iou_threshold for j in keep):
            keep.append(i)
    return [instances[i] for i in sorted(keep)]


def _greedy_assign(
    candidates: list[tuple[float, int, int]],
    threshold: float,
    free_instances: set[int],
    free_tracks: set[int],
) -> list[tuple[int, int, float]]:
    """One instance per trajectory, highest probability first.

    Ties break on lower instance index, then lower track id, so the
    outcome is deterministic.
    """
    matched: list[tuple[int, int, float]] = []
    for prob, inst, tid in sorted(candidates, key=lambda c: (-c[0], c[1], c[2])):
        if prob < threshold:
            break
        if inst in free_instances and tid in free_tracks:
            matched.append((inst, tid, prob))
            free_instances.remove(inst)
            free_tracks.remove(tid)
    return matched


def associate_frame(
    instances: list[ScoredInstance],
    bank: MemoryBank,
    model: TrackerModel,
    config: TrackerConfig,
    frame_index: int,
) -> AssociationOutcome:
    """Resolve one frame's instances (already rescored, filtered and NMS'd).

    The bank is not modified; the caller applies the outcome.
    """
    n = len(instances)
    if n == 0:
        return AssociationOutcome([], [], [], [], np.zeros((0, model.d_e)), {})

    queries = np.stack([inst.record.query for inst in instances])
    current = embed_queries(queries, model.matcher, provenance=[(frame_index, i) for i in range(n)])

    free_instances = set(range(n))
    st_matches: list[tuple[int, int, float]] = []

    # Stage 1: trajectories seen exactly in the previous frame.
    prev_tracks = bank.seen_at(frame_index - 1)
    if prev_tracks:
        hist = EmbeddingSet(
            embeddings=np.stack([bank.embedding_at(tid, frame_index - 1) for tid in prev_tracks]),
            provenance=[(frame_index - 1, tid) for tid in prev_tracks],
        )
        st = matcher_forward(current, hist, model.matcher, branch="st")
        candidates = [
            (float(st.probabilities[i, c]), i, tid)
            for i in range(n)
            for c, tid in enumerate(prev_tracks)
        ]
        st_matches = _greedy_assign(candidates, config.assoc_threshold, free_instances, set(prev_tracks))

    unmatched_after_st = sorted(free_instances)
    lt_matches: list[tuple[int, int, float]] = []

    # Stage 2: leftovers against every unclaimed trajectory in the bank,
    # each represented by all of its stored embeddings.
    if config.use_lt and free_instances:
        claimed = {tid for _, tid, _ in st_matches}
        lt_tracks = [tid for tid in bank.track_ids() if tid not in claimed]
        if lt_tracks:
            rows = []
            row_tids = []
            prov = []
            for tid in lt_tracks:
                for entry in bank.entries(tid):
                    rows.append(entry.embedding)
                    row_tids.append(tid)
                    prov.append((entry.frame, tid))
            hist = EmbeddingSet(embeddings=np.stack(rows), provenance=prov)
            sub_rows = sorted(free_instances)
            sub = EmbeddingSet(
                embeddings=current.embeddings[sub_rows],
                provenance=[current.provenance[i] for i in sub_rows],
            )
            lt = matcher_forward(sub, hist, model.matcher, branch="lt")
            candidates = []
            for local_i, inst in enumerate(sub_rows):
                for tid in lt_tracks:
                    cols = [c for c, t in enumerate(row_tids) if t == tid]
                    score = float(lt.probabilities[local_i, cols].max())
                    candidates.append((score, inst, tid))
            lt_matches = _greedy_assign(candidates, config.assoc_threshold, free_instances, set(lt_tracks))

    new_tracks = sorted(free_instances)
    scores = {i: p for i, _, p in st_matches}
    scores.update({i: p for i, _, p in lt_matches})
    return AssociationOutcome(
        st_matches=st_matches,
        lt_matches=lt_matches,
        new_tracks=new_tracks,
        unmatched_after_st=unmatched_after_st,
        embeddings=current.embeddings,
        scores=scores,
    )


def track_sequence(
    frames: list[DetectionFrame],
    model: TrackerModel,
    config: TrackerConfig,
) -> list[TrajectoryOutput]:
    """Run the full per-frame pipeline and return finalized trajectories.

    Deterministic: identical frames, model and config produce identical
    trajectory ids and contents.
    """
    bank = MemoryBank(config.history_depth)
    head = model.rescoring_head()
    recorded: dict[int, TrajectoryOutput] = {}

    for frame in frames:
        t = frame.frame_index
        kept = nms(filter_instances(frame, head, config.detect_threshold), config.nms_iou)
        outcome = associate_frame(kept, bank, model, config, frame_index=t)

        assignments: list[tuple[int, int]] = [(i, tid) for i, tid, _ in outcome.st_matches]
        assignments += [(i, tid) for i, tid, _ in outcome.lt_matches]
        for i, tid in assignments:
            bank.append(tid, t, outcome.embeddings[i])
        for i in outcome.new_tracks:
            tid = bank.new_track(t, outcome.embeddings[i])
            assignments.append((i, tid))

        for i, tid in assignments:
            inst = kept[i]
            rec = inst.record
            recorded.setdefault(tid, TrajectoryOutput(track_id=tid)).entries.append(
                TrajectoryEntry(
                    frame_index=t,
                    box=rec.box,
                    score=inst.fused_score,
                    polygon=rec.polygon,
                    text=rec.text,
                )
            )
        bank.evict(t)

    final = [
        track for track in recorded.values() if len(track.entries) >= config.min_track_len
    ]
    for track in final:
        track.entries.sort(key=lambda e: e.frame_index)
    return sorted(final, key=lambda tr: tr.track_id)
