"""Violation notices: evidence capture, canonical serialization and delivery."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Optional, Sequence

import cv2
import numpy as np
import requests

from .ingest import BBox, crop, load_frame
from .plate import PlateReadout
from .tracker import TrackRecord
from .violations import ViolationEvent

log = logging.getLogger(__name__)

ENDPOINT_ENV = "TVD_AUTHORITY_ENDPOINT"
FLAG_UNIDENTIFIED = "unidentified"
FLAG_MISSING_FRAMES = "missing_frames"


class OutboxError(OSError):
    pass


@dataclass(frozen=True)
class Notice:
    notice_id: str
    kind: str
    scene_id: str
    track_id: int
    frame_range: tuple[int, int]
    plate_text: str
    plate_confidence: float
    created_at: str
    evidence_paths: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "notice_id": self.notice_id,
            "kind": self.kind,
            "scene_id": self.scene_id,
            "track_id": self.track_id,
            "frame_start": self.frame_range[0],
            "frame_end": self.frame_range[1],
            "plate_text": self.plate_text,
            "plate_confidence": round(self.plate_confidence, 6),
            "created_at": self.created_at,
            "evidence_paths": list(self.evidence_paths),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Notice":
        return cls(
            notice_id=d["notice_id"],
            kind=d["kind"],
            scene_id=d["scene_id"],
            track_id=int(d["track_id"]),
            frame_range=(int(d["frame_start"]), int(d["frame_end"])),
            plate_text=d["plate_text"],
            plate_confidence=float(d["plate_confidence"]),
            created_at=d["created_at"],
            evidence_paths=tuple(d.get("evidence_paths", ())),
            flags=tuple(d.get("flags", ())),
        )


def serialize_notice(n: Notice) -> bytes:
    """Canonical UTF-8 JSON: sorted keys, compact separators, trailing newline."""
    text = json.dumps(n.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return (text + "\n").encode("utf-8")


def notice_id_for(scene_id: str, ev: ViolationEvent) -> str:
    key = f"{scene_id}|{ev.kind.value}|{ev.track_id}|{ev.frame_range[0]}|{ev.frame_range[1]}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def best_readout(readouts: Mapping[int, PlateReadout], frame_range: tuple[int, int]) -> Optional[tuple[int, PlateReadout]]:
    """Most confident readout inside ``frame_range``; complete strings beat ones containing '?'."""
    lo, hi = frame_range
    candidates = [(f, r) for f, r in readouts.items() if lo <= f <= hi and r.text]
    if not candidates:
        return None
    return max(candidates, key=lambda fr: ("?" not in fr[1].text, fr[1].confidence, -fr[0]))


def _pad(b: BBox, frac: float, dims: tuple[int, int]) -> Optional[BBox]:
    w, h = dims
    x1, y1 = max(0.0, b.x - frac * b.w), max(0.0, b.y - frac * b.h)
    x2, y2 = min(float(w), b.x2 + frac * b.w), min(float(h), b.y2 + frac * b.h)
    if x2 - x1 < 1 or y2 - y1 < 1:
        return None
    return BBox(x1, y1, x2 - x1, y2 - y1)


def _write_png(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR) if rgb.ndim == 3 else rgb
    if not cv2.imwrite(str(path), bgr, [cv2.IMWRITE_PNG_COMPRESSION, 3]):
        raise OutboxError(f"could not write {path}")


def build_notice(
    ev: ViolationEvent,
    readout: Optional[PlateReadout],
    scene_id: str,
    track: Optional[TrackRecord] = None,
    frames_dir: Optional[str | Path] = None,
    evidence_root: Optional[str | Path] = None,
    plate_image: Optional[np.ndarray] = None,
    created_at: Optional[str] = None,
) -> Notice:
    """Populate a notice and save its evidence crops under ``evidence_root``.

    Evidence paths are relative to ``evidence_root`` (normally the outbox).
    """
    nid = notice_id_for(scene_id, ev)
    flags = []
    paths: list[str] = []
    if evidence_root is not None:
        root = Path(evidence_root)
        rel_dir = Path("evidence") / nid
        boxes = track.boxes() if track is not None else {}
        missing = frames_dir is None
        for f in ev.evidence:
            img = load_frame(frames_dir, f) if frames_dir is not None else None
            b = boxes.get(f)
            if img is None or b is None:
                missing = True
                continue
            padded = _pad(b, 0.1, (img.shape[1], img.shape[0]))
            if padded is None:
                continue
            rel = rel_dir / f"vehicle_{f:06d}.png"
            _write_png(root / rel, crop(img, padded))
            paths.append(rel.as_posix())
        if missing:
            flags.append(FLAG_MISSING_FRAMES)
        if plate_image is not None and plate_image.size:
            rel = rel_dir / "plate.png"
            _write_png(root / rel, plate_image)
            paths.append(rel.as_posix())
    text = readout.text if readout is not None else ""
    if not text:
        flags.append(FLAG_UNIDENTIFIED)
    return Notice(
        notice_id=nid,
        kind=ev.kind.value,
        scene_id=scene_id,
        track_id=ev.track_id,
        frame_range=ev.frame_range,
        plate_text=text,
        plate_confidence=readout.confidence if readout is not None and text else 0.0,
        created_at=created_at or utc_now(),
        evidence_paths=tuple(paths),
        flags=tuple(sorted(flags)),
    )


# -- delivery -----------------------------------------------------------------


@dataclass(frozen=True)
class SinkConfig:
    outbox: Path
    endpoint: Optional[str] = None
    timeout_s: float = 5.0
    max_retries: int = 5
    backoff_base_s: float = 2.0
    backoff_factor: float = 2.0

    def resolved_endpoint(self) -> Optional[str]:
        return os.environ.get(ENDPOINT_ENV) or self.endpoint


@dataclass(frozen=True)
class Receipt:
    notice_id: str
    status: str  # stored | delivered | queued | failed
    attempts: int = 0
    path: Optional[Path] = None
    detail: str = ""


_outbox_lock = threading.Lock()
_id_locks: dict[str, threading.Lock] = {}


def _lock_for(notice_id: str) -> threading.Lock:
    with _outbox_lock:
        return _id_locks.setdefault(notice_id, threading.Lock())


def notice_path(outbox: Path, notice_id: str) -> Path:
    return Path(outbox) / f"notice_{notice_id}.json"


def _state_path(outbox: Path, notice_id: str) -> Path:
    return Path(outbox) / f"notice_{notice_id}.state.json"


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_state(outbox: Path, notice_id: str) -> Optional[dict]:
    p = _state_path(outbox, notice_id)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _write_state(outbox: Path, notice_id: str, state: dict) -> None:
    data = json.dumps(state, sort_keys=True, indent=1).encode("utf-8")
    with _outbox_lock:
        _atomic_write(_state_path(outbox, notice_id), data)


def _post(endpoint: str, payload: bytes, timeout: float, session=None) -> tuple[bool, str]:
    http = session or requests
    try:
        resp = http.post(endpoint, data=payload, headers={"Content-Type": "application/json"}, timeout=timeout)
    except requests.RequestException as exc:
        return False, f"{type(exc).__name__}: {exc}"
    if 200 <= resp.status_code < 300:
        return True, str(resp.status_code)
    return False, f"HTTP {resp.status_code}"


def _attempt(sink: SinkConfig, notice_id: str, payload: bytes, state: dict, session=None) -> Receipt:
    endpoint = sink.resolved_endpoint()
    path = notice_path(sink.outbox, notice_id)
    ok, detail = _post(endpoint, payload, sink.timeout_s, session)
    state["attempts"] = int(state.get("attempts", 0)) + 1
    if ok:
        state.update(status="delivered", last_result=detail, next_attempt_at=None)
    else:
        n = state["attempts"]
        if n >= sink.max_retries:
            state.update(status="failed", last_result=detail, next_attempt_at=None)
        else:
            delay = sink.backoff_base_s * sink.backoff_factor ** (n - 1)
            state.update(status="queued", last_result=detail, next_attempt_at=time.time() + delay)
        log.warning("delivery of notice %s failed (%s), attempt %d", notice_id, detail, n)
    _write_state(sink.outbox, notice_id, state)
    return Receipt(notice_id, state["status"], state["attempts"], path, detail)


def emit_notice(n: Notice, sink: SinkConfig, session=None) -> Receipt:
    """Store ``n`` in the outbox and deliver it if an endpoint is configured.

    Re-emitting a notice id never rewrites a stored payload or re-posts a
    delivered one.
    """
    outbox = Path(sink.outbox)
    try:
        outbox.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutboxError(f"outbox {outbox} is not writable: {exc}") from exc
    payload = serialize_notice(n)
    path = notice_path(outbox, n.notice_id)
    with _lock_for(n.notice_id):
        try:
            if not path.exists():
                with _outbox_lock:
                    _atomic_write(path, payload)
        except OSError as exc:
            raise OutboxError(f"could not write {path}: {exc}") from exc
        payload = path.read_bytes()
        state = read_state(outbox, n.notice_id) or {"status": "stored", "attempts": 0}
        if sink.resolved_endpoint() is None or state["status"] in ("delivered", "failed"):
            if not _state_path(outbox, n.notice_id).exists():
                _write_state(outbox, n.notice_id, state)
            return Receipt(n.notice_id, state["status"], state["attempts"], path)
        if state["status"] == "queued":
            return Receipt(n.notice_id, "queued", state["attempts"], path)
        return _attempt(sink, n.notice_id, payload, state, session)


def retry_pending(sink: SinkConfig, now: Optional[float] = None, session=None) -> list[Receipt]:
    """Retry queued notices whose backoff has elapsed."""
    now = time.time() if now is None else now
    receipts = []
    if sink.resolved_endpoint() is None:
        return receipts
    for state_file in sorted(Path(sink.outbox).glob("notice_*.state.json")):
        nid = state_file.name[len("notice_") : -len(".state.json")]
        with _lock_for(nid):
            state = read_state(sink.outbox, nid)
            if not state or state.get("status") != "queued":
                continue
            if (state.get("next_attempt_at") or 0) > now:
                continue
            payload = notice_path(sink.outbox, nid).read_bytes()
            receipts.append(_attempt(sink, nid, payload, state, session))
    return receipts


def load_notices(outbox: str | Path) -> list[Notice]:
    out = []
    for p in sorted(Path(outbox).glob("notice_*.json")):
        if p.name.endswith(".state.json"):
            continue
        out.append(Notice.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    return out


def notices_for_events(
    events: Sequence[ViolationEvent],
    readouts: Mapping[int, Mapping[int, PlateReadout]],
    plate_images: Mapping[tuple[int, int], np.ndarray],
    tracks: Mapping[int, TrackRecord],
    scene_id: str,
    frames_dir: Optional[Path],
    evidence_root: Optional[Path],
    created_at: Optional[str] = None,
) -> list[Notice]:
    """One notice per event, attaching the best plate readout of the offending track."""
    out = []
    for ev in events:
        pick = best_readout(readouts.get(ev.track_id, {}), ev.frame_range)
        readout, plate_img = None, None
        if pick is not None:
            f, readout = pick
            plate_img = plate_images.get((ev.track_id, f))
        out.append(
            build_notice(
                ev,
                readout,
                scene_id,
                track=tracks.get(ev.track_id),
                frames_dir=frames_dir,
                evidence_root=evidence_root,
                plate_image=plate_img,
                created_at=created_at,
            )
        )
    return out
