"""Dataset manifests, corpus validation and a synthetic bootleg-corpus generator."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bootleg import N_POSITIONS, BootlegScore, BscParseError, read_bsc, write_bsc
from .evalrank import air


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Piece:
    piece_id: str
    path: Path
    label: int
    composer: str | None = None


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    pieces: list = field(default_factory=list)
    root: Path = Path(".")

    @property
    def labels(self):
        return [p.label for p in self.pieces]

    def piece(self, piece_id) -> Piece:
        for p in self.pieces:
            if p.piece_id == piece_id:
                return p
        raise KeyError(piece_id)

    def load_score(self, piece: Piece) -> BootlegScore:
        return read_bsc(piece.path)

    def to_json(self) -> dict:
        out = []
        for p in self.pieces:
            entry = {"piece_id": p.piece_id, "path": os.path.relpath(p.path, self.root), "label": p.label}
            if p.composer is not None:
                entry["composer"] = p.composer
            out.append(entry)
        return {"name": self.name, "num_classes": self.num_classes, "pieces": out}


def parse_manifest(obj: dict, root) -> DatasetManifest:
    root = Path(root)
    if not isinstance(obj, dict):
        raise ManifestError("manifest must be a JSON object")
    try:
        name = obj["name"]
        k = obj["num_classes"]
        raw = obj["pieces"]
    except KeyError as exc:
        raise ManifestError(f"manifest missing field {exc}") from None
    if not isinstance(name, str) or not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ManifestError("manifest needs a string name and a positive integer num_classes")
    if not isinstance(raw, list):
        raise ManifestError("manifest 'pieces' must be a list")
    pieces, seen = [], set()
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ManifestError(f"piece #{i} is not an object")
        try:
            pid, rel, label = entry["piece_id"], entry["path"], entry["label"]
        except KeyError as exc:
            raise ManifestError(f"piece #{i} missing field {exc}") from None
        if not isinstance(pid, str) or not isinstance(rel, str):
            raise ManifestError(f"piece #{i}: piece_id and path must be strings")
        if not isinstance(label, int) or isinstance(label, bool):
            raise ManifestError(f"piece {pid!r}: label must be an integer")
        if not 0 <= label < k:
            raise ManifestError(f"piece {pid!r}: label {label} outside [0, {k})")
        if pid in seen:
            raise ManifestError(f"duplicate piece_id {pid!r}")
        composer = entry.get("composer")
        if composer is not None and not isinstance(composer, str):
            raise ManifestError(f"piece {pid!r}: composer must be a string")
        seen.add(pid)
        pieces.append(Piece(pid, root / rel, label, composer))
    return DatasetManifest(name, k, pieces, root)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    manifest = parse_manifest(obj, path.parent)
    if check_files:
        missing = [p.piece_id for p in manifest.pieces if not p.path.is_file()]
        if missing:
            raise ManifestError(f"{path}: unresolvable paths for {missing[:5]}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def validate_dataset(manifest: DatasetManifest) -> dict:
    """Corpus summary per class; unreadable files are listed instead of raised."""
    counts = Counter(p.label for p in manifest.pieces)
    noteheads = 0
    broken = []
    for p in manifest.pieces:
        try:
            noteheads += read_bsc(p.path).noteheads
        except (OSError, BscParseError) as exc:
            broken.append({"piece_id": p.piece_id, "error": str(exc)})
    return {
        "name": manifest.name,
        "pieces": len(manifest.pieces),
        "classes": manifest.num_classes,
        "per_class": {int(c): counts.get(c, 0) for c in range(manifest.num_classes)},
        "air": air(manifest.labels, manifest.num_classes) if manifest.pieces else 0.0,
        "noteheads": noteheads,
        "broken_files": broken,
    }


# ---------------------------------------------------------------- synthetic corpora


@dataclass(frozen=True)
class SynthParams:
    """Knobs of the synthetic generator.

    Difficulty level ``c / (K-1)`` drives three column features: extra notes
    per hand (``density_gain``), the pitch window the hands roam in
    (``range_gain``) and the chance that both hands sound at once
    (``polyphony_gain``).
    """

    n_pieces: int = 100
    num_classes: int = 3
    seed: int = 0
    w_min: int = 16
    w_max: int = 96
    density_gain: float = 2.0
    range_gain: float = 1.0
    polyphony_gain: float = 1.0
    label_noise: float = 0.0
    name: str = "synth"

    def __post_init__(self):
        if self.w_min < 1 or self.w_max < self.w_min:
            raise ValueError("need 1 <= w_min <= w_max")
        if min(self.density_gain, self.range_gain, self.polyphony_gain) < 0:
            raise ValueError("gains must be non-negative")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.num_classes < 1 or self.n_pieces < 0:
            raise ValueError("bad piece or class count")


def _hand(rng, center, width, n_notes):
    lo = max(0, center - width)
    hi = min(N_POSITIONS - 1, center + width)
    span = hi - lo + 1
    return lo + rng.choice(span, size=min(n_notes, span), replace=False)


def synth_piece(rng, level: float, params: SynthParams):
    """One synthetic score at difficulty ``level`` in [0, 1]."""
    w = int(rng.integers(params.w_min, params.w_max + 1))
    cols = np.zeros((w, N_POSITIONS), dtype=np.uint8)
    extra_notes = params.density_gain * level
    width = int(round(3 + 6 * params.range_gain * level))
    p_both = min(0.9, 0.1 + 0.8 * params.polyphony_gain * level)
    right = int(rng.integers(36, 48))
    left = int(rng.integers(12, 24))
    for t in range(w):
        right = int(np.clip(right + rng.integers(-2, 3), 32, 52))
        left = int(np.clip(left + rng.integers(-2, 3), 8, 28))
        both = rng.random() < p_both
        use_right = both or rng.random() < 0.6
        if use_right:
            cols[t, _hand(rng, right, width, 1 + int(rng.poisson(extra_notes)))] = 1
        if both or not use_right:
            cols[t, _hand(rng, left, width, 1 + int(rng.poisson(extra_notes)))] = 1
    return cols


def piece_features(columns: np.ndarray) -> tuple[float, float, float]:
    """(mean set bits per column, mean pitch span per column, fraction of two-hand columns)."""
    if columns.shape[0] == 0:
        return 0.0, 0.0, 0.0
    counts = columns.sum(axis=1)
    idx = np.arange(N_POSITIONS)
    spans, two = [], 0
    for col in columns:
        on = idx[col.astype(bool)]
        spans.append(on.max() - on.min() if on.size else 0)
        two += int(on.size > 0 and on.min() < 30 and on.max() >= 30)
    return float(counts.mean()), float(np.mean(spans)), two / columns.shape[0]


def synth_generate(params: SynthParams, out_dir) -> DatasetManifest:
    """Write ``params.n_pieces`` .bsc files plus ``manifest.json`` into ``out_dir``.

    Classes are balanced (counts differ by at most one) and assigned in a
    seeded random order. The output is a pure function of ``params``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(params.seed)
    k = params.num_classes
    labels = rng.permutation(np.arange(params.n_pieces) % k)
    pieces = []
    for i, c in enumerate(labels):
        c = int(c)
        level = c / (k - 1) if k > 1 else 0.0
        cols = synth_piece(rng, level, params)
        label = c
        if params.label_noise and rng.random() < params.label_noise:
            step = 1 if rng.random() < 0.5 else -1
            if not 0 <= c + step < k:
                step = -step
            label = c + step if 0 <= c + step < k else c
        pid = f"{params.name}_{i:05d}"
        path = out / f"{pid}.bsc"
        write_bsc(BootlegScore(cols, pid), path)
        pieces.append(Piece(pid, path, label))
    manifest = DatasetManifest(params.name, k, pieces, out)
    save_manifest(manifest, out / "manifest.json")
    (out / "synth_params.json").write_text(json.dumps(asdict(params), indent=2) + "\n")
    return manifest


def load_scores(manifest: DatasetManifest) -> dict:
    return {p.piece_id: read_bsc(p.path) for p in manifest.pieces}
