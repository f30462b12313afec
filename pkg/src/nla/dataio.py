"""Synthetic dataset generation with ground-truth warps, dataset
persistence, training-pair window sampling, and the online alignment
table.

Each trial of a behavior is produced by warping a canonical behavior
trajectory through a random monotone time map (built with the same
jump parametrization the warping model uses, so validity is guaranteed),
mixing it into observation channels, and adding smooth nuisance and
white noise. The ground-truth map is stored as ``canon_time``: a strictly
increasing map from trial frame to canonical time in seconds.

On-disk layout: a ``manifest.json`` plus one raw array file per stored
field, each with a 16-byte header (magic, dtype code, rank, extents) and
a little-endian row-major payload, so round trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import warp as W

MANIFEST_VERSION = "nla-dataset/1"
ARRAY_MAGIC = b"NLA1"
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODE_BY_KIND = {"f": 0, "i": 1}


class DatasetError(Exception):
    """Base for dataset format violations."""


class VersionError(DatasetError):
    pass


class PayloadError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


# -- raw array files -------------------------------------------------------


def write_array(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim not in (1, 2):
        raise ValueError(f"array rank must be 1 or 2, got {arr.ndim}")
    code = _CODE_BY_KIND[arr.dtype.kind]
    dtype = _DTYPE_BY_CODE[code]
    extents = (arr.shape[0], arr.shape[1] if arr.ndim == 2 else 1)
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC)
        f.write(struct.pack("<BBxx", code, arr.ndim))
        f.write(struct.pack("<II", *extents))
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16 or head[:4] != ARRAY_MAGIC:
            raise PayloadError(f"{path}: bad array header")
        code, rank = struct.unpack("<BBxx", head[4:8])
        n0, n1 = struct.unpack("<II", head[8:16])
        if code not in _DTYPE_BY_CODE or rank not in (1, 2):
            raise PayloadError(f"{path}: unknown dtype code {code} or rank {rank}")
        dtype = _DTYPE_BY_CODE[code]
        count = n0 * n1
        raw = f.read(count * dtype.itemsize + 1)
        if len(raw) != count * dtype.itemsize:
            raise PayloadError(f"{path}: payload length mismatch")
    arr = np.frombuffer(raw, dtype=dtype).copy()
    return arr.reshape((n0, n1) if rank == 2 else (n0,))


# -- domain types ------------------------------------------------------------


@dataclass
class Trial:
    trial_id: str
    behavior_id: int
    repeat_index: int
    signal: np.ndarray  # [T, C] float32
    behavior: np.ndarray  # [T, B_dim] float32
    segments: np.ndarray  # [T] int32
    canon_time: np.ndarray  # [T] float32, strictly increasing, seconds

    @property
    def n_frames(self) -> int:
        return self.signal.shape[0]

    def validate(self) -> None:
        t = self.n_frames
        if self.behavior.shape[0] != t or self.segments.shape[0] != t or self.canon_time.shape[0] != t:
            raise ManifestError(f"trial {self.trial_id}: field lengths disagree")
        if not (np.diff(self.canon_time.astype(np.float64)) > 0).all():
            raise ManifestError(f"trial {self.trial_id}: canon_time not strictly increasing")


@dataclass
class GenConfig:
    n_behaviors: int = 20
    repeats: int = 8
    channels: int = 16
    behavior_dim: int = 6
    sample_rate_hz: float = 100.0
    duration_range: tuple[float, float] = (2.0, 3.0)
    warp_strength: float = 1.5
    noise_level: float = 0.5
    segments_range: tuple[int, int] = (8, 15)
    segment_vocab: int = 20
    n_valid_behaviors: int = 3
    n_test_behaviors: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_behaviors, self.repeats, self.channels, self.behavior_dim) < 1:
            raise ValueError("all counts must be >= 1")
        if self.duration_range[0] <= 0 or self.duration_range[1] < self.duration_range[0]:
            raise ValueError(f"bad duration range {self.duration_range}")
        if self.n_valid_behaviors + self.n_test_behaviors >= self.n_behaviors:
            raise ValueError("splits leave no training behaviors")


def gen_preset(name: str, seed: int = 0) -> GenConfig:
    if name == "desk":
        return GenConfig(seed=seed)
    if name == "paper-like":
        return GenConfig(
            n_behaviors=50,
            repeats=9,
            channels=256,
            behavior_dim=12,
            sample_rate_hz=200.0,
            duration_range=(1.8, 2.9),
            n_valid_behaviors=5,
            n_test_behaviors=5,
            seed=seed,
        )
    raise ValueError(f"unknown generator preset {name!r}")


class Dataset:
    """Manifest plus lazily loaded trials and cached label alignments."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self._trials: dict[str, Trial] = {}
        self._sup_paths: dict[tuple[str, str], W.WarpPath] = {}
        self._by_behavior: dict[int, list[str]] = {}
        for entry in manifest["trials"]:
            self._by_behavior.setdefault(entry["behavior_id"], []).append(entry["id"])
        self._entries = {e["id"]: e for e in manifest["trials"]}

    # -- basic access ----------------------------------------------------

    @property
    def sample_rate(self) -> float:
        return float(self.manifest["sample_rate_hz"])

    @property
    def channels(self) -> int:
        return int(self.manifest["channels"])

    @property
    def behavior_dim(self) -> int:
        return int(self.manifest["behavior_dim"])

    def split_behaviors(self, split: str) -> list[int]:
        return list(self.manifest["splits"][split])

    def trial_ids(self, behavior_id: int) -> list[str]:
        return list(self._by_behavior.get(behavior_id, []))

    def all_trial_ids(self) -> list[str]:
        return [e["id"] for e in self.manifest["trials"]]

    def trial(self, trial_id: str) -> Trial:
        if trial_id not in self._trials:
            entry = self._entries.get(trial_id)
            if entry is None:
                raise ManifestError(f"unknown trial id {trial_id!r}")
            files = entry["files"]
            trial = Trial(
                trial_id=trial_id,
                behavior_id=entry["behavior_id"],
                repeat_index=entry["repeat_index"],
                signal=read_array(self.root / files["signal"]),
                behavior=read_array(self.root / files["behavior"]),
                segments=read_array(self.root / files["segments"]),
                canon_time=read_array(self.root / files["canon_time"]),
            )
            if trial.n_frames != entry["n_frames"]:
                raise ManifestError(
                    f"trial {trial_id}: manifest says {entry['n_frames']} frames, "
                    f"payload has {trial.n_frames}"
                )
            trial.validate()
            self._trials[trial_id] = trial
        return self._trials[trial_id]

    def trials_of(self, behavior_id: int) -> list[Trial]:
        return [self.trial(tid) for tid in self.trial_ids(behavior_id)]

    # -- label-derived alignments -----------------------------------------

    def supervised_path(self, target_id: str, source_id: str) -> W.WarpPath:
        key = (target_id, source_id)
        if key not in self._sup_paths:
            self._sup_paths[key] = supervised_alignment(self.trial(target_id), self.trial(source_id))
        return self._sup_paths[key]


# -- synthetic generation ------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, n: int, dims: int, sigma_frames: float) -> np.ndarray:
    """Low-pass filtered white noise, standardized per dimension."""
    raw = rng.normal(size=(n, dims))
    radius = max(1, int(3 * sigma_frames))
    grid = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (grid / sigma_frames) ** 2)
    kernel /= kernel.sum()
    out = np.empty_like(raw)
    for d in range(dims):
        out[:, d] = np.convolve(raw[:, d], kernel, mode="same")
    out -= out.mean(axis=0)
    std = out.std(axis=0)
    std[std < 1e-9] = 1.0
    return out / std


def _random_monotone_positions(
    rng: np.random.Generator, n_frames: int, canon_len: int, strength: float, rate: float
) -> np.ndarray:
    """Strictly increasing positions in [0, canon_len-1] via the jump
    recurrence; zero strength gives exactly linear progress."""
    pos = np.zeros(n_frames)
    noise = _smooth_noise(rng, n_frames, 1, sigma_frames=0.15 * rate)[:, 0] if strength > 0 else np.zeros(n_frames)
    top = float(canon_len - 1)
    prev = 0.0
    for t in range(1, n_frames):
        base = 1.0 / (n_frames - t)
        u = math.log(base / (1.0 - base)) if base < 1.0 else 40.0
        u += strength * noise[t]
        s = 1.0 / (1.0 + math.exp(-u)) if u >= 0 else math.exp(u) / (1.0 + math.exp(u))
        prev = prev + (top - prev) * s
        pos[t] = prev
    return pos


def _canonical_segments(rng: np.random.Generator, canon_len: int, cfg: GenConfig) -> np.ndarray:
    n_seg = int(rng.integers(cfg.segments_range[0], cfg.segments_range[1] + 1))
    min_width = max(3, canon_len // (4 * n_seg))
    weights = rng.gamma(2.0, size=n_seg)
    widths = np.maximum(min_width, np.round(weights / weights.sum() * canon_len)).astype(int)
    while widths.sum() > canon_len:
        widths[np.argmax(widths)] -= 1
    widths[-1] += canon_len - widths.sum()
    labels = np.zeros(n_seg, dtype=np.int32)
    prev = -1
    for i in range(n_seg):
        lab = int(rng.integers(0, cfg.segment_vocab))
        while lab == prev:
            lab = int(rng.integers(0, cfg.segment_vocab))
        labels[i] = lab
        prev = lab
    return np.repeat(labels, widths)


def generate_synthetic(cfg: GenConfig, out_dir: Path) -> Dataset:
    """Generate a dataset under ``out_dir`` and return it loaded."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "arrays").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    rate = cfg.sample_rate_hz

    mix = rng.normal(size=(cfg.behavior_dim, cfg.channels)) / math.sqrt(cfg.behavior_dim)
    n_nuis = 2
    mix_nuis = rng.normal(size=(n_nuis, cfg.channels)) / math.sqrt(n_nuis)

    entries = []
    for b in range(cfg.n_behaviors):
        canon_len = int(round(rng.uniform(*cfg.duration_range) * rate))
        canon_behavior = _smooth_noise(rng, canon_len, cfg.behavior_dim, sigma_frames=0.1 * rate)
        canon_segments = _canonical_segments(rng, canon_len, cfg)
        grid = np.arange(canon_len, dtype=np.float64)
        for r in range(cfg.repeats):
            n_frames = int(round(rng.uniform(*cfg.duration_range) * rate))
            pos = _random_monotone_positions(rng, n_frames, canon_len, cfg.warp_strength, rate)
            behavior = np.stack(
                [np.interp(pos, grid, canon_behavior[:, d]) for d in range(cfg.behavior_dim)],
                axis=1,
            )
            segments = canon_segments[np.clip(np.round(pos), 0, canon_len - 1).astype(int)]
            clean = np.tanh(behavior @ mix)
            nuisance = _smooth_noise(rng, n_frames, n_nuis, sigma_frames=0.2 * rate) @ mix_nuis
            white = rng.normal(size=(n_frames, cfg.channels))
            signal = clean + cfg.noise_level * nuisance + 0.5 * cfg.noise_level * white

            trial_id = f"b{b:03d}r{r:02d}"
            files = {
                "signal": f"arrays/{trial_id}.signal.bin",
                "behavior": f"arrays/{trial_id}.behavior.bin",
                "segments": f"arrays/{trial_id}.segments.bin",
                "canon_time": f"arrays/{trial_id}.canon.bin",
            }
            write_array(out_dir / files["signal"], signal.astype(np.float32))
            write_array(out_dir / files["behavior"], behavior.astype(np.float32))
            write_array(out_dir / files["segments"], segments.astype(np.int32))
            write_array(out_dir / files["canon_time"], (pos / rate).astype(np.float32))
            entries.append(
                {
                    "id": trial_id,
                    "behavior_id": b,
                    "repeat_index": r,
                    "n_frames": n_frames,
                    "files": files,
                }
            )

    n_train = cfg.n_behaviors - cfg.n_valid_behaviors - cfg.n_test_behaviors
    manifest = {
        "version": MANIFEST_VERSION,
        "sample_rate_hz": rate,
        "channels": cfg.channels,
        "behavior_dim": cfg.behavior_dim,
        "buffering": "reflect",
        "generator": asdict(cfg),
        "trials": entries,
        "splits": {
            "train": list(range(n_train)),
            "valid": list(range(n_train, n_train + cfg.n_valid_behaviors)),
            "test": list(range(n_train + cfg.n_valid_behaviors, cfg.n_behaviors)),
        },
    }
    _validate_manifest(manifest)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return Dataset(out_dir, manifest)


def _validate_manifest(manifest: dict) -> None:
    if manifest.get("version") != MANIFEST_VERSION:
        raise VersionError(
            f"manifest version {manifest.get('version')!r}, expected {MANIFEST_VERSION!r}"
        )
    splits = manifest["splits"]
    test = set(splits["test"])
    if test & set(splits["train"]) or test & set(splits["valid"]):
        raise ManifestError("test behaviors must not appear in train or valid splits")
    ids = [e["id"] for e in manifest["trials"]]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate trial ids in manifest")


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest.json under {root}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    _validate_manifest(manifest)
    return Dataset(root, manifest)


def save_dataset(dataset: Dataset, out_dir: Path) -> None:
    """Re-serialize a dataset (bit-exact round trip with load_dataset)."""
    out_dir = Path(out_dir)
    (out_dir / "arrays").mkdir(parents=True, exist_ok=True)
    for entry in dataset.manifest["trials"]:
        trial = dataset.trial(entry["id"])
        files = entry["files"]
        write_array(out_dir / files["signal"], trial.signal)
        write_array(out_dir / files["behavior"], trial.behavior)
        write_array(out_dir / files["segments"], trial.segments)
        write_array(out_dir / files["canon_time"], trial.canon_time)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(dataset.manifest, f, indent=1, sort_keys=True)


# -- ground truth and supervised alignments ------------------------------------


def gt_frame_map(target: Trial, source: Trial) -> np.ndarray:
    """Ground-truth map target frame -> source frame via canonical time."""
    canon_s = source.canon_time.astype(np.float64)
    frames = np.arange(source.n_frames, dtype=np.float64)
    return np.interp(target.canon_time.astype(np.float64), canon_s, frames)


def supervised_alignment(trial_a: Trial, trial_b: Trial) -> W.WarpPath:
    """DTW over the euclidean cost of behavior trajectories."""
    if trial_a.behavior_id != trial_b.behavior_id:
        raise ValueError(
            f"trials {trial_a.trial_id} and {trial_b.trial_id} are different behaviors"
        )
    a = trial_a.behavior.astype(np.float64)
    b = trial_b.behavior.astype(np.float64)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    path, _ = W.dtw(cost)
    return path


# -- alignment table -------------------------------------------------------------


class AlignmentTable:
    """Per ordered trial pair: estimated source frame for each target frame.

    Revision 0 is the identity map; refreshes swap in a full new mapping
    (copy-on-refresh) and bump the revision.
    """

    def __init__(self):
        self.maps: dict[tuple[str, str], np.ndarray] = {}
        self.revision = 0

    @classmethod
    def identity(cls, dataset: Dataset, behavior_ids) -> "AlignmentTable":
        table = cls()
        for b in behavior_ids:
            trials = dataset.trials_of(b)
            for ta in trials:
                for tb in trials:
                    if ta.trial_id == tb.trial_id:
                        continue
                    table.maps[(ta.trial_id, tb.trial_id)] = np.minimum(
                        np.arange(ta.n_frames, dtype=np.float64), tb.n_frames - 1
                    )
        return table

    def lookup(self, target_id: str, source_id: str) -> np.ndarray:
        return self.maps[(target_id, source_id)]

    def replace(self, new_maps: dict[tuple[str, str], np.ndarray]) -> None:
        for m in new_maps.values():
            if (np.diff(m) < 0).any():
                raise ValueError("alignment table maps must be monotone non-decreasing")
        self.maps = new_maps
        self.revision += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{a}__{b}": m for (a, b), m in sorted(self.maps.items())}

    @classmethod
    def from_state(cls, arrays: dict[str, np.ndarray], revision: int) -> "AlignmentTable":
        table = cls()
        for key, arr in arrays.items():
            a, b = key.split("__")
            table.maps[(a, b)] = np.asarray(arr, dtype=np.float64)
        table.revision = revision
        return table


def table_from_supervised(dataset: Dataset, behavior_ids) -> AlignmentTable:
    """Alignment table anchored on behavior labels (evaluation sampling)."""
    table = AlignmentTable()
    for b in behavior_ids:
        trials = dataset.trials_of(b)
        for ta in trials:
            for tb in trials:
                if ta.trial_id == tb.trial_id:
                    continue
                path = dataset.supervised_path(ta.trial_id, tb.trial_id)
                table.maps[(ta.trial_id, tb.trial_id)] = W.path_to_function(path, "target")
    table.revision = 1
    return table


def table_from_ground_truth(dataset: Dataset, behavior_ids) -> AlignmentTable:
    table = AlignmentTable()
    for b in behavior_ids:
        trials = dataset.trials_of(b)
        for ta in trials:
            for tb in trials:
                if ta.trial_id != tb.trial_id:
                    table.maps[(ta.trial_id, tb.trial_id)] = gt_frame_map(ta, tb)
    table.revision = 1
    return table


# -- window sampling --------------------------------------------------------------


@dataclass
class Window:
    trial_id: str
    behavior_id: int
    onset: int
    signal: np.ndarray
    behavior: np.ndarray
    segments: np.ndarray
    canon_time: np.ndarray


def extract_window(trial: Trial, onset: int, window_frames: int) -> Window:
    if trial.n_frames < window_frames:
        raise ValueError(
            f"trial {trial.trial_id} has {trial.n_frames} frames < window {window_frames}"
        )
    onset = int(np.clip(onset, 0, trial.n_frames - window_frames))
    sl = slice(onset, onset + window_frames)
    return Window(
        trial_id=trial.trial_id,
        behavior_id=trial.behavior_id,
        onset=onset,
        signal=trial.signal[sl],
        behavior=trial.behavior[sl],
        segments=trial.segments[sl],
        canon_time=trial.canon_time[sl],
    )


def sample_pair_windows(
    dataset: Dataset,
    behavior_id: int,
    rng: np.random.Generator,
    window_frames: int,
    table: AlignmentTable,
    jitter_frames: int = 5,
) -> tuple[Window, Window]:
    """Sample two equal-length windows of distinct repeats of a behavior.

    The onset is drawn on the first trial, warped through the alignment
    table to anchor the second trial's window, jittered, and clamped so
    both windows fit.
    """
    ids = dataset.trial_ids(behavior_id)
    if len(ids) < 2:
        raise ValueError(f"behavior {behavior_id} needs >= 2 trials for pair sampling")
    pick = rng.choice(len(ids), size=2, replace=False)
    trial_a = dataset.trial(ids[pick[0]])
    trial_b = dataset.trial(ids[pick[1]])
    if trial_a.n_frames < window_frames or trial_b.n_frames < window_frames:
        raise ValueError(f"behavior {behavior_id}: trials shorter than window {window_frames}")
    onset_a = int(rng.integers(0, trial_a.n_frames - window_frames + 1))
    fmap = table.lookup(trial_a.trial_id, trial_b.trial_id)
    onset_b = int(round(fmap[onset_a]))
    if jitter_frames > 0:
        onset_b += int(rng.integers(-jitter_frames, jitter_frames + 1))
    onset_b = int(np.clip(onset_b, 0, trial_b.n_frames - window_frames))
    return (
        extract_window(trial_a, onset_a, window_frames),
        extract_window(trial_b, onset_b, window_frames),
    )


# -- online alignment refresh -------------------------------------------------------


def tile_encode(model, signal: np.ndarray, window_frames: int):
    """Encode a full trial by tiling into reflection-padded windows.

    Returns (surrogate, content) arrays of length n_frames // 4.
    """
    n = signal.shape[0]
    n_win = -(-n // window_frames)
    padded = signal
    if n_win * window_frames > n:
        pad = n_win * window_frames - n
        padded = np.pad(signal, ((0, pad), (0, 0)), mode="reflect")
    windows = padded.reshape(n_win, window_frames, signal.shape[1])
    with T.no_grad():
        s, c = model.encode(T.tensor(windows.astype(np.float32)))
    latent = n // 4
    s_full = s.data.reshape(-1, s.shape[-1])[:latent]
    c_full = c.data.reshape(-1, c.shape[-1])[:latent]
    return s_full, c_full


def latent_map_to_signal(fmap_latent: np.ndarray, n_target: int, n_source: int) -> np.ndarray:
    """Upsample a latent-rate frame map to signal rate (factor 4)."""
    centers_t = 4.0 * np.arange(len(fmap_latent)) + 1.5
    centers_s = 4.0 * np.asarray(fmap_latent, dtype=np.float64) + 1.5
    out = np.interp(np.arange(n_target, dtype=np.float64), centers_t, centers_s)
    out = np.clip(out, 0, n_source - 1)
    return np.maximum.accumulate(out)


def refresh_alignment_table(model, dataset: Dataset, table: AlignmentTable, window_frames: int):
    """Re-estimate all stored pair maps by DTW on content factors.

    The model must be in eval mode; both directions of each pair come
    from a single DTW run. The table revision is bumped once.
    """
    if any(m.training for m in model.modules()):
        raise ValueError("refresh requires the model in eval mode")
    trial_ids = sorted({tid for key in table.maps for tid in key})
    contents: dict[str, np.ndarray] = {}
    for tid in trial_ids:
        _, contents[tid] = tile_encode(model, dataset.trial(tid).signal, window_frames)
    new_maps: dict[tuple[str, str], np.ndarray] = {}
    done = set()
    for a, b in table.maps:
        if (a, b) in done:
            continue
        c_a, c_b = contents[a], contents[b]
        cost = -(c_a.astype(np.float64) @ c_b.astype(np.float64).T)
        path, _ = W.dtw(cost)
        n_a, n_b = dataset.trial(a).n_frames, dataset.trial(b).n_frames
        new_maps[(a, b)] = latent_map_to_signal(W.path_to_function(path, "target"), n_a, n_b)
        new_maps[(b, a)] = latent_map_to_signal(W.path_to_function(path, "source"), n_b, n_a)
        done.add((a, b))
        done.add((b, a))
    table.replace(new_maps)
    return table
