"""Training-pair generation, epoch scheduling and the dataset manifest."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hdr_io
from .camera import (
    AugmentSpec,
    CameraParams,
    CameraSampler,
    augment,
    compute_exposure,
    sample_augment,
    virtual_camera,
)
from .tonemap import DEFAULT_EPSILON, MIDDLE_GRAY, ToneMapParams, luminance, reconstruct_color, tonemap_reinhard

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "hdrenhance-manifest"
MANIFEST_VERSION = 1
MIN_SOURCE_SIZE = 5


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairConfig:
    out_size: int = 512
    epsilon: float = DEFAULT_EPSILON
    key: float = MIDDLE_GRAY
    sampler: CameraSampler = CameraSampler()


@dataclass(frozen=True)
class PairParams:
    """Every random draw behind one training pair."""

    augment: AugmentSpec
    camera: CameraParams
    v: float

    def to_dict(self):
        return {"augment": self.augment.to_dict(), "camera": asdict(self.camera), "v": self.v}

    @classmethod
    def from_dict(cls, d):
        return cls(AugmentSpec(**d["augment"]), CameraParams(**d["camera"]), float(d["v"]))


@dataclass
class TrainingPair:
    x: np.ndarray
    y: np.ndarray
    params: PairParams
    source: str = ""
    seed: tuple = ()


def pair_rng(*seed):
    """Independent generator for one pair, keyed by e.g. (master_seed, source, k)."""
    return np.random.default_rng([int(s) for s in seed])


def sample_pair_params(shape, rng, cfg=PairConfig()):
    height, width = shape[:2]
    if height < MIN_SOURCE_SIZE or width < MIN_SOURCE_SIZE:
        raise ValueError(
            f"source image {width}x{height} is smaller than {MIN_SOURCE_SIZE}x{MIN_SOURCE_SIZE}"
        )
    spec = sample_augment(rng, height, width, cfg.out_size)
    camera, v = cfg.sampler.sample(rng)
    return PairParams(spec, camera, v)


def render_pair(hdr, params, cfg=PairConfig()):
    """Build (x, y) from one HDR image and fixed random parameters."""
    patch = augment(hdr, params.augment)
    lum = luminance(patch)
    exposure = compute_exposure(patch, params.v, cfg.epsilon)
    x = reconstruct_color(patch, lum, virtual_camera(exposure, params.camera))
    y = tonemap_reinhard(patch, ToneMapParams(cfg.key, cfg.epsilon))
    return x, y


def make_pair(hdr, rng, cfg=PairConfig(), source="", seed=()):
    params = sample_pair_params(np.shape(hdr), rng, cfg)
    x, y = render_pair(hdr, params, cfg)
    return TrainingPair(x, y, params, source, tuple(seed))


@dataclass
class EpochSchedule:
    epoch: int
    batches: list

    def __len__(self):
        return len(self.batches)


def epoch_schedule(corpus_size, batch=8, rng=None, epoch=0):
    """Shuffle the corpus and cut it into full batches; the remainder is dropped."""
    if batch < 1:
        raise ValueError("batch size must be positive")
    if corpus_size < batch:
        raise ValueError(f"corpus of {corpus_size} images cannot fill a batch of {batch}")
    if rng is None:
        rng = np.random.default_rng()
    order = rng.permutation(corpus_size)
    n_batches = corpus_size // batch
    batches = order[: n_batches * batch].reshape(n_batches, batch)
    return EpochSchedule(epoch, [list(map(int, b)) for b in batches])


# --------------------------------------------------------------------------
# Manifest


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    master_seed: int
    config: PairConfig
    count_per_image: int
    sources: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    pairs: list = field(default_factory=list)

    def header(self):
        return {
            "type": "header",
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "master_seed": self.master_seed,
            "out_size": self.config.out_size,
            "epsilon": self.config.epsilon,
            "key": self.config.key,
            "sampler": asdict(self.config.sampler),
            "count_per_image": self.count_per_image,
            "luminance": "rec709",
            "geometric_mean_over": "luminance",
        }

    def dumps(self):
        lines = [self.header()]
        lines += [{"type": "source", **s} for s in self.sources]
        lines += [{"type": "skipped", **s} for s in self.skipped]
        lines += [{"type": "pair", **p} for p in self.pairs]
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)

    def write(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path):
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not records or records[0].get("type") != "header":
            raise ManifestError(f"{path}: missing manifest header")
        head = records[0]
        if head.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{path}: not a dataset manifest")
        if head.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"{path}: unsupported manifest version {head.get('version')}")
        cfg = PairConfig(head["out_size"], head["epsilon"], head["key"], CameraSampler(**head["sampler"]))
        manifest = cls(head["master_seed"], cfg, head["count_per_image"])
        for rec in records[1:]:
            kind = rec.pop("type")
            {"source": manifest.sources, "skipped": manifest.skipped, "pair": manifest.pairs}[kind].append(rec)
        return manifest


def _write_pair(out_dir, index, x, y, write_ppm):
    pairs = Path(out_dir) / "pairs"
    x_name, y_name = f"pairs/{index}_x.pfm", f"pairs/{index}_y.pfm"
    (Path(out_dir) / x_name).write_bytes(hdr_io.write_pfm(x))
    (Path(out_dir) / y_name).write_bytes(hdr_io.write_pfm(y))
    if write_ppm:
        (pairs / f"{index}_x.ppm").write_bytes(hdr_io.write_ldr_ppm(x))
        (pairs / f"{index}_y.ppm").write_bytes(hdr_io.write_ldr_ppm(y))
    return x_name, y_name


def generate_dataset(corpus, count_per_image, out_dir, master_seed=0, cfg=PairConfig(),
                     jobs=1, write_ppm=False, progress=None):
    """Materialise ``count_per_image`` pairs per readable corpus file.

    Unreadable files are skipped with a warning and listed in the manifest.
    Pair seeds depend only on (master_seed, corpus position, k), so ``jobs``
    never changes the output.
    """
    out_dir = Path(out_dir)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(master_seed, cfg, count_per_image)
    jobs_list = []
    for file_index, path in enumerate(corpus):
        path = Path(path)
        try:
            raw = path.read_bytes()
            hdr = hdr_io.load_hdr(path)
            if min(hdr.shape[:2]) < MIN_SOURCE_SIZE:
                raise ValueError(f"image smaller than {MIN_SOURCE_SIZE}x{MIN_SOURCE_SIZE}")
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path, exc)
            manifest.skipped.append({"path": str(path), "reason": str(exc)})
            continue
        manifest.sources.append(
            {"id": file_index, "path": str(path), "sha256": hashlib.sha256(raw).hexdigest()}
        )
        for k in range(count_per_image):
            jobs_list.append((file_index, path, hdr, k))

    def work(job_index):
        file_index, path, hdr, k = jobs_list[job_index]
        seed = (master_seed, file_index, k)
        pair = make_pair(hdr, pair_rng(*seed), cfg, str(path), seed)
        x_name, y_name = _write_pair(out_dir, job_index, pair.x, pair.y, write_ppm)
        return {"index": job_index, "source": file_index, "seed": list(seed),
                "x": x_name, "y": y_name, **pair.params.to_dict()}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            records = list(pool.map(work, range(len(jobs_list))))
    else:
        records = [work(i) for i in range(len(jobs_list))]
    for rec in records:
        if progress is not None:
            progress(rec)
    manifest.pairs = records
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def replay_manifest(manifest_path, out_dir, write_ppm=False):
    """Regenerate every pair of a manifest from its recorded parameters.

    Source files are checked against their recorded SHA-256 first.
    """
    manifest = DatasetManifest.read(manifest_path)
    images = {}
    for src in manifest.sources:
        digest = file_sha256(src["path"])
        if digest != src["sha256"]:
            raise ManifestError(
                f"hash mismatch for {src['path']}: manifest {src['sha256'][:12]}, file {digest[:12]}"
            )
        images[src["id"]] = hdr_io.load_hdr(src["path"])
    out_dir = Path(out_dir)
    (out_dir / "pairs").mkdir(parents=True, exist_ok=True)
    for rec in manifest.pairs:
        params = PairParams.from_dict(rec)
        x, y = render_pair(images[rec["source"]], params, manifest.config)
        _write_pair(out_dir, rec["index"], x, y, write_ppm)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


def load_pairs(manifest_path):
    """Read the materialised pairs of a dataset as two ``(n, h, w, 3)`` arrays."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.read(manifest_path)
    root = manifest_path.parent
    xs = [hdr_io.read_pfm((root / p["x"]).read_bytes()) for p in manifest.pairs]
    ys = [hdr_io.read_pfm((root / p["y"]).read_bytes()) for p in manifest.pairs]
    if not xs:
        raise ManifestError(f"{manifest_path}: no pairs recorded")
    return np.stack(xs), np.stack(ys)
