"""Dataset preparation, training and generation drivers.

Configuration is one JSON document; every key is optional and falls back to
the defaults below::

    {
      "tsdf": {"resolution": 64, "extent": 0.45, "truncation": 0.1},
      "wavelet": {"filters": "bior6.8", "level": 3},
      "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
      "generator": {"widths": [16, 32, 32], "attention": true, ...},
      "detail": {"widths": [16, 32, 32], "head_blocks": 1, ...},
      "train_generator": {"iters": 2000, "lr": 1e-4, "batch": 4, "seed": 0},
      "train_detail": {"iters": 5000, "lr": 1e-4, "batch": 4, "seed": 0},
      "sampling": {"steps_div": 10, "seed": 0, "count": 4},
      "evaluation": {"points": 2048, "seed": 0}
    }
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from wavediff.diffusion import NoiseSchedule, build_schedule, sample_many
from wavediff.isosurface import marching_cubes
from wavediff.metrics import MetricReport, evaluate_sets, sample_surface
from wavediff.nn.checkpoint import Checkpoint
from wavediff.nn.models import NetworkDenoiser, UNetConfig
from wavediff.nn.train import NumericalError, TrainConfig, predict_detail, train_detail, train_generator
from wavediff.volume import (
    InvalidConfigError,
    InvalidInputError,
    TriangleMesh,
    TsdfConfig,
    VolumeGrid,
    is_closed_manifold,
    load_obj,
    normalize_mesh,
    sample_tsdf,
    save_obj,
    save_vol,
)
from wavediff.wavelet import (
    WaveletPair,
    available_banks,
    compact_pair,
    decompose,
    load_wvp,
    reconstruct_from_pair,
    reconstruct_full,
    save_wvp,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class DataError(ValueError):
    """Missing, unreadable or corrupted data on disk."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class WaveletConfig:
    filters: str = "bior6.8"
    level: int = 3


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SamplingConfig:
    steps_div: int = 10
    seed: int = 0
    count: int = 4


@dataclass(frozen=True)
class EvalConfig:
    points: int = 2048
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    tsdf: TsdfConfig = TsdfConfig()
    wavelet: WaveletConfig = WaveletConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    generator: UNetConfig = UNetConfig(kind="denoiser")
    detail: UNetConfig = UNetConfig(kind="detail")
    train_generator: TrainConfig = field(default_factory=TrainConfig)
    train_detail: TrainConfig = field(default_factory=lambda: TrainConfig(iters=5000))
    sampling: SamplingConfig = SamplingConfig()
    evaluation: EvalConfig = EvalConfig()

    def __post_init__(self):
        if self.wavelet.filters not in available_banks():
            raise InvalidConfigError(f"unknown filter bank {self.wavelet.filters!r}; choose from {available_banks()}")
        level = self.wavelet.level
        if level < 1 or self.tsdf.resolution % 2**level or self.tsdf.resolution // 2**level < 2:
            raise InvalidConfigError(f"level {level} does not divide resolution {self.tsdf.resolution}")
        if self.generator.kind != "denoiser" or self.detail.kind != "detail":
            raise InvalidConfigError("generator must be a 'denoiser' and detail a 'detail' network")
        for name, net in (("generator", self.generator), ("detail", self.detail)):
            if self.coarse_resolution % 2 ** (len(net.widths) - 1):
                raise InvalidConfigError(
                    f"{name} has {len(net.widths)} stages, too deep for coarse resolution {self.coarse_resolution}"
                )
        if self.sampling.steps_div < 1 or self.sampling.count < 0:
            raise InvalidConfigError("steps_div must be >= 1 and count >= 0")

    @property
    def coarse_resolution(self) -> int:
        return self.tsdf.resolution // 2**self.wavelet.level

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s.T, s.beta_start, s.beta_end)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            value = getattr(self, f.name)
            d[f.name] = value.to_dict() if isinstance(value, UNetConfig) else asdict(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        types = {
            "tsdf": TsdfConfig, "wavelet": WaveletConfig, "schedule": ScheduleConfig,
            "generator": UNetConfig, "detail": UNetConfig, "train_generator": TrainConfig,
            "train_detail": TrainConfig, "sampling": SamplingConfig, "evaluation": EvalConfig,
        }
        unknown = set(d) - set(types)
        if unknown:
            raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        defaults = cls()
        for name, typ in types.items():
            if name not in d:
                continue
            section = d[name]
            if not isinstance(section, dict):
                raise InvalidConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise InvalidConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = replace(getattr(defaults, name), **section)
            except (TypeError, ValueError) as exc:
                raise InvalidConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise InvalidConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def override(self, section: str, **values) -> "PipelineConfig":
        """Copy with the non-None ``values`` replaced in one section."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(str(exc)) from exc


# ----------------------------------------------------------------------------
# dataset preparation


@dataclass
class ManifestEntry:
    source: str
    source_hash: str
    status: str  # "ok" or "failed"
    wvp: str | None = None
    wvp_hash: str | None = None
    error: str | None = None


@dataclass
class DatasetManifest:
    """Prepared pairs plus failure records; written next to the .wvp files."""

    settings: dict
    entries: list[ManifestEntry] = field(default_factory=list)
    computed: int = 0
    skipped: int = 0

    @property
    def ok(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.status == "ok"]

    @property
    def failed(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.status == "failed"]

    def to_json(self) -> str:
        return json.dumps({"settings": self.settings, "entries": [asdict(e) for e in self.entries]},
                          indent=2, sort_keys=True) + "\n"

    def save(self, directory) -> None:
        (Path(directory) / MANIFEST_NAME).write_text(self.to_json())

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        path = Path(directory) / MANIFEST_NAME
        try:
            d = json.loads(path.read_text())
            return cls(d["settings"], [ManifestEntry(**e) for e in d["entries"]])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


def _prep_settings(cfg: PipelineConfig) -> dict:
    return {"tsdf": asdict(cfg.tsdf), "wavelet": asdict(cfg.wavelet)}


def mesh_to_pair(mesh: TriangleMesh, cfg: PipelineConfig) -> tuple[WaveletPair, VolumeGrid]:
    """Normalise, sample the TSDF and keep the compact (C^J, D^J) pair."""
    mesh = mesh.cleaned()
    if mesh.is_empty:
        raise InvalidInputError("mesh has no non-degenerate triangles")
    if not is_closed_manifold(mesh):
        log.warning("mesh is not watertight; inside/outside signs may be wrong near holes")
    tsdf = sample_tsdf(normalize_mesh(mesh, cfg.tsdf.extent), cfg.tsdf)
    levels = decompose(tsdf, cfg.wavelet.filters, cfg.wavelet.level)
    return compact_pair(levels, cfg.wavelet.level, cfg.tsdf), tsdf


def pair_deviation(pair: WaveletPair, tsdf: VolumeGrid, filters: str) -> dict:
    """Compact-pair reconstruction error against the sampled TSDF."""
    diff = np.abs(reconstruct_from_pair(pair, filters).values - tsdf.values)
    tau = tsdf.truncation or 1.0
    return {"mean_abs": float(diff.mean()), "max_abs": float(diff.max()),
            "mean_over_tau": float(diff.mean() / tau)}


def prepare_mesh(mesh_path, out_path, cfg: PipelineConfig) -> dict:
    """One mesh to one .wvp; returns deviation statistics of the round trip."""
    pair, tsdf = mesh_to_pair(load_obj(mesh_path), cfg)
    save_wvp(pair, out_path)
    stats = pair_deviation(pair, tsdf, cfg.wavelet.filters)
    full = reconstruct_full(decompose(tsdf, cfg.wavelet.filters, cfg.wavelet.level), cfg.wavelet.filters)
    stats["full_pyramid_max_abs"] = float(np.abs(full.values - tsdf.values).max())
    return stats


def prepare_dataset(mesh_dir, out_dir, cfg: PipelineConfig) -> DatasetManifest:
    """Convert every OBJ in ``mesh_dir`` into a .wvp under ``out_dir``.

    Meshes whose content hash and preparation settings match the existing
    manifest (and whose .wvp still matches its recorded hash) are skipped.
    Meshes that fail are recorded and skipped.
    """
    mesh_dir, out_dir = Path(mesh_dir), Path(out_dir)
    sources = sorted(mesh_dir.glob("*.obj"))
    if not sources:
        raise DataError(f"no .obj files in {mesh_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = _prep_settings(cfg)
    previous = {}
    if (out_dir / MANIFEST_NAME).exists():
        try:
            old = DatasetManifest.load(out_dir)
            if old.settings == settings:
                previous = {e.source: e for e in old.entries}
        except DataError as exc:
            log.warning("ignoring unreadable manifest: %s", exc)
    manifest = DatasetManifest(settings)
    for src in sources:
        key = src.name
        src_hash = sha256_file(src)
        prev = previous.get(key)
        if prev is not None and prev.source_hash == src_hash:
            if prev.status == "failed":
                manifest.entries.append(prev)
                manifest.skipped += 1
                continue
            wvp = out_dir / prev.wvp
            if wvp.exists() and sha256_file(wvp) == prev.wvp_hash:
                manifest.entries.append(prev)
                manifest.skipped += 1
                continue
        wvp_name = src.stem + ".wvp"
        try:
            pair, _ = mesh_to_pair(load_obj(src), cfg)
        except (InvalidInputError, ValueError) as exc:
            log.warning("skipping %s: %s", src, exc)
            manifest.entries.append(ManifestEntry(key, src_hash, "failed", error=str(exc)))
            manifest.computed += 1
            continue
        save_wvp(pair, out_dir / wvp_name)
        manifest.entries.append(ManifestEntry(key, src_hash, "ok", wvp_name, sha256_file(out_dir / wvp_name)))
        manifest.computed += 1
    manifest.save(out_dir)
    return manifest


def load_dataset(data_dir) -> list[WaveletPair]:
    """Pairs listed in the manifest (hashes verified), else every .wvp."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    if (data_dir / MANIFEST_NAME).exists():
        paths = []
        for e in DatasetManifest.load(data_dir).ok:
            p = data_dir / e.wvp
            if not p.exists():
                raise DataError(f"{p} listed in manifest but missing")
            if sha256_file(p) != e.wvp_hash:
                raise DataError(f"{p} does not match its manifest hash")
            paths.append(p)
    else:
        paths = sorted(data_dir.glob("*.wvp"))
    if not paths:
        raise DataError(f"no wavelet pairs in {data_dir}")
    pairs = [load_wvp(p) for p in paths]
    shapes = {(p.coarse.resolution, p.detail.resolution, p.level) for p in pairs}
    if len(shapes) != 1:
        raise DataError(f"pairs in {data_dir} have mixed resolutions/levels: {sorted(shapes)}")
    return pairs


# ----------------------------------------------------------------------------
# training


def _training_meta(cfg: PipelineConfig) -> dict:
    return {"tsdf": asdict(cfg.tsdf), "wavelet": asdict(cfg.wavelet), "schedule": asdict(cfg.schedule)}


def _check_pairs(pairs, cfg: PipelineConfig):
    got = pairs[0].coarse.resolution
    if got != cfg.coarse_resolution or pairs[0].level != cfg.wavelet.level:
        raise InvalidConfigError(
            f"data has coarse resolution {got} at level {pairs[0].level}, config expects "
            f"{cfg.coarse_resolution} at level {cfg.wavelet.level}"
        )


def run_train_generator(pairs, cfg: PipelineConfig, out_path, log_path=None) -> Checkpoint:
    _check_pairs(pairs, cfg)
    tc = replace(cfg.train_generator, checkpoint_path=str(out_path), log_path=log_path)
    ckpt = train_generator([p.coarse for p in pairs], tc, cfg.generator, cfg.noise_schedule())
    ckpt.meta.update(_training_meta(cfg))
    ckpt.save(out_path)
    return ckpt


def run_train_detail(pairs, cfg: PipelineConfig, out_path, log_path=None) -> Checkpoint:
    _check_pairs(pairs, cfg)
    tc = replace(cfg.train_detail, checkpoint_path=str(out_path), log_path=log_path)
    ckpt = train_detail(pairs, tc, cfg.detail)
    ckpt.meta.update(_training_meta(cfg))
    ckpt.save(out_path)
    return ckpt


# ----------------------------------------------------------------------------
# generation


def _check_checkpoint(ckpt: Checkpoint, expected: UNetConfig, role: str):
    if ckpt.config.to_dict() != expected.to_dict():
        raise InvalidConfigError(
            f"{role} checkpoint architecture {ckpt.config.to_dict()} does not match "
            f"configured architecture {expected.to_dict()}"
        )


def generate_coarse(gen: Checkpoint, cfg: PipelineConfig, indices, seed: int,
                    trace_dir=None) -> np.ndarray:
    """Sampled coarse volumes in data units, one per index.

    Chains run one at a time: batched BLAS calls may round differently from
    single ones, and a shape must not depend on which others share its batch.
    """
    sched = cfg.noise_schedule()
    denoiser = NetworkDenoiser(gen.build_network())
    traces = [tr for i in indices
              for tr in sample_many(denoiser, sched, cfg.coarse_resolution, cfg.sampling.steps_div, seed, [i],
                                    record=trace_dir is not None)]
    coarse = np.stack([gen.input_norm.invert(tr.final) for tr in traces]) if traces else np.zeros(0)
    if not np.all(np.isfinite(coarse)):
        raise NumericalError("sampling produced non-finite coarse coefficients")
    if trace_dir is not None:
        _dump_traces(traces, gen, cfg, Path(trace_dir))
    return coarse


def _dump_traces(traces, gen: Checkpoint, cfg: PipelineConfig, trace_dir: Path):
    trace_dir.mkdir(parents=True, exist_ok=True)
    extent = cfg.tsdf.extent
    for tr in traces:
        for k, vol in enumerate(tr.intermediates):
            step = tr.steps_used[k] if k < len(tr.steps_used) else 0
            grid = VolumeGrid(gen.input_norm.invert(vol), extent)
            save_vol(grid, trace_dir / f"shape_{tr.sample_index:04d}_k{k:04d}_t{step:04d}.vol")


def coarse_to_mesh(coarse: np.ndarray, detail: np.ndarray | None, cfg: PipelineConfig) -> TriangleMesh:
    extent = cfg.tsdf.extent
    if detail is None:
        detail = np.zeros((2 * coarse.shape[0],) * 3)
    pair = WaveletPair(cfg.wavelet.level, VolumeGrid(coarse, extent), VolumeGrid(detail, extent), cfg.tsdf)
    return marching_cubes(reconstruct_from_pair(pair, cfg.wavelet.filters))


def generate_shapes(gen_ckpt, detail_ckpt, count: int, cfg: PipelineConfig, out_dir, seed: int | None = None,
                    trace_dir=None) -> list[Path]:
    """Sample ``count`` shapes to ``out_dir/shape_XXXX.obj`` plus metadata.json.

    Shape ``i`` uses RNG streams keyed by (seed, i), so any shape can be
    regenerated on its own. Without a detail checkpoint the detail volume is
    zero and the metadata says so.
    """
    seed = cfg.sampling.seed if seed is None else seed
    gen = gen_ckpt if isinstance(gen_ckpt, Checkpoint) else Checkpoint.load(gen_ckpt)
    _check_checkpoint(gen, cfg.generator, "generator")
    det = None
    if detail_ckpt is not None:
        det = detail_ckpt if isinstance(detail_ckpt, Checkpoint) else Checkpoint.load(detail_ckpt)
        _check_checkpoint(det, cfg.detail, "detail")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = list(range(count))
    coarse = generate_coarse(gen, cfg, indices, seed, trace_dir)
    paths, records = [], []
    detail_net = det.build_network() if det is not None else None
    for i in indices:
        detail = predict_detail(det, coarse[i], detail_net) if det is not None else None
        mesh = coarse_to_mesh(coarse[i], detail, cfg)
        path = out_dir / f"shape_{i:04d}.obj"
        save_obj(mesh, path)
        paths.append(path)
        records.append({"file": path.name, "sha256": sha256_file(path), "sample_index": i,
                        "vertices": len(mesh.vertices), "triangles": len(mesh.triangles)})
    meta = {
        "seed": seed,
        "count": count,
        "steps_div": cfg.sampling.steps_div,
        "detail_predictor": det is not None,
        "mode": "full" if det is not None else "no-detail",
        "generator_sha256": hashlib.sha256(gen.to_bytes()).hexdigest(),
        "detail_sha256": hashlib.sha256(det.to_bytes()).hexdigest() if det is not None else None,
        "config": cfg.to_dict(),
        "shapes": records,
    }
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


# ----------------------------------------------------------------------------
# evaluation


def _cloud_seed(seed: int, set_id: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, set_id, index]).generate_state(1)[0])


def mesh_clouds(meshes, points: int, seed: int, set_id: int, names=None) -> list[np.ndarray]:
    clouds = []
    for i, mesh in enumerate(meshes):
        try:
            clouds.append(sample_surface(mesh, points, _cloud_seed(seed, set_id, i)))
        except InvalidInputError as exc:
            name = names[i] if names else f"mesh {i}"
            raise DataError(f"cannot sample {name}: {exc}") from exc
    return clouds


def load_mesh_dir(directory) -> tuple[list[TriangleMesh], list[str]]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.obj"))
    if not paths:
        raise DataError(f"no .obj files in {directory}")
    return [load_obj(p) for p in paths], [str(p) for p in paths]


def evaluate_dirs(gen_dir, ref_dir, points: int = 2048, seed: int = 0, kinds=("CD", "EMD")) -> MetricReport:
    gen, gen_names = load_mesh_dir(gen_dir)
    ref, ref_names = load_mesh_dir(ref_dir)
    return evaluate_sets(mesh_clouds(gen, points, seed, 0, gen_names),
                         mesh_clouds(ref, points, seed, 1, ref_names), kinds)


def reference_meshes(pairs, cfg: PipelineConfig) -> list[TriangleMesh]:
    """Training shapes as seen through the compact representation."""
    return [marching_cubes(reconstruct_from_pair(p, cfg.wavelet.filters, cfg.tsdf.truncation)) for p in pairs]


def run_ablation(mode: str, pairs, cfg: PipelineConfig, gen_ckpt, detail_ckpt, out_dir, count: int | None = None,
                 seed: int | None = None, kinds=("CD", "EMD")) -> MetricReport:
    """Generate under ``mode`` ("full" or "no-detail") and score against the training set."""
    if mode not in ("full", "no-detail"):
        raise InvalidConfigError(f"unknown ablation mode {mode!r}")
    if mode == "full" and detail_ckpt is None:
        raise InvalidConfigError("the full pipeline needs a detail checkpoint")
    count = cfg.sampling.count if count is None else count
    seed = cfg.sampling.seed if seed is None else seed
    out_dir = Path(out_dir) / mode
    paths = generate_shapes(gen_ckpt, detail_ckpt if mode == "full" else None, count, cfg, out_dir, seed)
    gen = [load_obj(p) for p in paths]
    ev = cfg.evaluation
    report = evaluate_sets(mesh_clouds(gen, ev.points, ev.seed, 0, [str(p) for p in paths]),
                           mesh_clouds(reference_meshes(pairs, cfg), ev.points, ev.seed, 1), kinds)
    report.write_csv(out_dir / "report.csv")
    return report
