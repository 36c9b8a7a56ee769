"""Open-set identification benchmark: synthetic data, gallery protocol,
protection metrics and the experiment harness.

The benchmark mirrors a practical identification setup: one probe per
protected identity, a gallery holding the remaining images of those
identities plus held-out images of the target identities plus distractor
identities, and a substitute target set whose images never appear in the
gallery. Success is measured by ranking the gallery by feature distance:

* Rank-N-T  - some top-N gallery image belongs to a target identity.
* Rank-N-UT - no top-N gallery image carries the probe's true identity.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .baselines import DiversityConfig, dim_protect, mim_protect, mt_dim_protect
from .embedding import squared_distances
from .masking import protect_batch, protect_single
from .metrics import psnr, ssim
from .objective import mmd, perturbation_scale_bandwidths
from .selection import TargetSet
from .validation import LabeledImage, check_image

METHODS = ("tip-im", "center-opt", "mt-dim", "dim", "mim", "clean")


@dataclass(frozen=True)
class BenchmarkConfig:
    """Counts and shape for the synthetic open-set benchmark."""

    protected_identities: int = 50
    images_per_identity: int = 4
    target_identities: int = 10
    target_images_per_identity: int = 3
    distractor_identities: int = 50
    distractor_images_per_identity: int = 1
    height: int = 48
    width: int = 48
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.protected_identities,
            self.images_per_identity,
            self.target_identities,
            self.target_images_per_identity,
            self.distractor_identities,
            self.distractor_images_per_identity,
        )
        if min(counts) < 1:
            raise ValueError("all benchmark counts must be at least 1")
        if self.images_per_identity < 2:
            raise ValueError("images_per_identity must be >= 2 (probe + gallery)")
        if self.target_images_per_identity < 2:
            raise ValueError(
                "target_images_per_identity must be >= 2 (substitute + gallery)"
            )
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if min(self.height, self.width) < 2:
            raise ValueError("height and width must be at least 2")


# The synthetic face domain. Identities are smooth cosine textures: a
# shared very-low-frequency structure (the part every face has in common)
# plus an identity-specific combination of fixed orthonormal cosine/sine
# atoms. The population clusters into a few fixed modes, and identity
# deviations have constant magnitude, so distances between identities
# concentrate: close enough that a budget-bounded mask can reach a
# target identity, far enough apart that clean identification is easy.
# The atom bank and mode centers are domain constants (like the shared
# structure of real faces); dataset seeds draw the identities themselves.
_DOMAIN_SEED = 20240817
_COMMON_ATOMS = 3
_ATOM_PAIRS = (
    (0, 1), (1, 0), (1, 1), (1, -1), (0, 2), (2, 0),
    (2, 1), (1, 2), (2, -1), (-1, 2), (2, 2), (2, -2),
)
_N_MODES = 3
_MODE_SCALE = 2.0
_IDENTITY_SPREAD = 1.3
_SHIFTS = ((0, 0), (0, 0), (0, 0), (0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def _domain_banks(h, w):
    """(common atoms, orthonormal identity atoms) for one image shape."""
    rng = np.random.default_rng(_DOMAIN_SEED)
    v, u = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    common = []
    for _ in range(_COMMON_ATOMS):
        fu, fv = rng.uniform(0.08, 0.3, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        common.append(np.cos(2.0 * np.pi * (fu * u + fv * v) + phase))
    ident = []
    for ku, kv in _ATOM_PAIRS:
        ident.append(np.cos(2.0 * np.pi * (ku * u + kv * v)))
        ident.append(np.sin(2.0 * np.pi * (ku * u + kv * v)))
    ident = np.array(ident)
    norms = np.linalg.norm(ident.reshape(len(ident), -1), axis=1)
    # sine atoms vanish when a frequency hits the sampling grid exactly
    # (tiny images); drop them instead of dividing by zero
    keep = norms > 1e-9
    ident = ident[keep] / norms[keep, None, None]
    return np.array(common), ident


def _mode_centers(n_atoms):
    rng = np.random.default_rng(_DOMAIN_SEED + 1)
    return _MODE_SCALE * rng.standard_normal((_N_MODES, n_atoms))


class _IdentityFactory:
    """Draws identity base images for one dataset seed."""

    def __init__(self, rng, h, w, c):
        self.rng = rng
        self.channels = c
        self.common_atoms, self.ident_atoms = _domain_banks(h, w)
        self.modes = _mode_centers(len(self.ident_atoms))
        self.shared = np.tensordot(
            rng.standard_normal(len(self.common_atoms)), self.common_atoms, axes=1
        )
        self.count = 0

    def next_base(self):
        k = len(self.ident_atoms)
        mode = self.modes[self.count % _N_MODES]
        self.count += 1
        direction = self.rng.standard_normal(k)
        direction *= np.sqrt(k) / np.linalg.norm(direction)
        coeffs = mode + _IDENTITY_SPREAD * direction
        plane = self.shared + np.tensordot(coeffs, self.ident_atoms, axes=1)
        lo, hi = plane.min(), plane.max()
        if hi - lo < 1e-12:
            plane = np.full_like(plane, 0.5)
        else:
            plane = 0.15 + 0.7 * (plane - lo) / (hi - lo)
        return np.repeat(plane[:, :, None], self.channels, axis=2)


def _identity_samples(rng, base, count):
    """Per-sample variation: pixel noise, brightness shift, one-pixel
    circular translation (a cardinal direction or none), then the clamp."""
    samples = []
    for _ in range(count):
        noisy = base + rng.normal(0.0, 0.03, size=base.shape)
        noisy = noisy + rng.uniform(-0.05, 0.05)
        shift = _SHIFTS[rng.integers(0, len(_SHIFTS))]
        noisy = np.roll(noisy, shift, axis=(0, 1))
        samples.append(np.clip(noisy, 0.0, 1.0))
    return samples


def synthesize_identities(
    n_identities, images_per_identity, shape, seed, label_offset=0, index_offset=0
):
    """Deterministic synthetic identity population."""
    h, w, c = shape
    rng = np.random.default_rng(seed)
    factory = _IdentityFactory(rng, h, w, c)
    out = []
    index = index_offset
    for ident in range(n_identities):
        base = factory.next_base()
        for img in _identity_samples(rng, base, images_per_identity):
            out.append(LabeledImage(img, label_offset + ident, index))
            index += 1
    return out


def build_synthetic_dataset(config):
    """All benchmark identities in role order: protected, target, distractor."""
    rng = np.random.default_rng(config.seed)
    factory = _IdentityFactory(rng, config.height, config.width, config.channels)
    out = []
    index = 0
    label = 0
    for count, per in (
        (config.protected_identities, config.images_per_identity),
        (config.target_identities, config.target_images_per_identity),
        (config.distractor_identities, config.distractor_images_per_identity),
    ):
        for _ in range(count):
            base = factory.next_base()
            for img in _identity_samples(rng, base, per):
                out.append(LabeledImage(img, label, index))
                index += 1
            label += 1
    return out


@dataclass
class Benchmark:
    """Probe/gallery split plus the substitute target set."""

    probes: list
    gallery: list
    target_set: TargetSet
    target_set_identities: tuple
    target_identity_labels: frozenset
    config: BenchmarkConfig
    _caches: object = field(default_factory=weakref.WeakKeyDictionary, repr=False)

    def gallery_features(self, model):
        if model not in self._caches:
            images = np.stack([item.image for item in self.gallery])
            self._caches[model] = model.transform(images)
        return self._caches[model]

    @property
    def gallery_labels(self):
        return np.asarray([item.identity for item in self.gallery])

    def with_target_subset(self, count):
        """A view restricted to the first ``count`` target identities."""
        idents = self.target_set_identities[:count]
        return Benchmark(
            probes=self.probes,
            gallery=self.gallery,
            target_set=self.target_set.subset(count),
            target_set_identities=idents,
            target_identity_labels=frozenset(idents),
            config=self.config,
        )


def build_benchmark(config):
    """Split the synthetic dataset per the open-set recipe.

    Per protected identity the first image becomes the probe and the rest
    join the gallery; per target identity the first image joins the
    substitute target set and the rest join the gallery (so optimization
    and testing never share a target image); distractors are gallery-only.
    """
    dataset = build_synthetic_dataset(config)
    p = config.protected_identities
    t = config.target_identities
    probes = []
    gallery = []
    target_images = []
    target_idents = []
    for item in dataset:
        if item.identity < p:
            if _is_first_of_identity(item, dataset):
                probes.append(item)
            else:
                gallery.append(item)
        elif item.identity < p + t:
            if _is_first_of_identity(item, dataset):
                target_images.append(item.image)
                target_idents.append(item.identity)
            else:
                gallery.append(item)
        else:
            gallery.append(item)
    bench = Benchmark(
        probes=probes,
        gallery=gallery,
        target_set=TargetSet(np.stack(target_images)),
        target_set_identities=tuple(target_idents),
        target_identity_labels=frozenset(target_idents),
        config=config,
    )
    audit_benchmark(bench)
    return bench


def _is_first_of_identity(item, dataset):
    # dataset is generated identity-contiguous and index-ordered
    return item.index == 0 or dataset[item.index - 1].identity != item.identity


def audit_benchmark(benchmark):
    """Raise unless the split invariants hold (byte-level disjointness)."""
    gallery_bytes = {item.image.tobytes() for item in benchmark.gallery}
    gallery_idents = {item.identity for item in benchmark.gallery}
    for probe in benchmark.probes:
        if probe.image.tobytes() in gallery_bytes:
            raise AssertionError(f"probe {probe.index} appears in the gallery")
        if probe.identity not in gallery_idents:
            raise AssertionError(f"probe identity {probe.identity} has no gallery image")
    by_identity = {}
    for item in benchmark.gallery:
        by_identity.setdefault(item.identity, set()).add(item.image.tobytes())
    for ident, img in zip(
        benchmark.target_set_identities, benchmark.target_set.images
    ):
        if img.tobytes() in by_identity.get(ident, set()):
            raise AssertionError(f"target-set image of identity {ident} is in the gallery")
    indices = [p.index for p in benchmark.probes] + [g.index for g in benchmark.gallery]
    if len(indices) != len(set(indices)):
        raise AssertionError("dataset ordinals are not unique")


def _ranked_labels(benchmark, model, feat_probe, n):
    dists = squared_distances(feat_probe[None], benchmark.gallery_features(model))[0]
    order = np.argsort(dists, kind="stable")
    return benchmark.gallery_labels[order[:n]]


def rank_flags(model, probe, true_label, benchmark, n):
    """(rankN_t, rankN_ut) for one probe image against the gallery.

    Gallery images are ranked by squared feature distance ascending, ties
    broken by gallery position (stable sort).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n > len(benchmark.gallery):
        raise ValueError(f"n={n} exceeds gallery size {len(benchmark.gallery)}")
    top = _ranked_labels(benchmark, model, model.embed(probe), n)
    rank_t = bool(np.isin(top, list(benchmark.target_identity_labels)).any())
    rank_ut = bool(true_label not in top)
    return rank_t, rank_ut


def clean_identification_rate(benchmark, model):
    """Fraction of unprotected probes whose top-1 match has the true
    identity; the calibration premise for every protection experiment."""
    hits = 0
    for probe in benchmark.probes:
        _, rank1_ut = rank_flags(model, probe.image, probe.identity, benchmark, 1)
        hits += int(not rank1_ut)
    return hits / len(benchmark.probes)


@dataclass(frozen=True)
class ProbeResult:
    probe_index: int
    identity: int
    rank1_t: bool
    rank5_t: bool
    rank1_ut: bool
    rank5_ut: bool
    psnr: float
    ssim: float


@dataclass
class ProtectionReport:
    """Per-probe outcomes against one evaluation model plus aggregates."""

    method: str
    model_name: str
    white_box: bool
    rows: list
    mmd_value: float
    config: dict

    def _rate(self, name):
        return float(np.mean([getattr(r, name) for r in self.rows]))

    @property
    def rank1_t(self):
        return self._rate("rank1_t")

    @property
    def rank5_t(self):
        return self._rate("rank5_t")

    @property
    def rank1_ut(self):
        return self._rate("rank1_ut")

    @property
    def rank5_ut(self):
        return self._rate("rank5_ut")

    @property
    def psnr_mean(self):
        return self._rate("psnr")

    @property
    def ssim_mean(self):
        vals = [r.ssim for r in self.rows]
        return float(np.mean(vals)) if not np.any(np.isnan(vals)) else float("nan")

    def to_text(self):
        lines = [
            f"method: {self.method}",
            f"model: {self.model_name}",
            f"white_box: {str(self.white_box).lower()}",
            f"probes: {len(self.rows)}",
            f"rank1_t: {self.rank1_t!r}",
            f"rank5_t: {self.rank5_t!r}",
            f"rank1_ut: {self.rank1_ut!r}",
            f"rank5_ut: {self.rank5_ut!r}",
            f"psnr_mean: {self.psnr_mean!r}",
            f"ssim_mean: {self.ssim_mean!r}",
            f"mmd: {self.mmd_value!r}",
        ]
        lines += [f"config.{k}: {v!r}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    CSV_HEADER = "probe_index,identity,rank1_t,rank5_t,rank1_ut,rank5_ut,psnr,ssim"

    def to_csv(self):
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.probe_index},{r.identity},{int(r.rank1_t)},{int(r.rank5_t)},"
                f"{int(r.rank1_ut)},{int(r.rank5_ut)},{r.psnr!r},{r.ssim!r}"
            )
        return "\n".join(lines) + "\n"


def normalize_method(name):
    key = name.strip().lower()
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return key


def _white_box_score(benchmark, surrogate, protected, n5):
    """Per-probe lexicographic success score against the surrogate, used to
    keep the best single-target attempt."""
    scores = np.zeros(len(benchmark.probes), dtype=np.int64)
    for i, probe in enumerate(benchmark.probes):
        r1t, r1ut = rank_flags(surrogate, protected[i], probe.identity, benchmark, 1)
        r5t, r5ut = rank_flags(surrogate, protected[i], probe.identity, benchmark, n5)
        scores[i] = 8 * int(r1t) + 4 * int(r5t) + 2 * int(r1ut) + int(r5ut)
    return scores


def _protect_chunked(probes, targets, surrogate, cfg, chunk):
    """Optimize probes in independent batches of ``chunk``.

    Each chunk is one batch objective; per-item selection, gradient
    normalization and momentum make the chunks fully separable, so the
    chunk size only sets the population the naturalness term matches
    against. Small chunks couple each image more strongly to the batch
    statistic (the per-item weight of the discrepancy term scales with
    one over the squared batch size).
    """
    pieces = []
    for start in range(0, probes.shape[0], chunk):
        piece, _ = protect_batch(probes[start : start + chunk], targets, surrogate, cfg)
        pieces.append(piece)
    return np.concatenate(pieces)


MMD_CHUNK_DEFAULT = 10


def _protect_probes(benchmark, method, surrogate, attack, diversity, mmd_batch):
    probes = np.stack([p.image for p in benchmark.probes])
    targets = benchmark.target_set
    if method == "clean":
        return probes
    if method == "tip-im":
        cfg = dc_replace(attack, selection="greedy")
        return _protect_chunked(probes, targets, surrogate, cfg, mmd_batch)
    if method == "center-opt":
        cfg = dc_replace(attack, selection="center")
        return _protect_chunked(probes, targets, surrogate, cfg, mmd_batch)
    if method == "mt-dim":
        return mt_dim_protect(probes, targets, surrogate, attack, diversity)
    # single-target methods: attempt every target, keep the attempt with the
    # best white-box outcome per probe (ties to the lowest target index)
    n5 = min(5, len(benchmark.gallery))
    best = None
    best_scores = None
    for k in range(len(targets)):
        if method == "mim":
            candidate = mim_protect(probes, targets.images[k], surrogate, attack)
        else:
            candidate = dim_protect(probes, targets.images[k], surrogate, attack, diversity)
        scores = _white_box_score(benchmark, surrogate, candidate, n5)
        if best is None:
            best = candidate.copy()
            best_scores = scores
        else:
            better = scores > best_scores
            best[better] = candidate[better]
            best_scores = np.maximum(best_scores, scores)
    return best


def run_experiment(
    benchmark, method, surrogate, eval_models, attack, *, diversity=None,
    mmd_batch=MMD_CHUNK_DEFAULT,
):
    """Protect every probe with ``method`` against the surrogate and score
    the result against each evaluation model.

    ``eval_models`` maps a display name to an embedding model; the report
    for the surrogate itself is flagged white-box. ``mmd_batch`` is the
    optimization chunk size for the batch-objective methods. Returns a
    dict of :class:`ProtectionReport` in ``eval_models`` order.
    """
    method = normalize_method(method)
    if len(benchmark.gallery) < 5:
        raise ValueError("benchmark gallery must hold at least 5 images")
    if diversity is None:
        diversity = DiversityConfig()
    probes = np.stack([p.image for p in benchmark.probes])
    protected = _protect_probes(benchmark, method, surrogate, attack, diversity, mmd_batch)

    shape = probes.shape[1:]
    bandwidths = (
        np.asarray(attack.bandwidths, dtype=np.float64)
        if attack.bandwidths is not None
        else perturbation_scale_bandwidths(attack.epsilon, shape)
    )
    mmd_value = mmd(protected, probes, bandwidths)
    can_ssim = min(shape[0], shape[1]) >= 11
    quality = [
        (
            psnr(protected[i], probes[i]),
            ssim(protected[i], probes[i]) if can_ssim else float("nan"),
        )
        for i in range(len(benchmark.probes))
    ]

    config_echo = {
        "norm_type": attack.norm_type,
        "epsilon": attack.epsilon,
        "alpha": attack.alpha,
        "iterations": attack.iterations,
        "momentum": attack.momentum,
        "gamma": attack.gamma,
        "selection": attack.selection,
        "targets": len(benchmark.target_set),
        "benchmark_seed": benchmark.config.seed,
    }

    reports = {}
    for name, model in eval_models.items():
        rows = []
        for i, probe in enumerate(benchmark.probes):
            r1t, r1ut = rank_flags(model, protected[i], probe.identity, benchmark, 1)
            r5t, r5ut = rank_flags(model, protected[i], probe.identity, benchmark, 5)
            rows.append(
                ProbeResult(
                    probe_index=probe.index,
                    identity=probe.identity,
                    rank1_t=r1t,
                    rank5_t=r5t,
                    rank1_ut=r1ut,
                    rank5_ut=r5ut,
                    psnr=quality[i][0],
                    ssim=quality[i][1],
                )
            )
        reports[name] = ProtectionReport(
            method=method,
            model_name=name,
            white_box=model is surrogate,
            rows=rows,
            mmd_value=mmd_value,
            config=dict(config_echo),
        )
    return reports


def run_gamma_sweep(benchmark, surrogate, eval_models, attack, gammas, method="tip-im"):
    """One experiment per naturalness weight; same benchmark and models."""
    out = {}
    for gamma in gammas:
        cfg = dc_replace(attack, gamma=float(gamma))
        out[float(gamma)] = run_experiment(benchmark, method, surrogate, eval_models, cfg)
    return out


def run_target_count_sweep(
    benchmark, surrogate, eval_models, attack, counts, method="tip-im"
):
    """One experiment per substitute-target-set size (first k identities)."""
    out = {}
    for count in counts:
        view = benchmark.with_target_subset(int(count))
        out[int(count)] = run_experiment(view, method, surrogate, eval_models, attack)
    return out


def standard_setup(seed=0, benchmark_config=None, train_config=None, linear_components=32):
    """Benchmark plus the default model pair for one experiment seed.

    The surrogate is a trained embedder fitted on a disjoint synthetic
    population (seed offset keeps the identities open-set); the held-out
    evaluator is the fixed random projection. Returns
    (benchmark, surrogate, eval_models) with eval order surrogate first.
    """
    from .embedding import TrainConfig, make_linear_model, train_mlp_model

    if benchmark_config is None:
        benchmark_config = BenchmarkConfig(seed=seed)
    benchmark = build_benchmark(benchmark_config)
    if train_config is None:
        train_config = TrainConfig(seed=205 + benchmark_config.seed)
    shape = (
        benchmark_config.height,
        benchmark_config.width,
        benchmark_config.channels,
    )
    population = synthesize_identities(
        train_config.n_identities,
        train_config.images_per_identity,
        shape,
        seed=1000 + benchmark_config.seed,
    )
    surrogate = train_mlp_model(population, train_config)
    holdout = make_linear_model(11 + benchmark_config.seed, shape, linear_components)
    return benchmark, surrogate, {"surrogate": surrogate, "holdout": holdout}


def run_batch_size_sweep(image, targets, model, attack, sizes, seed=0):
    """Quality of single-image protection versus the augmentation batch
    size used to back the naturalness term."""
    img = check_image(image)
    can_ssim = min(img.shape[0], img.shape[1]) >= 11
    out = {}
    for size in sizes:
        protected, _ = protect_single(
            img, targets, model, attack, batch_size=int(size), seed=seed
        )
        out[int(size)] = (
            psnr(protected, img),
            ssim(protected, img) if can_ssim else float("nan"),
        )
    return out
