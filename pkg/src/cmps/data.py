"""Dataset generators, loaders, and domain-scaling transforms.

Every dataset is a plain ``T x N`` float matrix plus per-column metadata: a
domain tag saying where the variable lives, and an affine record mapping the
column's *original* units to the stored values so that density corrections
(``log |dy/dx|`` terms) can always be reconstructed.  Generators are
deterministic functions of their seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SchemaError
from .features import DomainTag

__all__ = [
    "Dataset",
    "CUBE_MATRIX",
    "CUBE_ENTROPY",
    "MOONS_TIP_CONSTANT",
    "moons_entropy",
    "gen_rotated_cube",
    "gen_two_moons",
    "gen_compressible",
    "gen_xy_model",
    "load_iris",
    "rescale",
    "kfold_indices",
    "save_csv",
    "load_csv",
]


@dataclass
class Dataset:
    """Sample matrix with per-column domains and scaling provenance.

    ``scaling[k] = (offset, scale)`` encodes ``stored = (orig - offset) * scale``
    for column k, so the stored-units log-density converts to original units
    by subtracting ``sum_k log |scale_k|``.  ``entropy`` (when known) is the
    differential entropy of the generating distribution in original units.
    """

    name: str
    seed: int
    values: np.ndarray
    domains: list
    scaling: list
    entropy: float | None = None
    column_names: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a T x N matrix")
        n = self.values.shape[1]
        if len(self.domains) != n or len(self.scaling) != n:
            raise ValueError("need one domain tag and scaling record per column")
        if self.column_names is None:
            self.column_names = [f"x{k}" for k in range(n)]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def log_scale(self) -> float:
        """sum_k log |scale_k|: stored-units entropy = entropy + log_scale."""
        return float(sum(math.log(abs(s)) for _, s in self.scaling))

    def validate(self) -> None:
        for k, dom in enumerate(self.domains):
            ok = dom.contains(self.values[:, k])
            if not np.all(ok):
                bad = self.values[~np.asarray(ok, bool), k]
                raise DataError(f"column {k}: value {bad.flat[0]!r} outside {dom}")

    def to_original(self) -> np.ndarray:
        """Values mapped back to original units via the scaling records."""
        out = np.empty_like(self.values)
        for k, (off, s) in enumerate(self.scaling):
            out[:, k] = self.values[:, k] / s + off
        return out

    def subset(self, idx) -> "Dataset":
        return Dataset(self.name, self.seed, self.values[idx],
                       list(self.domains), list(self.scaling), self.entropy,
                       list(self.column_names), dict(self.meta))

    def copy(self) -> "Dataset":
        return self.subset(slice(None))


# ---------------------------------------------------------------------------
# rotated cube

CUBE_MATRIX = np.array([
    [1.33,   0.155,  0.074,  0.411,  0.029],
    [-0.072, 1.181,  0.029,  0.375, -0.342],
    [0.306,  0.303,  0.862, -0.226,  0.302],
    [-0.363, 0.217, -0.297,  0.998,  0.125],
    [0.024,  0.229,  0.358,  0.514,  0.875],
])

CUBE_ENTROPY = -0.4246    # log det of the transformation, original units


def gen_rotated_cube(t: int, seed: int = 0) -> Dataset:
    """Uniform cube [-1/2, 1/2]^5 pushed through a fixed linear map.

    Columns are rescaled onto [-1, 1] by the exact extremal values the map
    attains on the cube's vertices (the extreme of ``(Mx)_k`` over sign
    choices is ``sum_j |M_kj| / 2``), so the stored range is tight and the
    scaling record keeps the entropy bookkeeping exact.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, size=(int(t), 5))
    y = x @ CUBE_MATRIX.T
    extreme = np.abs(CUBE_MATRIX).sum(axis=1) / 2.0
    vals = y / extreme
    domains = [DomainTag.compact(-1.0, 1.0) for _ in range(5)]
    scaling = [(0.0, 1.0 / e) for e in extreme]
    return Dataset("rotated-cube", seed, vals, domains, scaling,
                   entropy=CUBE_ENTROPY,
                   column_names=[f"x{k}" for k in range(1, 6)])


# ---------------------------------------------------------------------------
# two moons

MOONS_TIP_CONSTANT = 1.81


def moons_entropy(sigma: float) -> float:
    """Differential entropy of the noisy two-moons distribution.

    ln 2 to pick a moon, ln pi for the position along a length-pi arc, a
    Gaussian factor for the transverse blur, and a tip-extension term with
    the tabulated constant 1.81.
    """
    return (3.0 * math.log(2.0 * math.pi) + 1.0) / 2.0 + math.log(sigma) \
        + (MOONS_TIP_CONSTANT / math.pi) * sigma


def gen_two_moons(t: int, sigma: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half-circles with isotropic Gaussian noise.

    Moon 0 is the upper half of the unit circle at the origin; moon 1 is
    its reflection shifted to pass through (1, -1/2).  The third column is
    the moon label.  ``entropy`` carries the analytic approximation of
    :func:`moons_entropy` (the isotropic noise contributes one transverse
    Gaussian factor plus the tip term).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = int(t)
    rng = np.random.default_rng(seed)
    label = rng.integers(0, 2, size=t)
    angle = rng.uniform(0.0, math.pi, size=t)
    noise = rng.normal(0.0, sigma, size=(t, 2))
    px = np.where(label == 0, np.cos(angle), 1.0 - np.cos(angle)) + noise[:, 0]
    py = np.where(label == 0, np.sin(angle), 0.5 - np.sin(angle)) + noise[:, 1]
    vals = np.column_stack([px, py, label.astype(np.float64)])
    domains = [DomainTag.real_line(), DomainTag.real_line(),
               DomainTag.categorical(2)]
    scaling = [(0.0, 1.0)] * 3
    return Dataset("two-moons", seed, vals, domains, scaling,
                   entropy=moons_entropy(sigma), column_names=["x", "y", "class"],
                   meta={"sigma": sigma})


# ---------------------------------------------------------------------------
# compressible synthetic data

def gen_compressible(t: int, seed: int = 0) -> Dataset:
    """Four features with wildly different marginals from one uniform draw:

        y1 = -1 + floor(0.6 + 2.2 x1)      in {-1, 0, 1}
        y3 = x3                            uniform on [0, 1]
        y4 = -1/2 + floor(1.4 x4)          in {-1/2, 1/2}
        y2 = (y1 + 2 x2 + y3 + y4) / 4     continuous, correlated with all
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(int(t), 4))
    y1 = -1.0 + np.floor(0.6 + 2.2 * x[:, 0])
    y3 = x[:, 2]
    y4 = -0.5 + np.floor(1.4 * x[:, 3])
    y2 = (y1 + 2.0 * x[:, 1] + y3 + y4) / 4.0
    vals = np.column_stack([y1, y2, y3, y4])
    domains = [DomainTag.compact(-1.0, 1.0),
               DomainTag.compact(-0.375, 1.125),
               DomainTag.compact(0.0, 1.0),
               DomainTag.compact(-0.5, 0.5)]
    scaling = [(0.0, 1.0)] * 4
    return Dataset("compressible", seed, vals, domains, scaling,
                   column_names=["y1", "y2", "y3", "y4"])


# ---------------------------------------------------------------------------
# XY model via Metropolis MCMC

def _xy_neighbor_tables(height: int, width: int):
    """Per checkerboard color: site coords and padded neighbor coords+mask
    (open boundaries)."""
    tables = []
    for color in (0, 1):
        ii, jj = np.nonzero((np.add.outer(np.arange(height), np.arange(width)) % 2)
                            == color)
        nbs, mask = [], []
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = ii + di, jj + dj
            ok = (ni >= 0) & (ni < height) & (nj >= 0) & (nj < width)
            nbs.append((np.clip(ni, 0, height - 1), np.clip(nj, 0, width - 1)))
            mask.append(ok)
        tables.append((ii, jj, nbs, np.array(mask, dtype=np.float64)))
    return tables


def gen_xy_model(t: int, temperature: float = 0.8, shape=(4, 4),
                 burn_in: int = 500, thinning: int = 10, seed: int = 0,
                 n_chains: int = 64) -> Dataset:
    """Planar-rotor lattice at finite temperature, sampled by Metropolis.

    Angles live on [0, 2pi) with energy ``-sum_<ij> cos(x_i - x_j)`` over
    open-boundary nearest neighbors.  Site updates propose a uniform shift
    in a +-delta window; delta is tuned during burn-in toward 40-60%
    acceptance and then frozen.  A checkerboard of independent chains is
    advanced in lockstep so the sampler vectorizes; rows are harvested every
    ``thinning`` sweeps after burn-in, round-robin across chains.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    height, width = int(shape[0]), int(shape[1])
    n_sites = height * width
    t = int(t)
    chains = max(1, min(int(n_chains), t))
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 2.0 * math.pi, size=(chains, height, width))
    tables = _xy_neighbor_tables(height, width)
    beta = 1.0 / temperature
    delta = 1.0
    accepted = proposed = 0
    kept_rate = None
    rows = []
    sweeps_needed = burn_in + thinning * math.ceil(t / chains)
    for sweep in range(sweeps_needed):
        for ii, jj, nbs, mask in tables:
            old = x[:, ii, jj]                              # (chains, k)
            nb_vals = np.stack([x[:, ni, nj] for ni, nj in nbs])  # (4, chains, k)
            prop = np.mod(old + rng.uniform(-delta, delta, size=old.shape),
                          2.0 * math.pi)
            d_energy = -np.einsum("nck,nk->ck",
                                  np.cos(prop[None] - nb_vals)
                                  - np.cos(old[None] - nb_vals), mask)
            take = rng.uniform(size=old.shape) < np.exp(-beta * d_energy)
            x[:, ii, jj] = np.where(take, prop, old)
            accepted += int(take.sum())
            proposed += take.size
        if sweep < burn_in:
            if (sweep + 1) % 25 == 0:
                rate = accepted / proposed
                if rate < 0.4:
                    delta = max(delta * 0.85, 0.01)
                elif rate > 0.6:
                    delta = min(delta * 1.18, math.pi)
                accepted = proposed = 0
            if sweep == burn_in - 1:
                accepted = proposed = 0
        elif (sweep - burn_in + 1) % thinning == 0:
            rows.append(x.reshape(chains, n_sites).copy())
    kept_rate = accepted / proposed if proposed else float("nan")
    vals = np.concatenate(rows, axis=0)[:t]
    domains = [DomainTag.periodic(0.0, 2.0 * math.pi) for _ in range(n_sites)]
    scaling = [(0.0, 1.0)] * n_sites
    names = [f"x{i + 1}{j + 1}" for i in range(height) for j in range(width)]
    return Dataset(f"xy-{height}x{width}", seed, vals, domains, scaling,
                   column_names=names,
                   meta={"temperature": temperature, "delta": delta,
                         "acceptance": kept_rate, "burn_in": burn_in,
                         "thinning": thinning, "chains": chains})


# ---------------------------------------------------------------------------
# iris

def load_iris(path=None) -> Dataset:
    """150 flower measurements, four lengths plus a three-class label.

    Features are affinely mapped so every column's min/max land exactly on
    -1/1; labels become codes 0..2 in sorted name order.  ``path=None``
    loads the vendored copy.
    """
    if path is None:
        from importlib.resources import files
        text = files("cmps.fixtures").joinpath("iris.csv").read_text()
    else:
        with open(path, "r") as fh:
            text = fh.read()
    rows, labels = [], []
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if not row or (lineno == 1 and not _is_number(row[0])):
            continue
        if len(row) != 5:
            raise SchemaError(f"line {lineno}: expected 5 columns, got {len(row)}")
        try:
            rows.append([float(v) for v in row[:4]])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        labels.append(row[4].strip())
    feats = np.asarray(rows, dtype=np.float64)
    if feats.shape[0] != 150:
        raise SchemaError(f"expected 150 rows, got {feats.shape[0]}")
    classes = sorted(set(labels))
    if len(classes) != 3:
        raise SchemaError(f"expected 3 classes, got {len(classes)}")
    codes = np.array([classes.index(l) for l in labels], dtype=np.float64)
    lo, hi = feats.min(axis=0), feats.max(axis=0)
    scaled = 2.0 * (feats - lo) / (hi - lo) - 1.0
    vals = np.column_stack([scaled, codes])
    domains = [DomainTag.compact(-1.0, 1.0) for _ in range(4)] \
        + [DomainTag.categorical(3)]
    # the exact-endpoint map is 2(x-lo)/w - 1, i.e. offset lo + w/2 in the
    # (orig - offset) * scale form
    scaling = [(float(l + (h - l) / 2.0), float(2.0 / (h - l)))
               for l, h in zip(lo, hi)] + [(0.0, 1.0)]
    names = ["sepal_length", "sepal_width", "petal_length", "petal_width",
             "species"]
    return Dataset("iris", 0, vals, domains, scaling, column_names=names,
                   meta={"classes": classes})


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# rescaling

def rescale(ds: Dataset, targets, columns=None):
    """Affinely map columns onto target intervals.

    ``targets`` is one (a, b) pair (or DomainTag) per selected column;
    categorical columns may not be rescaled.  Sources are the column's
    domain bounds when compact/periodic, otherwise the empirical range.
    Returns ``(new_dataset, correction)`` where ``correction`` is
    ``sum log |slope|``; adding it to a stored-units log-density converts
    the new units back to the old ones.
    """
    if columns is None:
        columns = [k for k, d in enumerate(ds.domains) if not d.is_discrete]
    if len(targets) != len(columns):
        raise ValueError("need one target per rescaled column")
    vals = ds.values.copy()
    domains = list(ds.domains)
    scaling = list(ds.scaling)
    correction = 0.0
    for k, tgt in zip(columns, targets):
        dom = ds.domains[k]
        if dom.is_discrete:
            raise DataError(f"column {k} is categorical; cannot rescale")
        if isinstance(tgt, DomainTag):
            ta, tb, tkind = tgt.a, tgt.b, tgt.kind
        else:
            ta, tb = float(tgt[0]), float(tgt[1])
            tkind = dom.kind if dom.kind in ("compact", "periodic") else "compact"
        if dom.kind in ("compact", "periodic"):
            sa, sb = dom.a, dom.b
        else:
            sa, sb = float(vals[:, k].min()), float(vals[:, k].max())
        if not sb > sa:
            raise DataError(f"column {k}: degenerate source range [{sa}, {sb}]")
        u = (vals[:, k] - sa) / (sb - sa)
        vals[:, k] = ta * (1.0 - u) + tb * u
        slope = (tb - ta) / (sb - sa)
        correction += math.log(abs(slope))
        off, sc = scaling[k]
        extra_off = sa - ta / slope
        scaling[k] = (off + extra_off / sc, sc * slope)
        maker = DomainTag.periodic if tkind == "periodic" else DomainTag.compact
        domains[k] = maker(min(ta, tb), max(ta, tb))
    out = Dataset(ds.name, ds.seed, vals, domains, scaling, ds.entropy,
                  list(ds.column_names), dict(ds.meta))
    return out, correction


# ---------------------------------------------------------------------------
# cross-validation folds

def kfold_indices(n_or_labels, k: int = 5, seed: int = 0, stratify=None):
    """Seeded k-fold split; with ``stratify`` labels, folds balance classes.

    Returns a list of (train_idx, val_idx) pairs covering all rows exactly
    once as validation.
    """
    if np.isscalar(n_or_labels):
        n = int(n_or_labels)
    else:
        stratify = np.asarray(n_or_labels) if stratify is None else stratify
        n = len(n_or_labels)
    if k < 2 or k > n:
        raise ValueError("need 2 <= k <= n")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    if stratify is not None:
        stratify = np.asarray(stratify)
        for cls in np.unique(stratify):
            idx = np.nonzero(stratify == cls)[0]
            idx = idx[rng.permutation(len(idx))]
            for pos, row in enumerate(idx):
                folds[pos % k].append(row)
    else:
        perm = rng.permutation(n)
        for pos, row in enumerate(perm):
            folds[pos % k].append(row)
    out = []
    for f in range(k):
        val = np.sort(np.array(folds[f], dtype=np.intp))
        train = np.sort(np.concatenate(
            [np.array(folds[g], dtype=np.intp) for g in range(k) if g != f]))
        out.append((train, val))
    return out


# ---------------------------------------------------------------------------
# CSV persistence

def _domain_to_json(dom: DomainTag) -> dict:
    d = {"kind": dom.kind}
    if dom.is_discrete:
        d["cardinality"] = dom.cardinality
    elif math.isfinite(dom.a) or math.isfinite(dom.b):
        d["a"], d["b"] = dom.a, dom.b
    return d


def _domain_from_json(d: dict) -> DomainTag:
    kind = d["kind"]
    if kind == "categorical":
        return DomainTag.categorical(int(d["cardinality"]))
    if kind == "half_line":
        return DomainTag.half_line()
    if kind == "real_line":
        return DomainTag.real_line()
    maker = DomainTag.periodic if kind == "periodic" else DomainTag.compact
    return maker(float(d["a"]), float(d["b"]))


def save_csv(ds: Dataset, path) -> None:
    """Write samples with a ``# domain:`` metadata line carrying tags,
    scaling records, and entropy, so a load round-trips the dataset."""
    meta = {
        "name": ds.name,
        "seed": ds.seed,
        "entropy": ds.entropy,
        "columns": [
            {"label": ds.column_names[k], **_domain_to_json(ds.domains[k]),
             "offset": ds.scaling[k][0], "scale": ds.scaling[k][1]}
            for k in range(ds.n_cols)
        ],
        "meta": {key: v for key, v in ds.meta.items()
                 if isinstance(v, (int, float, str, bool, list))},
    }
    with open(path, "w", newline="") as fh:
        fh.write("# domain: " + json.dumps(meta) + "\n")
        writer = csv.writer(fh)
        writer.writerow(ds.column_names)
        for row in ds.values:
            writer.writerow([f"{v:.17g}" for v in row])


def load_csv(path) -> Dataset:
    with open(path, "r") as fh:
        first = fh.readline()
        if not first.startswith("# domain:"):
            raise SchemaError("missing '# domain:' metadata line")
        try:
            meta = json.loads(first[len("# domain:"):])
        except json.JSONDecodeError as exc:
            raise SchemaError(f"bad metadata: {exc}") from None
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != len(meta["columns"]):
                raise SchemaError(f"line {lineno}: expected "
                                  f"{len(meta['columns'])} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    cols = meta["columns"]
    return Dataset(meta["name"], int(meta["seed"]),
                   np.asarray(rows, dtype=np.float64),
                   [_domain_from_json(c) for c in cols],
                   [(float(c["offset"]), float(c["scale"])) for c in cols],
                   meta.get("entropy"),
                   [c["label"] for c in cols],
                   dict(meta.get("meta") or {}))
