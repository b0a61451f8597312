"""
Arrival traces: parsing, k-means mode clustering and mode-model estimation
"""
import io
import os
import re
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import toml
from scipy.stats import norm
from sklearn.cluster import KMeans

from solver import ModeModel
from uncertainty import IntervalSet, LikelihoodSet
from utils import DomainError, TraceParseError, TraceValidationError, ensure_dir, metadata_line

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_LEVELS = 3
DEFAULT_CONFIDENCE = 0.9
DEFAULT_MODES = 3
KMEANS_MAX_ITER = 300
KMEANS_RESTARTS = 10
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"


@dataclass(frozen=True)
class TraceSeries:
    """Per-slot per-class arrival counts with strictly increasing timestamps"""
    timestamps: pd.DatetimeIndex
    counts: np.ndarray
    class_names: tuple
    modes: np.ndarray = None

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 2 or counts.shape[1] != len(self.class_names):
            raise TraceValidationError(f"counts must be T x {len(self.class_names)}, got shape {counts.shape}")
        if len(self.timestamps) != counts.shape[0]:
            raise TraceValidationError("one timestamp per row is required")
        if np.any(counts < 0):
            raise TraceValidationError("arrival counts must be nonnegative")
        timestamps = pd.DatetimeIndex(self.timestamps)
        if not timestamps.is_monotonic_increasing or not timestamps.is_unique:
            raise TraceValidationError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self):
        return self.counts.shape[0]


def _split_header(path):
    """Leading '#' lines and the remaining CSV text"""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    skipped = 0
    while skipped < len(lines) and lines[skipped].startswith("#"):
        skipped += 1
    return skipped, "".join(lines[skipped:])


def parse_trace(path, class_names):
    """
    Read a trace CSV with header timestamp,<class1>,...,<classJ>

    Args:
        path (str): Trace file
        class_names (list): Expected class columns, in model order

    Returns:
        TraceSeries: Validated series
    """
    if not os.path.exists(path):
        raise DomainError(f"trace file {path} does not exist")
    skipped, text = _split_header(path)
    try:
        df = pd.read_csv(io.StringIO(text), dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise TraceParseError("trace file has no header", skipped + 1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = skipped + int(match.group(1)) if match else None
        raise TraceParseError(f"malformed row ({e})", line) from e

    columns = [c.strip() for c in df.columns]
    df.columns = columns
    if not columns or columns[0] != "timestamp":
        raise TraceValidationError("the first trace column must be 'timestamp'")
    missing = [name for name in class_names if name not in columns]
    if missing:
        raise TraceValidationError(f"trace header is missing class {missing[0]!r}")
    extra = [c for c in columns[1:] if c not in class_names]
    if extra:
        logger.warning(f"Ignoring trace columns {extra}")

    # data row i sits on file line skipped + 2 + i
    first_line = skipped + 2
    stamps = pd.to_datetime(df["timestamp"], errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        raise TraceParseError(f"unreadable timestamp {df['timestamp'].iloc[bad[0]]!r}", first_line + int(bad[0]))
    values = df[list(class_names)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad_rows.size:
        raise TraceParseError("missing or non-numeric count", first_line + int(bad_rows[0]))
    negative = np.flatnonzero((values < 0).any(axis=1))
    if negative.size:
        raise TraceValidationError(f"line {first_line + int(negative[0])}: negative arrival count")
    order = stamps.to_numpy()
    if order.size > 1:
        back = np.flatnonzero(order[1:] <= order[:-1])
        if back.size:
            raise TraceValidationError(f"line {first_line + int(back[0]) + 1}: timestamps must be strictly increasing")

    series = TraceSeries(pd.DatetimeIndex(stamps), values, tuple(class_names))
    logger.info(f"Parsed {len(series)} slots of {len(class_names)} classes from {path}")
    return series


def write_trace(series, path, meta=None):
    """Write a series in the format parse_trace reads"""
    frame = pd.DataFrame(series.counts, columns=list(series.class_names))
    frame.insert(0, "timestamp", series.timestamps.strftime(TIMESTAMP_FORMAT))
    ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if meta:
            f.write(meta + "\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    logger.info(f"Wrote trace of {len(series)} slots to {path}")
    return path


def cluster_modes(series, K, seed=0):
    """
    k-means over the per-slot arrival vectors

    The best of KMEANS_RESTARTS seeded k-means++ starts is kept. Labels are
    renumbered by ascending total center load, so mode 0 is the quietest
    regime whatever the seed.

    Args:
        series (TraceSeries): Arrival trace
        K (int): Number of modes
        seed (int): k-means++ seed

    Returns:
        tuple: (assignments (T,), centers (K, J))
    """
    if K < 1 or len(series) < K:
        raise DomainError(f"cluster_modes needs 1 <= K <= T, got K={K}, T={len(series)}")
    km = KMeans(n_clusters=K, init="k-means++", n_init=KMEANS_RESTARTS, max_iter=KMEANS_MAX_ITER, random_state=seed)
    labels = km.fit_predict(series.counts)
    order = np.argsort(km.cluster_centers_.sum(axis=1), kind="stable")
    relabel = np.empty(K, dtype=int)
    relabel[order] = np.arange(K)
    logger.info(f"k-means with K={K}: {km.n_iter_} iterations, inertia {km.inertia_:.6g}")
    return relabel[labels], km.cluster_centers_[order]


def _transition_counts(assignments, K):
    counts = np.zeros((K, K))
    np.add.at(counts, (assignments[:-1], assignments[1:]), 1)
    return counts


def _mode_support(rows, levels):
    """Co-monotone per-class quantile grid of one mode's arrival vectors"""
    qs = np.linspace(0.0, 1.0, levels)
    return np.quantile(rows, qs, axis=0)


def estimate_mode_model(series, assignments, K, lambda_levels=DEFAULT_LAMBDA_LEVELS, confidence=DEFAULT_CONFIDENCE):
    """
    Nominal chain, confidence-interval uncertainty sets, quantized support and emissions

    Args:
        series (TraceSeries): Arrival trace
        assignments (np.ndarray): Mode of every slot
        K (int): Number of modes
        lambda_levels (int): Quantile levels per class and mode, at least 2 so the maximum is kept
        confidence (float): Confidence level of the interval half-widths, in [0, 1)

    Returns:
        ModeModel: Estimated model with interval sets
    """
    assignments = np.asarray(assignments, dtype=int)
    if assignments.shape != (len(series),) or np.any(assignments < 0) or np.any(assignments >= K):
        raise DomainError("assignments must give a mode in [0, K) for every slot")
    if lambda_levels < 2:
        # one level would keep only the per-mode minimum
        raise DomainError(f"lambda_levels must be at least 2, got {lambda_levels}")
    if not 0 <= confidence < 1:
        raise DomainError(f"confidence must lie in [0, 1), got {confidence}")

    counts = _transition_counts(assignments, K)
    visits = counts.sum(axis=1)
    z = float(norm.ppf((1 + confidence) / 2)) if confidence > 0 else 0.0
    nominal = np.full((K, K), 1.0 / K)
    lo = np.zeros((K, K))
    hi = np.ones((K, K))
    for m in range(K):
        if visits[m] == 0:
            logger.warning(f"Mode {m} has no observed transition, using a uniform row with full-width intervals")
            continue
        p = counts[m] / visits[m]
        half = z * np.sqrt(p * (1 - p) / visits[m])
        nominal[m] = p
        lo[m] = np.clip(p - half, 0.0, 1.0)
        hi[m] = np.clip(p + half, 0.0, 1.0)

    points = []
    owner = []
    for m in range(K):
        rows = series.counts[assignments == m]
        if rows.shape[0] == 0:
            continue
        grid = _mode_support(rows, lambda_levels)
        points.append(grid)
        owner.extend([m] * grid.shape[0])
    stacked = np.vstack(points)
    _, first = np.unique(stacked, axis=0, return_index=True)
    keep = np.sort(first)
    support = stacked[keep]
    owner = np.asarray(owner)[keep]

    scale = np.maximum(series.counts.max(axis=0), 1.0)
    emission = np.zeros((K, support.shape[0]))
    for m in range(K):
        rows = series.counts[assignments == m]
        own = np.flatnonzero(owner == m)
        if rows.shape[0] == 0 or own.size == 0:
            emission[m] = 1.0 / support.shape[0]
            continue
        dist = np.abs((rows[:, None, :] - support[None, own, :]) / scale).sum(axis=2)
        nearest = own[np.argmin(dist, axis=1)]
        emission[m] = np.bincount(nearest, minlength=support.shape[0]) / rows.shape[0]

    meta = {
        "method": "kmeans",
        "modes": int(K),
        "slots": int(len(series)),
        "lambda_levels": int(lambda_levels),
        "confidence": float(confidence),
        "interval": "normal-approximation",
        "class_names": list(series.class_names),
    }
    model = ModeModel.from_matrices(support, emission, nominal, lo, hi, meta)
    logger.info(f"Estimated mode model: K={K}, |Lambda|={support.shape[0]}, "
                f"mean interval width {float(np.mean(hi - lo)):.4f}")
    return model


def gen_synthetic_trace(model, T, seed=0, start_mode=0, poisson=False, start="2015-01-01", class_names=None):
    """
    Sample an hourly trace from the nominal chain and the emissions

    Args:
        model (ModeModel): Generating model
        T (int): Number of slots
        seed (int): Random seed
        start_mode (int): Mode of the first slot
        poisson (bool): Draw Poisson counts around the sampled rates
        start (str): First timestamp
        class_names (list): Column names; taken from the model metadata if None

    Returns:
        TraceSeries: Trace with the generating modes attached
    """
    if T < 1:
        raise DomainError(f"T must be at least 1, got {T}")
    rng = np.random.default_rng(seed)
    names = class_names or model.meta.get("class_names") or [f"c{j + 1}" for j in range(model.num_classes)]
    modes = np.empty(T, dtype=int)
    counts = np.empty((T, model.num_classes))
    theta = int(start_mode)
    for step in range(T):
        t = step + 1
        modes[step] = theta
        li = rng.choice(model.num_lambda, p=model.emission_at(t)[theta])
        counts[step] = model.support[li]
        theta = int(rng.choice(model.num_modes, p=model.chain_at(t)[theta].nominal))
    if poisson:
        counts = rng.poisson(counts).astype(float)
    timestamps = pd.date_range(start, periods=T, freq="60min")
    return TraceSeries(timestamps, counts, tuple(names), modes)


def _chain_payload(model):
    first = model.chain[0][0]
    nominal = [[s.nominal.tolist() for s in slot] for slot in model.chain]
    if isinstance(first, LikelihoodSet):
        return {"nominal": nominal}, {"kind": "kl", "radius": [[s.radius for s in slot] for slot in model.chain]}
    lo = [[s.lo.tolist() for s in slot] for slot in model.chain]
    hi = [[s.hi.tolist() for s in slot] for slot in model.chain]
    return {"nominal": nominal}, {"kind": "interval", "lo": lo, "hi": hi}


def save_mode_model(model, path, meta=None):
    """
    Write a ModeModel as TOML with [chain], [intervals], [lambda_support], [emission] and [meta]

    Args:
        model (ModeModel): Model to write
        path (str): Output path
        meta (str): Optional metadata line written as the first comment

    Returns:
        str: The path written
    """
    chain, intervals = _chain_payload(model)
    doc = {
        "chain": chain,
        "intervals": intervals,
        "lambda_support": {"points": model.support.tolist()},
        "emission": {"probs": model.emission.tolist()},
        "meta": dict(model.meta),
    }
    ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write((meta or metadata_line()) + "\n")
        toml.dump(doc, f)
    logger.info(f"Wrote mode model ({model.num_modes} modes, |Lambda|={model.num_lambda}) to {path}")
    return path


def _slots(arr, ndim):
    arr = np.asarray(arr, dtype=float)
    return arr[None] if arr.ndim == ndim - 1 else arr


def load_mode_model(path):
    """
    Read a ModeModel TOML file; emission rows are renormalized

    Args:
        path (str): Model file

    Returns:
        ModeModel: Loaded model
    """
    if not os.path.exists(path):
        raise DomainError(f"mode model file {path} does not exist")
    try:
        raw = toml.load(path)
        nominal = _slots(raw["chain"]["nominal"], 3)
        support = np.asarray(raw["lambda_support"]["points"], dtype=float)
        emission = _slots(raw["emission"]["probs"], 3)
    except toml.TomlDecodeError as e:
        raise DomainError(f"mode model file {path} is not valid TOML: {e}") from e
    except KeyError as e:
        raise DomainError(f"mode model file {path} is missing {e}") from e
    if np.any(emission < 0):
        raise DomainError("emission probabilities must be nonnegative")
    emission = emission / emission.sum(axis=2, keepdims=True)

    intervals = raw.get("intervals", {})
    kind = intervals.get("kind", "interval")
    meta = dict(raw.get("meta", {}))
    if kind == "kl":
        radius = np.broadcast_to(np.asarray(intervals.get("radius", 0.0), dtype=float), nominal.shape[:2])
        chain = tuple(tuple(LikelihoodSet(nominal[t, m], radius[t, m]) for m in range(nominal.shape[1]))
                      for t in range(nominal.shape[0]))
        model = ModeModel(support, emission, chain, meta)
    elif kind == "interval":
        lo = _slots(intervals["lo"], 3) if "lo" in intervals else nominal
        hi = _slots(intervals["hi"], 3) if "hi" in intervals else nominal
        chain = tuple(tuple(IntervalSet(nominal[t, m], lo[t, m], hi[t, m]) for m in range(nominal.shape[1]))
                      for t in range(nominal.shape[0]))
        model = ModeModel(support, emission, chain, meta)
    else:
        raise DomainError(f"unknown interval kind {kind!r}")
    logger.info(f"Loaded mode model {path}: {model.num_modes} modes, |Lambda|={model.num_lambda}")
    return model
