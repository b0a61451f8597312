"""
Static data-center configuration, state space and the energy/switching/stage costs
"""
import os
import logging
from dataclasses import dataclass

import numpy as np
import toml

from utils import DomainError

logger = logging.getLogger(__name__)


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PriceSchedule:
    """
    Time-indexed prices, one row per slot and one column per block.

    Slots are numbered from 1. Slots past the horizon use the last row.
    When energy_curves is set, e_b(t, n) is read from the table
    energy_curves[b][t, n] instead of the linear form E(t, b) * n.
    """
    energy: np.ndarray
    switch_on: np.ndarray
    switch_off: np.ndarray
    energy_curves: tuple = None

    def __post_init__(self):
        for name in ("energy", "switch_on", "switch_off"):
            arr = np.atleast_2d(np.array(getattr(self, name), dtype=float))
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} prices must be finite and nonnegative")
            object.__setattr__(self, name, _frozen(arr))
        shapes = {self.energy.shape[1], self.switch_on.shape[1], self.switch_off.shape[1]}
        if len(shapes) != 1:
            raise DomainError("price rows must all have one entry per block")
        if self.energy_curves is not None:
            curves = []
            for b, curve in enumerate(self.energy_curves):
                curve = np.atleast_2d(np.array(curve, dtype=float))
                if np.any(curve < 0) or not np.all(np.isfinite(curve)):
                    raise DomainError(f"energy curve of block {b} must be finite and nonnegative")
                second = np.diff(curve, n=2, axis=1)
                if np.any(second < -1e-9 * max(1.0, float(np.abs(curve).max()))):
                    raise DomainError(f"energy curve of block {b} is not convex in the server count")
                curves.append(_frozen(curve))
            object.__setattr__(self, "energy_curves", tuple(curves))

    @property
    def horizon(self):
        rows = [self.energy.shape[0], self.switch_on.shape[0], self.switch_off.shape[0]]
        if self.energy_curves is not None:
            rows.extend(c.shape[0] for c in self.energy_curves)
        return max(rows)

    @staticmethod
    def _row(table, t):
        return table[min(max(int(t), 1), table.shape[0]) - 1]

    def energy_prices(self, t):
        return self._row(self.energy, t)

    def switch_on_prices(self, t):
        return self._row(self.switch_on, t)

    def switch_off_prices(self, t):
        return self._row(self.switch_off, t)

    def idle_energy(self, t, x):
        """Sum over blocks of e_b(t, x_b); x may be (B,) or (n, B)"""
        x = np.asarray(x)
        if self.energy_curves is None:
            prices = self.energy_prices(t)
            total = np.zeros(x.shape[:-1])
            for b in range(x.shape[-1]):
                total = total + prices[b] * x[..., b]
            return total
        total = np.zeros(x.shape[:-1])
        for b, curve in enumerate(self.energy_curves):
            total = total + self._row(curve, t)[x[..., b].astype(int)]
        return total

    def is_stationary(self):
        tables = [self.energy, self.switch_on, self.switch_off]
        if self.energy_curves is not None:
            tables.extend(self.energy_curves)
        return all(np.all(tab == tab[0]) for tab in tables)


@dataclass(frozen=True)
class DataCenterConfig:
    """Blocks, server types, rates, serve mask, class weights and prices"""
    servers: np.ndarray
    block_type: np.ndarray
    rate: np.ndarray
    serve_mask: np.ndarray
    qos_weight: np.ndarray
    price: PriceSchedule
    block_names: tuple = None
    class_names: tuple = None

    def __post_init__(self):
        servers = np.array(self.servers, dtype=int)
        if servers.ndim != 1 or servers.size == 0 or np.any(servers < 1):
            raise DomainError("every block needs a positive server count")
        B = servers.size
        block_type = np.array(self.block_type, dtype=int)
        rate = np.array(self.rate, dtype=float)
        mask = np.array(self.serve_mask, dtype=bool)
        weight = np.array(self.qos_weight, dtype=float)
        if block_type.shape != (B,) or rate.shape != (B,):
            raise DomainError("block_type and rate need one entry per block")
        if mask.ndim != 2 or mask.shape[0] != B:
            raise DomainError(f"serve_mask must be {B} x J")
        J = mask.shape[1]
        if weight.shape != (J,) or np.any(weight < 0):
            raise DomainError("qos_weight needs one nonnegative entry per class")
        if np.any(rate <= 0):
            raise DomainError("processing rates must be positive")
        if not np.all(mask.any(axis=0)):
            missing = [j for j in range(J) if not mask[:, j].any()]
            raise DomainError(f"classes {missing} cannot be served by any block")
        types = np.unique(block_type)
        if np.any(block_type < 0) or types.size > B:
            raise DomainError("server types must be indices in [0, I) with I <= B")
        if not np.array_equal(types, np.arange(types.size)):
            raise DomainError("server types must be numbered 0..I-1 without gaps")
        for i in types:
            members = np.flatnonzero(block_type == i)
            first = members[0]
            if np.any(rate[members] != rate[first]) or np.any(mask[members] != mask[first]):
                raise DomainError(f"blocks of type {i} must share rate and serve mask")
        if self.price.energy.shape[1] != B:
            raise DomainError("price schedule block count does not match the blocks")
        if self.price.energy_curves is not None:
            if len(self.price.energy_curves) != B:
                raise DomainError("energy curves need one table per block")
            for b, curve in enumerate(self.price.energy_curves):
                if curve.shape[1] != servers[b] + 1:
                    raise DomainError(f"energy curve of block {b} needs M_b + 1 entries")
        object.__setattr__(self, "servers", _frozen(servers, int))
        object.__setattr__(self, "block_type", _frozen(block_type, int))
        object.__setattr__(self, "rate", _frozen(rate))
        object.__setattr__(self, "serve_mask", _frozen(mask, bool))
        object.__setattr__(self, "qos_weight", _frozen(weight))
        if self.block_names is None:
            object.__setattr__(self, "block_names", tuple(f"b{b + 1}" for b in range(B)))
        if self.class_names is None:
            object.__setattr__(self, "class_names", tuple(f"c{j + 1}" for j in range(J)))

    @property
    def num_blocks(self):
        return self.servers.size

    @property
    def num_classes(self):
        return self.serve_mask.shape[1]

    @property
    def num_types(self):
        return int(self.block_type.max()) + 1

    @property
    def dims(self):
        return tuple(int(m) + 1 for m in self.servers)

    @property
    def capacity(self):
        """Total processing rate with every server on"""
        return float(np.dot(self.rate, self.servers))


@dataclass(frozen=True)
class State:
    x: np.ndarray
    lam: np.ndarray
    theta: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, int))
        object.__setattr__(self, "lam", _frozen(self.lam))


def check_in_box(vec, cfg, what="x"):
    """Raise DomainError unless every entry is an integer in [0, M_b]"""
    vec = np.asarray(vec)
    if vec.shape[-1] != cfg.num_blocks:
        raise DomainError(f"{what} must have {cfg.num_blocks} entries, got shape {vec.shape}")
    if np.any(vec < 0) or np.any(vec > cfg.servers) or np.any(vec != np.round(vec)):
        raise DomainError(f"{what}={vec.tolist()} lies outside the box [0, {cfg.servers.tolist()}]")
    return vec


def block_config(cfg, b):
    """Single-block configuration of block b with its own prices and the classes it serves"""
    classes = np.flatnonzero(cfg.serve_mask[b])
    price = cfg.price
    curves = None if price.energy_curves is None else (price.energy_curves[b],)
    sub_price = PriceSchedule(price.energy[:, [b]], price.switch_on[:, [b]], price.switch_off[:, [b]], curves)
    return DataCenterConfig(cfg.servers[[b]], [0], cfg.rate[[b]], cfg.serve_mask[[b]][:, classes],
                            cfg.qos_weight[classes], sub_price, (cfg.block_names[b],),
                            tuple(cfg.class_names[j] for j in classes))


def state_grid(cfg):
    """
    Enumerate the on-count space in mixed-radix (C) order

    Args:
        cfg (DataCenterConfig): Configuration

    Returns:
        np.ndarray: (|Omega_x|, B) integer array; row i is the vector with flat index i
    """
    grid = np.indices(cfg.dims).reshape(cfg.num_blocks, -1).T
    return np.ascontiguousarray(grid)


def state_index(x, cfg):
    """Flat index of one or many on-count vectors"""
    x = np.asarray(x, dtype=int)
    return np.ravel_multi_index(tuple(np.moveaxis(x, -1, 0)), cfg.dims)


def orthants(B):
    """All k in {-1, +1}^B in lexicographic order, as a (2^B, B) array"""
    grids = np.indices((2,) * B).reshape(B, -1).T
    return 2 * grids - 1


def check_orthant(k, cfg):
    k = np.asarray(k)
    if k.shape != (cfg.num_blocks,) or not np.all(np.isin(k, (-1, 1))):
        raise DomainError(f"orthant index must be a vector in {{-1,+1}}^{cfg.num_blocks}, got {k.tolist()}")
    return k


def energy_idle_cost(t, x, cfg):
    """
    Idle energy cost of keeping x servers on during slot t

    Args:
        t (int): Slot index (1-based)
        x (array): On-count vector (B,) or batch (n, B)
        cfg (DataCenterConfig): Configuration

    Returns:
        float or np.ndarray: sum_b e_b(t, x_b)
    """
    check_in_box(x, cfg)
    cost = cfg.price.idle_energy(t, x)
    return float(cost) if np.ndim(cost) == 0 else cost


def switching_cost(t, x, a, cfg):
    """Switch-on/off cost of moving from x to a; broadcasts over leading axes"""
    check_in_box(x, cfg)
    check_in_box(a, cfg, "a")
    cost = switching_costs(t, np.asarray(x), np.asarray(a), cfg)
    return float(cost) if np.ndim(cost) == 0 else cost


def switching_costs(t, x, a, cfg):
    """Unchecked vectorized switching cost; broadcasts x and a over leading axes"""
    # block-by-block accumulation keeps the floating point order fixed
    c_plus = cfg.price.switch_on_prices(t)
    c_minus = cfg.price.switch_off_prices(t)
    total = 0.0
    for b in range(cfg.num_blocks):
        diff = a[..., b] - x[..., b]
        total = total + (c_plus[b] * np.maximum(diff, 0) + c_minus[b] * np.maximum(-diff, 0))
    return total


def signed_switch_form(t, k, x, a, cfg):
    """
    Orthant-linear rewriting of the switching cost

    Args:
        t (int): Slot index
        k (array): Orthant index in {-1, +1}^B
        x (array): Current on-counts
        a (array): Next on-counts
        cfg (DataCenterConfig): Configuration

    Returns:
        float: sum_b (1+k_b)/2 c+_b (a_b - x_b) + (1-k_b)/2 c-_b (x_b - a_b)
    """
    k = check_orthant(k, cfg)
    check_in_box(x, cfg)
    check_in_box(a, cfg, "a")
    c_plus = cfg.price.switch_on_prices(t)
    c_minus = cfg.price.switch_off_prices(t)
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    up = (1 + k) / 2
    down = (1 - k) / 2
    return float(np.sum(up * c_plus * (a - x) + down * c_minus * (x - a)))


def stage_cost(t, s, a, qos, cfg):
    """
    One-slot cost c_t((x, lambda, theta), a); theta plays no role

    Args:
        t (int): Slot index
        s (State): Current state
        a (array): Next on-counts
        qos (callable): Evaluator (x, lam) -> QoS cost
        cfg (DataCenterConfig): Configuration

    Returns:
        float: QoS cost + idle energy + switching cost
    """
    check_in_box(s.x, cfg)
    check_in_box(a, cfg, "a")
    q = qos(s.x, s.lam)
    return float(q) + energy_idle_cost(t, s.x, cfg) + switching_cost(t, s.x, a, cfg)


def _price_table(value, horizon, B, name):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        return np.full((horizon, B), float(arr))
    if arr.ndim == 1:
        if arr.size != B:
            raise DomainError(f"[prices] {name} list must have {B} entries")
        return np.tile(arr, (horizon, 1))
    if arr.ndim == 2 and arr.shape[1] == B:
        return arr
    raise DomainError(f"[prices] {name} must be a scalar, a per-block list or per-slot rows")


def config_from_dict(raw):
    """
    Build a DataCenterConfig from the parsed TOML sections

    Args:
        raw (dict): Parsed configuration with [blocks], [classes], [prices]

    Returns:
        DataCenterConfig: Validated configuration
    """
    try:
        blocks = raw["blocks"]
        classes = raw["classes"]
        prices = raw.get("prices", {})
        servers = np.array(blocks["servers"], dtype=int)
        B = servers.size
        serve = np.array(blocks["serve"], dtype=bool)
        J = serve.shape[1] if serve.ndim == 2 else 0
        weights = classes.get("weights", 1.0)
        if np.ndim(weights) == 0:
            weights = [float(weights)] * J
        horizon = int(prices.get("horizon", 1))
        curves = prices.get("energy_curves")
        if curves is not None:
            curves = [np.atleast_2d(np.array(c, dtype=float)) for c in curves]
        price = PriceSchedule(
            energy=_price_table(prices.get("energy", 0.0), horizon, B, "energy"),
            switch_on=_price_table(prices.get("switch_on", 0.0), horizon, B, "switch_on"),
            switch_off=_price_table(prices.get("switch_off", 0.0), horizon, B, "switch_off"),
            energy_curves=curves,
        )
        return DataCenterConfig(
            servers=servers,
            block_type=blocks.get("types", list(range(B))),
            rate=blocks["rates"],
            serve_mask=serve,
            qos_weight=weights,
            price=price,
            block_names=tuple(blocks["names"]) if "names" in blocks else None,
            class_names=tuple(classes["names"]) if "names" in classes else None,
        )
    except KeyError as e:
        raise DomainError(f"configuration is missing field {e}") from e


def read_config_file(path):
    """
    Read a configuration TOML file

    Args:
        path (str): Path to the file

    Returns:
        tuple: (DataCenterConfig, modes settings dict)
    """
    if not os.path.exists(path):
        raise DomainError(f"configuration file {path} does not exist")
    try:
        raw = toml.load(path)
    except toml.TomlDecodeError as e:
        raise DomainError(f"configuration file {path} is not valid TOML: {e}") from e
    cfg = config_from_dict(raw)
    modes = dict(raw.get("modes", {}))
    if "model_file" in modes and not os.path.isabs(modes["model_file"]):
        modes["model_file"] = os.path.join(os.path.dirname(os.path.abspath(path)), modes["model_file"])
    logger.info(f"Loaded configuration {path}: B={cfg.num_blocks}, J={cfg.num_classes}, "
                f"I={cfg.num_types}, servers={cfg.servers.tolist()}")
    return cfg, modes
