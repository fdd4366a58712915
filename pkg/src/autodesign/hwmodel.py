"""Hardware cost models: roofline latency, linear energy, model size, and
per-operator latency lookup tables.

A kernel's latency is MACs / attainable rate + a fixed launch overhead, where
the attainable rate follows the roofline min(peak, bandwidth * intensity).
Batch size is 1 for every cost in this module.
"""

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError, PolicyError
from .nncore import activation_counts, count_macs, expand_block, weight_count


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_macs_per_s: float
    dram_bytes_per_s: float
    energy_per_mac: float
    energy_per_dram_byte: float
    fixed_overhead_s: float = 0.0

    def __post_init__(self):
        for f in ("peak_macs_per_s", "dram_bytes_per_s", "energy_per_mac", "energy_per_dram_byte"):
            v = getattr(self, f)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise InputError(f"{f} must be a positive finite number, got {v!r}")
        if not self.fixed_overhead_s >= 0:
            raise InputError("fixed_overhead_s must be nonnegative")

    @property
    def ridge_point(self):
        """Intensity (MACs/byte) where the memory and compute roofs meet."""
        return self.peak_macs_per_s / self.dram_bytes_per_s


# Three shipped profiles; they differ in peak, bandwidth and kernel overhead.
# Edge is starved for bandwidth (ridge 24 MACs/B), cloud is not (ridge 3).
PROFILES = {
    "edge": HardwareSpec("edge", 2.4e9, 1.0e8, 0.5e-12, 80e-12, 2e-6),
    "cloud": HardwareSpec("cloud", 3.0e10, 1.0e10, 2.0e-12, 40e-12, 5e-6),
    "spatial": HardwareSpec("spatial", 8.0e9, 1.0e9, 1.0e-12, 60e-12, 1e-6),
}

_PROFILE_KEYS = {f.name for f in fields(HardwareSpec)}


def get_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise InputError(f"unknown hardware profile {name!r}; known: {sorted(PROFILES)}") from None


def load_hardware(path):
    """Read a hardware profile file (YAML mapping of HardwareSpec fields)."""
    path = Path(path)
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise InputError(f"{path}: hardware profile must be a mapping")
    unknown = set(data) - _PROFILE_KEYS
    if unknown:
        raise InputError(f"{path}: unknown hardware keys {sorted(unknown)}")
    data.setdefault("name", path.stem)
    missing = _PROFILE_KEYS - set(data) - {"fixed_overhead_s"}
    if missing:
        raise InputError(f"{path}: missing hardware keys {sorted(missing)}")
    try:
        values = {k: (str(v) if k == "name" else float(v)) for k, v in data.items()}
    except (TypeError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None
    return HardwareSpec(**values)


def dump_hardware(hw, path):
    Path(path).write_text(yaml.safe_dump({f.name: getattr(hw, f.name) for f in fields(hw)}, sort_keys=False))


def resolve_hardware(name_or_path):
    if name_or_path in PROFILES:
        return PROFILES[name_or_path]
    if Path(name_or_path).is_file():
        return load_hardware(name_or_path)
    return get_profile(name_or_path)


# -- roofline -----------------------------------------------------------------


def roofline_attainable(intensity, hw):
    """Attainable MACs/s at `intensity` MACs per DRAM byte."""
    if intensity < 0:
        raise InputError("intensity must be nonnegative")
    if math.isinf(intensity):
        return hw.peak_macs_per_s
    return min(hw.peak_macs_per_s, hw.dram_bytes_per_s * intensity)


def dram_bytes(layer, w_bits, a_bits):
    """Bytes moved: every weight once, every input and output activation once."""
    in_acts, out_acts = activation_counts(layer)
    return (weight_count(layer) * w_bits + (in_acts + out_acts) * a_bits) / 8.0


def operation_intensity(layer, w_bits, a_bits):
    if not layer.parametric:
        raise InputError(f"operation intensity is undefined for {layer.kind!r}")
    for b in (w_bits, a_bits):
        if not 1 <= b <= 8:
            raise InputError(f"bitwidth {b} outside [1, 8]")
    kernels = expand_block(layer)
    macs = sum(count_macs(k) for k in kernels)
    return macs / sum(dram_bytes(k, w_bits, a_bits) for k in kernels)


def kernel_latency(layer, hw, w_bits=8, a_bits=8):
    """Roofline latency of one primitive kernel plus its launch overhead."""
    macs = count_macs(layer)
    rate = roofline_attainable(macs / dram_bytes(layer, w_bits, a_bits), hw)
    return macs / rate + hw.fixed_overhead_s


# -- whole-network simulation -------------------------------------------------


@dataclass(frozen=True)
class LayerCost:
    index: int
    kind: str
    w_bits: int
    a_bits: int
    macs: int
    bytes: float
    intensity: float
    attainable: float
    latency_s: float
    energy_j: float
    size_bits: int


@dataclass(frozen=True)
class CostReport:
    latency_s: float
    energy_j: float
    model_size_bits: float
    per_layer: tuple = field(default=())

    def value(self, kind):
        return {"latency": self.latency_s, "energy": self.energy_j, "model_size": self.model_size_bits}[kind]

    def to_dict(self):
        return {
            "latency_s": self.latency_s,
            "energy_j": self.energy_j,
            "model_size_bits": self.model_size_bits,
            "per_layer": [vars(c) for c in self.per_layer],
        }


def _policy_bits(policy):
    return getattr(policy, "bits", policy)


def simulate_cost(net, policy, hw):
    """Latency, energy and model size of `net` quantized per `policy` on `hw`.

    `policy` maps every parametric layer index to (w_bits, a_bits). Composite
    layers are costed kernel by kernel with the layer's bitwidths.
    """
    bits = _policy_bits(policy)
    rows = []
    for i in net.parametric_indices():
        if i not in bits:
            raise PolicyError(f"policy has no bitwidths for parametric layer {i}")
        wb, ab = bits[i]
        macs = nbytes = lat = energy = size = 0
        for k in expand_block(net.layers[i]):
            kb = dram_bytes(k, wb, ab)
            kmacs = count_macs(k)
            macs += kmacs
            nbytes += kb
            lat += kmacs / roofline_attainable(kmacs / kb, hw) + hw.fixed_overhead_s
            energy += kmacs * hw.energy_per_mac + kb * hw.energy_per_dram_byte
            size += weight_count(k) * wb
        intensity = macs / nbytes
        rows.append(LayerCost(i, net.layers[i].kind, wb, ab, macs, nbytes, intensity,
                              roofline_attainable(intensity, hw), lat, energy, size))
    return CostReport(
        latency_s=sum(r.latency_s for r in rows),
        energy_j=sum(r.energy_j for r in rows),
        model_size_bits=sum(r.size_bits for r in rows),
        per_layer=tuple(rows),
    )


# -- latency lookup tables ----------------------------------------------------


@dataclass(frozen=True)
class LatencyTable:
    """(block index, op name) -> latency in seconds; op order per block is
    the insertion order of `entries`."""

    entries: dict

    def __post_init__(self):
        for key, v in self.entries.items():
            if not (v >= 0 and math.isfinite(v)):
                raise InputError(f"latency for {key} must be finite and >= 0, got {v}")

    @property
    def num_blocks(self):
        return 1 + max(b for b, _ in self.entries) if self.entries else 0

    def block_ops(self, block):
        return tuple(op for b, op in self.entries if b == block)

    def lookup(self, block, op):
        try:
            return self.entries[(block, op)]
        except KeyError:
            raise InputError(f"latency table has no entry for block {block}, op {op!r}") from None

    def matrix(self, choices=None):
        """N x K array of latencies, columns ordered by `choices` (or table order)."""
        rows = []
        for b in range(self.num_blocks):
            ops = choices if choices is not None else self.block_ops(b)
            rows.append([self.lookup(b, op) for op in ops])
        return np.array(rows, dtype=float)

    def arch_latency(self, ops):
        return sum(self.lookup(b, op) for b, op in enumerate(ops))

    @classmethod
    def from_op_costs(cls, num_blocks, costs):
        """Same per-op latency at every block; `costs` maps op name -> seconds."""
        return cls({(b, op): float(c) for b in range(num_blocks) for op, c in costs.items()})

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["block_index", "op_name", "latency_us"])
            for (b, op), v in self.entries.items():
                w.writerow([b, op, repr(v * 1e6)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["block_index", "op_name", "latency_us"]:
                raise InputError(f"{path}: expected header block_index,op_name,latency_us")
            entries = {}
            for row in reader:
                entries[(int(row["block_index"]), row["op_name"])] = float(row["latency_us"]) * 1e-6
        return cls(entries)


def synthesize_latency_table(space, hw, bits=8):
    """Roofline-derived latency of every candidate op at every block.

    `space` must provide `num_blocks`, `choices` and `op_layer(block, op)`
    returning the op's LayerSpec, or None for ops that cost nothing.
    """
    entries = {}
    for b in range(space.num_blocks):
        for op in space.choices:
            layer = space.op_layer(b, op)
            if layer is None:
                entries[(b, op)] = 0.0
            else:
                entries[(b, op)] = sum(kernel_latency(k, hw, bits, bits) for k in expand_block(layer))
    return LatencyTable(entries)


def expected_network_latency(arch_probs, table):
    """Sum over blocks of the probability-weighted op latencies; exact."""
    total = 0.0
    for b, p in enumerate(arch_probs):
        p = np.asarray(p, dtype=float)
        ops = table.block_ops(b)
        if p.shape != (len(ops),):
            raise InputError(f"block {b}: {p.size} probabilities for {len(ops)} ops")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InputError(f"block {b}: probabilities must be nonnegative and sum to 1")
        total += float(p @ np.array([table.lookup(b, op) for op in ops]))
    return total
