"""Operation counts, data movement, and the energy proxy.

Turns datapath traces plus a compressed model into a per-layer cost
report. The proxy is a deterministic weighted sum of counters in
arbitrary units; only its trends are meaningful (the repeat-pop discount
models the cheaper reload of an unchanged FIFO value).
"""

import csv
from dataclasses import dataclass, field, asdict

from .codec import decode
from .ecq import empirical_entropy, sparsity


@dataclass
class EnergyCoefficients:
    """Arbitrary-unit weights; defaults favor data movement over math."""

    c_add: float = 1.0
    c_mul: float = 4.0
    c_fifo: float = 0.5
    repeat_discount: float = 0.5  # fraction of fifo cost refunded per repeat pop
    c_offchip: float = 100.0  # per byte
    c_onchip: float = 5.0  # per byte

    def validate(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"energy coefficient {name} must be non-negative")
        if self.repeat_discount > 1:
            raise ValueError("repeat_discount cannot exceed 1")


@dataclass
class LayerCost:
    layer: str
    fmt: str
    adds: int
    skipped_adds: int
    mults: int
    fifo_pops: int
    repeat_pops: int
    offchip_bytes: float
    onchip_bytes: float
    entropy: float
    sparsity: float
    energy_proxy: float = 0.0


@dataclass
class CostReport:
    layers: list = field(default_factory=list)
    total: LayerCost = None

    def rows(self):
        return self.layers + [self.total]


def energy_proxy(entry, coefficients=None):
    """Weighted counter sum for one LayerCost (or the total row)."""
    c = coefficients or EnergyCoefficients()
    c.validate()
    fifo_effective = entry.fifo_pops - c.repeat_discount * entry.repeat_pops
    return (
        c.c_add * entry.adds
        + c.c_mul * entry.mults
        + c.c_fifo * fifo_effective
        + c.c_offchip * entry.offchip_bytes
        + c.c_onchip * entry.onchip_bytes
    )


def tally_trace(traces, container, coefficients=None):
    """CostReport from per-layer traces and the compressed model."""
    if len(traces) != len(container.layers):
        raise ValueError(
            f"{len(traces)} traces for {len(container.layers)} container layers"
        )
    entries = []
    weighted_entropy = 0.0
    total_weights = 0
    zeros = 0
    for i, (tr, clayer) in enumerate(zip(traces, container.layers)):
        codes = decode(clayer.compressed)
        h = empirical_entropy(codes) if codes.size else 0.0
        sp = sparsity(codes)
        entries.append(
            LayerCost(
                layer=str(i),
                fmt=clayer.compressed.format,
                adds=tr.adds_performed,
                skipped_adds=tr.adds_skipped,
                mults=tr.mults,
                fifo_pops=tr.fifo_pops,
                repeat_pops=tr.fifo_repeat_pops,
                offchip_bytes=tr.bytes_offchip,
                onchip_bytes=tr.bytes_onchip,
                entropy=h,
                sparsity=sp,
            )
        )
        weighted_entropy += h * codes.size
        total_weights += codes.size
        zeros += int((codes == 0).sum())
    total = LayerCost(
        layer="total",
        fmt="",
        adds=sum(e.adds for e in entries),
        skipped_adds=sum(e.skipped_adds for e in entries),
        mults=sum(e.mults for e in entries),
        fifo_pops=sum(e.fifo_pops for e in entries),
        repeat_pops=sum(e.repeat_pops for e in entries),
        offchip_bytes=sum(e.offchip_bytes for e in entries),
        onchip_bytes=sum(e.onchip_bytes for e in entries),
        entropy=weighted_entropy / total_weights if total_weights else 0.0,
        sparsity=zeros / total_weights if total_weights else 0.0,
    )
    for e in entries + [total]:
        e.energy_proxy = energy_proxy(e, coefficients)
    return CostReport(entries, total)


_COLUMNS = [
    "layer", "fmt", "adds", "skipped_adds", "mults", "fifo_pops",
    "repeat_pops", "offchip_bytes", "onchip_bytes", "entropy", "sparsity",
    "energy_proxy",
]


def write_cost_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_COLUMNS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: getattr(row, k) for k in _COLUMNS})


def format_cost_table(report):
    """Plain-text aligned table for terminal output."""
    header = _COLUMNS
    lines = []
    rows = [
        [
            (f"{getattr(r, k):.4g}" if isinstance(getattr(r, k), float) else str(getattr(r, k)))
            for k in header
        ]
        for r in report.rows()
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)
