"""Diagnostics for trained GCT networks, and parameter / multiply-add accounting."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import Residual, Sequential
from .network import Network, NetworkSpec, build_network

HIST_EDGES = np.linspace(-1.0, 1.0, 41)

FLOP_CONVENTION = ("one multiply-add = one op; conv = C_out*C_in*kH*kW*H_out*W_out, "
                   "linear = in*out, GCT = 2*C*H*W + 4*C, SE = 2*C^2/r + C*H*W, "
                   "all per sample; BN, ReLU, pooling and residual additions count as 0")


class AnalysisError(ValueError):
    pass


@dataclass
class AnalysisRecord:
    layer_name: str
    layer_index: int
    gamma_mean: float | None = None
    gamma_std: float | None = None
    gamma_histogram: tuple | None = None  # (bin edges, counts)
    variance_ratio: float | None = None   # None when the input variance is zero
    variance_ratio_perchannel_mean: float | None = None


def _require_gct(net):
    layers = net.gct_layers()
    if not layers:
        raise AnalysisError(f"network {net.spec.name!r} has no GCT layers")
    return layers


def gamma_histogram(gamma) -> tuple:
    """Counts over fixed bins of width 0.05 on [-1, 1]; out-of-range values land in the end bins."""
    g = np.clip(np.asarray(gamma, dtype=np.float64), HIST_EDGES[0], HIST_EDGES[-1])
    counts, _ = np.histogram(g, bins=HIST_EDGES)
    return HIST_EDGES.copy(), counts


def gamma_stats(net: Network) -> list[AnalysisRecord]:
    records = []
    for i, layer in enumerate(_require_gct(net)):
        g = np.asarray(layer.params["gamma"], dtype=np.float64)
        records.append(AnalysisRecord(layer.name, i, float(g.mean()), float(g.std()),
                                      gamma_histogram(g)))
    return records


def _ratio(out, inp):
    vin = float(np.var(inp, dtype=np.float64))
    if vin == 0.0:
        return None
    return float(np.var(out, dtype=np.float64)) / vin


def _perchannel_ratio(out, inp):
    vin = np.var(inp, axis=(0, 2, 3), dtype=np.float64)
    vout = np.var(out, axis=(0, 2, 3), dtype=np.float64)
    ok = vin > 0
    if not ok.any():
        return None
    return float(np.mean(vout[ok] / vin[ok]))


def variance_ratio(net: Network, batch) -> list[AnalysisRecord]:
    """Var(output)/Var(input) of every GCT layer over one eval-mode pass of ``batch``.

    ``variance_ratio`` is the population variance over all N*C*H*W elements;
    ``variance_ratio_perchannel_mean`` averages per-channel ratios.
    """
    layers = _require_gct(net)
    for layer in layers:
        layer.capture = True
    try:
        net.forward(np.asarray(batch, dtype=net.dtype), train=False)
        records = []
        for i, layer in enumerate(layers):
            inp, out = layer.captured
            records.append(AnalysisRecord(layer.name, i, variance_ratio=_ratio(out, inp),
                                          variance_ratio_perchannel_mean=_perchannel_ratio(out, inp)))
    finally:
        for layer in layers:
            layer.capture = False
            layer.captured = None
    return records


def analyze(net: Network, batch) -> list[AnalysisRecord]:
    records = gamma_stats(net)
    for rec, vr in zip(records, variance_ratio(net, batch)):
        rec.variance_ratio = vr.variance_ratio
        rec.variance_ratio_perchannel_mean = vr.variance_ratio_perchannel_mean
    return records


def _fmt(v):
    return "undefined" if v is None else repr(v)


def write_analysis_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_index", "layer_name", "gamma_mean", "gamma_std",
                    "variance_ratio_global", "variance_ratio_perchannel_mean"])
        for r in records:
            w.writerow([r.layer_index, r.layer_name, _fmt(r.gamma_mean), _fmt(r.gamma_std),
                        _fmt(r.variance_ratio), _fmt(r.variance_ratio_perchannel_mean)])


def write_histogram_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer_index", "layer_name", "bin_lo", "bin_hi", "count"])
        for r in records:
            edges, counts = r.gamma_histogram
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([r.layer_index, r.layer_name, f"{lo:.2f}", f"{hi:.2f}", int(c)])


@dataclass
class CostReport:
    layers: list = field(default_factory=list)  # dicts: name, kind, params, macs
    input_shape: tuple | None = None
    convention: str = FLOP_CONVENTION

    @property
    def total_params(self) -> int:
        return sum(e["params"] for e in self.layers)

    @property
    def total_macs(self) -> int | None:
        if self.input_shape is None:
            return None
        return sum(e["macs"] for e in self.layers)

    def params_of(self, kind: str) -> int:
        return sum(e["params"] for e in self.layers if e["kind"] == kind)

    def macs_of(self, kind: str) -> int:
        return sum(e["macs"] or 0 for e in self.layers if e["kind"] == kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape) if self.input_shape else None
        d["total_params"] = self.total_params
        d["total_macs"] = self.total_macs
        d["total_params_M"] = self.total_params / 1e6
        d["total_gmacs"] = None if self.total_macs is None else self.total_macs / 1e9
        d["params_by_kind"] = {k: self.params_of(k) for k in sorted({e["kind"] for e in self.layers})}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _walk_costs(layer, shape, out):
    if isinstance(layer, Residual):
        s1 = _walk_costs(layer.body, shape, out)
        s2 = _walk_costs(layer.shortcut, shape, out)
        if shape is not None and tuple(s1) != tuple(s2):
            raise AnalysisError(f"{layer.name}: body output {s1} != shortcut {s2}")
        return s1
    if isinstance(layer, Sequential):
        for child in layer.layers:
            shape = _walk_costs(child, shape, out)
        return shape
    macs = None
    if shape is not None:
        macs, shape = layer.cost(shape)
    out.append({"name": layer.name, "kind": layer.kind,
                "params": layer.param_count(), "macs": macs})
    return shape


def _as_network(net_or_spec) -> Network:
    if isinstance(net_or_spec, (NetworkSpec, dict)):
        return build_network(net_or_spec, materialize=False)
    return net_or_spec


def count_params(net_or_spec) -> CostReport:
    report = CostReport()
    _walk_costs(_as_network(net_or_spec), None, report.layers)
    return report


def count_flops(net_or_spec, input_shape) -> CostReport:
    """Per-layer and total parameters and multiply-adds for a batch of ``input_shape``."""
    shape = tuple(int(v) for v in input_shape)
    if len(shape) != 4 or min(shape) < 1:
        raise AnalysisError(f"input shape must be N,C,H,W with positive entries, got {shape}")
    report = CostReport(input_shape=shape)
    _walk_costs(_as_network(net_or_spec), shape, report.layers)
    return report
