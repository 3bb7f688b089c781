"""Dense optical-flow strain measurement and adaptive frame-rate control.

Images are 2-D float arrays indexed [row, column]; a region of interest is
(x0, y0, width, height). Configuration objects are plain dicts in the same
shape as the JSON files the command-line tool reads.
"""
import json

from . import _isod
from ._isod import (
    ConfigError,
    DimensionError,
    InsufficientDataError,
    LoadError,
    ParseError,
    ProtocolError,
    decode_png,
    encode_png,
    protocol_version,
)

__all__ = [
    "ConfigError", "DimensionError", "InsufficientDataError", "LoadError", "ParseError", "ProtocolError",
    "generate_speckle", "warp", "solve_flow", "green_strain", "strain_stats", "decide_rate",
    "simulate", "load_archive", "load_batch", "encode_png", "decode_png",
    "encode_message", "decode_messages", "protocol_version",
]


def generate_speckle(width, height, *, dot_density=50.0, radius_min=1.0, radius_max=3.0, blur_sigma=1.0,
                     background_level=0.85, dot_level=0.1, seed=0):
    spec = dict(width=width, height=height, dot_density=dot_density, dot_radius_range=[radius_min, radius_max],
                blur_sigma=blur_sigma, background_level=background_level, dot_level=dot_level, rng_seed=seed)
    return _isod.generate_speckle(json.dumps(spec))


def warp(image, terms, fill=0.85):
    """Warp `image` by displacement terms, e.g. [{"kind": "translate", "u": 0.3, "v": 0}]."""
    return _isod.warp(image, json.dumps(terms), fill)


def solve_flow(ref, deformed, roi, **flow):
    """Dense displacement (u, v, valid) over `roi`; keyword arguments override flow settings."""
    return _isod.solve_flow(ref, deformed, tuple(roi), json.dumps(flow))


def green_strain(u, v, valid, roi, smoothing_sigma=0.0):
    """Green-Lagrange strain (exx, eyy, exy, valid) of a displacement field."""
    return _isod.green_strain(u, v, valid, tuple(roi), smoothing_sigma)


def strain_stats(exx, eyy, exy, valid, roi, previous=None, k_fractions=(0.05, 0.10)):
    prev = None if previous is None else json.dumps(previous)
    return json.loads(_isod.strain_stats(exx, eyy, exy, valid, tuple(roi), prev, list(k_fractions)))


def decide_rate(policy, stats):
    """(fps, fired_row) chosen by `policy` for batch statistics `stats`."""
    return _isod.decide_rate(json.dumps(policy), json.dumps(stats))


def simulate(config, schedule, out_dir=None):
    """Run the control loop on synthetic frames; writes an archive when `out_dir` is given."""
    return json.loads(_isod.simulate(json.dumps(config), json.dumps(schedule), str(out_dir or "")))


def load_archive(root):
    return json.loads(_isod.load_archive(str(root)))


def load_batch(path):
    return _isod.load_batch(str(path))


def encode_message(type_, seq, payload=None):
    return _isod.encode_message(type_, seq, json.dumps(payload if payload is not None else {}))


def decode_messages(data):
    """Complete messages in `data` as (type, seq, payload) and the count of leftover bytes."""
    msgs, rest = _isod.decode_messages(bytes(data))
    return [(t, s, json.loads(p)) for t, s, p in msgs], rest
