"""Synthetic population generation and the on-disk dataset format.

Each population member owns a counter-based RNG stream spawned from the
dataset seed, so the file regenerates bit-exactly for a given (config, seed)
pair, rows never depend on each other or on how the batch is threaded, and a
diverged trajectory can be redrawn from its own stream without disturbing
its neighbours.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, IntegrationDiverged, IntegrityError
from .experiments import build_forward_model, build_truth_noise_measure
from .forward import TimeAveragedObservable

FORMAT_VERSION = 1
MAX_RESAMPLE_ROUNDS = 50


@dataclass
class PopulationDataset:
    samples: np.ndarray
    meta: dict

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def d_y(self):
        return self.samples.shape[1]


def _member_rngs(seed, n):
    root = np.random.SeedSequence(int(seed))
    return [np.random.Generator(np.random.Philox(child)) for child in root.spawn(n)]


def _darcy_rows(config, model, rngs):
    truth = config.alpha_truth
    m, sigma = float(truth["m"]), float(truth["sigma"])
    eps = np.array([rng.standard_normal() for rng in rngs])
    z = np.exp(m + sigma * eps)
    clean = model.forward_oracle(z)

    noise = build_truth_noise_measure(config)
    if noise.kind == "scaled-identity":
        gamma = float(np.exp(noise.log_gamma.value))
        xi = gamma * np.stack([rng.standard_normal(model.d_y) for rng in rngs])
    else:
        lam = noise.sample_eigenvalues().value
        psi = noise._sample_psi
        coeff = np.stack([rng.standard_normal(lam.shape[0]) for rng in rngs])
        xi = (coeff * np.sqrt(lam)) @ psi
    return clean + xi, 0


def _l96_rows(config, model, rngs, threads):
    truth = config.alpha_truth
    m = np.asarray(truth["m"], dtype=np.float64)
    sigma = np.asarray(truth["sigma"], dtype=np.float64)
    init_std = float(config.data["init_std"])
    obs = TimeAveragedObservable(model)

    def draw(rng):
        z = m + sigma * rng.standard_normal(m.shape[0])
        s0 = init_std * rng.standard_normal(model.state_dim)
        return z, s0

    pairs = [draw(rng) for rng in rngs]
    z_block = np.stack([p[0] for p in pairs])
    s0_block = np.stack([p[1] for p in pairs])
    feats, diverged = obs.evaluate_batch(z_block, s0_block, threads=threads)

    resampled = 0
    rounds = 0
    bad = np.flatnonzero(diverged >= 0)
    while bad.size:
        rounds += 1
        if rounds > MAX_RESAMPLE_ROUNDS:
            raise IntegrationDiverged(
                f"{bad.size} population members still diverging after "
                f"{MAX_RESAMPLE_ROUNDS} redraw rounds"
            )
        resampled += int(bad.size)
        redraw = [draw(rngs[i]) for i in bad]
        z_block[bad] = np.stack([p[0] for p in redraw])
        s0_block[bad] = np.stack([p[1] for p in redraw])
        f, d = obs.evaluate_batch(z_block[bad], s0_block[bad], threads=threads)
        feats[bad] = f
        bad = bad[d >= 0]
    return feats, resampled


def generate_population(config, n=None, seed=None, threads=1):
    """Draw a fresh observed population for an experiment config."""
    n = int(config.data["n"] if n is None else n)
    if n < 1:
        raise ConfigError(f"population size must be positive, got {n}")
    seed = int(config.seed if seed is None else seed)
    model = build_forward_model(config)
    rngs = _member_rngs(seed, n)

    if config.model["kind"] == "darcy":
        samples, resampled = _darcy_rows(config, model, rngs)
    else:
        samples, resampled = _l96_rows(config, model, rngs, threads)

    meta = {
        "format_version": FORMAT_VERSION,
        "experiment": config.name,
        "config_hash": config.config_hash(),
        "model": config.model["kind"],
        "seed": seed,
        "n": n,
        "d_y": int(samples.shape[1]),
        "resampled": resampled,
    }
    return PopulationDataset(np.ascontiguousarray(samples), meta)


def _meta_path(path):
    return str(path) + ".meta.json"


def save_population(dataset, path):
    """CSV with one member per row plus a sidecar metadata file."""
    path = str(path)
    d = dataset.d_y
    header = ",".join(f"y{j}" for j in range(d))
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in dataset.samples:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
    with open(_meta_path(path), "w") as fh:
        json.dump(dataset.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_population(path):
    """Parse a saved population, cross-checking it against its metadata.

    Malformed file content raises DataFormatError carrying the byte offset
    of the offending line; disagreement between a well-formed file and its
    metadata raises IntegrityError.
    """
    path = str(path)
    meta_file = _meta_path(path)
    try:
        with open(meta_file) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise IntegrityError(f"missing metadata file {meta_file}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"metadata is not valid JSON: {exc}", offset=0) from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported dataset format version {version!r}")
    for key in ("n", "d_y"):
        if not isinstance(meta.get(key), int):
            raise IntegrityError(f"metadata field {key!r} missing or not an integer")
    d = meta["d_y"]
    expected_header = ",".join(f"y{j}" for j in range(d))

    rows = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh):
            try:
                line = raw.decode("ascii").rstrip("\r\n")
            except UnicodeDecodeError:
                raise DataFormatError(f"non-ASCII bytes on line {lineno + 1}", offset=offset) from None
            if lineno == 0:
                if line != expected_header:
                    raise DataFormatError(
                        f"header does not match a {d}-column population file", offset=0
                    )
                offset += len(raw)
                continue
            fields = line.split(",")
            if len(fields) != d:
                raise DataFormatError(
                    f"line {lineno + 1} has {len(fields)} fields, expected {d}", offset=offset
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise DataFormatError(
                    f"line {lineno + 1} contains a non-numeric field", offset=offset
                ) from None
            offset += len(raw)
    if not rows and meta["n"] > 0:
        raise DataFormatError("file contains no data rows", offset=0)
    samples = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    if samples.shape[0] != meta["n"]:
        raise IntegrityError(
            f"file holds {samples.shape[0]} rows but metadata promises {meta['n']}"
        )
    return PopulationDataset(samples, meta)
