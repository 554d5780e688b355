"""
hapcac core library. You may also want to look at `cli.py` and `utilities.py`.
"""

##
# Imports
##
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from tqdm import tqdm

from .entropy import (
    MAX_ALPHABET,
    BitstreamHeader,
    RangeDecoder,
    RangeEncoder,
    SliceEntry,
    decode_raw_unit,
    encode_raw_unit,
    quantize_laplace,
    raw_unit_size,
)
from .hilbert import hilbert_indices
from .lod import LodParams, build_lod, slice_points
from .model import (
    BaselineState,
    ContextModel,
    ModelConfig,
    baseline_predict,
    load_checkpoint,
    nll_loss,
)
from .neighborhood import NeighborhoodParams, assemble_bundles
from .pointcloud import (
    AttributeKind,
    AttributeSpace,
    PointCloud,
    check_geometry,
    read_ply,
)
from .tensor import OptimizerState, Tape, adam_step, archive_hash, backward
from .utilities import (
    ConfigError,
    FormatError,
    IntegrityError,
    content_hash,
    find_ply_files,
    human_size,
)

##
# Logging Config
##

logging.basicConfig(format="%(levelname)s:%(message)s")
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

##
# Report layouts
##

REPORT_FIELDS = ["file", "slice", "level", "points", "bits", "bpp", "encode_s", "decode_s"]
EVAL_FIELDS = [
    "file",
    "quant_step",
    "refl_bits",
    "points",
    "bits",
    "bpp",
    "encode_s",
    "decode_s",
]
LOSS_FIELDS = ["epoch", "bits_per_point"]

LOD_KEYS = (
    "n1",
    "growth",
    "max_unit_points",
    "max_context_points",
    "slice_size",
    "seed",
    "random_first",
)
NEIGHBORHOOD_KEYS = ("k", "k1", "k2")
MODEL_KEYS = ("feature_dim", "hidden_dim", "input_mode", "seed")

CHECKSUM_SIZE = 8


@dataclass(frozen=True)
class CodecConfig:
    lod: LodParams = field(default_factory=LodParams)
    neighborhood: NeighborhoodParams = field(default_factory=NeighborhoodParams)
    baseline: bool = True
    threads: int = 1
    audit: bool = False

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be at least 1.")

    @classmethod
    def from_settings(cls, settings):
        """
        Build a config from a validated, flat settings dictionary.
        """
        return cls(
            lod=LodParams(**{k: settings[k] for k in LOD_KEYS if k in settings}),
            neighborhood=NeighborhoodParams(
                **{k: settings[k] for k in NEIGHBORHOOD_KEYS if k in settings}
            ),
            baseline=settings.get("baseline", True),
            threads=settings.get("threads", 1),
        )


def model_config_from_settings(settings, channels=1):
    values = {k: settings[k] for k in MODEL_KEYS + NEIGHBORHOOD_KEYS if k in settings}
    return ModelConfig(channels=channels, **values)


@dataclass
class RateReport:
    """
    Bits spent on one encoded cloud.

    Level rows carry ideal code lengths (raw bits for the first unit); the
    slice and total figures are the bytes actually written.
    """

    point_count: int
    header_bits: int
    slice_bits: list
    level_rows: list
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0

    @property
    def total_bits(self):
        return self.header_bits + sum(self.slice_bits)

    @property
    def bpp(self):
        return self.total_bits / self.point_count

    def level_bpp(self):
        """
        bpp per refinement level, all slices merged.
        """
        totals = {}
        for row in self.level_rows:
            points, bits = totals.get(row["level"], (0, 0.0))
            totals[row["level"]] = (points + row["points"], bits + row["bits"])
        return {level: bits / points for level, (points, bits) in sorted(totals.items())}

    def rows(self, name):
        rows = [
            {
                "file": name,
                "slice": "header",
                "level": "",
                "points": self.point_count,
                "bits": self.header_bits,
                "bpp": round(self.header_bits / self.point_count, 6),
                "encode_s": "",
                "decode_s": "",
            }
        ]
        for i, bits in enumerate(self.slice_bits):
            for row in self.level_rows:
                if row["slice"] != i:
                    continue
                rows.append(
                    {
                        "file": name,
                        "slice": i,
                        "level": row["level"],
                        "points": row["points"],
                        "bits": round(row["bits"], 3),
                        "bpp": round(row["bits"] / row["points"], 6),
                        "encode_s": "",
                        "decode_s": "",
                    }
                )
            points = sum(r["points"] for r in self.level_rows if r["slice"] == i)
            rows.append(
                {
                    "file": name,
                    "slice": i,
                    "level": "all",
                    "points": points,
                    "bits": bits,
                    "bpp": round(bits / points, 6),
                    "encode_s": "",
                    "decode_s": "",
                }
            )
        rows.append(
            {
                "file": name,
                "slice": "all",
                "level": "all",
                "points": self.point_count,
                "bits": self.total_bits,
                "bpp": round(self.bpp, 6),
                "encode_s": round(self.encode_seconds, 4),
                "decode_s": round(self.decode_seconds, 4),
            }
        )
        return rows


@dataclass
class _SliceResult:
    payload: bytes
    checksum: bytes
    levels: dict


def slice_checksum(hilbert):
    """
    Truncated SHA-256 of a slice's sorted Hilbert indices.
    """
    return content_hash(np.asarray(hilbert, dtype="<i8").tobytes())[:CHECKSUM_SIZE]


def coding_space(kind, attribute_bits):
    """
    The alphabet a stream's attributes are coded in; RGB travels as YCoCg-R.
    """
    if kind == AttributeKind.REFLECTANCE:
        return AttributeSpace.reflectance(attribute_bits)
    return AttributeSpace.ycocg()


##
# Codec
##


class Codec:
    """
    Codec object is responsible for running the coding pipeline:
    Hilbert sorting, slicing, LoD construction, prediction and entropy
    coding, plus the corpus-level train and eval loops.
    """

    def __init__(
        self, config=None, model=None, checkpoint_hash=None, disable_progress=True
    ):
        self.config = config or CodecConfig()
        self.model = model
        self.checkpoint_hash = checkpoint_hash or bytes(32)
        self.disable_progress = disable_progress

        if model is not None:
            neighborhood = NeighborhoodParams(
                k=model.config.k, k1=model.config.k1, k2=model.config.k2
            )
            if neighborhood != self.config.neighborhood:
                logger.debug("Using the checkpoint's neighbourhood sizes %s", neighborhood)
            self.config = replace(self.config, neighborhood=neighborhood)
        if not self.config.baseline and model is None:
            raise ConfigError("Neural coding needs a checkpoint; use --baseline otherwise.")

    @classmethod
    def from_checkpoint(cls, data, config=None, **kwargs):
        model = load_checkpoint(data)
        config = replace(config or CodecConfig(), baseline=False)
        return cls(config, model=model, checkpoint_hash=archive_hash(data), **kwargs)

    def _map(self, fn, count, unit):
        with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
            return list(
                tqdm(
                    pool.map(fn, range(count)),
                    total=count,
                    unit=unit,
                    disable=self.disable_progress,
                )
            )

    def _check_space(self, space, model):
        if max(space.max_attri) > MAX_ALPHABET:
            raise ConfigError(
                "Alphabets above {} symbols are not coded; requantize with --refl-bits.".format(
                    MAX_ALPHABET
                )
            )
        if model is not None and model.config.channels != space.channels:
            raise ConfigError(
                "Checkpoint was trained for {} channel(s), the cloud has {}.".format(
                    model.config.channels, space.channels
                )
            )

    def _unit_tables(self, unit, coords, known, space, neighborhood, state, model):
        """
        Yield (target, tables) per unit member in coding order.

        The caller stores the target's attributes in `known` before asking
        for the next one; the baseline scale is updated from them.
        """
        bundle = assemble_bundles(
            unit, coords, known, neighborhood, space.max_attri, audit=self.config.audit
        )
        if model is None:
            rows = baseline_predict(bundle, state)
        else:
            rows = model.predict_params(bundle, space.max_attri).rows()

        for target, params in zip(unit.members, rows):
            tables = [
                quantize_laplace(
                    int(params.mu64[0, c]), int(params.b_index[0, c]), space.max_attri[c]
                )
                for c in range(space.channels)
            ]
            yield target, tables
            if model is None:
                state.update(known[target] - params.mu[0])

    def encode_slice(self, slice_id, coords, hilbert, symbols, space):
        model = None if self.config.baseline else self.model
        partition = build_lod(coords, hilbert, self.config.lod, slice_id)
        first = partition[0]
        raw = encode_raw_unit(symbols[first.members], space.channel_bits)
        levels = {first.level: [len(first), 8.0 * len(raw)]}

        if len(partition) == 1:
            return _SliceResult(raw, slice_checksum(hilbert), levels)

        known = np.full_like(symbols, -1)
        known[first.members] = symbols[first.members]
        state = BaselineState(space.max_attri)
        encoder = RangeEncoder()
        for unit in partition.units[1:]:
            entry = levels.setdefault(unit.level, [0, 0.0])
            entry[0] += len(unit)
            tables = self._unit_tables(
                unit, coords, known, space, self.config.neighborhood, state, model
            )
            for target, dists in tables:
                for c, dist in enumerate(dists):
                    symbol = int(symbols[target, c])
                    encoder.encode(symbol, dist)
                    entry[1] += dist.bits(symbol)
                known[target] = symbols[target]

        payload = raw + encoder.finish()
        logger.debug(
            "Slice %d: %d points, %d units, %s", slice_id, len(coords), len(partition),
            human_size(len(payload)),
        )
        return _SliceResult(payload, slice_checksum(hilbert), levels)

    def decode_slice(self, slice_id, coords, hilbert, payload, space, header, model):
        partition = build_lod(coords, hilbert, header.lod, slice_id)
        first = partition[0]
        size = raw_unit_size(len(first), space.channel_bits)
        if len(payload) < size:
            raise IntegrityError("Slice {} payload is truncated.".format(slice_id))

        known = np.full((len(coords), space.channels), -1, dtype=np.int64)
        known[first.members] = decode_raw_unit(payload[:size], len(first), space.channel_bits)
        if len(partition) == 1:
            if len(payload) != size:
                raise IntegrityError("Slice {} has trailing bytes.".format(slice_id))
            return known

        state = BaselineState(space.max_attri)
        decoder = RangeDecoder(payload[size:])
        for unit in partition.units[1:]:
            tables = self._unit_tables(
                unit, coords, known, space, header.neighborhood, state, model
            )
            for target, dists in tables:
                known[target] = [decoder.decode(dist) for dist in dists]
        if decoder.remaining:
            raise IntegrityError(
                "Slice {} decoded with {} bytes left over.".format(slice_id, decoder.remaining)
            )
        return known

    def encode(self, pc):
        """
        Encode a cloud's attributes. Returns (bitstream bytes, RateReport).
        """
        started = time.time()
        coded = pc.to_ycocg()
        space = coded.space
        model = None if self.config.baseline else self.model
        self._check_space(space, model)

        symbols = space.to_symbols(coded.attributes)
        hilbert = hilbert_indices(coded.positions, coded.geom_bits)
        order = np.argsort(hilbert, kind="stable")
        slices = slice_points(order, self.config.lod.slice_size)

        def work(i):
            idx = order[slices[i]]
            return self.encode_slice(i, coded.positions[idx], hilbert[idx], symbols[idx], space)

        results = self._map(work, len(slices), "slice")

        header = BitstreamHeader(
            kind=pc.space.kind,
            attribute_bits=space.channel_bits[0] if not space.is_color else 8,
            geom_bits=pc.geom_bits,
            point_count=len(pc),
            lod=self.config.lod,
            neighborhood=self.config.neighborhood,
            baseline=self.config.baseline,
            checkpoint_hash=bytes(32) if self.config.baseline else self.checkpoint_hash,
            slices=[SliceEntry(len(r.payload), r.checksum) for r in results],
        )
        head = header.pack()
        data = head + b"".join(r.payload for r in results)

        level_rows = [
            {"slice": i, "level": level, "points": points, "bits": bits}
            for i, r in enumerate(results)
            for level, (points, bits) in sorted(r.levels.items())
        ]
        report = RateReport(
            point_count=len(pc),
            header_bits=8 * len(head),
            slice_bits=[8 * len(r.payload) for r in results],
            level_rows=level_rows,
            encode_seconds=time.time() - started,
        )
        logger.debug(
            "Encoded %d points in %d slice(s): %s, %.4f bpp",
            len(pc), len(slices), human_size(len(data)), report.bpp,
        )
        return data, report

    def decode(self, positions, data):
        """
        Rebuild the attributes of `positions` from a bitstream. Points come
        back in the order given.
        """
        header = BitstreamHeader.unpack(data)
        model = None
        if not header.baseline:
            if self.model is None:
                raise ConfigError("Bitstream was coded with a checkpoint; pass --checkpoint.")
            if self.checkpoint_hash != header.checkpoint_hash:
                raise IntegrityError("Checkpoint does not match the one used to encode.")
            model = self.model
        space = coding_space(header.kind, header.attribute_bits)
        self._check_space(space, model)

        positions = np.asarray(positions, dtype=np.int64)
        if len(positions) != header.point_count:
            raise IntegrityError(
                "Geometry has {} points, the bitstream {}.".format(
                    len(positions), header.point_count
                )
            )
        try:
            check_geometry(positions, header.geom_bits)
        except FormatError as e:
            raise IntegrityError("Geometry does not match the bitstream: {}".format(e))

        hilbert = hilbert_indices(positions, header.geom_bits)
        order = np.argsort(hilbert, kind="stable")
        slices = slice_points(order, header.lod.slice_size)
        if len(slices) != len(header.slices):
            raise IntegrityError("Geometry splits into a different number of slices.")
        for i, (rows, entry) in enumerate(zip(slices, header.slices)):
            if slice_checksum(hilbert[order[rows]]) != entry.checksum:
                raise IntegrityError("Geometry checksum mismatch in slice {}.".format(i))

        payloads = header.slice_payloads(data)

        def work(i):
            idx = order[slices[i]]
            return self.decode_slice(
                i, positions[idx], hilbert[idx], payloads[i], space, header, model
            )

        results = self._map(work, len(slices), "slice")
        symbols = np.empty((len(positions), space.channels), dtype=np.int64)
        for rows, decoded in zip(slices, results):
            symbols[order[rows]] = decoded

        try:
            pc = PointCloud(
                positions, space.from_symbols(symbols), space, geom_bits=header.geom_bits
            )
        except FormatError as e:
            raise IntegrityError("Decoded attributes are invalid: {}".format(e))
        if header.kind == AttributeKind.COLOR_RGB:
            pc = pc.to_rgb()
        return pc

    ##
    # Training
    ##

    def training_examples(self, clouds):
        """
        Bundles of every predicted unit in the corpus with their true symbols.
        """
        if not clouds:
            raise ConfigError("The training corpus is empty.")
        spaces = {pc.to_ycocg().space for pc in clouds}
        if len(spaces) != 1:
            raise ConfigError("The training corpus mixes attribute spaces.")
        space = spaces.pop()
        self._check_space(space, None)

        examples = []
        for pc in clouds:
            coded = pc.to_ycocg()
            symbols = space.to_symbols(coded.attributes)
            hilbert = hilbert_indices(coded.positions, coded.geom_bits)
            order = np.argsort(hilbert, kind="stable")
            for i, rows in enumerate(slice_points(order, self.config.lod.slice_size)):
                idx = order[rows]
                coords, slice_symbols = coded.positions[idx], symbols[idx]
                partition = build_lod(coords, hilbert[idx], self.config.lod, i)
                for unit in partition.units[1:]:
                    bundle = assemble_bundles(
                        unit, coords, slice_symbols, self.config.neighborhood, space.max_attri
                    )
                    examples.append((bundle, slice_symbols[unit.members].astype(np.float64)))
        logger.debug("Cached %d training units", len(examples))
        return space, examples

    def train(
        self,
        clouds,
        model_config=None,
        learning_rate=1e-3,
        epochs=1,
        batch_units=8,
        seed=0,
        on_epoch=None,
    ):
        """
        Fit a ContextModel on the clouds with Adam. Returns (model, losses),
        losses being bits per point for each epoch.
        """
        space, examples = self.training_examples(clouds)
        if not examples:
            raise ConfigError("The corpus is too small to hold any predicted unit.")

        nb = self.config.neighborhood
        model_config = replace(
            model_config or ModelConfig(),
            channels=space.channels,
            k=nb.k,
            k1=nb.k1,
            k2=nb.k2,
        )
        model = ContextModel(model_config)
        params = model.parameters()
        state = OptimizerState.for_params(params, learning_rate=learning_rate)
        rng = np.random.default_rng(seed)

        losses = []
        for epoch in tqdm(range(1, epochs + 1), unit="epoch", disable=self.disable_progress):
            shuffled = rng.permutation(len(examples))
            epoch_bits = 0.0
            epoch_points = 0
            for start in range(0, len(shuffled), batch_units):
                for p in params:
                    p.zero_grad()
                batch_points = 0
                for j in shuffled[start : start + batch_units]:
                    bundle, target = examples[j]
                    with Tape() as tape:
                        mu, b = model.forward(bundle, space.max_attri)
                        loss = nll_loss(mu, b, target)
                    backward(tape, loss)
                    epoch_bits += float(loss.data)
                    batch_points += len(target)
                epoch_points += batch_points
                grads = [None if p.grad is None else p.grad / batch_points for p in params]
                adam_step(params, grads, state)

            bits_per_point = epoch_bits / epoch_points
            losses.append(bits_per_point)
            logger.info("Epoch %d: %.4f bits/point", epoch, bits_per_point)
            if on_epoch is not None:
                on_epoch(epoch, bits_per_point)
        return model, losses

    ##
    # Evaluation
    ##

    def evaluate(self, corpus, quant_steps=(1,), refl_bits=(None,)):
        """
        Encode, decode and verify every (name, cloud) of the corpus under each
        geometry step and reflectance depth. Returns EVAL_FIELDS rows, with
        an `ALL` row per setting.
        """
        if not corpus:
            raise ConfigError("The evaluation corpus is empty.")
        if all(pc.space.is_color for _, pc in corpus):
            refl_bits = (None,)

        rows = []
        for step in quant_steps:
            for bits in refl_bits:
                totals = {"points": 0, "bits": 0, "encode_s": 0.0, "decode_s": 0.0}
                for name, pc in corpus:
                    sample = quantize_geometry(pc, step)
                    if bits is not None and not sample.space.is_color:
                        sample = requantize_reflectance(sample, bits)

                    data, report = self.encode(sample)
                    started = time.time()
                    decoded = self.decode(sample.positions, data)
                    report.decode_seconds = time.time() - started
                    if decoded != sample:
                        raise IntegrityError(
                            "Lossless check failed for {} (step {}, bits {}).".format(
                                name, step, bits
                            )
                        )
                    if report.total_bits != 8 * len(data):
                        raise IntegrityError("Report does not match the bitstream size.")

                    rows.append(
                        {
                            "file": name,
                            "quant_step": step,
                            "refl_bits": "" if bits is None else bits,
                            "points": len(sample),
                            "bits": report.total_bits,
                            "bpp": round(report.bpp, 6),
                            "encode_s": round(report.encode_seconds, 4),
                            "decode_s": round(report.decode_seconds, 4),
                        }
                    )
                    totals["points"] += len(sample)
                    totals["bits"] += report.total_bits
                    totals["encode_s"] += report.encode_seconds
                    totals["decode_s"] += report.decode_seconds

                rows.append(
                    {
                        "file": "ALL",
                        "quant_step": step,
                        "refl_bits": "" if bits is None else bits,
                        "points": totals["points"],
                        "bits": totals["bits"],
                        "bpp": round(totals["bits"] / totals["points"], 6),
                        "encode_s": round(totals["encode_s"], 4),
                        "decode_s": round(totals["decode_s"], 4),
                    }
                )
                logger.info(
                    "step %s, bits %s: %.4f bpp",
                    step, bits or "-", totals["bits"] / totals["points"],
                )
        return rows


##
# Corpus helpers
##


def load_corpus(directory):
    """
    (relative path, PointCloud) for every PLY below `directory`.
    """
    corpus = []
    for path in find_ply_files(directory):
        with open(path, "rb") as ply_file:
            corpus.append((os.path.relpath(path, directory), read_ply(ply_file.read())))
    if not corpus:
        raise ConfigError("No .ply files found below '{}'.".format(directory))
    return corpus


def quantize_geometry(pc, step):
    """
    Integer-divide coordinates by `step`; merged voxels keep the attribute of
    the point that comes first in Hilbert order.
    """
    if step < 1:
        raise ConfigError("Quantization steps must be at least 1.")
    if step == 1:
        return pc

    quantized = pc.positions // step
    hilbert = hilbert_indices(pc.positions, pc.geom_bits)
    order = np.argsort(hilbert, kind="stable")
    _, first = np.unique(quantized[order], axis=0, return_index=True)
    keep = np.sort(order[first])
    geom_bits = max(1, (((1 << pc.geom_bits) - 1) // step).bit_length())
    return PointCloud(quantized[keep], pc.attributes[keep], pc.space, geom_bits=geom_bits)


def requantize_reflectance(pc, bits):
    """
    Drop low-order reflectance bits down to `bits`.
    """
    if pc.space.is_color:
        raise ConfigError("Only reflectance clouds can be requantized.")
    current = pc.space.channel_bits[0]
    if not 1 <= bits <= current:
        raise ConfigError(
            "Cannot requantize {}-bit reflectance to {} bits.".format(current, bits)
        )
    return pc.with_attributes(
        pc.attributes >> (current - bits), space=AttributeSpace.reflectance(bits)
    )


def _smooth_field(unit_positions, phase):
    x, y, z = unit_positions.T
    return (
        0.5
        + 0.2 * np.sin(2 * np.pi * (1.3 * x + 0.7 * y) + phase)
        + 0.2 * np.cos(2 * np.pi * (0.9 * z - 0.5 * x) + 2 * phase)
    )


def synthesize_cloud(
    n, geom_bits=10, kind=AttributeKind.REFLECTANCE, bits=8, noise=2.0, seed=0
):
    """
    Points on a random smooth voxel surface with a smooth attribute field
    plus Gaussian noise.
    """
    side = 1 << geom_bits
    if n < 1 or n > side ** 3:
        raise ConfigError("Cannot place {} points in a {}-bit cube.".format(n, geom_bits))
    rng = np.random.default_rng(seed)
    frequency = rng.uniform(0.5, 2.0, size=2)

    points = np.empty((0, 3), dtype=np.int64)
    for _ in range(8):
        if len(points) >= n:
            break
        m = 2 * (n - len(points)) + 16
        xy = rng.random((m, 2))
        height = 0.5 + 0.25 * np.sin(2 * np.pi * frequency[0] * xy[:, 0]) * np.cos(
            2 * np.pi * frequency[1] * xy[:, 1]
        )
        z = height + rng.normal(0.0, 0.02, m)
        candidates = np.clip(np.floor(np.column_stack([xy, z]) * side), 0, side - 1)
        points = _unique_rows(np.concatenate([points, candidates.astype(np.int64)]))

    # Small cubes saturate the surface; top up with free voxels.
    while len(points) < n:
        extra = rng.integers(0, side, size=(2 * (n - len(points)) + 16, 3))
        points = _unique_rows(np.concatenate([points, extra]))
    points = points[:n]

    unit_positions = points / float(side)
    if kind == AttributeKind.REFLECTANCE:
        top = (1 << bits) - 1
        values = _smooth_field(unit_positions, 0.0) * top + rng.normal(0.0, noise, n)
        attributes = np.clip(np.rint(values), 0, top).astype(np.int64)[:, None]
        space = AttributeSpace.reflectance(bits)
    else:
        channels = [
            _smooth_field(unit_positions, phase) * 255 + rng.normal(0.0, noise, n)
            for phase in (0.0, 1.0, 2.0)
        ]
        attributes = np.clip(np.rint(np.column_stack(channels)), 0, 255).astype(np.int64)
        space = AttributeSpace.rgb()
        if kind == AttributeKind.COLOR_YCOCG:
            return PointCloud(points, attributes, space, geom_bits=geom_bits).to_ycocg()
    return PointCloud(points, attributes, space, geom_bits=geom_bits)


def _unique_rows(rows):
    """
    Distinct rows in first-seen order.
    """
    _, first = np.unique(rows, axis=0, return_index=True)
    return rows[np.sort(first)]
