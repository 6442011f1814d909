"""The full encoder-decoder segmentation network.

A block of N points goes through a per-point lift of its non-coordinate
features, three encoder levels (farthest point sampling down to a quarter
of the points, KNN grouping, LoSDA) and three decoder levels
(interpolation back up, skip concatenation, GRA, shared MLP) before a
linear head produces per-point class scores.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, ParseError
from .gra import GRA, GRA_MODES
from .losda import LocalGeometry, LoSDA, LoSDAFlags, local_geometry
from .nn import Module, SharedMLP, linear
from .spatial import Interpolation, farthest_point_sampling, interpolation_index

ABLATION_TAGS = ("A", "B", "C", "D", "E")


@dataclass(frozen=True)
class NetworkConfig:
    class_count: int = 9
    input_width: int = 5
    K: int = 32
    points_per_block: int = 4096
    decimation: int = 4
    encoder_widths: tuple = (64, 128, 256)
    initial_lift_width: int = 32
    gra_mode: str = "mode1"
    use_sde: bool = True
    use_dfe: bool = True
    use_ede: bool = True
    use_attention_pool: bool = True
    relative_ede: bool = False
    interpolation_k: int = 1
    batch_norm: bool = True
    gra_reduction: int = 8
    gra_embed_width: Optional[int] = None
    gra_relation_width: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        w = self.encoder_widths
        if self.class_count < 2:
            raise ConfigError(f"class_count must be at least 2, got {self.class_count}")
        if self.input_width < 4:
            raise ConfigError(f"input_width must cover xyz plus at least one feature, got {self.input_width}")
        if self.K < 1:
            raise ConfigError(f"K must be positive, got {self.K}")
        if self.points_per_block < 1:
            raise ConfigError(f"points_per_block must be positive, got {self.points_per_block}")
        if self.decimation < 2:
            raise ConfigError(f"decimation must be at least 2, got {self.decimation}")
        if len(w) != 3:
            raise ConfigError(f"encoder_widths needs three values, got {list(w)}")
        if w[0] < 1 or any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigError(f"encoder_widths must be positive and strictly increasing, got {list(w)}")
        if self.initial_lift_width < 1:
            raise ConfigError("initial_lift_width must be positive")
        if self.gra_mode not in GRA_MODES:
            raise ConfigError(f"gra_mode must be one of {GRA_MODES}, got {self.gra_mode!r}")
        if self.interpolation_k not in (1, 3):
            raise ConfigError(f"interpolation_k must be 1 or 3, got {self.interpolation_k}")
        if self.gra_reduction < 1:
            raise ConfigError("gra_reduction must be positive")
        self.flags  # validates the SDE/DFE combination

    @property
    def flags(self) -> LoSDAFlags:
        return LoSDAFlags(self.use_sde, self.use_dfe, self.use_ede, self.use_attention_pool, self.relative_ede)

    @property
    def level_sizes(self) -> list:
        sizes = [self.points_per_block]
        for _ in self.encoder_widths:
            sizes.append(math.ceil(sizes[-1] / self.decimation))
        return sizes

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def miniature(cls, **changes) -> "NetworkConfig":
        """Small configuration for gradient checks and overfit runs."""
        base = dict(
            K=4,
            points_per_block=64,
            encoder_widths=(8, 16, 32),
            initial_lift_width=8,
            gra_embed_width=8,
            gra_relation_width=8,
        )
        base.update(changes)
        return cls(**base)

    # text form ----------------------------------------------------------

    def to_section(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    @classmethod
    def from_section(cls, section) -> "NetworkConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in dict(section).items():
            if key not in known:
                raise ConfigError(f"unknown network option {key!r}")
            kwargs[key] = _parse_value(key, raw, known[key].default)
        return cls(**kwargs)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["network"] = self.to_section()
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if "network" not in cp:
            raise ConfigError("config has no [network] section")
        return cls.from_section(cp["network"])


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if isinstance(default, int) or default is None and key.startswith("gra_"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def build_ablation(tag: str, base: Optional[NetworkConfig] = None) -> NetworkConfig:
    """Ablation variants: A=SDE, B=DFE, C=SDE+DFE, D=+EDE, E=+attention pooling; GRA off."""
    base = base or NetworkConfig()
    table = {
        "A": (True, False, False, False),
        "B": (False, True, False, False),
        "C": (True, True, False, False),
        "D": (True, True, True, False),
        "E": (True, True, True, True),
    }
    if tag not in table:
        raise ConfigError(f"ablation tag must be one of {ABLATION_TAGS}, got {tag!r}")
    sde, dfe, ede, att = table[tag]
    return base.replace(use_sde=sde, use_dfe=dfe, use_ede=ede, use_attention_pool=att, gra_mode="off")


# --------------------------------------------------------------------------
# geometry plan


@dataclass
class BlockPlan:
    """Coordinate-only structure of one block, reusable across epochs."""

    level_xyz: list  # xyz per level, level 0 = all points
    encoders: list  # LocalGeometry per encoder level
    upsample: list  # Interpolation from level l+1 to level l, index l

    @property
    def level_sizes(self) -> list:
        return [len(x) for x in self.level_xyz]


def center_block(xyz: np.ndarray) -> np.ndarray:
    """Shift x and y to the block mean; z stays absolute."""
    xyz = np.array(xyz, dtype=np.float64)
    xyz[:, :2] -= xyz[:, :2].mean(axis=0)
    return xyz


def plan_block(xyz: np.ndarray, config: NetworkConfig) -> BlockPlan:
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape != (config.points_per_block, 3):
        raise DimensionError(f"block must hold {config.points_per_block} points, got {xyz.shape[0]}")
    levels = [center_block(xyz)]
    encoders = []
    for size in config.level_sizes[1:]:
        prev = levels[-1]
        chosen = farthest_point_sampling(prev, size)
        encoders.append(local_geometry(prev, chosen, K=config.K, relative_ede=config.relative_ede))
        levels.append(prev[chosen])
    upsample = [interpolation_index(levels[l + 1], levels[l], config.interpolation_k) for l in range(len(encoders))]
    return BlockPlan(levels, encoders, upsample)


def upsample(coarse: Tensor, interp: Interpolation) -> Tensor:
    if interp.indices.shape[1] == 1:
        return ad.reshape(ad.gather(coarse, interp.indices[:, 0]), (len(interp.indices), coarse.shape[1]))
    picked = ad.gather(coarse, interp.indices)  # (n, k, C)
    w = Tensor(np.broadcast_to(interp.weights[:, :, None], picked.shape).copy())
    return ad.sum(ad.mul(picked, w), axis=1)


# --------------------------------------------------------------------------
# model


class Decoder(Module):
    def __init__(self, n_points, concat_width, out_width, config: NetworkConfig, rng):
        super().__init__()
        self.gra = GRA(
            n_points,
            concat_width,
            config.gra_mode,
            rng,
            reduction=config.gra_reduction,
            embed_width=config.gra_embed_width,
            relation_width=config.gra_relation_width,
            norm=config.batch_norm,
        )
        self.mlp = SharedMLP(concat_width, out_width, rng, config.batch_norm)

    def __call__(self, coarse: Tensor, skip: Tensor, interp: Interpolation) -> Tensor:
        x = ad.concat([upsample(coarse, interp), skip], axis=1)
        return self.mlp(self.gra(x))


class GraNetModel(Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        norm = config.batch_norm
        widths = [config.initial_lift_width, *config.encoder_widths]
        sizes = config.level_sizes
        self.lift = SharedMLP(config.input_width - 3, widths[0], rng, norm)
        self.encoders = []
        for l in range(1, len(widths)):
            enc = LoSDA(widths[l - 1], widths[l], rng, config.flags, norm)
            setattr(self, f"encoder{l}", enc)
            self.encoders.append(enc)
        self.decoders = []
        for i, l in enumerate(range(len(widths) - 2, -1, -1), start=1):
            dec = Decoder(sizes[l], widths[l + 1] + widths[l], widths[l], config, rng)
            setattr(self, f"decoder{i}", dec)
            self.decoders.append(dec)
        self.head = linear(widths[0], config.class_count, rng)

    def plan(self, block: np.ndarray) -> BlockPlan:
        return plan_block(np.asarray(block)[:, :3], self.config)

    def __call__(self, block: np.ndarray, plan: Optional[BlockPlan] = None, trace: Optional[list] = None) -> Tensor:
        block = np.asarray(block, dtype=np.float64)
        cfg = self.config
        if block.ndim != 2 or block.shape != (cfg.points_per_block, cfg.input_width):
            raise DimensionError(
                f"model expects a ({cfg.points_per_block}, {cfg.input_width}) block, got {block.shape}"
            )
        if plan is None:
            plan = self.plan(block)
        elif plan.level_sizes[0] != cfg.points_per_block:
            raise ContractError("block plan does not match the block size")
        feats = [self.lift(Tensor(block[:, 3:]))]
        for enc, geom in zip(self.encoders, plan.encoders):
            feats.append(enc(geom, feats[-1]))
        x = feats[-1]
        counts = [f.shape[0] for f in feats]
        for dec, l in zip(self.decoders, range(len(feats) - 2, -1, -1)):
            x = dec(x, feats[l], plan.upsample[l])
            counts.append(x.shape[0])
        if trace is not None:
            trace.extend(counts)
        return self.head(x)


def forward(model: GraNetModel, block: np.ndarray, plan: Optional[BlockPlan] = None) -> Tensor:
    return model(block, plan)


class ParamReport(NamedTuple):
    total: int
    by_module: dict


def param_count(model: Module) -> ParamReport:
    by_module = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0] if "." in name else name
        by_module[top] = by_module.get(top, 0) + int(p.size)
    return ParamReport(sum(by_module.values()), by_module)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"GRANETCK"
VERSION = 1


def save_checkpoint(model: GraNetModel, path, meta: Optional[dict] = None) -> None:
    """Config text, ``key=value`` metadata, then every parameter and buffer as little-endian float64."""
    body = io.BytesIO()
    text = model.config.to_text().encode("utf-8")
    note_b = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items())).encode("utf-8")
    body.write(struct.pack("<I", len(text)) + text)
    body.write(struct.pack("<I", len(note_b)) + note_b)
    state = model.state_dict()
    body.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        nb = name.encode("utf-8")
        body.write(struct.pack("<H", len(nb)) + nb)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.write(arr.tobytes())
    payload = body.getvalue()
    Path(path).write_bytes(MAGIC + struct.pack("<BQ", VERSION, len(payload)) + payload)


@dataclass
class Checkpoint:
    config: NetworkConfig
    state: dict
    meta: dict = field(default_factory=dict)
    model: Optional[GraNetModel] = field(default=None, repr=False)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint: {exc.strerror}", path=str(path)) from None
    head = len(MAGIC) + 9
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", path=str(path))
    version, size = struct.unpack_from("<BQ", raw, len(MAGIC))
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=str(path))
    if len(raw) - head != size:
        raise ParseError(f"checkpoint truncated: expected {size} payload bytes, found {len(raw) - head}", path=str(path))
    pos = head

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (n,) = take("<I")
        text = raw[pos : pos + n].decode("utf-8")
        pos += n
        (n,) = take("<I")
        note = raw[pos : pos + n].decode("utf-8")
        pos += n
        (count,) = take("<I")
        state = {}
        for _ in range(count):
            (n,) = take("<H")
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = take("<B")
            shape = take(f"<{ndim}Q")
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"corrupt checkpoint: {exc}", path=str(path)) from None
    meta = dict(line.split("=", 1) for line in note.splitlines() if "=" in line)
    return Checkpoint(NetworkConfig.from_text(text), state, meta)


def load_checkpoint(path) -> Checkpoint:
    ck = read_checkpoint(path)
    model = GraNetModel(ck.config)
    model.load_state_dict(ck.state)
    model.eval()
    ck.model = model
    return ck
