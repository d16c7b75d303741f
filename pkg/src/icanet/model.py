"""The ICANet graph: twin backbones, channel unification, hybrid cross-modal
fusion (SVP + SSP), multi-scale attention reinforcement and upper-fusion
prediction heads."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BAM, CBR, Conv2d, Module, Sequential
from .tensor import ShapeError, Tensor

STAGES = (2, 3, 4, 5)

# kernel -> dilation at stage 2; every deeper stage halves (floor, min 1)
_STAGE2_DILATION = {7: 4, 5: 3, 3: 2, 1: 1}
_BRANCH_KERNELS = ((1,), (3, 1), (5, 3, 1), (7, 5, 3, 1))


def default_svp_table() -> dict:
    table = {}
    for stage in STAGES:
        shift = stage - 2
        table[stage] = [
            [(k, max(1, _STAGE2_DILATION[k] >> shift)) for k in kernels] for kernels in _BRANCH_KERNELS
        ]
    return table


def default_ssp_table() -> dict:
    return {2: [2, 4, 8], 3: [2, 4], 4: [2], 5: []}


@dataclass
class ModelConfig:
    input_size: tuple = (64, 64)
    unified_channels: int = 16
    stem_width: int = 8
    stage_widths: tuple = (16, 24, 32, 40)
    svp_dilation_table: dict = field(default_factory=default_svp_table)
    ssp_ratio_table: dict = field(default_factory=default_ssp_table)
    bam_reduction: int = 4
    use_svp: bool = True
    use_ssp: bool = True
    use_msar: bool = True
    use_bam: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.stage_widths = tuple(self.stage_widths)
        self.svp_dilation_table = {
            int(s): [[tuple(kd) for kd in chain] for chain in chains]
            for s, chains in self.svp_dilation_table.items()
        }
        self.ssp_ratio_table = {int(s): [int(r) for r in rs] for s, rs in self.ssp_ratio_table.items()}
        self.validate()

    @classmethod
    def tiny(cls, size: int = 32, **overrides) -> "ModelConfig":
        """Gradient-check scale: 8 channels everywhere."""
        kw = dict(input_size=(size, size), unified_channels=8, stem_width=8, stage_widths=(8, 8, 8, 8))
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input_size {self.input_size} must be divisible by 32")
        if len(self.stage_widths) != 4:
            raise ValueError("stage_widths needs 4 entries (stages 2-5)")
        floor = 2 * self.bam_reduction
        if self.unified_channels < floor:
            raise ValueError(f"unified_channels must be >= {floor} (2x BAM reduction)")
        for stage in STAGES:
            if stage not in self.svp_dilation_table or not self.svp_dilation_table[stage]:
                raise ValueError(f"SVP dilation table missing stage {stage}")
            if stage not in self.ssp_ratio_table:
                raise ValueError(f"SSP ratio table missing stage {stage}")
            for chain in self.svp_dilation_table[stage]:
                for k, d in chain:
                    if k % 2 == 0 or d < 1:
                        raise ValueError(f"SVP stage {stage}: bad (kernel, dilation) = ({k}, {d})")
            for r in self.ssp_ratio_table[stage]:
                if (h >> stage) % r or (w >> stage) % r:
                    raise ValueError(
                        f"SSP ratio {r} does not divide stage-{stage} extent of input {self.input_size}"
                    )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["svp_dilation_table"] = {
            str(s): [[list(kd) for kd in chain] for chain in chains] for s, chains in self.svp_dilation_table.items()
        }
        d["ssp_ratio_table"] = {str(s): list(r) for s, r in self.ssp_ratio_table.items()}
        d["input_size"] = list(self.input_size)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageFeatures:
    r: list
    t: list
    f: list
    m: list
    o: list


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per named module, so toggling one module never
    shifts the initialization of another."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Backbone(Module):
    """Five stride-2 CBR stages; emits stages 2-5 (strides 4, 8, 16, 32)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, in_channels: int = 3):
        widths = (cfg.stem_width,) + cfg.stage_widths
        self.in_channels = in_channels
        self.stages = []
        cin = in_channels
        for w in widths:
            self.stages.append(CBR(cin, w, 3, rng, stride=2))
            cin = w

    def forward(self, image: Tensor) -> list:
        if image.ndim != 4 or image.shape[1] != self.in_channels:
            raise ShapeError(f"backbone expects (N, {self.in_channels}, H, W), got {image.shape}")
        outs = []
        x = image
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[1:]


class SVP(Module):
    """Serial atrous chains (large kernel/dilation down to 1x1), concatenated,
    reduced by a 1x1 CBR and added back to the input."""

    def __init__(self, channels: int, chains, rng: np.random.Generator):
        self.branches = [
            Sequential(*[CBR(channels, channels, k, rng, dilation=d) for k, d in chain]) for chain in chains
        ]
        self.reduce = CBR(channels * len(self.branches), channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = T.concat_channels([b(x) for b in self.branches])
        return x + self.reduce(y)


class SSP(Module):
    """Identity-scale branch plus one down-sample / CBR / up-sample branch per
    ratio; concatenated, fused by a 1x1 CBR and added back to the input."""

    def __init__(self, channels: int, ratios, rng: np.random.Generator):
        self.ratios = list(ratios)
        self.direct = CBR(channels, channels, 3, rng)
        self.down = [CBR(channels, channels, 3, rng) for _ in self.ratios]
        self.up = [CBR(channels, channels, 3, rng) for _ in self.ratios]
        self.fuse = CBR(channels * (1 + len(self.ratios)), channels, 1, rng)

    def branch(self, x: Tensor, i: int) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        low = self.down[i](T.avg_pool(x, self.ratios[i]))
        return self.up[i](T.interp_bilinear(low, h, w))

    def forward(self, x: Tensor) -> Tensor:
        parts = [self.direct(x)] + [self.branch(x, i) for i in range(len(self.ratios))]
        return x + self.fuse(T.concat_channels(parts))


class HFF(Module):
    """Cross-modal fusion: [SVP(r), SSP(t)] and [SVP(t), SSP(r)] are each
    concatenated and reduced, summed, then refined by a 3x3 CBR."""

    def __init__(self, cfg: ModelConfig, stage: int, rng: np.random.Generator):
        c = cfg.unified_channels
        self.use_svp, self.use_ssp = cfg.use_svp, cfg.use_ssp
        chains = cfg.svp_dilation_table[stage]
        ratios = cfg.ssp_ratio_table[stage]
        if self.use_svp:
            self.svp_rgb = SVP(c, chains, rng)
            self.svp_thermal = SVP(c, chains, rng)
        if self.use_ssp:
            self.ssp_rgb = SSP(c, ratios, rng)
            self.ssp_thermal = SSP(c, ratios, rng)
        self.mix_a = CBR(2 * c, c, 1, rng)
        self.mix_b = CBR(2 * c, c, 1, rng)
        self.out = CBR(c, c, 3, rng)

    def forward(self, r: Tensor, t: Tensor) -> Tensor:
        if r.shape != t.shape:
            raise ShapeError(f"HFF: modality shapes differ {r.shape} vs {t.shape}")
        vr = self.svp_rgb(r) if self.use_svp else r
        vt = self.svp_thermal(t) if self.use_svp else t
        sr = self.ssp_rgb(r) if self.use_ssp else r
        st = self.ssp_thermal(t) if self.use_ssp else t
        a = self.mix_a(T.concat_channels([vr, st]))
        b = self.mix_b(T.concat_channels([vt, sr]))
        return self.out(a + b)


class MSAR(Module):
    """Fuses the shallower (L) and deeper (H) neighbours into the middle stage
    M, reinforced by a BAM branch on M.  Absent neighbours are skipped."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, has_low: bool = True, has_high: bool = True):
        c = cfg.unified_channels
        self.low = CBR(c, c, 3, rng) if has_low else None
        self.high = CBR(c, c, 3, rng) if has_high else None
        self.mid = CBR(c, c, 3, rng)
        self.bam = BAM(c, rng, cfg.bam_reduction) if cfg.use_bam else None
        self.inner = CBR(c, c, 3, rng)
        self.outer = CBR(c, c, 3, rng)

    def forward(self, low: Optional[Tensor], mid: Tensor, high: Optional[Tensor]) -> Tensor:
        n, c, h, w = mid.shape
        s = self.mid(mid)
        if low is not None:
            if self.low is None:
                raise ShapeError("MSAR: this stage has no shallower input")
            if low.shape != (n, c, 2 * h, 2 * w):
                raise ShapeError(f"MSAR: low input {low.shape} is not 2x of middle {mid.shape}")
            s = s + self.low(T.avg_pool(low, 2))
        if high is not None:
            if self.high is None:
                raise ShapeError("MSAR: this stage has no deeper input")
            if 2 * high.shape[2] != h or 2 * high.shape[3] != w or high.shape[:2] != (n, c):
                raise ShapeError(f"MSAR: high input {high.shape} is not half of middle {mid.shape}")
            s = s + self.high(T.interp_bilinear(high, h, w))
        s = self.inner(s)
        if self.bam is not None:
            s = s + self.bam(mid)
        return self.outer(s)


class UF(Module):
    """Upsample the deeper map x2, add to the shallower one, CBR."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.cbr = CBR(channels, channels, 3, rng)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        h, w = low.shape[2], low.shape[3]
        if (2 * high.shape[2], 2 * high.shape[3]) != (h, w):
            raise ShapeError(f"UF: deeper map {high.shape} is not half of {low.shape}")
        return self.cbr(low + T.interp_bilinear(high, h, w))


class ICANet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        c = cfg.unified_channels
        rng = lambda name: module_rng(cfg.seed, name)  # noqa: E731
        self.backbone_rgb = Backbone(cfg, rng("backbone_rgb"))
        self.backbone_thermal = Backbone(cfg, rng("backbone_thermal"))
        self.unify_rgb = [CBR(w, c, 1, rng(f"unify_rgb{s}")) for s, w in zip(STAGES, cfg.stage_widths)]
        self.unify_thermal = [CBR(w, c, 1, rng(f"unify_thermal{s}")) for s, w in zip(STAGES, cfg.stage_widths)]
        self.hff = [HFF(cfg, s, rng(f"hff{s}")) for s in STAGES]
        if cfg.use_msar:
            self.msar = [MSAR(cfg, rng(f"msar{s}"), has_low=s > 2, has_high=s < 5) for s in STAGES]
        # uf[0] builds u4 from (m4, m5); uf[2] ends the chain at stage 2
        self.uf = [UF(c, rng(f"uf{s}")) for s in (4, 3, 2)]
        self.heads = [Conv2d(c, 1, 1, rng(f"head{s}")) for s in (2, 3, 4)]

    def forward(self, rgb: Tensor, thermal: Tensor):
        """Returns ``((o2, o3, o4), StageFeatures)``; outputs are logits."""
        if rgb.shape != thermal.shape:
            raise ShapeError(f"rgb {rgb.shape} and thermal {thermal.shape} differ")
        if tuple(rgb.shape[2:]) != self.cfg.input_size:
            raise ShapeError(f"input extent {rgb.shape[2:]} does not match config {self.cfg.input_size}")
        r = [u(x) for u, x in zip(self.unify_rgb, self.backbone_rgb(rgb))]
        t = [u(x) for u, x in zip(self.unify_thermal, self.backbone_thermal(thermal))]
        f = [h(ri, ti) for h, ri, ti in zip(self.hff, r, t)]
        if self.cfg.use_msar:
            m = [
                block(f[i - 1] if i > 0 else None, f[i], f[i + 1] if i < 3 else None)
                for i, block in enumerate(self.msar)
            ]
        else:
            m = list(f)
        u4 = self.uf[0](m[2], m[3])
        u3 = self.uf[1](m[1], u4)
        u2 = self.uf[2](m[0], u3)
        o = [head(u) for head, u in zip(self.heads, (u2, u3, u4))]
        return tuple(o), StageFeatures(r=r, t=t, f=f, m=m, o=o)

    def parameter_groups(self) -> dict:
        """Parameters grouped by block, e.g. ``hff3.svp_rgb`` or ``msar4.bam``."""
        groups: dict = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0] in ("hff", "msar") and len(parts) > 3 and parts[2] in (
                "svp_rgb", "svp_thermal", "ssp_rgb", "ssp_thermal", "bam",
            ):
                key = f"{parts[0]}{STAGES[int(parts[1])]}.{parts[2]}"
            elif parts[0] in ("hff", "msar"):
                key = f"{parts[0]}{STAGES[int(parts[1])]}"
            else:
                key = parts[0]
            groups.setdefault(key, []).append((name, p))
        return groups

    def backbone_parameter_names(self) -> set:
        return {n for n, _ in self.named_parameters() if n.startswith("backbone_")}
