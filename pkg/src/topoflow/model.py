"""End-to-end forecaster over gridded fields.

Pipeline per forward pass: patchify the (normalized) input stack, reorder
patch tokens sector-by-sector along the per-sample wind, embed and add
the positional vectors (per patch, so they ride along with the shuffle),
run L pre-norm transformer layers whose attention logits carry a shared
relative slot-offset table plus the terrain penalty (both permuted or
indexed so entries always refer to the right pair), decode with a
two-layer head that emits every horizon at once, and finally undo the
permutation so predictions land on their original patches.

Because the positional vectors follow their patches and the relative
table starts at zero, freshly initialized networks compute the exact same
function with the shuffle on or off; what the reordering changes is what
the relative table MEANS (attend-k-slots-back is "k ranks upwind" instead
of "k raster positions back"), which is the entire mechanism. The two
physics toggles gate exactly one term each over one shared code path, so
the baseline configuration is literally the same network minus the two
mechanisms.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import reorder, topo_bias
from .attention import AttentionParams, attend, _attend_parts
from .errors import ConfigError, NumericError, ShapeError
from .fields import GridSpec
from .synthdata import INPUT_CHANNELS

# variance of a unit normal truncated to +-2 sigma is 0.773729...; scale
# draws up so the post-truncation variance hits the 1/fan_in target
_TRUNC_VAR = 1.0 - 4.0 * 0.05399096651318806 / 0.9544997361036416
_TRUNC_CORRECTION = 1.0 / math.sqrt(_TRUNC_VAR)

PARAM_GROUPS = ("patch_embed", "pos_embed", "backbone", "head", "alpha")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the two physics toggles (the ablation axes)."""

    spec: GridSpec
    d: int = 64                 # embedding width
    layers: int = 2             # transformer depth L
    heads: int = 4
    mlp_hidden: int = 256
    head_hidden: int = 256
    dropout: float = 0.1
    channels: tuple[str, ...] = INPUT_CHANNELS
    v_out: int = 1
    n_horizons: int = 4
    wind_reorder: bool = True
    elev_bias: bool = True
    wind_channels: tuple[str, str] = ("u", "v")
    wind_mean: str = "weighted"
    bias_combine: str = "identity"

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.layers < 0 or self.v_out < 1 or self.n_horizons < 1:
            raise ConfigError("layers must be >= 0; v_out and n_horizons >= 1")
        for wc in self.wind_channels:
            if wc not in self.channels:
                raise ConfigError(f"wind channel {wc!r} missing from {self.channels}")

    @property
    def v_in(self) -> int:
        return len(self.channels)

    @property
    def token_dim(self) -> int:
        return self.v_in * self.spec.patch**2

    @property
    def out_dim(self) -> int:
        return self.n_horizons * self.v_out * self.spec.patch**2


def config_to_kv(config: ModelConfig) -> dict[str, str]:
    """Flat key=value form of a model config (checkpoint sidecars, echoes)."""
    s = config.spec
    kv = {
        "model.grid": f"{s.height},{s.width},{s.patch},{s.sector_cols},{s.sector_rows}",
        "model.d": str(config.d),
        "model.layers": str(config.layers),
        "model.heads": str(config.heads),
        "model.mlp_hidden": str(config.mlp_hidden),
        "model.head_hidden": str(config.head_hidden),
        "model.dropout": repr(config.dropout),
        "model.channels": ",".join(config.channels),
        "model.v_out": str(config.v_out),
        "model.n_horizons": str(config.n_horizons),
        "model.wind_reorder": str(config.wind_reorder).lower(),
        "model.elev_bias": str(config.elev_bias).lower(),
        "model.wind_channels": ",".join(config.wind_channels),
        "model.wind_mean": config.wind_mean,
        "model.bias_combine": config.bias_combine,
    }
    return kv


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    grid = tuple(int(x) for x in kv["model.grid"].split(","))
    return ModelConfig(
        spec=GridSpec(*grid),
        d=int(kv["model.d"]),
        layers=int(kv["model.layers"]),
        heads=int(kv["model.heads"]),
        mlp_hidden=int(kv["model.mlp_hidden"]),
        head_hidden=int(kv["model.head_hidden"]),
        dropout=float(kv["model.dropout"]),
        channels=tuple(kv["model.channels"].split(",")),
        v_out=int(kv["model.v_out"]),
        n_horizons=int(kv["model.n_horizons"]),
        wind_reorder=kv["model.wind_reorder"] == "true",
        elev_bias=kv["model.elev_bias"] == "true",
        wind_channels=tuple(kv["model.wind_channels"].split(",")),
        wind_mean=kv["model.wind_mean"],
        bias_combine=kv["model.bias_combine"],
    )


@dataclass
class ParamStore:
    """Named tensors plus the learning-rate group each belongs to."""

    params: dict[str, ad.Tensor]
    groups: dict[str, str]

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def tensors(self) -> list[ad.Tensor]:
        return [self.params[k] for k in self.names()]

    def group_of(self, name: str) -> str:
        return self.groups[name]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws redrawn until inside +-2 std (deterministic per rng)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _slot_coordinates(spec: GridSpec) -> np.ndarray:
    """Normalized (x, y) center of each sequence slot's raster patch."""
    rows, cols = np.divmod(np.arange(spec.n_patches), spec.patches_x)
    x = (cols + 0.5) / spec.patches_x
    y = (rows + 0.5) / spec.patches_y
    return np.stack([x, y], axis=1)


@functools.lru_cache(maxsize=8)
def _relative_slot_index(spec: GridSpec) -> np.ndarray:
    """(N, N) lookup into the relative slot-offset table.

    Entry (i, j) is the within-sector slot-rank difference shifted to
    0..2M-2; pairs in different sectors share the final bucket 2M-1. Under
    wind reordering, slot rank is position along the wind, so the table
    can express "attend upwind neighbors" as one shared pattern.
    """
    layout = reorder._sector_layout(spec)
    n, m = spec.n_patches, spec.patches_per_sector
    ranks = np.empty(n, dtype=np.int64)
    sector_of = np.empty(n, dtype=np.int64)
    for s in range(spec.n_sectors):
        ranks[layout[s]] = np.arange(m)
        sector_of[layout[s]] = s
    idx = ranks[:, None] - ranks[None, :] + (m - 1)
    idx[sector_of[:, None] != sector_of[None, :]] = 2 * m - 1
    return idx


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fresh parameters: truncated-normal weights at variance 1/fan_in,
    zero biases, unit norm gains, positional grid at slot coordinates,
    bias scale alpha at its documented starting value."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    params: dict[str, ad.Tensor] = {}
    groups: dict[str, str] = {}

    def add(name, group, value):
        params[name] = ad.parameter(np.asarray(value, dtype=dtype))
        groups[name] = group

    def weight(name, group, fan_in, fan_out):
        std = _TRUNC_CORRECTION / math.sqrt(fan_in)
        add(name, group, _trunc_normal(rng, (fan_in, fan_out), std))

    weight("patch_embed.w", "patch_embed", config.token_dim, config.d)
    add("patch_embed.b", "patch_embed", np.zeros(config.d))
    add("pos.grid", "pos_embed", _slot_coordinates(config.spec))
    weight("pos.proj", "pos_embed", 2, config.d)
    # relative slot-offset logit table; zero start means no contribution
    # until training shapes it
    add("pos.rel", "pos_embed", np.zeros(2 * config.spec.patches_per_sector))
    for i in range(config.layers):
        pre = f"layer{i}"
        add(f"{pre}.ln1.g", "backbone", np.ones(config.d))
        add(f"{pre}.ln1.b", "backbone", np.zeros(config.d))
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"{pre}.attn.{w}", "backbone", config.d, config.d)
        add(f"{pre}.ln2.g", "backbone", np.ones(config.d))
        add(f"{pre}.ln2.b", "backbone", np.zeros(config.d))
        weight(f"{pre}.mlp.w1", "backbone", config.d, config.mlp_hidden)
        add(f"{pre}.mlp.b1", "backbone", np.zeros(config.mlp_hidden))
        weight(f"{pre}.mlp.w2", "backbone", config.mlp_hidden, config.d)
        add(f"{pre}.mlp.b2", "backbone", np.zeros(config.d))
    add("head.ln.g", "head", np.ones(config.d))
    add("head.ln.b", "head", np.zeros(config.d))
    weight("head.w1", "head", config.d, config.head_hidden)
    add("head.b1", "head", np.zeros(config.head_hidden))
    weight("head.w2", "head", config.head_hidden, config.out_dim)
    add("head.b2", "head", np.zeros(config.out_dim))
    add("alpha", "alpha", np.array(topo_bias.ALPHA_INIT))
    return ParamStore(params, groups)


# ---------------------------------------------------------------------------
# patch <-> token rearrangement
# ---------------------------------------------------------------------------

def patchify(data: np.ndarray, spec: GridSpec) -> np.ndarray:
    """(..., C, H, W) -> (..., N, C*p*p); lossless, channel-major tokens."""
    arr = np.asarray(data)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-2:] != (spec.height, spec.width):
        raise ShapeError(f"cannot patchify shape {np.asarray(data).shape} on {spec}")
    b, c, _, _ = arr.shape
    p = spec.patch
    x = arr.reshape(b, c, spec.patches_y, p, spec.patches_x, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    tokens = x.reshape(b, spec.n_patches, c * p * p)
    return tokens if batched else tokens[0]


def unpatchify(tokens: np.ndarray, spec: GridSpec, n_channels: int) -> np.ndarray:
    """Exact inverse of :func:`patchify` for a known channel count."""
    arr = np.asarray(tokens)
    batched = arr.ndim == 3
    if not batched:
        arr = arr[None]
    p = spec.patch
    if arr.ndim != 3 or arr.shape[-2:] != (spec.n_patches, n_channels * p * p):
        raise ShapeError(f"cannot unpatchify shape {np.asarray(tokens).shape} on {spec}")
    b = arr.shape[0]
    x = arr.reshape(b, spec.patches_y, spec.patches_x, n_channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    grid = x.reshape(b, n_channels, spec.height, spec.width)
    return grid if batched else grid[0]


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    """Predictions in slot order plus what is needed to undo the shuffle."""

    tokens: ad.Tensor                          # (B, N, out_dim), slot order
    perms: list[reorder.SectorPermutation]     # one per sample
    config: ModelConfig
    attention: list[np.ndarray] = dc_field(default_factory=list)

    def to_grid(self) -> np.ndarray:
        """(B, n_horizons*v_out, H, W), inverse-permuted to raster order."""
        pred = self.tokens.data
        out = np.empty_like(pred)
        for b, perm in enumerate(self.perms):
            out[b] = reorder.unapply(perm, pred[b])
        return unpatchify(out, self.config.spec, self.config.n_horizons * self.config.v_out)


def _layer_attention_params(params: ParamStore, i: int, heads: int) -> AttentionParams:
    return AttentionParams(
        params[f"layer{i}.attn.wq"],
        params[f"layer{i}.attn.wk"],
        params[f"layer{i}.attn.wv"],
        params[f"layer{i}.attn.wo"],
        heads,
    )


def build_perms(
    config: ModelConfig, u: np.ndarray, v: np.ndarray
) -> list[reorder.SectorPermutation]:
    """Per-sample wind permutations from (B, H, W) wind components.

    Pass winds in physical units: z-scoring with anisotropic statistics
    (which terrain-steered winds have) distorts directions, and the whole
    point of the ordering is to track the real wind.
    """
    return [
        reorder.build_permutation(config.spec, ub, vb, wind_mean=config.wind_mean)
        for ub, vb in zip(u, v)
    ]


def perms_from_inputs(config: ModelConfig, inputs: np.ndarray):
    iu = config.channels.index(config.wind_channels[0])
    iv = config.channels.index(config.wind_channels[1])
    return build_perms(config, inputs[:, iu], inputs[:, iv])


def forward(
    params: ParamStore,
    config: ModelConfig,
    inputs: np.ndarray,
    elev_patch_m: np.ndarray | None = None,
    perms: list[reorder.SectorPermutation] | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    collect_attention: bool = False,
) -> ForwardResult:
    """Run the forecaster on a (B, C, H, W) normalized input stack.

    `elev_patch_m` is the per-patch mean elevation in meters (required when
    the elevation bias is enabled). Callers that normalize their inputs
    should pass `perms` built from the physical winds; without them the
    permutations are derived from the wind channels as given here.
    """
    arr = np.asarray(inputs)
    if arr.ndim == 3:
        arr = arr[None]
    spec = config.spec
    if arr.shape[1:] != (config.v_in, spec.height, spec.width):
        raise ShapeError(
            f"input shape {arr.shape}, expected (B, {config.v_in}, {spec.height}, {spec.width})"
        )
    if train and config.dropout > 0.0 and rng is None:
        raise ConfigError("training forward with dropout needs an rng")
    dtype = params["patch_embed.w"].dtype
    n = spec.n_patches

    if config.wind_reorder:
        if perms is None:
            perms = perms_from_inputs(config, arr)
    else:
        perms = [reorder.SectorPermutation.identity(spec)] * arr.shape[0]

    tokens_np = patchify(arr, spec).astype(dtype)
    if config.wind_reorder:
        tokens_np = np.stack(
            [tokens_np[b][perms[b].forward] for b in range(arr.shape[0])]
        )

    # relative positional logits live in slot space and are shared by every
    # layer; the terrain penalty (when enabled) rides on the same additive
    # bias input, permuted so entry (i, j) keeps naming the same patch pair
    bias = ad.take(params["pos.rel"], _relative_slot_index(spec))
    if config.elev_bias:
        if elev_patch_m is None:
            raise ConfigError("elev_bias enabled but no patch elevations supplied")
        uphill = topo_bias.uphill_matrix(elev_patch_m)
        stacked = np.stack(
            [uphill[np.ix_(p.forward, p.forward)] for p in perms]
        ).astype(dtype)
        elev = topo_bias.bias_tensor(stacked, params["alpha"], combine=config.bias_combine)
        bias = bias + elev.reshape(arr.shape[0], 1, n, n)  # broadcast over heads

    def drop(t):
        return ad.dropout(t, config.dropout, rng) if train else t

    x = ad.as_tensor(tokens_np) @ params["patch_embed.w"] + params["patch_embed.b"]
    # positional vectors are per patch and travel with it through the
    # shuffle; sequence structure is carried by the relative slot table
    pos = params["pos.grid"] @ params["pos.proj"]
    if config.wind_reorder:
        pos = ad.take(pos, np.stack([p.forward for p in perms]))
    x = drop(x + pos)

    attn_maps: list[np.ndarray] = []
    for i in range(config.layers):
        normed = ad.layer_norm(x, params[f"layer{i}.ln1.g"], params[f"layer{i}.ln1.b"])
        if collect_attention:
            attended, w = _attend_parts(
                normed, _layer_attention_params(params, i, config.heads), bias=bias
            )
            attn_maps.append(w.data.mean(axis=-3))
        else:
            attended = attend(
                normed, _layer_attention_params(params, i, config.heads), bias=bias
            )
        x = x + drop(attended)
        normed = ad.layer_norm(x, params[f"layer{i}.ln2.g"], params[f"layer{i}.ln2.b"])
        hidden = drop(ad.gelu(normed @ params[f"layer{i}.mlp.w1"] + params[f"layer{i}.mlp.b1"]))
        x = x + hidden @ params[f"layer{i}.mlp.w2"] + params[f"layer{i}.mlp.b2"]
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after layer {i}")

    x = ad.layer_norm(x, params["head.ln.g"], params["head.ln.b"])
    hidden = ad.gelu(x @ params["head.w1"] + params["head.b1"])
    out = hidden @ params["head.w2"] + params["head.b2"]
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite activations in the prediction head")
    return ForwardResult(out, list(perms), config, attn_maps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path,
    store: ParamStore,
    config: ModelConfig,
    moments: tuple[dict, dict] | None = None,
    extras: dict[str, str] | None = None,
) -> None:
    """One .gfd container (one channel per tensor, unit tag = group) plus a
    text sidecar carrying shapes, the model config echo, and run state."""
    from .fields import Field, write_grid  # local to avoid import cycle at module load

    names = store.names()
    tensors: list[tuple[str, str, np.ndarray]] = [
        (f"param/{k}", store.group_of(k), store[k].data) for k in names
    ]
    if moments is not None:
        m1, m2 = moments
        tensors += [(f"adam_m/{k}", store.group_of(k), m1[k]) for k in names]
        tensors += [(f"adam_v/{k}", store.group_of(k), m2[k]) for k in names]
    width = max(int(np.prod(t.shape)) if t.ndim else 1 for _, _, t in tensors)
    data = np.zeros((len(tensors), 1, width), dtype=np.float32)
    for i, (_, _, t) in enumerate(tensors):
        flat = np.asarray(t, dtype=np.float32).reshape(-1)
        data[i, 0, : flat.size] = flat
    container = Field(
        GridSpec(1, width, 1, 1, 1),
        tuple(name for name, _, _ in tensors),
        data,
        tuple(group for _, group, _ in tensors),
    )
    write_grid(container, path)
    lines = ["format topoflow-checkpoint v1\n"]
    for k in names:
        shape = ",".join(str(s) for s in store[k].data.shape) or "scalar"
        lines.append(f"tensor {k} {shape} {store.group_of(k)}\n")
    for key, value in sorted(config_to_kv(config).items()):
        lines.append(f"{key} = {value}\n")
    for key, value in sorted((extras or {}).items()):
        lines.append(f"state.{key} = {value}\n")
    with open(str(path) + ".txt", "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_checkpoint(path, dtype=np.float32):
    """Returns (ParamStore, ModelConfig, moments | None, extras dict)."""
    from .fields import read_grid

    container = read_grid(path)
    shapes: dict[str, tuple[int, ...]] = {}
    kv: dict[str, str] = {}
    extras: dict[str, str] = {}
    with open(str(path) + ".txt", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("tensor "):
                _, name, shape_s, _group = line.split()
                shapes[name] = () if shape_s == "scalar" else tuple(
                    int(x) for x in shape_s.split(",")
                )
            elif " = " in line:
                key, value = line.rstrip("\n").split(" = ", 1)
                if key.startswith("state."):
                    extras[key[len("state."):]] = value
                else:
                    kv[key] = value
    config = config_from_kv(kv)
    params: dict[str, ad.Tensor] = {}
    groups: dict[str, str] = {}
    m1: dict[str, np.ndarray] = {}
    m2: dict[str, np.ndarray] = {}

    def unflatten(row: np.ndarray, shape) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        return row[:size].reshape(shape).astype(dtype)

    for i, name in enumerate(container.channels):
        kind, bare = name.split("/", 1)
        row = container.data[i, 0]
        if kind == "param":
            params[bare] = ad.parameter(unflatten(row, shapes[bare]))
            groups[bare] = container.units[i]
        elif kind == "adam_m":
            m1[bare] = unflatten(row, shapes[bare])
        elif kind == "adam_v":
            m2[bare] = unflatten(row, shapes[bare])
    store = ParamStore(params, groups)
    moments = (m1, m2) if m1 else None
    return store, config, moments, extras
