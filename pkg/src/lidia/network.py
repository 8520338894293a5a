"""The LIDIA filtering network and the full denoising pipeline.

Per seed pixel the network sees two patch groups (scale 1 and scale 2), each
column-weighted by a small fully connected "weight net", filtered by a stack of
separable linear blocks with an aggregation (AGG) detour, fused across the four
feature origins and mapped to a residual.  Denoised patches are recombined
with variance-dependent weights ``exp(-beta * var(z_hat))``.

A batch of equally sized images is handled by laying all of them out in one
flat canvas: gather maps and neighbour indices are offset per image, so every
per-location operation is batched and batch norm pools over the whole batch.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .image_io import as_plane, psnr
from .patches import (
    PatchConfig,
    PatchConfigError,
    apply_taps,
    apply_taps_adjoint,
    knn_all,
    lowpass,
    lowpass_taps,
    patch_index,
    scatter_add,
    second_scale_knn,
)
from .rng import Xoshiro256pp

VARIANTS = ("LIDIA", "LIDIA-S")
WEIGHT_NET_DEPTH = 7
INFER_CHUNK = 4096


@dataclass(frozen=True)
class ArchDescriptor:
    variant: str = "LIDIA"
    color: bool = False
    patch_side: int | None = None  # 7 gray, 5 colour
    k: int = 14
    feature_dim: int | None = None  # 64 gray, 80 colour
    window: int = 37
    share_weight_net: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.patch_side is None:
            object.__setattr__(self, "patch_side", 5 if self.color else 7)
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", 80 if self.color else 64)
        if self.k < 2:
            raise ValueError("k must be at least 2")
        self.patch_config  # validates patch_side / window

    @property
    def channels(self) -> int:
        return 3 if self.color else 1

    @property
    def n(self) -> int:
        return self.patch_side**2 * self.channels

    @property
    def fused_cols(self) -> int:
        return 4 * self.k

    @property
    def small(self) -> bool:
        return self.variant == "LIDIA-S"

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(patch_side=self.patch_side, channels=self.channels, k=self.k, window=self.window)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- layer tables


def sl_layers(desc: ArchDescriptor) -> dict[str, tuple[tuple, tuple, bool]]:
    """SL layer name -> ((out_rows, in_rows), (in_cols, out_cols), has_batchnorm)."""
    n, f, k, K = desc.n, desc.feature_dim, desc.k, desc.fused_cols
    table = {}
    for s in (1, 2):
        table[f"s{s}.tr0"] = ((f, n), (k, k), False)
        if not desc.small:
            table[f"s{s}.tbr1"] = ((f, f), (k, k), True)
        table[f"s{s}.tpre"] = ((n, f), (k, 1), False)
        table[f"s{s}.trpost"] = ((f, n), (1, k), False)
    table["fuse.tbr2"] = ((f, f), (K, K), True)
    if not desc.small:
        table["fuse.tbr3"] = ((f, f), (K, K), True)
    table["fuse.t4"] = ((n, f), (K, 1), False)
    return table


def weight_net_names(desc: ArchDescriptor) -> list[str]:
    return ["wnet1"] if desc.share_weight_net else ["wnet1", "wnet2"]


def param_shapes(desc: ArchDescriptor) -> dict[str, tuple]:
    """Every learnable tensor, in serialisation order."""
    shapes = {}
    k = desc.k
    for w in weight_net_names(desc):
        for i in range(WEIGHT_NET_DEPTH):
            shapes[f"{w}.fc{i}.W"] = (k, k)
            shapes[f"{w}.fc{i}.b"] = (k,)
            if i < WEIGHT_NET_DEPTH - 1:
                shapes[f"{w}.bn{i}.gamma"] = (k,)
                shapes[f"{w}.bn{i}.beta"] = (k,)
    for name, (w1, w2, bn) in sl_layers(desc).items():
        shapes[f"{name}.W1"] = w1
        shapes[f"{name}.W2"] = w2
        shapes[f"{name}.B"] = (w1[0], w2[1])
        if bn:
            shapes[f"{name}.bn.gamma"] = (w1[0],)
            shapes[f"{name}.bn.beta"] = (w1[0],)
    shapes["beta"] = (1,)
    return shapes


def buffer_shapes(desc: ArchDescriptor) -> dict[str, tuple]:
    """Batch-norm running statistics (state, not parameters)."""
    out = {}
    for name, shape in param_shapes(desc).items():
        if name.endswith(".gamma"):
            stem = name[: -len(".gamma")]
            out[f"{stem}.running_mean"] = shape
            out[f"{stem}.running_var"] = shape
    return out


def count_params(desc: ArchDescriptor) -> int:
    return int(sum(np.prod(s) for s in param_shapes(desc).values()))


# ----------------------------------------------------------------- geometry


@dataclass
class Geometry:
    """Everything derived from the noisy input before filtering: patch maps, groups, filters."""

    shape: tuple  # (B, H, W, C)
    noisy: np.ndarray  # flat canvas
    filtered: np.ndarray  # flat canvas of f_LP * noisy
    idx1: np.ndarray  # (L, n) gather map, scale 1
    idx2: np.ndarray  # (L, n) gather map, scale 2 (phase planes)
    nbr1: np.ndarray  # (L, k) global location indices
    nbr2: np.ndarray
    dist1: np.ndarray  # (L, k)
    dist2: np.ndarray
    cnt1: np.ndarray  # coverage counts of unit-weight aggregation
    cnt2: np.ndarray
    taps2: list  # per-phase f_LP for AGG at scale 2

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def locations(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]


def build_geometry(images, desc: ArchDescriptor, *, threads: int = 1) -> Geometry:
    """Group patches at both scales for a batch of equally sized noisy images."""
    if isinstance(images, np.ndarray) and images.ndim in (2, 3):
        images = [images]
    planes = [as_plane(im) for im in images]
    H, W, C = planes[0].shape
    if any(p.shape != (H, W, C) for p in planes):
        raise ValueError("all images in a batch must share one shape")
    if C != desc.channels:
        raise PatchConfigError(f"model expects {desc.channels} channel(s), image has {C}")
    cfg = desc.patch_config
    if min(H, W) < 2 * cfg.patch_side:
        raise PatchConfigError(f"image {H}x{W} is smaller than twice the patch side {cfg.patch_side}")
    B, L1, S1 = len(planes), H * W, H * W * C
    base1 = patch_index(H, W, C, cfg.patch_side)
    base2 = patch_index(H, W, C, cfg.patch_side, stride=2)
    taps = lowpass_taps(H, W, C, per_phase=True)
    noisy, filtered, idx1, idx2, nbr1, nbr2, d1, d2 = ([] for _ in range(8))
    for b, p in enumerate(planes):
        f = lowpass(p)
        noisy.append(p.reshape(-1))
        filtered.append(f.reshape(-1))
        idx1.append(base1 + b * S1)
        idx2.append(base2 + b * S1)
        n1, dd1 = knn_all(p, cfg, threads=threads)
        n2, dd2 = second_scale_knn(f, cfg, threads=threads)
        nbr1.append(n1 + b * L1)
        nbr2.append(n2 + b * L1)
        d1.append(dd1)
        d2.append(dd2)
    idx1, idx2 = np.concatenate(idx1), np.concatenate(idx2)
    size = B * S1
    taps2 = [(c, np.concatenate([t + b * S1 for b in range(B)])) for c, t in taps]
    return Geometry(
        shape=(B, H, W, C),
        noisy=np.concatenate(noisy),
        filtered=np.concatenate(filtered),
        idx1=idx1,
        idx2=idx2,
        nbr1=np.concatenate(nbr1),
        nbr2=np.concatenate(nbr2),
        dist1=np.concatenate(d1),
        dist2=np.concatenate(d2),
        cnt1=scatter_add(idx1, np.ones(idx1.shape), size),
        cnt2=scatter_add(idx2, np.ones(idx2.shape), size),
        taps2=taps2,
    )


def gather_groups(canvas, idx, nbr, rows=slice(None)) -> np.ndarray:
    """Z matrices ``(L, n, k)``: column j of location l is the patch of location nbr[l, j]."""
    return np.swapaxes(canvas[idx[nbr[rows]]], 1, 2)


def apply_column_weights(Z, w):
    """Z diag(w): scale column j of each group by w[j]."""
    return Z * w[..., None, :]


# ------------------------------------------------------------------ network


@dataclass
class DenoiseResult:
    image: np.ndarray
    patches: np.ndarray | None = None  # (H*W, n) denoised patches z_hat
    weights: np.ndarray | None = None  # (H*W,) aggregation weights
    psnr: float | None = None


class WeightNet:
    """FC -> (BN -> ReLU -> FC) x 6 on the k-vector [var(z), d_1, ..., d_{k-1}]."""

    def __init__(self, model: "LidiaNet", prefix: str):
        P, Bf = model.params, model.buffers
        self.fc = [nn.FullyConnected(P[f"{prefix}.fc{i}.W"], P[f"{prefix}.fc{i}.b"]) for i in range(WEIGHT_NET_DEPTH)]
        self.bn = [
            nn.BatchNorm(
                P[f"{prefix}.bn{i}.gamma"],
                P[f"{prefix}.bn{i}.beta"],
                Bf[f"{prefix}.bn{i}.running_mean"],
                Bf[f"{prefix}.bn{i}.running_var"],
            )
            for i in range(WEIGHT_NET_DEPTH - 1)
        ]
        self._pre = []

    def forward(self, d, training: bool, cache: bool = True, update: bool = True):
        x = self.fc[0].forward(d, cache)
        pre = []
        for bn, fc in zip(self.bn, self.fc[1:]):
            a = bn.forward(x, training, cache, update)
            pre.append(a)
            x = fc.forward(nn.relu(a), cache)
        if cache:
            self._pre = pre
        return x

    def backward(self, dy):
        for i in range(WEIGHT_NET_DEPTH - 2, -1, -1):
            dy = self.fc[i + 1].backward(dy)
            dy = self.bn[i].backward(nn.relu_backward(dy, self._pre[i]))
        self.fc[0].backward(dy)


def _sl(model, name):
    P = model.params
    return nn.SeparableLinear(P[f"{name}.W1"], P[f"{name}.W2"], P[f"{name}.B"])


def _bn(model, name):
    P, Bf = model.params, model.buffers
    return nn.BatchNorm(P[f"{name}.bn.gamma"], P[f"{name}.bn.beta"], Bf[f"{name}.bn.running_mean"], Bf[f"{name}.bn.running_var"])


class Branch:
    """Per-scale stack: TR0 -> [TBR1] -> T_pre -> AGG -> TR_post."""

    def __init__(self, model: "LidiaNet", scale: int):
        s = f"s{scale}"
        self.scale = scale
        self.tr0 = _sl(model, f"{s}.tr0")
        self.small = model.desc.small
        if not self.small:
            self.tbr1, self.bn1 = _sl(model, f"{s}.tbr1"), _bn(model, f"{s}.tbr1")
        self.tpre = _sl(model, f"{s}.tpre")
        self.trpost = _sl(model, f"{s}.trpost")

    def direct(self, Zw, training, cache=True, update=True):
        """F1: features that bypass the aggregation."""
        a0 = self.tr0.forward(Zw, cache)
        f0 = nn.relu(a0)
        if self.small:
            f1, a1 = f0, None
        else:
            a1 = self.bn1.forward(self.tbr1.forward(f0, cache), training, cache, update)
            f1 = nn.relu(a1)
        if cache:
            self._a0, self._a1 = a0, a1
        return f1

    def pre(self, f1, cache=True):
        return self.tpre.forward(f1, cache)[..., 0]

    def post(self, ptilde, cache=True):
        a = self.trpost.forward(ptilde[..., None], cache)
        if cache:
            self._apost = a
        return nn.relu(a)

    def backward_post(self, dfa):
        return self.trpost.backward(nn.relu_backward(dfa, self._apost))[..., 0]

    def backward_direct(self, df1, dp):
        df1 = df1 + self.tpre.backward(dp[..., None])
        if not self.small:
            df1 = self.tbr1.backward(self.bn1.backward(nn.relu_backward(df1, self._a1)))
        return self.tr0.backward(nn.relu_backward(df1, self._a0))


class LidiaNet:
    def __init__(self, desc: ArchDescriptor, params: dict, buffers: dict):
        self.desc = desc
        self.params = {k: v if isinstance(v, nn.Tensor) else nn.Tensor(v) for k, v in params.items()}
        self.buffers = buffers
        expected = param_shapes(desc)
        if list(self.params) != list(expected) or any(self.params[k].shape != s for k, s in expected.items()):
            raise ValueError("parameter set does not match the architecture descriptor")
        self._build()

    def _build(self):
        nets = weight_net_names(self.desc)
        self.wnets = [WeightNet(self, nets[0]), WeightNet(self, nets[-1])]
        self.branches = [Branch(self, 1), Branch(self, 2)]
        self.tbr2, self.bn2 = _sl(self, "fuse.tbr2"), _bn(self, "fuse.tbr2")
        if not self.desc.small:
            self.tbr3, self.bn3 = _sl(self, "fuse.tbr3"), _bn(self, "fuse.tbr3")
        self.t4 = _sl(self, "fuse.t4")

    # ------------------------------------------------------------ utilities

    @property
    def dtype(self):
        return self.params["beta"].data.dtype

    @property
    def beta(self) -> float:
        return float(self.params["beta"].data[0])

    def astype(self, dtype) -> "LidiaNet":
        return LidiaNet(
            self.desc,
            {k: v.data.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "LidiaNet":
        return LidiaNet(self.desc, {k: v.data.copy() for k, v in self.params.items()}, copy.deepcopy(self.buffers))

    def param_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def set_params(self, arrays: dict) -> None:
        for k, v in arrays.items():
            self.params[k].data[...] = v

    def activation_signature(self) -> bytes:
        """Sign pattern of every cached ReLU input from the last :meth:`forward`."""
        pre = []
        for wn in self.wnets:
            pre += wn._pre
        for b in self.branches:
            pre += [b._a0, b._a1, b._apost]
        pre += list(self._cache["fcache"])
        return b"".join(np.packbits(a > 0).tobytes() for a in pre if a is not None)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def grads(self) -> dict:
        return {k: v.grad for k, v in self.params.items()}

    # -------------------------------------------------------- full forward

    def forward(self, geom: Geometry, *, training: bool = False, update_stats: bool = True) -> np.ndarray:
        """Denoised flat canvas for the whole batch; caches everything for :meth:`backward`.

        ``training`` selects batch statistics in batch norm.  This path holds
        all locations at once and doubles as the reference for :meth:`denoise`.
        """
        dt = self.dtype
        noisy, filt = geom.noisy.astype(dt), geom.filtered.astype(dt)
        size = geom.size
        tr, up = training, update_stats
        Z1 = gather_groups(noisy, geom.idx1, geom.nbr1)
        Z2 = gather_groups(filt, geom.idx2, geom.nbr2)
        w1 = self.wnets[0].forward(geom.dist1.astype(dt), tr, True, up)
        w2 = self.wnets[1].forward(geom.dist2.astype(dt), tr, True, up)
        b1, b2 = self.branches
        f1 = b1.direct(apply_column_weights(Z1, w1), tr, True, up)
        f1b = b2.direct(apply_column_weights(Z2, w2), tr, True, up)
        p1, p2 = b1.pre(f1), b2.pre(f1b)
        tmp1 = (scatter_add(geom.idx1, p1, size) / geom.cnt1).astype(dt)
        tmp2 = (scatter_add(geom.idx2, p2, size) / geom.cnt2).astype(dt)
        tmp2f = apply_taps(tmp2, geom.taps2)
        fa = b1.post(tmp1[geom.idx1])
        fab = b2.post(tmp2f[geom.idx2])
        r, fcache = self._fuse(f1, fa, f1b, fab, tr, True, up)
        z = Z1[:, :, 0]
        zhat = z - r
        out, wts, v = _weighted_aggregate(zhat, self.params["beta"].data[0], geom.idx1, size)
        self._cache = dict(Z1=Z1, Z2=Z2, w1=w1, w2=w2, zhat=zhat, w=wts, v=v, out=out, fcache=fcache, geom=geom)
        return out.astype(dt)

    def _fuse(self, f1, fa, f1b, fab, training, cache=True, update=True):
        X = np.concatenate([f1, fa, f1b, fab], axis=2)
        a2 = self.bn2.forward(self.tbr2.forward(X, cache), training, cache, update)
        g = nn.relu(a2)
        a3 = None
        if not self.desc.small:
            a3 = self.bn3.forward(self.tbr3.forward(g, cache), training, cache, update)
            g = nn.relu(a3)
        r = self.t4.forward(g, cache)[..., 0]
        return r, (a2, a3)

    def backward(self, dout: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream gradient ``dout`` on the output canvas."""
        c = self._cache
        geom, zhat, wts, v = c["geom"], c["zhat"], c["w"], c["v"]
        dt, size, k = self.dtype, geom.size, self.desc.k
        beta = self.params["beta"].data[0]
        n = zhat.shape[1]
        den = scatter_add(geom.idx1, np.broadcast_to(wts[:, None], zhat.shape), size)
        dnum = dout / den
        dden = -dout * c["out"] / den
        g_num = dnum[geom.idx1]
        dzhat = wts[:, None] * g_num
        dw = (zhat * g_num).sum(axis=1) + dden[geom.idx1].sum(axis=1)
        dv = dw * (-beta) * wts
        self.params["beta"].grad += np.array([np.sum(dw * (-v) * wts)], dtype=dt)
        dzhat = dzhat + dv[:, None] * 2.0 * (zhat - zhat.mean(axis=1, keepdims=True)) / (n - 1)
        dr = (-dzhat).astype(dt)

        a2, a3 = c["fcache"]
        dg = self.t4.backward(dr[..., None])
        if not self.desc.small:
            dg = self.tbr3.backward(self.bn3.backward(nn.relu_backward(dg, a3)))
        dX = self.tbr2.backward(self.bn2.backward(nn.relu_backward(dg, a2)))
        df1, dfa, df1b, dfab = (dX[:, :, i * k : (i + 1) * k] for i in range(4))

        b1, b2 = self.branches
        dpt1 = b1.backward_post(dfa)
        dtmp1 = scatter_add(geom.idx1, dpt1, size)
        dp1 = (dtmp1 / geom.cnt1)[geom.idx1].astype(dt)
        dpt2 = b2.backward_post(dfab)
        dtmp2 = apply_taps_adjoint(scatter_add(geom.idx2, dpt2, size), geom.taps2)
        dp2 = (dtmp2 / geom.cnt2)[geom.idx2].astype(dt)

        dZw1 = b1.backward_direct(df1, dp1)
        dZw2 = b2.backward_direct(df1b, dp2)
        self.wnets[1].backward((dZw2 * c["Z2"]).sum(axis=1))
        self.wnets[0].backward((dZw1 * c["Z1"]).sum(axis=1))

    # ------------------------------------------------------------ inference

    def denoise(self, img, *, reference=None, threads: int = 1, retain_patches: bool = False, chunk: int = INFER_CHUNK):
        """Denoise one image in inference mode, bounded memory, deterministic in ``threads``.

        Two barriers: temporary AGG images need every T_pre output, and the
        final recombination needs every denoised patch.  Features before the
        first barrier are recomputed after it instead of being stored.
        """
        geom = build_geometry([img], self.desc, threads=threads)
        return self.denoise_geometry(geom, reference=reference, threads=threads, retain_patches=retain_patches, chunk=chunk)

    def denoise_geometry(self, geom: Geometry, *, reference=None, threads=1, retain_patches=False, chunk=INFER_CHUNK):
        dt = self.dtype
        L, size, n = geom.locations, geom.size, self.desc.n
        noisy, filt = geom.noisy.astype(dt), geom.filtered.astype(dt)
        chunks = [slice(s, min(L, s + chunk)) for s in range(0, L, chunk)]
        b1, b2 = self.branches

        def front(rows):
            Z1 = gather_groups(noisy, geom.idx1, geom.nbr1, rows)
            Z2 = gather_groups(filt, geom.idx2, geom.nbr2, rows)
            w1 = self.wnets[0].forward(geom.dist1[rows].astype(dt), False, False)
            w2 = self.wnets[1].forward(geom.dist2[rows].astype(dt), False, False)
            f1 = b1.direct(apply_column_weights(Z1, w1), False, False)
            f1b = b2.direct(apply_column_weights(Z2, w2), False, False)
            return Z1, f1, f1b

        p1 = np.empty((L, n), dt)
        p2 = np.empty((L, n), dt)

        def stage_a(rows):
            _, f1, f1b = front(rows)
            p1[rows] = b1.pre(f1, False)
            p2[rows] = b2.pre(f1b, False)

        _run(stage_a, chunks, threads)
        tmp1 = (scatter_add(geom.idx1, p1, size) / geom.cnt1).astype(dt)
        tmp2f = apply_taps((scatter_add(geom.idx2, p2, size) / geom.cnt2).astype(dt), geom.taps2)
        del p1, p2
        zhat = np.empty((L, n), dt)

        def stage_b(rows):
            Z1, f1, f1b = front(rows)
            fa = b1.post(tmp1[geom.idx1[rows]], False)
            fab = b2.post(tmp2f[geom.idx2[rows]], False)
            r, _ = self._fuse(f1, fa, f1b, fab, False, False)
            zhat[rows] = Z1[:, :, 0] - r

        _run(stage_b, chunks, threads)
        out, wts, _ = _weighted_aggregate(zhat, self.params["beta"].data[0], geom.idx1, size)
        B, H, W, C = geom.shape
        image = out.reshape(B, H, W, C)
        image = image[0] if B == 1 else image
        res = DenoiseResult(image=image.astype(np.float64))
        if retain_patches:
            res.patches, res.weights = zhat, wts
        if reference is not None:
            res.psnr = psnr(res.image, reference)
        return res


def _run(fn, chunks, threads):
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fn, chunks))
    else:
        for c in chunks:
            fn(c)


def _weighted_aggregate(zhat, beta, idx, size):
    """Returns (image canvas, per-patch weights, per-patch variances)."""
    n = zhat.shape[1]
    v = zhat.var(axis=1, ddof=1) if n > 1 else np.zeros(zhat.shape[0], zhat.dtype)
    w = np.exp(-beta * v)
    num = scatter_add(idx, w[:, None] * zhat, size)
    den = scatter_add(idx, np.broadcast_to(w[:, None], zhat.shape), size)
    if np.any(den == 0):
        raise FloatingPointError("final aggregation weights vanished at some pixel")
    return num / den, w, v


# ----------------------------------------------------------- initialisation


def init_params(desc: ArchDescriptor, seed: int = 0, *, dtype=np.float32, scheme: str = "default") -> LidiaNet:
    """Fresh network.

    ``default``: He-normal spatial transforms, identity-like similarity
    transforms, a zero residual head (the untrained net returns its input) and
    weight nets that output all-ones.  ``random``: every tensor random, for
    gradient checks and golden snapshots.
    """
    rng = Xoshiro256pp(seed)
    params = {}
    for name, shape in param_shapes(desc).items():
        size = int(np.prod(shape))
        leaf = name.rsplit(".", 1)[-1]
        if scheme == "random":
            scale = 1.0 / np.sqrt(shape[-1]) if len(shape) == 2 else 0.1
            a = rng.normal(size).reshape(shape) * scale
            if leaf == "gamma":
                a = 1.0 + a
            if name == "beta":
                a = np.array([2.0])
        elif scheme == "default":
            a = _default_init(name, leaf, shape, rng, desc)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        params[name] = np.asarray(a, dtype=dtype)
    buffers = {}
    for name, shape in buffer_shapes(desc).items():
        buffers[name] = (np.zeros if name.endswith("running_mean") else np.ones)(shape, dtype=dtype)
    return LidiaNet(desc, params, buffers)


def _default_init(name, leaf, shape, rng, desc):
    size = int(np.prod(shape))
    last_fc = f"fc{WEIGHT_NET_DEPTH - 1}."
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "B", "b"):
        if name.endswith(last_fc + "b"):
            return np.ones(shape)
        return np.zeros(shape)
    if leaf == "W" and last_fc in name:
        return np.zeros(shape)
    if leaf == "W":
        return rng.normal(size).reshape(shape) * np.sqrt(2.0 / shape[1])
    if leaf == "W1":
        if name.startswith("fuse.t4"):
            return np.zeros(shape)
        gain = 1.0 if name.endswith("tpre.W1") else 2.0
        return rng.normal(size).reshape(shape) * np.sqrt(gain / shape[1])
    if leaf == "W2":
        rows, cols = shape
        if rows == cols:
            return np.eye(rows)
        return np.full(shape, 1.0 / rows)
    raise KeyError(name)
