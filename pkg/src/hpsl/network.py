"""Full hierarchical networks assembled from a parsed blueprint.

A forward pass has two phases. ``Network.plan`` computes the coordinate-only
geometry of a batch (FPS centroids, neighbor tables, interpolation weights)
per cloud, optionally on worker threads, and stacks it into flat index
arrays. ``Network.forward`` then runs the learned layers on the whole batch.
"""

from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .archlang import FCLevel, FPLevel, GlobalSA, Head, MRGLevel, NetworkBlueprint, SALevel, render_blueprint, validate_chain
from .cloud import MetricConfig, MetricMode, PointCloud
from .engine import MLP, GradCheckReport, Tensor, grad_check, rng_stream, softmax_cross_entropy
from .hierarchy import (
    ConfigurationError,
    GroupEncoder,
    interpolate_rows,
    interpolate_rows_backward,
    interpolation_weights,
    neighbor_indices,
    stack_groupings,
)
from .neighborhood import KNN, Ball
from .sampling import farthest_point_sample


@dataclass(frozen=True)
class NetworkConfig:
    """Settings the architecture notation leaves open."""

    group_cap: int = 32
    grouping: str = "ball"  # "ball" or "knn" (k = group_cap)
    interp_k: int = 3
    interp_power: float = 2.0
    metric: MetricConfig = MetricConfig(MetricMode.FEATURE_SPACE_IS_METRIC)

    def __post_init__(self):
        if self.group_cap < 1:
            raise ConfigurationError("group_cap must be >= 1")
        if self.grouping not in ("ball", "knn"):
            raise ConfigurationError(f"unknown grouping {self.grouping!r}")

    def neighborhood(self, radius: float):
        if self.grouping == "knn":
            return KNN(self.group_cap)
        return Ball(radius, self.group_cap)


# -- stages -------------------------------------------------------------------------

class _SA:
    def __init__(self, name, level: SALevel, c_in, loc, rng, use_coords):
        self.name = name
        self.m = level.num_centroids
        self.radii = level.radii
        self.encoders = [GroupEncoder(MLP.build(loc + c_in, w, rng), use_coords) for w in level.widths]
        self.widths = [w[-1] for w in level.widths]
        self.out_width = sum(self.widths)

    def geometry(self, coords, start, cfg):
        if self.m > len(coords):
            raise ConfigurationError(f"{self.name}: {self.m} centroids requested from {len(coords)} points")
        cent = farthest_point_sample(coords, self.m, start).indices
        centers = coords[cent]
        tables = [neighbor_indices(coords, centers, cfg.neighborhood(r), self_idx=cent) for r in self.radii]
        return tables, centers

    def forward(self, feats, groupings, train, rng):
        outs, caches = [], []
        for enc, g in zip(self.encoders, groupings):
            o, c = enc.forward(feats, g, train, rng)
            outs.append(o)
            caches.append(c)
        return np.hstack(outs), caches

    def backward(self, dout, groupings, caches, need_input):
        total = None
        col = 0
        for enc, g, c, w in zip(self.encoders, groupings, caches, self.widths):
            d = enc.backward(dout[:, col : col + w], g, c, need_input)
            col += w
            if need_input:
                total = d if total is None else total + d
        return total


def _global_table(n):
    return np.arange(n, dtype=np.int64)[None, :], np.ones((1, n), dtype=bool)


@dataclass(eq=False)
class BatchPlan:
    """Stacked geometry for a batch of clouds."""

    sizes: np.ndarray  # real point counts per cloud
    padded: np.ndarray  # padded point counts per cloud
    features: np.ndarray  # flat level-0 features
    stages: list  # per-stage batched geometry
    real_rows: np.ndarray  # flat level-0 rows that are real points

    @property
    def batch_size(self) -> int:
        return len(self.sizes)


class Network:
    """Trainable network for one blueprint and input/label dimensions."""

    def __init__(
        self,
        blueprint: NetworkBlueprint,
        input_d: int,
        input_C: int,
        num_classes: int,
        config: NetworkConfig = NetworkConfig(),
        seed: int = 0,
    ):
        use_coords = config.metric.coords_are_inputs
        report = validate_chain(blueprint, input_d, input_C, num_classes, coords_as_input=use_coords)
        if not report.ok:
            raise ConfigurationError(report.message)
        self.blueprint = blueprint
        self.input_d, self.input_C, self.num_classes = input_d, input_C, num_classes
        self.config = config
        self.use_coords = use_coords
        self.head = blueprint.head
        loc = input_d if use_coords else 0
        rng = rng_stream(seed, 0)

        self.sa: list = []  # down path, in order
        self.mrg = None
        self.fc: Optional[MLP] = None
        self.fp: List[MLP] = []
        widths = [input_C]
        c = input_C
        levels = blueprint.levels
        fcs = [lv for lv in levels if isinstance(lv, FCLevel)]
        fps = [lv for lv in levels if isinstance(lv, FPLevel)]
        for i, lv in enumerate(levels):
            if isinstance(lv, SALevel):
                st = _SA(f"sa{i}", lv, c, loc, rng, use_coords)
                self.sa.append(st)
                c = st.out_width
                widths.append(c)
            elif isinstance(lv, GlobalSA):
                st = _GlobalSA(f"sa{i}", lv, c, loc, rng, use_coords)
                self.sa.append(st)
                c = st.out_width
                widths.append(c)
            elif isinstance(lv, MRGLevel):
                if fps:
                    raise ConfigurationError("level 0: multi-resolution grouping supports classification heads only")
                self.mrg = _MRG(lv, input_C, loc, rng, use_coords)
                c = self.mrg.out_width
        if fcs:
            drops = [lv.dropout or 0.0 for lv in fcs]
            self.fc = MLP.build(c, [lv.width for lv in fcs], rng, final_linear=True, dropouts=drops)
        for j, lv in enumerate(fps):
            widths.pop()
            skip = widths[-1]
            last = j == len(fps) - 1
            drops = [0.0] * len(lv.widths)
            if last:
                for h in (-3, -2):
                    if len(lv.widths) >= -h:
                        drops[h] = blueprint.fp_dropout
            self.fp.append(MLP.build(c + skip, lv.widths, rng, final_linear=last, dropouts=drops))
            c = lv.widths[-1]
        self.layers = self._collect()

    # -- parameters ---------------------------------------------------------------

    def _mlps(self):
        for st in self.sa:
            for s, enc in enumerate(st.encoders):
                yield f"{st.name}.s{s}", enc.mlp
        if self.mrg is not None:
            yield from self.mrg.mlps()
        if self.fc is not None:
            yield "fc", self.fc
        for j, mlp in enumerate(self.fp):
            yield f"fp{j}", mlp

    def _collect(self):
        layers = OrderedDict()
        for prefix, mlp in self._mlps():
            for k, p in enumerate(mlp.layers):
                layers[f"{prefix}.l{k}"] = p
        return layers

    def parameters(self) -> Dict[str, Tensor]:
        out = OrderedDict()
        for name, p in self.layers.items():
            for t, tensor in p.tensors():
                out[f"{name}.{t}"] = tensor
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = OrderedDict()
        for name, p in self.layers.items():
            for b, arr in p.buffers():
                out[f"{name}.{b}"] = arr
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    @property
    def description(self) -> str:
        return render_blueprint(self.blueprint)

    # -- geometry -----------------------------------------------------------------

    @property
    def min_points(self) -> int:
        if self.mrg is not None:
            return self.mrg.branch1[0].m
        for st in self.sa:
            if isinstance(st, _SA):
                return st.m
        return 1

    def _cloud_geometry(self, coords, start):
        cfg = self.config
        if self.mrg is not None:
            return [self.mrg.geometry(coords, start, cfg)]
        geo = []
        levels = [coords]
        for st in self.sa:
            if isinstance(st, _SA):
                tables, centers = st.geometry(levels[-1], start, cfg)
                geo.append((tables, centers))
                levels.append(centers)
            else:
                geo.append(([_global_table(len(levels[-1]))], np.zeros((1, coords.shape[1]))))
                levels.append(np.zeros((1, coords.shape[1])))
            start = 0
        for j in range(len(self.fp)):
            fine, coarse = levels[-2 - j], levels[-1 - j]
            geo.append(interpolation_weights(fine, coarse, self.config.interp_k, self.config.interp_power))
        return geo

    def _check(self, cloud: PointCloud):
        if cloud.d != self.input_d or cloud.c != self.input_C:
            raise ConfigurationError(
                f"network expects d={self.input_d}, C={self.input_C}; cloud has d={cloud.d}, C={cloud.c}"
            )

    def plan(self, clouds: Sequence[PointCloud], starts=None, threads: Optional[int] = None) -> BatchPlan:
        """Precompute the geometry of a batch. ``starts`` gives each cloud's
        first FPS index (default 0)."""
        clouds = list(clouds)
        for cl in clouds:
            self._check(cl)
        if starts is None:
            starts = [0] * len(clouds)
        need = self.min_points
        coords, feats, sizes = [], [], []
        for cl in clouds:
            x, f = cl.metric_coords, cl.features
            sizes.append(cl.n)
            if cl.n < need:
                # pad with copies of the first point; copies never change a max
                rep = np.zeros(need - cl.n, dtype=np.int64)
                x = np.vstack([x, x[rep]])
                f = np.vstack([f, f[rep]])
            coords.append(x)
            feats.append(f)
        work = lambda j: self._cloud_geometry(coords[j], int(starts[j]))
        if threads and threads > 1 and len(clouds) > 1:
            with ThreadPoolExecutor(threads) as pool:
                geos = list(pool.map(work, range(len(clouds))))
        else:
            geos = [work(j) for j in range(len(clouds))]
        padded = np.array([len(x) for x in coords])
        sizes = np.array(sizes)
        off0 = np.concatenate([[0], np.cumsum(padded)[:-1]])
        flat_coords = np.vstack(coords)
        real_rows = np.concatenate([o + np.arange(n) for o, n in zip(off0, sizes)])
        stages = self._stack(geos, off0, flat_coords, padded)
        return BatchPlan(sizes, padded, np.vstack(feats), stages, real_rows)

    def _stack(self, geos, off0, flat_coords, padded):
        b = len(geos)
        if self.mrg is not None:
            return [self.mrg.stack([g[0] for g in geos], off0, flat_coords)]
        stages = []
        offsets, level_coords = off0, flat_coords
        level_offsets = [off0]
        for s, st in enumerate(self.sa):
            tables = [g[s][0] for g in geos]
            centers = np.stack([g[s][1] for g in geos])
            groupings = [stack_groupings([t[k] for t in tables], offsets, level_coords, centers) for k in range(len(tables[0]))]
            stages.append(groupings)
            m = centers.shape[1]
            offsets = np.arange(b) * m
            level_coords = centers.reshape(-1, centers.shape[2])
            level_offsets.append(offsets)
        n_sa = len(self.sa)
        for j in range(len(self.fp)):
            coarse_off = level_offsets[-1 - j]
            idx = np.vstack([g[n_sa + j][0] + coarse_off[k] for k, g in enumerate(geos)])
            coef = np.vstack([g[n_sa + j][1] for g in geos])
            stages.append((idx, coef))
        return stages

    # -- forward / backward ---------------------------------------------------------

    def forward(self, plan: BatchPlan, train: bool = False, rng=None):
        """Returns ``(logits, cache)``. Classification logits are (B, K);
        segmentation logits are (sum of real sizes, K) in cloud order."""
        if train and rng is None:
            rng = rng_stream(0)
        feats = plan.features
        if self.mrg is not None:
            x, mcache = self.mrg.forward(feats, plan.stages[0], train, rng)
            y, fc_cache = self.fc.forward(x, train, rng)
            return y, ("mrg", mcache, fc_cache)
        level_feats = [feats]
        caches = []
        for st, groupings in zip(self.sa, plan.stages):
            feats, c = st.forward(feats, groupings, train, rng)
            caches.append(c)
            level_feats.append(feats)
        if self.head is Head.CLASSIFICATION:
            y, fc_cache = self.fc.forward(feats, train, rng)
            return y, ("cls", caches, level_feats, fc_cache)
        fp_caches = []
        n_sa = len(self.sa)
        for j, mlp in enumerate(self.fp):
            idx, coef = plan.stages[n_sa + j]
            skip = level_feats[-2 - j]
            c_coarse = feats.shape[1]
            x = np.hstack([interpolate_rows(feats, idx, coef), skip])
            feats, c = mlp.forward(x, train, rng)
            fp_caches.append((c, c_coarse))
        return feats[plan.real_rows], ("seg", caches, level_feats, fp_caches)

    def backward(self, plan: BatchPlan, dlogits: np.ndarray, cache) -> None:
        """Accumulate parameter gradients for ``dlogits``."""
        kind = cache[0]
        if kind == "mrg":
            _, mcache, fc_cache = cache
            dx = self.fc.backward(dlogits, fc_cache, need_dx=True)
            self.mrg.backward(dx, plan.stages[0], mcache)
            return
        _, caches, level_feats = cache[:3]
        n_sa = len(self.sa)
        grads: List[Optional[np.ndarray]] = [None] * (n_sa + 1)
        if kind == "cls":
            grads[n_sa] = self.fc.backward(dlogits, cache[3], need_dx=True)
        else:
            fp_caches = cache[3]
            dfeats = np.zeros((len(plan.features), dlogits.shape[1]))
            dfeats[plan.real_rows] = dlogits
            for j in range(len(self.fp) - 1, -1, -1):
                idx, coef = plan.stages[n_sa + j]
                coarse_level = n_sa - j
                fine_level = coarse_level - 1
                c, c_coarse = fp_caches[j]
                dx = self.fp[j].backward(dfeats, c, need_dx=True)
                n_coarse = len(level_feats[coarse_level])
                dcoarse = interpolate_rows_backward(dx[:, :c_coarse], idx, coef, n_coarse)
                dskip = dx[:, c_coarse:]
                if fine_level > 0:
                    grads[fine_level] = dskip if grads[fine_level] is None else grads[fine_level] + dskip
                if j == 0:
                    grads[coarse_level] = dcoarse if grads[coarse_level] is None else grads[coarse_level] + dcoarse
                else:
                    dfeats = dcoarse
        for s in range(n_sa - 1, -1, -1):
            if grads[s + 1] is None:
                continue
            d = self.sa[s].backward(grads[s + 1], plan.stages[s], caches[s], need_input=s > 0)
            if s > 0:
                grads[s] = d if grads[s] is None else grads[s] + d

    def loss_and_grads(self, plan: BatchPlan, labels, train: bool = True, rng=None):
        """Mean cross-entropy over the batch and fresh parameter gradients.

        Dropout masks come from ``rng`` (default: a fixed stream, so repeated
        calls are identical).
        """
        self.zero_grad()
        logits, cache = self.forward(plan, train, rng if rng is not None else rng_stream(0, 1))
        loss, dlogits = softmax_cross_entropy(logits, np.asarray(labels))
        self.backward(plan, dlogits, cache)
        return loss, logits

    def predict(self, clouds: Sequence[PointCloud], starts=None, threads=None) -> np.ndarray:
        """Eval-mode logits for a list of clouds."""
        plan = self.plan(clouds, starts, threads)
        logits, _ = self.forward(plan, train=False)
        return logits


class _GlobalSA:
    """One region holding every point, centered at the origin."""

    def __init__(self, name, level: GlobalSA, c_in, loc, rng, use_coords):
        self.name = name
        self.encoders = [GroupEncoder(MLP.build(loc + c_in, level.widths, rng), use_coords)]
        self.widths = [level.out_width]
        self.out_width = level.out_width

    forward = _SA.forward
    backward = _SA.backward


class _MRG:
    """Four-branch multi-resolution classification trunk.

    Branch 1 is a chain of SA levels over the raw points. Branch 2 encodes
    the raw points around branch 1's final centroids. Their concatenation
    feeds the global branch 4; branch 3 is a global encoder over the raw
    points. The trunk emits ``[branch 3 | branch 4]``.
    """

    def __init__(self, level: MRGLevel, c_in, loc, rng, use_coords):
        self.branch1 = []
        c = c_in
        for k, sub in enumerate(level.branch1):
            st = _SA(f"mrg.b1.{k}", sub, c, loc, rng, use_coords)
            self.branch1.append(st)
            c = st.out_width
        b2 = level.branch2
        if b2.is_msg:
            raise ConfigurationError("level 0: MRG branch2 must use a single radius")
        self.radius2 = b2.radii[0]
        self.enc2 = GroupEncoder(MLP.build(loc + c_in, b2.widths[0], rng), use_coords)
        self.enc3 = GroupEncoder(MLP.build(loc + c_in, level.branch3.widths, rng), use_coords)
        c4 = c + self.enc2.mlp.out_width
        self.enc4 = GroupEncoder(MLP.build(loc + c4, level.branch4.widths, rng), use_coords)
        self.out_width = self.enc3.mlp.out_width + self.enc4.mlp.out_width

    def mlps(self):
        for st in self.branch1:
            for s, enc in enumerate(st.encoders):
                yield f"{st.name}.s{s}", enc.mlp
        yield "mrg.b2", self.enc2.mlp
        yield "mrg.b3", self.enc3.mlp
        yield "mrg.b4", self.enc4.mlp

    def geometry(self, coords, start, cfg):
        b1 = []
        level = coords
        for st in self.branch1:
            tables, centers = st.geometry(level, start, cfg)
            b1.append((tables, centers))
            level = centers
            start = 0
        t2 = neighbor_indices(coords, level, cfg.neighborhood(self.radius2))
        return b1, t2, _global_table(len(coords)), _global_table(len(level))

    def stack(self, geos, off0, flat_coords):
        b = len(geos)
        d = flat_coords.shape[1]
        offsets, level_coords = off0, flat_coords
        b1 = []
        for s in range(len(self.branch1)):
            tables = [g[0][s][0] for g in geos]
            centers = np.stack([g[0][s][1] for g in geos])
            b1.append([stack_groupings([t[k] for t in tables], offsets, level_coords, centers) for k in range(len(tables[0]))])
            m = centers.shape[1]
            offsets = np.arange(b) * m
            level_coords = centers.reshape(-1, d)
        g2 = stack_groupings([g[1] for g in geos], off0, flat_coords, centers)
        origin = np.zeros((b, 1, d))
        g3 = stack_groupings([g[2] for g in geos], off0, flat_coords, origin)
        g4 = stack_groupings([g[3] for g in geos], offsets, level_coords, origin)
        return b1, g2, g3, g4

    def forward(self, feats, geo, train, rng):
        b1, g2, g3, g4 = geo
        raw = feats
        caches = []
        for st, groupings in zip(self.branch1, b1):
            feats, c = st.forward(feats, groupings, train, rng)
            caches.append(c)
        vec_b, c2 = self.enc2.forward(raw, g2, train, rng)
        cat = np.hstack([feats, vec_b])
        out4, c4 = self.enc4.forward(cat, g4, train, rng)
        out3, c3 = self.enc3.forward(raw, g3, train, rng)
        return np.hstack([out3, out4]), (caches, c2, c3, c4, feats.shape[1])

    def backward(self, dout, geo, cache):
        b1, g2, g3, g4 = geo
        caches, c2, c3, c4, w_a = cache
        w3 = self.enc3.mlp.out_width
        self.enc3.backward(dout[:, :w3], g3, c3, need_input=False)
        dcat = self.enc4.backward(dout[:, w3:], g4, c4, need_input=True)
        self.enc2.backward(dcat[:, w_a:], g2, c2, need_input=False)
        d = dcat[:, :w_a]
        for s in range(len(self.branch1) - 1, -1, -1):
            d = self.branch1[s].backward(d, b1[s], caches[s], need_input=s > 0)


def check_gradients(
    net: Network,
    plan: BatchPlan,
    labels,
    seed: int = 0,
    max_per_param: Optional[int] = None,
    tolerance: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Finite-difference check of every parameter gradient of the training
    loss on ``plan``. Dropout masks are fixed by ``seed``.

    Batch statistics cancel some gradients exactly; their central differences
    are loss roundoff over the step (up to about 1e-10). ``floor`` bounds the
    relative-error denominator so those entries are held to an absolute
    error of ``tolerance * floor`` instead.
    """
    tensors = net.parameters()

    def loss(_params):
        value, _ = net.loss_and_grads(plan, labels, True, rng_stream(seed, 1))
        return value, {k: t.grad for k, t in tensors.items()}

    params = {k: t.value for k, t in tensors.items()}
    return grad_check(loss, params, tolerance=tolerance, floor=floor, max_per_param=max_per_param, rng=rng_stream(seed, 2))


def network_forward(cloud: PointCloud, blueprint: NetworkBlueprint, params: Network, mode: str = "eval", start: int = 0, rng=None):
    """Logits for one cloud: a K-vector for classification, N×K for segmentation."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if params.blueprint != blueprint:
        raise ConfigurationError(
            f"parameters belong to {render_blueprint(params.blueprint)!r}, not {render_blueprint(blueprint)!r}"
        )
    plan = params.plan([cloud], [start])
    logits, _ = params.forward(plan, train=mode == "train", rng=rng)
    return logits[0] if params.head is Head.CLASSIFICATION else logits
