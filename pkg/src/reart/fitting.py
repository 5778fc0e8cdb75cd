"""Stage orchestration: relaxed 6-DOF fitting, constrained final fitting,
and canonical-frame selection.

The relaxed stage jointly optimizes a segmentation field and free per-part
per-frame twists, with hard Gumbel part assignments (straight-through
gradients) and a two-phase energy schedule: chamfer+flow first, then
earth-mover+flow on downsampled clouds with a periodically refreshed
assignment. The canonical frame's twists are pinned to zero, which fixes
the global gauge.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import energy, geom, project, segfield
from .articulate import ArticulatedModel, Normalization
from .cloud import PointCloud, Sequence, farthest_point_sample
from .energy import Assignment, EnergyWeights
from .errors import DegenerateInput, EmptyPart
from .flow import FlowField
from .geom import JointType
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .segfield import SegFieldParams


@dataclass
class FitConfig:
    max_parts: int = 20
    iters_stage1: int = 15000  # first third chamfer+flow, rest earth-mover+flow
    iters_final: int = 200
    emd_downsample_stage1: int = 4
    emd_refresh_stage1: int = 5
    emd_downsample_final: int = 2
    emd_refresh_final: int = 1
    gumbel_temp_start: float = 5.0
    gumbel_temp_end: float = 1.0
    lr_field: float = 1e-3
    lr_transform: float = 1e-2
    ik_lr: float = 0.1
    ik_iters: int = 200
    merge_eps: float = 3e-2
    lambda_spatial: float = 100.0
    lambda_1dof: float = 1.0
    weights_stage1a: EnergyWeights = EnergyWeights(1.0, 0.0, 1.0)
    weights_stage1b: EnergyWeights = EnergyWeights(0.0, 0.3, 1.0)
    weights_final: EnergyWeights = EnergyWeights(1.0, 0.3, 1.0)
    flow_k: int = 3
    spatial_fps: int = 20
    hidden: int = 128
    seed: int = 0
    reduction: str = "mean"  # "sum" restores unnormalized energy terms
    log_every: int = 0  # CSV progress to stderr every k iterations (0 = off)
    use_group_energy: bool = True
    joint_model: str = "screw"

    def stage1_split(self) -> tuple[int, int]:
        first = round(self.iters_stage1 / 3)
        return first, self.iters_stage1 - first

    def __post_init__(self):
        if self.iters_stage1 < 1 or self.iters_final < 1 or self.max_parts < 1:
            raise ValueError("iteration and part counts must be >= 1")


@dataclass
class RelaxedModel:
    n: int
    segfield: SegFieldParams
    twists: np.ndarray  # (n, T, 6); zero row at the canonical frame
    canonical_index: int
    canonical_points: np.ndarray
    labels: np.ndarray  # (N,) in [0, n)
    normalization: Normalization
    label_remap: np.ndarray | None = None  # raw field argmax -> compact id (-1 if empty)
    history: list = field(default_factory=list, repr=False)


def _log_progress(it, total_e, e_cd, e_emd, e_flow, temp, log_every):
    if log_every and it % log_every == 0:
        print(f"{it},{total_e:.6g},{e_cd:.6g},{e_emd:.6g},{e_flow:.6g},{temp:.4g}", file=sys.stderr)


class _EmdCache:
    """Per-frame bipartite assignments refreshed on a fixed schedule."""

    def __init__(self, refresh: int):
        self.refresh = max(1, refresh)
        self.assignments: dict[int, Assignment] = {}
        self.countdown = 0

    def get(self, t: int, x: np.ndarray, y: np.ndarray) -> Assignment:
        if self.countdown == 0 or t not in self.assignments:
            cost = _sq_dists(x, y)
            self.assignments[t] = energy.lap_solve(cost)
        return self.assignments[t]

    def tick(self):
        self.countdown = (self.countdown + 1) % self.refresh


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x2 = (x * x).sum(1)
    y2 = (y * y).sum(1)
    d = x2[:, None] + y2[None, :] - 2.0 * (x @ y.T)
    return np.maximum(d, 0.0)


def fit_relaxed(
    sequence: Sequence,
    fields: list[FlowField | None],
    config: FitConfig,
    canonical_index: int,
) -> RelaxedModel:
    """Fit the relaxed model: segmentation field + free 6-DOF trajectories."""
    t_count = len(sequence)
    if not 0 <= canonical_index < t_count:
        raise ValueError("canonical index out of range")
    for f in sequence.frames:
        if len(f) < config.max_parts:
            raise DegenerateInput(
                f"frame {f.frame_index} has {len(f)} points < max_parts={config.max_parts}"
            )

    torch.manual_seed(config.seed)
    gumbel_gen = torch.Generator().manual_seed(config.seed + 1)

    canonical = sequence.frames[canonical_index]
    x = torch.tensor(canonical.points)
    norm = Normalization.fit(canonical.points)
    x_norm = torch.tensor(norm.apply(canonical.points))
    observed = [torch.tensor(f.points) for f in sequence.frames]
    obs_trees = [cKDTree(f.points) for f in sequence.frames]

    params_field = segfield.init_segfield(config.max_parts, config.hidden, config.seed)
    xi = torch.zeros(config.max_parts, t_count, 6, dtype=torch.float64)
    pin = torch.ones(1, t_count, 1, dtype=torch.float64)
    pin[0, canonical_index, 0] = 0.0

    params = {name: t.requires_grad_(True) for name, t in params_field.tensors().items()}
    params["xi"] = xi.requires_grad_(True)
    lrs = {name: config.lr_field for name in ("w1", "b1", "w2", "b2")}
    lrs["xi"] = config.lr_transform

    split_a, _ = config.stage1_split()
    total_iters = config.iters_stage1

    ds = config.emd_downsample_stage1
    emd_k = min(-(-len(f) // ds) for f in sequence.frames)
    emd_canon_idx = farthest_point_sample(canonical.points, emd_k, seed=config.seed)
    emd_obs = [
        f.points[farthest_point_sample(f.points, emd_k, seed=config.seed)]
        for f in sequence.frames
    ]
    emd_obs_t = [torch.tensor(p) for p in emd_obs]
    emd_cache = _EmdCache(config.emd_refresh_stage1)

    adam = AdamState()
    history = []
    for it in range(total_iters):
        stage_a = it < split_a
        weights = config.weights_stage1a if stage_a else config.weights_stage1b
        temp = segfield.cosine_temperature(
            it, total_iters, config.gumbel_temp_start, config.gumbel_temp_end
        )
        zero_grads(params)

        logits = segfield.field_logits(
            SegFieldParams(params["w1"], params["b1"], params["w2"], params["b2"]), x_norm
        )
        sample = segfield.gumbel_hard_assign(logits, temp, generator=gumbel_gen)
        assign = sample.hard  # (N, P), exact one-hot values

        xi_eff = params["xi"] * pin
        rot, tr = geom.exp_twists_torch(xi_eff)  # (P, T, 3, 3), (P, T, 3)

        e_cd = torch.zeros((), dtype=torch.float64)
        e_emd = torch.zeros((), dtype=torch.float64)
        e_flow = torch.zeros((), dtype=torch.float64)
        posed_prev: torch.Tensor | None = None
        for t in range(t_count):
            if t == canonical_index:
                posed_t = x
            else:
                per_part = torch.matmul(x.unsqueeze(0), rot[:, t].transpose(1, 2)) + tr[:, t].unsqueeze(1)
                posed_t = torch.einsum("np,pnk->nk", assign, per_part)
            if t != canonical_index:
                posed_np = posed_t.detach().numpy()
                if weights.lambda_cd > 0:
                    nn_xy = obs_trees[t].query(posed_np, k=1, workers=-1)[1]
                    nn_yx = cKDTree(posed_np).query(sequence.frames[t].points, k=1, workers=-1)[1]
                    e_cd = e_cd + energy.chamfer(
                        posed_t, observed[t], nn_xy=nn_xy, nn_yx=nn_yx, reduction=config.reduction
                    )
                if weights.lambda_emd > 0:
                    sub = posed_t[torch.as_tensor(emd_canon_idx)]
                    a = emd_cache.get(t, sub.detach().numpy(), emd_obs[t])
                    val, _ = energy.emd(sub, emd_obs_t[t], assignment=a, reduction=config.reduction)
                    e_emd = e_emd + val
            if weights.lambda_flow > 0 and t > 0 and fields[t] is not None and posed_prev is not None:
                e_flow = e_flow + energy.flow_energy(
                    posed_t, posed_prev, fields[t], k=config.flow_k, reduction=config.reduction
                )
            posed_prev = posed_t
        emd_cache.tick()

        total = (
            weights.lambda_cd * e_cd
            + weights.lambda_emd * e_emd
            + weights.lambda_flow * e_flow
        )
        vals = tuple(float(v.detach()) for v in (total, e_cd, e_emd, e_flow))
        total.backward()
        adam_step(adam, params, collect_grads(params), lr=lrs)

        history.append((it, *vals, temp))
        _log_progress(it, *vals, temp, config.log_every)

    final_field = SegFieldParams(*(params[k].detach().clone() for k in ("w1", "b1", "w2", "b2")))
    raw_labels = segfield.hard_label(final_field, norm.apply(canonical.points))
    active = np.unique(raw_labels)
    remap = np.full(config.max_parts, -1, dtype=np.int64)
    remap[active] = np.arange(len(active))
    twists = (params["xi"] * pin).detach().numpy()[active]
    return RelaxedModel(
        n=len(active),
        segfield=final_field,
        twists=twists,
        canonical_index=canonical_index,
        canonical_points=canonical.points.copy(),
        labels=remap[raw_labels],
        normalization=norm,
        label_remap=remap,
        history=history,
    )


def group_energy(model: ArticulatedModel) -> float:
    """Mean per-part squared deviation from the part centroid."""
    total = 0.0
    n = model.n_parts
    for i in range(n):
        pts = model.canonical_points[model.canonical_labels == i]
        if len(pts) == 0:
            raise EmptyPart(f"part {i} has no canonical points")
        centroid = pts.mean(axis=0)
        total += float(((pts - centroid) ** 2).sum(axis=1).mean())
    return total / n


def final_fit(
    model: ArticulatedModel,
    sequence: Sequence,
    fields: list[FlowField | None],
    config: FitConfig,
) -> ArticulatedModel:
    """Refine screw parameters and joint states with segmentation and tree
    frozen; joint-type constraints hold at every step and axes stay unit."""
    n = model.n_parts
    t_count = len(sequence)
    c = model.canonical_index
    root = model.tree.root
    spherical = model.joint_dof == 3

    axes0 = np.stack([
        model.screws[i].axis if model.screws[i] else np.array([1.0, 0.0, 0.0]) for i in range(n)
    ])
    moments0 = np.stack([
        model.screws[i].moment if model.screws[i] else np.zeros(3) for i in range(n)
    ])
    raw0 = np.zeros((t_count, n, 3))
    raw0[:, :, : model.joint_dof] = model.states

    params = {
        "axes": torch.tensor(axes0, requires_grad=True),
        "moments": torch.tensor(moments0, requires_grad=True),
        "states": torch.tensor(raw0, requires_grad=True),
    }
    type_mask = torch.zeros(n, 3, dtype=torch.float64)
    for i in range(n):
        if i == root:
            continue
        if spherical:
            type_mask[i] = 1.0
        elif model.joint_types[i] == JointType.REVOLUTE:
            type_mask[i, 0] = 1.0
        elif model.joint_types[i] == JointType.PRISMATIC:
            type_mask[i, 1] = 1.0
        else:
            type_mask[i, 0] = 1.0
            type_mask[i, 1] = 1.0
    frame_mask = torch.ones(t_count, 1, 1, dtype=torch.float64)
    frame_mask[c] = 0.0

    x = torch.tensor(model.canonical_points)
    part_index = [np.nonzero(model.canonical_labels == i)[0] for i in range(n)]
    observed = [torch.tensor(f.points) for f in sequence.frames]
    obs_trees = [cKDTree(f.points) for f in sequence.frames]

    ds = config.emd_downsample_final
    emd_k = min(-(-len(f) // ds) for f in sequence.frames)
    emd_canon_idx = farthest_point_sample(model.canonical_points, emd_k, seed=config.seed)
    emd_obs = [
        f.points[farthest_point_sample(f.points, emd_k, seed=config.seed)]
        for f in sequence.frames
    ]
    emd_obs_t = [torch.tensor(p) for p in emd_obs]
    emd_cache = _EmdCache(config.emd_refresh_final)
    weights = config.weights_final
    topo = model.tree.topo_order()
    parent = model.tree.parent

    def pose_all(axes, moments, states_raw):
        unit_axes = axes / torch.linalg.norm(axes, dim=1, keepdim=True)
        masked = states_raw * type_mask.unsqueeze(0) * frame_mask
        posed = []
        for t in range(t_count):
            if t == c:
                posed.append(x)
                continue
            if spherical:
                w = masked[t]
                xi = torch.cat([w, torch.cross(moments, w, dim=-1)], dim=-1)
            else:
                xi = geom.screw_twists_torch(unit_axes, moments, masked[t, :, 0], masked[t, :, 1])
            local_r, local_t = geom.exp_twists_torch(xi)
            world_r: list = [None] * n
            world_t: list = [None] * n
            for i in topo:
                if i == root:
                    world_r[i] = torch.eye(3, dtype=torch.float64)
                    world_t[i] = torch.zeros(3, dtype=torch.float64)
                else:
                    p = int(parent[i])
                    world_r[i] = world_r[p] @ local_r[i]
                    world_t[i] = world_r[p] @ local_t[i] + world_t[p]
            posed_t = torch.empty_like(x)
            for i in range(n):
                sel = torch.as_tensor(part_index[i])
                posed_t = posed_t.index_copy(
                    0, sel, x[sel] @ world_r[i].T + world_t[i]
                )
            posed.append(posed_t)
        return posed

    def energy_of(posed):
        e = torch.zeros((), dtype=torch.float64)
        for t in range(t_count):
            if t != c:
                posed_np = posed[t].detach().numpy()
                if weights.lambda_cd > 0:
                    nn_xy = obs_trees[t].query(posed_np, k=1, workers=-1)[1]
                    nn_yx = cKDTree(posed_np).query(sequence.frames[t].points, k=1, workers=-1)[1]
                    e = e + weights.lambda_cd * energy.chamfer(
                        posed[t], observed[t], nn_xy=nn_xy, nn_yx=nn_yx, reduction=config.reduction
                    )
                if weights.lambda_emd > 0:
                    sub = posed[t][torch.as_tensor(emd_canon_idx)]
                    a = emd_cache.get(t, sub.detach().numpy(), emd_obs[t])
                    val, _ = energy.emd(sub, emd_obs_t[t], assignment=a, reduction=config.reduction)
                    e = e + weights.lambda_emd * val
            if weights.lambda_flow > 0 and t > 0 and fields[t] is not None:
                e = e + weights.lambda_flow * energy.flow_energy(
                    posed[t], posed[t - 1], fields[t], k=config.flow_k, reduction=config.reduction
                )
        return e

    adam = AdamState()
    best = None
    for it in range(config.iters_final):
        zero_grads(params)
        total = energy_of(pose_all(params["axes"], params["moments"], params["states"]))
        val = float(total.detach())
        if best is None or val < best[0]:
            best = (val, {k: p.detach().clone() for k, p in params.items()})
        total.backward()
        adam_step(adam, params, collect_grads(params), lr=config.lr_transform)
        with torch.no_grad():
            params["axes"] /= torch.linalg.norm(params["axes"], dim=1, keepdim=True)
        emd_cache.tick()
        _log_progress(it, val, 0.0, 0.0, 0.0, 0.0, config.log_every)
    with torch.no_grad():
        final_val = float(energy_of(pose_all(params["axes"], params["moments"], params["states"])))
    chosen = {k: p.detach().clone() for k, p in params.items()} if final_val < best[0] else best[1]

    axes = chosen["axes"].numpy()
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    moments = chosen["moments"].numpy()
    states_raw = chosen["states"].numpy() * type_mask.numpy()[None] * frame_mask.numpy()
    screws = [
        None if i == root else geom.ScrewParams(axes[i], moments[i]) for i in range(n)
    ]
    return dataclasses.replace(
        model,
        screws=screws,
        states=states_raw[:, :, : model.joint_dof],
    )


def select_canonical(
    sequence: Sequence,
    fields: list[FlowField | None],
    candidates: list[int],
    config: FitConfig,
) -> tuple[int, ArticulatedModel, list[dict]]:
    """Fit + project per candidate canonical frame; keep the lowest
    projection fitness (plus cluster-deviation term unless disabled)."""
    if not candidates:
        raise ValueError("no canonical-frame candidates")
    best = None
    reports = []
    for c in candidates:
        relaxed = fit_relaxed(sequence, fields, config, c)
        model = project.project(relaxed, config, joint_model=config.joint_model)
        score = model.e_project + (group_energy(model) if config.use_group_energy else 0.0)
        reports.append(
            {"canonical": c, "e_project": model.e_project, "score": score, "parts": model.n_parts}
        )
        if best is None or score < best[0]:
            best = (score, c, model)
    return best[1], best[2], reports
