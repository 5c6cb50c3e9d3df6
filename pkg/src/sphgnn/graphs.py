"""Training/inference graph samples assembled from trajectory frames."""

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import SegmentPlan
from .box import DomainSpec, min_image
from .neighbors import build_edges


@dataclass
class GraphSample:
    """One model input: node histories, connectivity, per-edge geometry.

    Velocities are frame-unit position differences (most recent at index
    ``[:, -1]``); ``force`` is the external acceleration in frame units.
    Edges are stored in a canonical order -- sorted by (receiver, distance,
    displacement) -- which is a relabeling-invariant key, so neighbor sums
    accumulate in the same sequence no matter how nodes were numbered and
    permutation equivariance holds bit-for-bit.
    """

    positions: np.ndarray  # (N, 3) current frame, wrapped
    vel_history: np.ndarray  # (N, H, 3)
    force: np.ndarray  # (N, 3)
    senders: np.ndarray  # (E,)
    receivers: np.ndarray  # (E,)
    disp: np.ndarray  # (E, 3) minimum image, sender -> receiver
    dist: np.ndarray  # (E,)
    box: np.ndarray  # (3,)
    radius: float
    recv_plan: SegmentPlan
    send_plan: SegmentPlan
    target: np.ndarray | None = None  # (N, 3) frame-unit accelerations

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.senders.shape[0]

    @property
    def history(self) -> int:
        return self.vel_history.shape[1]


def _canonical_edge_order(receivers, dist, disp) -> np.ndarray:
    # lexsort: last key is primary
    return np.lexsort((disp[:, 2], disp[:, 1], disp[:, 0], dist, receivers))


def assemble_sample(
    window: np.ndarray,
    domain: DomainSpec,
    radius: float,
    force: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> GraphSample:
    """Build a sample from H+1 consecutive position frames ``window``.

    ``window`` has shape (H+1, N, 3); the last frame is current. Velocities
    are minimum-image frame differences.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[0] < 2:
        raise ValueError("window must be (H+1, N, 3) with H >= 1")
    box = domain.array
    vel = min_image(window[1:] - window[:-1], box)  # (H, N, 3)
    vel_history = np.ascontiguousarray(np.transpose(vel, (1, 0, 2)))
    positions = window[-1]
    n = positions.shape[0]
    if force is None:
        force = np.zeros((n, 3))

    edges = build_edges(positions, domain, radius)
    order = _canonical_edge_order(edges.receivers, edges.dist, edges.disp)
    senders = edges.senders[order]
    receivers = edges.receivers[order]
    return GraphSample(
        positions=positions,
        vel_history=vel_history,
        force=np.asarray(force, dtype=np.float64),
        senders=senders,
        receivers=receivers,
        disp=edges.disp[order],
        dist=edges.dist[order],
        box=box,
        radius=float(radius),
        recv_plan=SegmentPlan(receivers, n),
        send_plan=SegmentPlan(senders, n),
        target=None if target is None else np.asarray(target, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# sample transforms used by model code and symmetry tests


def rotate_sample(sample: GraphSample, rot: np.ndarray) -> GraphSample:
    """Apply an orthogonal matrix to every vector quantity (graph topology
    fixed; positions are only consumed through displacements)."""
    return replace(
        sample,
        vel_history=sample.vel_history @ rot.T,
        force=sample.force @ rot.T,
        disp=sample.disp @ rot.T,
        target=None if sample.target is None else sample.target @ rot.T,
    )


def permute_sample(sample: GraphSample, perm: np.ndarray) -> GraphSample:
    """Relabel nodes: node i of the result is node perm[i] of the input.

    Rebuilds the canonical edge order from the relabeled geometry, exactly as
    ``assemble_sample`` would.
    """
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    senders = inv[sample.senders]
    receivers = inv[sample.receivers]
    order = _canonical_edge_order(receivers, sample.dist, sample.disp)
    senders = senders[order]
    receivers = receivers[order]
    return replace(
        sample,
        positions=sample.positions[perm],
        vel_history=sample.vel_history[perm],
        force=sample.force[perm],
        senders=senders,
        receivers=receivers,
        disp=sample.disp[order],
        dist=sample.dist[order],
        recv_plan=SegmentPlan(receivers, sample.n_nodes),
        send_plan=SegmentPlan(senders, sample.n_nodes),
        target=None if sample.target is None else sample.target[perm],
    )
