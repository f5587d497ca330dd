"""Expert placement and all-to-all byte accounting for dispatch + combine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import GroupAssignment
from .numerics import NumericsError

GROUP_LOCAL = "group-local"
ROUND_ROBIN = "round-robin"
POLICIES = (GROUP_LOCAL, ROUND_ROBIN)


class CommError(NumericsError):
    pass


@dataclass(frozen=True)
class Placement:
    device_of_expert: tuple[int, ...]
    devices: int
    policy: str

    def device(self, expert: int) -> int:
        if not 0 <= expert < len(self.device_of_expert):
            raise CommError(f"expert {expert} is not placed")
        return self.device_of_expert[expert]

    def to_dict(self) -> dict:
        return {"devices": self.devices, "policy": self.policy, "device_of_expert": list(self.device_of_expert)}


def place_experts(assignment: GroupAssignment, devices: int, policy: str = GROUP_LOCAL) -> Placement:
    """Group-local puts whole groups on devices in contiguous blocks of ``G/devices``;
    round-robin puts expert ``i`` on ``i % devices``."""
    if devices < 1:
        raise CommError(f"devices must be >= 1, got {devices}")
    e = assignment.e
    if policy == GROUP_LOCAL:
        if assignment.g % devices:
            raise CommError(f"G={assignment.g} is not divisible by devices={devices}")
        per = assignment.g // devices
        dev = [0] * e
        for gid, grp in enumerate(assignment.groups):
            for i in grp:
                dev[i] = gid // per
    elif policy == ROUND_ROBIN:
        dev = [i % devices for i in range(e)]
    else:
        raise CommError(f"unknown placement policy {policy!r}")
    return Placement(tuple(dev), devices, policy)


def token_source_device(token_id: int, devices: int) -> int:
    """Data-parallel proxy: tokens are spread round-robin over devices."""
    return token_id % devices


@dataclass
class CommReport:
    bytes_sent: np.ndarray  # devices x devices, row = sender
    total_bytes: int
    transfers: int

    def to_dict(self) -> dict:
        return {
            "devices": int(self.bytes_sent.shape[0]),
            "bytes_sent": [[int(v) for v in row] for row in self.bytes_sent],
            "total_bytes": int(self.total_bytes),
            "transfers": int(self.transfers),
        }


def simulate_dispatch(decisions, placement: Placement, bytes_per_token: int) -> CommReport:
    """Byte matrix for sending each token to every remote selected expert and back.

    Each (token, expert) pair on different devices adds ``bytes_per_token``
    to ``[src, dst]`` and again to ``[dst, src]``. Integer arithmetic only.
    """
    if bytes_per_token < 0:
        raise CommError("bytes_per_token must be >= 0")
    n = placement.devices
    mat = np.zeros((n, n), dtype=np.int64)
    transfers = 0
    for d in decisions:
        src = token_source_device(d.token_id, n)
        for i in d.experts:
            dst = placement.device(int(i))
            if dst == src:
                continue
            mat[src, dst] += bytes_per_token
            mat[dst, src] += bytes_per_token
            transfers += 2
    return CommReport(mat, int(mat.sum()), transfers)


def bytes_per_token(d_in: int, activation_bytes: int = 2) -> int:
    return int(d_in) * int(activation_bytes)


def compare_policies(flat_decisions, hier_decisions, placement: Placement, bytes_per_token: int) -> dict:
    """Dispatch volume of both decision sets and ``1 - hier/flat`` (None if flat is 0)."""
    flat = simulate_dispatch(flat_decisions, placement, bytes_per_token)
    hier = simulate_dispatch(hier_decisions, placement, bytes_per_token)
    reduction = None if flat.total_bytes == 0 else 1.0 - hier.total_bytes / flat.total_bytes
    return {
        "placement": placement.to_dict(),
        "bytes_per_token": int(bytes_per_token),
        "flat": flat.to_dict(),
        "hier": hier.to_dict(),
        "reduction_fraction": reduction,
    }
