"""
Block scaling that turns the near-field matrix into a block-diagonal one.

Leaves are eliminated one after another in the given order. Eliminating
leaf i with diagonal block Z_ii produces

    right coefficients  alpha_ij = -Z_ii^{-1} Z_ij   for active neighbours j
    left coefficients   beta_ji  = -Z_ji Z_ii^{-1}   (alpha_ij^T in symmetric mode)

and the Schur update Z_jl <- Z_jl + beta_ji Z_il on the remaining leaves.
Fill-in blocks created by the updates are kept exactly. With L and R the
products of the left and right unit block-triangular factors,

    L Z_N R = D = diag(Z~_ii),   so   Z_N^{-1} = R D^{-1} L.

Vectors stay in the original basis ordering; leaf index arrays select the
pieces each step touches.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from hpscatter.errors import DimensionError, SingularBlockError

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-14


@dataclass
class ScalingStep:
    leaf: int
    right: Dict[int, np.ndarray]
    left: Optional[Dict[int, np.ndarray]] = None  # None in symmetric mode
    updates: int = 0

    def left_coefficient(self, j: int) -> np.ndarray:
        if self.left is None:
            return self.right[j].T
        return self.left[j]


@dataclass
class ScaledNearField:
    """Factorized block-diagonal near field"""

    leaf_indices: Dict[int, np.ndarray]
    blocks: Dict[int, np.ndarray]
    factors: Dict[int, Tuple[np.ndarray, np.ndarray]]
    n: int

    def apply_Dinv(self, v: np.ndarray) -> np.ndarray:
        return apply_Dinv(self, v)

    def storage(self) -> int:
        return sum(block.size for block in self.blocks.values())


@dataclass
class ScalingSet:
    steps: List[ScalingStep]
    leaf_indices: Dict[int, np.ndarray]
    n: int
    symmetric: bool
    fill_in: int = 0
    order: List[int] = field(default_factory=list)

    def storage(self) -> int:
        total = 0
        for step in self.steps:
            total += sum(c.size for c in step.right.values())
            if step.left is not None:
                total += sum(c.size for c in step.left.values())
        return total

    def report(self) -> Dict[str, float]:
        updates = [step.updates for step in self.steps]
        return {
            "steps": len(self.steps),
            "symmetric": self.symmetric,
            "fill_in_blocks": self.fill_in,
            "coefficient_blocks": sum(len(step.right) for step in self.steps),
            "schur_updates_total": int(sum(updates)),
            "schur_updates_max": int(max(updates)) if updates else 0,
            "stored_complex": self.storage(),
        }


def _factorize(block: np.ndarray, leaf: int) -> Tuple[np.ndarray, np.ndarray]:
    lu, piv = scipy.linalg.lu_factor(block)
    smallest = np.abs(np.diag(lu)).min() if lu.size else 0.0
    if smallest < PIVOT_TOLERANCE * max(np.linalg.norm(block), np.finfo(float).tiny):
        raise SingularBlockError(f"Near-field diagonal block of leaf {leaf} is singular (pivot {smallest:.3e})", leaf)
    return lu, piv


def symmetrize_near_blocks(blocks: Mapping[Tuple[int, int], np.ndarray]) -> Dict[Tuple[int, int], np.ndarray]:
    """Replace Z_N by (Z_N + Z_N^T) / 2 block by block"""
    result = {}
    for (t, s), block in blocks.items():
        mirror = blocks.get((s, t))
        result[(t, s)] = 0.5 * (block + mirror.T) if mirror is not None else block
    return result


def compute_scaling(
    near_blocks: Mapping[Tuple[int, int], np.ndarray],
    order: Sequence[int],
    leaf_indices: Mapping[int, np.ndarray],
    symmetric: bool = False,
) -> Tuple[ScalingSet, ScaledNearField]:
    """
    Eliminate the near field leaf by leaf in ``order``.

    ``near_blocks`` maps (row leaf, col leaf) to dense blocks and must contain
    every diagonal block. ``leaf_indices`` maps each leaf to its basis indices.
    """
    order = [int(leaf) for leaf in order]
    missing = [leaf for leaf in order if (leaf, leaf) not in near_blocks]
    if missing:
        raise ValueError(f"Near field lacks diagonal blocks for leaves {missing}")
    n = int(sum(len(leaf_indices[leaf]) for leaf in order))

    work: Dict[int, Dict[int, np.ndarray]] = {leaf: {} for leaf in order}
    for (t, s), block in near_blocks.items():
        work[t][s] = np.array(block, dtype=complex)
    columns: Dict[int, set] = {leaf: set() for leaf in order}
    for t, row in work.items():
        for s in row:
            columns[s].add(t)

    steps: List[ScalingStep] = []
    blocks: Dict[int, np.ndarray] = {}
    factors: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    fill_in = 0
    for leaf in order:
        diag = work[leaf].pop(leaf)
        columns[leaf].discard(leaf)
        factor = _factorize(diag, leaf)
        blocks[leaf] = diag
        factors[leaf] = factor

        right_neighbours = sorted(work[leaf])
        left_neighbours = sorted(columns[leaf])
        right = {j: -scipy.linalg.lu_solve(factor, work[leaf][j]) for j in right_neighbours}
        if symmetric:
            left = None
            beta = {j: right[j].T for j in right_neighbours}
        else:
            # beta^T = -Z_ii^{-T} Z_ji^T
            left = {j: -scipy.linalg.lu_solve(factor, work[j][leaf].T, trans=1).T for j in left_neighbours}
            beta = left

        updates = 0
        for j in beta:
            for l in right_neighbours:
                update = beta[j] @ work[leaf][l]
                if l in work[j]:
                    work[j][l] += update
                else:
                    work[j][l] = update
                    columns[l].add(j)
                    if j != l:
                        fill_in += 1
                updates += 1

        for j in right_neighbours:
            columns[j].discard(leaf)
        for j in left_neighbours:
            work[j].pop(leaf, None)
        del work[leaf]
        steps.append(ScalingStep(leaf=leaf, right=right, left=left, updates=updates))

    indices = {leaf: np.asarray(leaf_indices[leaf]) for leaf in order}
    scaling = ScalingSet(steps=steps, leaf_indices=indices, n=n, symmetric=symmetric, fill_in=fill_in, order=order)
    near = ScaledNearField(leaf_indices=indices, blocks=blocks, factors=factors, n=n)
    logger.info(
        f"Near-field scaling: {len(order)} leaves, {fill_in} fill-in blocks, "
        f"{scaling.storage()} stored coefficients ({'symmetric' if symmetric else 'general'} mode)"
    )
    return scaling, near


def _prepare(v: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim not in (1, 2) or v.shape[0] != n:
        raise DimensionError(f"Vector of shape {v.shape} does not match scaling size {n}")
    return np.array(v, dtype=complex)


def apply_right(s: ScalingSet, v: np.ndarray) -> np.ndarray:
    """x = R v with R = R_1 R_2 ... R_K; the last elimination step acts first"""
    x = _prepare(v, s.n)
    idx = s.leaf_indices
    for step in reversed(s.steps):
        if not step.right:
            continue
        acc = sum(coef @ x[idx[j]] for j, coef in step.right.items())
        x[idx[step.leaf]] += acc
    return x


def apply_left(s: ScalingSet, v: np.ndarray) -> np.ndarray:
    """b~ = L v with L = L_K ... L_2 L_1; the first elimination step acts first"""
    b = _prepare(v, s.n)
    idx = s.leaf_indices
    for step in s.steps:
        source = b[idx[step.leaf]]
        neighbours = step.right.keys() if step.left is None else step.left.keys()
        for j in neighbours:
            b[idx[j]] += step.left_coefficient(j) @ source
    return b


def apply_Dinv(d: ScaledNearField, v: np.ndarray) -> np.ndarray:
    """Per-leaf triangular solves with the factorized diagonal blocks"""
    x = _prepare(v, d.n)
    for leaf, factor in d.factors.items():
        rows = d.leaf_indices[leaf]
        x[rows] = scipy.linalg.lu_solve(factor, x[rows])
    return x


def offdiagonal_ratio(
    near_blocks: Mapping[Tuple[int, int], np.ndarray], scaling: ScalingSet, dense_cap: int = 8000
) -> float:
    """|offdiag(L Z_N R)|_F / |Z_N|_F with the leaf block structure, by explicit dense products"""
    n = scaling.n
    if n > dense_cap:
        raise ValueError(f"offdiagonal_ratio materializes an {n}x{n} matrix; limit is {dense_cap}")
    z = np.zeros((n, n), dtype=complex)
    for (t, s), block in near_blocks.items():
        z[np.ix_(scaling.leaf_indices[t], scaling.leaf_indices[s])] = block
    identity = np.eye(n, dtype=complex)
    right = apply_right(scaling, identity)
    left = apply_left(scaling, identity)
    scaled = left @ z @ right
    mask = np.ones((n, n), dtype=bool)
    for rows in scaling.leaf_indices.values():
        mask[np.ix_(rows, rows)] = False
    return float(np.linalg.norm(scaled[mask]) / np.linalg.norm(z))


def count_fill_in(pattern: Mapping[int, Sequence[int]], order: Sequence[int]) -> int:
    """Symbolic fill-in of block elimination on a structurally symmetric leaf graph"""
    adjacency = {leaf: set(pattern.get(leaf, ())) - {leaf} for leaf in order}
    for leaf, neighbours in list(adjacency.items()):
        for j in neighbours:
            adjacency.setdefault(j, set()).add(leaf)
    fill = 0
    for leaf in order:
        neighbours = adjacency.pop(leaf)
        for j in neighbours:
            adjacency[j].discard(leaf)
        ordered = sorted(neighbours)
        for a in ordered:
            for b in ordered:
                if a != b and b not in adjacency[a]:
                    adjacency[a].add(b)
                    fill += 1
    return fill
