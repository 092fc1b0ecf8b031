"""
Hierarchical matrix: dense near-field blocks and low-rank far-field blocks.

Far blocks are built with partially pivoted adaptive cross approximation
and then recompressed with a QR + truncated SVD pass. Block assembly runs on
a thread pool through asyncio; results are gathered in submission order so
the stored matrix does not depend on scheduling.
"""

import asyncio
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.linalg

from hpscatter.cluster_tree import BlockPartition, ClusterTree
from hpscatter.errors import DenseCapExceededError, DimensionError, SingularMatrixError

logger = logging.getLogger(__name__)

DEFAULT_DENSE_CAP = 8000


class MatrixSampler(Protocol):
    n: int

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        ...


class DenseKernelSampler:
    """Sampler backed by an explicit matrix"""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix)
        self.n = self.matrix.shape[0]

    def block(self, rows, cols) -> np.ndarray:
        return self.matrix[np.ix_(np.atleast_1d(rows), np.atleast_1d(cols))]


@dataclass(frozen=True)
class AcaConfig:
    tolerance: float = 1e-4
    max_rank: Optional[int] = None  # None: min(m, n) // 2, exact assembly past it
    recompress: bool = True
    zero_row_retries: int = 3
    seed: Optional[int] = None  # None: evenly spaced check rows

    def __post_init__(self):
        if not 0.0 < self.tolerance < 1.0:
            raise ValueError(f"ACA tolerance must lie in (0, 1), got {self.tolerance}")

    def rank_cap(self, m: int, n: int) -> int:
        cap = self.max_rank if self.max_rank is not None else min(m, n) // 2
        return max(1, min(cap, m, n))


# the cross stop runs this much tighter than eps; the running estimate
# under-reports the residual on oscillatory blocks
ACA_SAFETY = 0.1
CHECK_ROWS = 4


@dataclass
class LowRankBlock:
    rows: np.ndarray
    cols: np.ndarray
    a: np.ndarray  # (m, r)
    b: np.ndarray  # (r, n)
    converged: bool = True
    assembled: bool = False  # truncated SVD of the exact block instead of ACA
    row_node: Optional[int] = None
    col_node: Optional[int] = None

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    @property
    def storage(self) -> int:
        return self.a.size + self.b.size

    def to_dense(self) -> np.ndarray:
        return self.a @ self.b


@dataclass
class DenseBlock:
    row_leaf: int
    col_leaf: int
    rows: np.ndarray
    cols: np.ndarray
    data: np.ndarray

    @property
    def storage(self) -> int:
        return self.data.size


def truncation_rank(s: np.ndarray, tolerance: float) -> int:
    """Smallest rank whose dropped singular values have Frobenius norm <= tolerance * |s|"""
    total = np.linalg.norm(s)
    if total == 0.0:
        return 0
    # tail[k] = |s[k:]|
    tail = np.sqrt(np.cumsum((s * s)[::-1]))[::-1]
    keep = np.flatnonzero(tail > tolerance * total)
    return int(keep[-1]) + 1 if len(keep) else 0


def truncated_svd(dense: np.ndarray, cfg: AcaConfig) -> LowRankBlock:
    m, n = dense.shape
    if dense.size == 0 or not np.any(dense):
        a, b = np.zeros((m, 0), dtype=complex), np.zeros((0, n), dtype=complex)
    else:
        u, s, vh = scipy.linalg.svd(dense, full_matrices=False)
        rank = truncation_rank(s, cfg.tolerance)
        a, b = u[:, :rank] * s[:rank], vh[:rank]
    return LowRankBlock(rows=np.arange(m), cols=np.arange(n), a=a, b=b, assembled=True)


def residual_row(row_sampler, us, vs, i: int) -> np.ndarray:
    row = np.array(row_sampler(i), dtype=complex)
    for u, v in zip(us, vs):
        row -= u[i] * v
    return row


def sampled_residual(row_sampler, us, vs, used_rows: np.ndarray, seed: Optional[int] = None) -> float:
    """Frobenius estimate of the residual from up to CHECK_ROWS non-pivot rows (seeded draw or evenly spaced)"""
    unused = np.flatnonzero(~used_rows)
    if unused.size == 0:
        return 0.0
    count = min(CHECK_ROWS, unused.size)
    if seed is None:
        picks = np.unique(unused[np.linspace(0, unused.size - 1, count).astype(int)])
    else:
        rng = np.random.default_rng([seed, len(used_rows)])
        picks = rng.choice(unused, size=count, replace=False)
    err_sq = sum(float(np.vdot(r, r).real) for r in (residual_row(row_sampler, us, vs, i) for i in picks))
    return float(np.sqrt(err_sq * unused.size / len(picks)))


def aca_build(
    row_sampler: Callable[[int], np.ndarray],
    col_sampler: Callable[[int], np.ndarray],
    m: int,
    n: int,
    cfg: AcaConfig,
    block_sampler: Optional[Callable[[], np.ndarray]] = None,
) -> LowRankBlock:
    """
    Partially pivoted ACA of an m x n block given row and column accessors.

    Stops when |u_r| |v_r| <= 0.1 eps |A B|_F (running estimate including
    cross terms) or when the residual vanishes on a few fresh rows, then
    checks the residual on a handful of rows that were never pivots.

    With the default rank cap, a block that hits the cap or fails the check
    is assembled exactly and truncated by SVD, so it still meets eps. An
    explicit ``max_rank`` is a hard limit: the block is kept as it is,
    marked not converged, and a warning is logged.
    """
    cap = cfg.rank_cap(m, n)
    us: List[np.ndarray] = []
    vs: List[np.ndarray] = []
    used_rows = np.zeros(m, dtype=bool)
    norm_sq = 0.0
    scale = 0.0
    converged = False
    zero_rows = 0
    i = 0
    while len(us) < cap:
        used_rows[i] = True
        row = residual_row(row_sampler, us, vs, i)
        j = int(np.argmax(np.abs(row)))
        pivot = row[j]
        negligible = np.abs(pivot) == 0.0 if scale == 0.0 else np.abs(pivot) <= 1e-14 * scale
        if negligible:
            zero_rows += 1
            if zero_rows > cfg.zero_row_retries or used_rows.all():
                converged = True
                break
            i = int(np.flatnonzero(~used_rows)[0])
            continue
        v_new = row / pivot
        u_new = np.array(col_sampler(j), dtype=complex)
        for u, v in zip(us, vs):
            u_new -= v[j] * u
        u_norm = np.linalg.norm(u_new)
        v_norm = np.linalg.norm(v_new)
        cross = 0.0
        for u, v in zip(us, vs):
            cross += np.real(np.vdot(u, u_new) * np.vdot(v, v_new))
        norm_sq += 2.0 * cross + (u_norm * v_norm) ** 2
        scale = max(scale, float(np.abs(u_new).max() * np.abs(v_new).max()))
        us.append(u_new)
        vs.append(v_new)
        if u_norm * v_norm <= ACA_SAFETY * cfg.tolerance * np.sqrt(max(norm_sq, 0.0)):
            converged = True
            break
        if used_rows.all():
            converged = True
            break
        candidates = np.abs(u_new)
        candidates[used_rows] = -1.0
        i = int(np.argmax(candidates))

    if cfg.max_rank is None:
        if converged:
            estimate = sampled_residual(row_sampler, us, vs, used_rows, cfg.seed)
            converged = estimate <= cfg.tolerance * np.sqrt(max(norm_sq, 0.0))
        if not converged:
            logger.debug(f"ACA on a {m}x{n} block fell back to exact assembly after {len(us)} crosses")
            dense = block_sampler() if block_sampler is not None else np.vstack([row_sampler(k) for k in range(m)])
            return truncated_svd(np.asarray(dense, dtype=complex), cfg)
    elif not converged:
        logger.warning(f"⚠️  ACA hit the rank cap {cap} on a {m}x{n} block before reaching eps={cfg.tolerance}")

    if us:
        a = np.column_stack(us)
        b = np.vstack(vs)
    else:
        a = np.zeros((m, 0), dtype=complex)
        b = np.zeros((0, n), dtype=complex)
    block = LowRankBlock(rows=np.arange(m), cols=np.arange(n), a=a, b=b, converged=converged)
    if cfg.recompress:
        block = recompress(block, cfg)
    return block


def recompress(block: LowRankBlock, cfg: AcaConfig) -> LowRankBlock:
    """QR of both factors, SVD of the small core, drop the tail below eps of the Frobenius norm"""
    if block.rank == 0:
        return block
    qa, ra = scipy.linalg.qr(block.a, mode="economic")
    qb, rb = scipy.linalg.qr(block.b.T, mode="economic")
    u, s, vh = scipy.linalg.svd(ra @ rb.T)
    rank = truncation_rank(s, cfg.tolerance)
    a = qa @ (u[:, :rank] * s[:rank])
    b = vh[:rank] @ qb.T
    return LowRankBlock(
        rows=block.rows,
        cols=block.cols,
        a=a,
        b=b,
        converged=block.converged,
        assembled=block.assembled,
        row_node=block.row_node,
        col_node=block.col_node,
    )


def aca_block(sampler: MatrixSampler, rows: np.ndarray, cols: np.ndarray, cfg: AcaConfig) -> LowRankBlock:
    """ACA of sampler rows x cols, with row/column requests forwarded to the sampler"""
    block = aca_build(
        lambda i: sampler.block(rows[i:i + 1], cols)[0],
        lambda j: sampler.block(rows, cols[j:j + 1])[:, 0],
        len(rows),
        len(cols),
        cfg,
        block_sampler=lambda: sampler.block(rows, cols),
    )
    block.rows = np.asarray(rows)
    block.cols = np.asarray(cols)
    return block


@dataclass
class HMatrix:
    n: int
    tree: ClusterTree
    partition: BlockPartition
    near: Dict[Tuple[int, int], DenseBlock]
    far: List[LowRankBlock]
    symmetric: bool = False
    workers: int = 1
    deterministic: bool = True
    near_block_applications: int = 0
    far_block_applications: int = 0
    matvec_count: int = 0
    near_seconds: float = 0.0
    far_seconds: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != self.n or x.ndim not in (1, 2):
            raise DimensionError(f"Vector of shape {x.shape} does not match operator size {self.n}")
        return x

    def near_matvec(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        y = np.zeros(x.shape, dtype=complex)
        applied = 0
        for (t, s), blk in self.near.items():
            y[blk.rows] += blk.data @ x[blk.cols]
            applied += 1
            if self.symmetric and t != s:
                y[blk.cols] += blk.data.T @ x[blk.rows]
                applied += 1
        with self._lock:
            self.near_block_applications += applied
        return y

    def far_matvec(self, x: np.ndarray) -> np.ndarray:
        """
        Sum of the low-rank block products.

        Deterministic mode accumulates blocks in storage order. Otherwise the
        blocks are split across ``workers`` threads and the partial sums are
        added as they finish, so rounding may differ between runs.
        """
        x = self._check(x)
        if self.deterministic or self.workers <= 1 or len(self.far) < 2:
            y = _far_partial(self.far, x)
        else:
            y = asyncio.run(_far_unordered(self.far, x, self.workers))
        with self._lock:
            self.far_block_applications += len(self.far)
        return y

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.near_matvec(x) + self.far_matvec(x)
        with self._lock:
            self.matvec_count += 1
        return y

    def near_blocks(self) -> Dict[Tuple[int, int], np.ndarray]:
        """All near blocks keyed by (row leaf, col leaf), mirrored blocks expanded"""
        blocks = {}
        for (t, s), blk in self.near.items():
            blocks[(t, s)] = blk.data
            if self.symmetric and t != s:
                blocks[(s, t)] = blk.data.T
        return blocks

    def near_storage(self) -> int:
        return sum(blk.storage for blk in self.near.values())

    def far_storage(self) -> int:
        return sum(blk.storage for blk in self.far)

    def storage(self) -> int:
        """Stored complex numbers"""
        return self.near_storage() + self.far_storage()

    def compression_ratio(self) -> float:
        return self.storage() / float(self.n * self.n)

    def rank_statistics(self) -> Dict[str, float]:
        ranks = np.array([blk.rank for blk in self.far]) if self.far else np.zeros(1)
        return {
            "far_blocks": len(self.far),
            "rank_min": int(ranks.min()),
            "rank_max": int(ranks.max()),
            "rank_mean": float(ranks.mean()),
            "unconverged_blocks": sum(1 for blk in self.far if not blk.converged),
            "assembled_blocks": sum(1 for blk in self.far if blk.assembled),
        }

    def far_block_errors(self, sampler: MatrixSampler, max_entries: int = 1_000_000) -> List[float]:
        """Relative Frobenius error of each far block against its exact assembly"""
        errors = []
        for blk in self.far:
            m, n = blk.shape
            if m * n > max_entries:
                continue
            exact = sampler.block(blk.rows, blk.cols)
            reference = np.linalg.norm(exact)
            errors.append(float(np.linalg.norm(exact - blk.to_dense()) / reference) if reference else 0.0)
        return errors


def _far_partial(blocks: Sequence[LowRankBlock], x: np.ndarray) -> np.ndarray:
    y = np.zeros(x.shape, dtype=complex)
    for blk in blocks:
        if blk.rank:
            y[blk.rows] += blk.a @ (blk.b @ x[blk.cols])
    return y


async def _far_unordered(blocks: Sequence[LowRankBlock], x: np.ndarray, workers: int) -> np.ndarray:
    groups = [blocks[i::workers] for i in range(workers)]
    y = np.zeros(x.shape, dtype=complex)
    for finished in asyncio.as_completed([asyncio.to_thread(_far_partial, group, x) for group in groups]):
        y += await finished
    return y


async def _gather_blocks(jobs: List[Callable[[], object]], workers: int) -> List[object]:
    semaphore = asyncio.Semaphore(workers)

    async def run(job):
        async with semaphore:
            return await asyncio.to_thread(job)

    return await asyncio.gather(*(run(job) for job in jobs))


def run_jobs(jobs: List[Callable[[], object]], workers: int = 1) -> List[object]:
    """Run independent jobs, results in submission order"""
    if workers <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    return asyncio.run(_gather_blocks(jobs, workers))


def assemble_hmatrix(
    sampler: MatrixSampler,
    tree: ClusterTree,
    partition: BlockPartition,
    cfg: Optional[AcaConfig] = None,
    symmetric: bool = False,
    workers: int = 1,
    deterministic: bool = True,
) -> HMatrix:
    """Dense near blocks, ACA far blocks; symmetric mode keeps only near blocks with row leaf >= col leaf"""
    cfg = cfg or AcaConfig()
    near_pairs = [(t, s) for t, s in partition.near if not symmetric or t >= s]

    def near_job(t, s):
        rows, cols = tree.indices(t), tree.indices(s)
        return DenseBlock(row_leaf=t, col_leaf=s, rows=rows, cols=cols, data=sampler.block(rows, cols))

    def far_job(t, s):
        blk = aca_block(sampler, tree.indices(t), tree.indices(s), cfg)
        blk.row_node, blk.col_node = t, s
        return blk

    jobs = [lambda t=t, s=s: near_job(t, s) for t, s in near_pairs]
    jobs += [lambda t=t, s=s: far_job(t, s) for t, s, _ in partition.far]
    logger.info(
        f"Assembling H-matrix: {len(near_pairs)} near and {len(partition.far)} far blocks on {workers} worker(s)"
    )
    started = time.perf_counter()
    near_results = run_jobs(jobs[: len(near_pairs)], workers)
    near_seconds = time.perf_counter() - started
    far_results = run_jobs(jobs[len(near_pairs):], workers)
    far_seconds = time.perf_counter() - started - near_seconds
    near = {(blk.row_leaf, blk.col_leaf): blk for blk in near_results}
    h = HMatrix(
        n=sampler.n,
        tree=tree,
        partition=partition,
        near=near,
        far=list(far_results),
        symmetric=symmetric,
        workers=workers,
        deterministic=deterministic,
        near_seconds=near_seconds,
        far_seconds=far_seconds,
    )
    stats = h.rank_statistics()
    logger.info(
        f"H-matrix ready: storage {h.storage()} ({100.0 * h.compression_ratio():.1f}% of dense), "
        f"far ranks {stats['rank_min']}..{stats['rank_max']}"
    )
    if stats["unconverged_blocks"]:
        logger.warning(f"⚠️  {stats['unconverged_blocks']} far block(s) stopped at the rank cap")
    return h


def materialize_dense(h: HMatrix, dense_cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    if h.n > dense_cap:
        raise DenseCapExceededError(f"N={h.n} exceeds the dense cap of {dense_cap} unknowns")
    z = np.zeros((h.n, h.n), dtype=complex)
    for (t, s), data in h.near_blocks().items():
        z[np.ix_(h.tree.indices(t), h.tree.indices(s))] = data
    for blk in h.far:
        z[np.ix_(blk.rows, blk.cols)] = blk.to_dense()
    return z


def dense_direct_solve(dense: np.ndarray, b: np.ndarray, dense_cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """LU with partial pivoting; rejects matrices whose smallest pivot is below 1e-14 |Z|"""
    dense = np.asarray(dense)
    if dense.shape[0] > dense_cap:
        raise DenseCapExceededError(f"N={dense.shape[0]} exceeds the dense cap of {dense_cap} unknowns")
    if np.asarray(b).shape[0] != dense.shape[0]:
        raise DimensionError(f"Right-hand side of length {np.asarray(b).shape[0]} for a {dense.shape[0]}-unknown system")
    lu, piv = scipy.linalg.lu_factor(dense, check_finite=True)
    smallest = np.abs(np.diag(lu)).min()
    if smallest < 1e-14 * np.linalg.norm(dense):
        raise SingularMatrixError(f"Matrix is singular to working precision (pivot {smallest:.3e})")
    return scipy.linalg.lu_solve((lu, piv), b)
