"""Deterministic finite-horizon gridworld with exact differentiable regret.

Tasks are navigation layouts on a small grid: reach the goal, avoid trap
cells. The task distribution is a mixture of a trap-free bulk mode and a
rare densely-trapped mode. Because transitions are deterministic and the
horizon finite, backward induction gives exact optimal values and exact
policy values; the latter are differentiable in the action logits, so a
policy's expected regret is an exact, differentiable risk score.

Conventions (config-visible, see EnvParams):
* four moves (up/down/left/right); moving off-grid is a no-op that still
  pays the step cost;
* the goal is absorbing, paying goal_reward once on entry; entering a
  trap pays trap_penalty and is likewise absorbing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node

__all__ = [
    "EnvParams",
    "GridTask",
    "TaskBank",
    "generate_task",
    "generate_bank",
    "transition_tables",
    "optimal_values",
    "policy_values",
    "policy_values_batch",
    "regret",
    "PolicyNet",
    "pretrain",
    "uniform_policy_return",
]

ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


@dataclass(frozen=True)
class EnvParams:
    horizon: int = 10
    gamma: float = 1.0
    step_cost: float = -0.01
    goal_reward: float = 1.0
    trap_penalty: float = -1.0
    min_start_goal_dist: int = 5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class GridTask:
    width: int
    height: int
    start: int      # flat cell index row * width + col
    goal: int
    traps: frozenset
    severity: str   # "bulk" | "rare"

    def __post_init__(self):
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        if self.start in self.traps or self.goal in self.traps:
            raise ValueError("start/goal must not be traps")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def key(self) -> tuple:
        return (self.width, self.height, self.start, self.goal, tuple(sorted(self.traps)), self.severity)

    def trap_mask(self) -> np.ndarray:
        m = np.zeros(self.n_cells, dtype=bool)
        if self.traps:
            m[list(self.traps)] = True
        return m

    def to_record(self) -> str:
        bits = 0
        for c in self.traps:
            bits |= 1 << c
        return f"{self.width} {self.height} {self.start} {self.goal} {bits:x} {self.severity}"

    @classmethod
    def from_record(cls, line: str) -> "GridTask":
        w, h, s, g, bits_hex, sev = line.split()
        bits = int(bits_hex, 16)
        traps = frozenset(c for c in range(int(w) * int(h)) if bits >> c & 1)
        return cls(int(w), int(h), int(s), int(g), traps, sev)


def _manhattan(a: int, b: int, width: int) -> int:
    return abs(a // width - b // width) + abs(a % width - b % width)


def generate_task(
    rng: np.random.Generator,
    severity: str = "bulk",
    width: int = 8,
    height: int = 8,
    env: EnvParams | None = None,
    trap_density: float = 0.75,
    max_attempts: int = 50_000,
) -> GridTask:
    """Rejection-sample one layout of the given severity.

    Bulk tasks have no traps. Rare tasks place each non-start/non-goal
    cell as a trap independently at ``trap_density`` and reject layouts
    whose goal cannot be reached trap-free within the horizon.
    """
    env = env or EnvParams()
    n = width * height
    max_dist = (width - 1) + (height - 1)
    if max_dist < env.min_start_goal_dist:
        raise ValueError("grid too small for the start-goal distance constraint")
    if severity not in ("bulk", "rare"):
        raise ValueError(f"unknown severity {severity!r}")
    for _ in range(max_attempts):
        start, goal = rng.choice(n, size=2, replace=False)
        if _manhattan(int(start), int(goal), width) < env.min_start_goal_dist:
            continue
        if severity == "bulk":
            return GridTask(width, height, int(start), int(goal), frozenset(), "bulk")
        eligible = [c for c in range(n) if c not in (start, goal)]
        traps = frozenset(c for c in eligible if rng.uniform() < trap_density)
        task = GridTask(width, height, int(start), int(goal), traps, "rare")
        if _reachable_within(task, env.horizon):
            return task
    raise RuntimeError(f"rejection budget exhausted generating a {severity} task")


def _reachable_within(task: GridTask, horizon: int) -> bool:
    """BFS distance from start to goal avoiding traps, within horizon."""
    width = task.width
    n = task.n_cells
    traps = task.trap_mask()
    dist = np.full(n, -1, dtype=int)
    dist[task.start] = 0
    frontier = [task.start]
    while frontier:
        nxt = []
        for c in frontier:
            if dist[c] >= horizon:
                continue
            row, col = c // width, c % width
            for dr, dc in ACTIONS:
                r2, c2 = row + dr, col + dc
                if not (0 <= r2 < task.height and 0 <= c2 < width):
                    continue
                c_flat = r2 * width + c2
                if traps[c_flat] or dist[c_flat] >= 0:
                    continue
                dist[c_flat] = dist[c] + 1
                if c_flat == task.goal:
                    return True
                nxt.append(c_flat)
        frontier = nxt
    return dist[task.goal] >= 0


@dataclass
class TaskBank:
    tasks: list
    eps: float
    seed: int

    @property
    def rare_count(self) -> int:
        return sum(1 for t in self.tasks if t.severity == "rare")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed} eps={self.eps}\n")
            for t in self.tasks:
                fh.write(t.to_record() + "\n")

    @classmethod
    def load(cls, path) -> "TaskBank":
        tasks = []
        seed, eps = 0, 0.0
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("#"):
                    for part in line[1:].split():
                        key, _, val = part.partition("=")
                        if key == "seed":
                            seed = int(val)
                        elif key == "eps":
                            eps = float(val)
                    continue
                if line:
                    tasks.append(GridTask.from_record(line))
        return cls(tasks=tasks, eps=eps, seed=seed)


def generate_bank(
    rng: np.random.Generator,
    size: int,
    eps: float = 1.54e-3,
    seed: int = 0,
    width: int = 8,
    height: int = 8,
    env: EnvParams | None = None,
) -> TaskBank:
    """Bank with round(size * eps) rare-mode layouts.

    Layouts are de-duplicated as long as distinct ones remain. Bulk
    layouts on a width x height grid form a small finite space (ordered
    start/goal pairs at the required distance), so large banks must
    repeat them: each full pass hands out every valid layout once, in a
    fresh random order, keeping the multiplicities within one of each
    other. Rare layouts draw from a trap-set space big enough that
    rejection-until-distinct always terminates in practice.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    env = env or EnvParams()
    n_rare = int(round(size * eps))
    tasks = []
    seen = set()
    made = 0
    while made < n_rare:
        t = generate_task(rng, "rare", width, height, env)
        if t.key() in seen:
            continue
        seen.add(t.key())
        tasks.append(t)
        made += 1

    n = width * height
    valid = [(s, g) for s in range(n) for g in range(n)
             if s != g and _manhattan(s, g, width) >= env.min_start_goal_dist]
    need = size - n_rare
    while need > 0:
        order = rng.permutation(len(valid))[: min(need, len(valid))]
        for i in order:
            s, g = valid[i]
            tasks.append(GridTask(width, height, s, g, frozenset(), "bulk"))
        need -= order.size

    order = rng.permutation(len(tasks))
    return TaskBank(tasks=[tasks[i] for i in order], eps=eps, seed=seed)


# ---------------------------------------------------------------------------
# dynamics and value iteration
# ---------------------------------------------------------------------------

_TABLE_CACHE: dict = {}


def transition_tables(task: GridTask, env: EnvParams):
    """Per-(cell, action) next cell and reward, plus the active-cell mask.

    Absorbing cells (goal, traps) are flagged inactive; their value is 0
    at every timestep and rewards are paid on entry from active cells.
    Results are memoized per (layout, env): the experiment re-scores the
    same task pools every step, and banks repeat layouts.
    """
    key = (task.key(), env.step_cost, env.goal_reward, env.trap_penalty)
    hit = _TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    n = task.n_cells
    width = task.width
    next_cell = np.empty((n, 4), dtype=int)
    for c in range(n):
        row, col = c // width, c % width
        for a, (dr, dc) in enumerate(ACTIONS):
            r2, c2 = row + dr, col + dc
            next_cell[c, a] = r2 * width + c2 if 0 <= r2 < task.height and 0 <= c2 < width else c
    traps = task.trap_mask()
    reward = np.full((n, 4), env.step_cost)
    reward[next_cell == task.goal] += env.goal_reward
    reward[traps[next_cell]] += env.trap_penalty
    active = np.ones(n, dtype=bool)
    active[task.goal] = False
    active[traps] = False
    for arr in (next_cell, reward, active):
        arr.setflags(write=False)
    if len(_TABLE_CACHE) < 200_000:
        _TABLE_CACHE[key] = (next_cell, reward, active)
    return next_cell, reward, active


_VSTAR_CACHE: dict = {}


def optimal_values(task: GridTask, env: EnvParams | None = None) -> np.ndarray:
    """Exact V*(cell, t) by backward induction; shape (horizon+1, cells).

    Memoized per (layout, env), like the transition tables.
    """
    env = env or EnvParams()
    key = (task.key(), env.horizon, env.gamma,
           env.step_cost, env.goal_reward, env.trap_penalty)
    hit = _VSTAR_CACHE.get(key)
    if hit is not None:
        return hit
    next_cell, reward, active = transition_tables(task, env)
    H = env.horizon
    V = np.zeros((H + 1, task.n_cells))
    for t in range(H - 1, -1, -1):
        Q = reward + env.gamma * V[t + 1][next_cell]
        V[t] = np.where(active, Q.max(axis=1), 0.0)
    V.setflags(write=False)
    if len(_VSTAR_CACHE) < 200_000:
        _VSTAR_CACHE[key] = V
    return V


def policy_values(task: GridTask, env: EnvParams, logits: Node) -> Node:
    """Start-state value of the softmax policy; differentiable in logits.

    ``logits`` has shape (horizon, cells, 4).
    """
    H = env.horizon
    if logits.value.shape != (H, task.n_cells, 4):
        raise ValueError(f"logits shape {logits.value.shape} != {(H, task.n_cells, 4)}")
    batched = ad.reshape(logits, (1, H, task.n_cells, 4))
    return policy_values_batch([task], env, batched)


def policy_values_batch(tasks: list, env: EnvParams, logits: Node) -> Node:
    """Start-state values for a batch of tasks; shape (batch,).

    ``logits`` has shape (batch, horizon, cells, 4). All tasks must share
    the grid dimensions (the next-cell map depends only on geometry).
    """
    B = len(tasks)
    n = tasks[0].n_cells
    H = env.horizon
    if logits.value.shape != (B, H, n, 4):
        raise ValueError(f"logits shape {logits.value.shape} != {(B, H, n, 4)}")
    tables = [transition_tables(t, env) for t in tasks]
    next_cell = tables[0][0]  # geometry-only
    rewards = np.stack([tab[1] for tab in tables])      # (B, n, 4)
    actives = np.stack([tab[2] for tab in tables])      # (B, n)
    pi = ad.softmax(logits, axis=-1)
    reward_node = ad.constant(rewards)
    active_node = ad.constant(actives.astype(float))
    V = ad.constant(np.zeros((B, n)))
    for t in range(H - 1, -1, -1):
        cont = ad.take(V, next_cell, axis=1)                 # (B, n, 4)
        Q = reward_node + ad.mul(ad.constant(np.full((), env.gamma)), cont)
        pi_t = ad.reshape(ad.take(pi, np.asarray(t), axis=1), (B, n, 4))
        V = ad.mul(active_node, ad.sum_(ad.mul(pi_t, Q), axis=-1))
    starts = np.array([i * n + t.start for i, t in enumerate(tasks)])
    return ad.take(ad.reshape(V, (B * n,)), starts, axis=0)


def regret(task: GridTask, env: EnvParams, logits: Node) -> Node:
    """V*(start, 0) - V^pi(start, 0); nonnegative up to roundoff."""
    vstar = float(optimal_values(task, env)[0, task.start])
    return ad.sub(ad.constant(np.full((), vstar)), ad.reshape(policy_values(task, env, logits), ()))


def regret_batch(tasks: list, env: EnvParams, logits: Node, vstar: np.ndarray | None = None) -> Node:
    if vstar is None:
        vstar = np.array([optimal_values(t, env)[0, t.start] for t in tasks])
    return ad.sub(ad.constant(vstar), policy_values_batch(tasks, env, logits))


def uniform_policy_return(task: GridTask, env: EnvParams | None = None) -> float:
    """Start value of the uniform-random policy (enumeration-free check)."""
    env = env or EnvParams()
    logits = ad.constant(np.zeros((env.horizon, task.n_cells, 4)))
    return float(policy_values(task, env, logits).value[0])


# ---------------------------------------------------------------------------
# task-conditioned policy network
# ---------------------------------------------------------------------------

def _neighbor_index(width: int, height: int) -> np.ndarray:
    """3x3 neighborhood indices per cell into the zero-padded cell axis.

    Index ``n`` (one past the last cell) designates the zero-pad slot.
    """
    n = width * height
    nb = np.full((n, 9), n, dtype=int)
    for c in range(n):
        row, col = c // width, c % width
        k = 0
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r2, c2 = row + dr, col + dc
                if 0 <= r2 < height and 0 <= c2 < width:
                    nb[c, k] = r2 * width + c2
                k += 1
    return nb


class PolicyNet:
    """Task-conditioned convolutional policy over (timestep, cell, action).

    Two 3x3 conv layers on the layout channels (traps, goal, start), with
    a task-embedding vector FiLM-added to the channel biases, then a
    linear head emitting logits for every (timestep, cell, action).
    """

    def __init__(self, width: int = 8, height: int = 8, horizon: int = 10,
                 channels: int = 32, embed_dim: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.width, self.height, self.horizon = width, height, horizon
        self.channels, self.embed_dim = channels, embed_dim
        n = width * height
        self.n_cells = n
        self.nb = _neighbor_index(width, height)
        C_in = 3

        def init(*shape, fan_in):
            return ad.parameter(rng.standard_normal(shape) * math.sqrt(1.0 / fan_in))

        self.We = init(C_in * n, embed_dim, fan_in=C_in * n)
        self.be = ad.parameter(np.zeros(embed_dim))
        self.Wf1 = init(embed_dim, channels, fan_in=embed_dim)
        self.Wf2 = init(embed_dim, channels, fan_in=embed_dim)
        self.W1 = init(C_in * 9, channels, fan_in=C_in * 9)
        self.b1 = ad.parameter(np.zeros(channels))
        self.W2 = init(channels * 9, channels, fan_in=channels * 9)
        self.b2 = ad.parameter(np.zeros(channels))
        self.Wh = init(channels, horizon * 4, fan_in=channels)
        self.bh = ad.parameter(np.zeros(horizon * 4))

    @property
    def params(self) -> list[Node]:
        return [self.We, self.be, self.Wf1, self.Wf2,
                self.W1, self.b1, self.W2, self.b2, self.Wh, self.bh]

    def param_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params]

    def set_param_values(self, values) -> None:
        for p, v in zip(self.params, values):
            p.value[...] = v

    def save(self, path, **meta) -> None:
        arrays = {f"p{i}": p.value for i, p in enumerate(self.params)}
        tagged = {f"meta_{k}": np.asarray(v) for k, v in meta.items()}
        np.savez(path, version=1, width=self.width, height=self.height,
                 horizon=self.horizon, channels=self.channels,
                 embed_dim=self.embed_dim, **arrays, **tagged)

    @staticmethod
    def read_meta(path) -> dict:
        data = np.load(path)
        return {k[len("meta_"):]: data[k][()] for k in data.files if k.startswith("meta_")}

    @classmethod
    def load(cls, path) -> "PolicyNet":
        data = np.load(path)
        net = cls(width=int(data["width"]), height=int(data["height"]),
                  horizon=int(data["horizon"]), channels=int(data["channels"]),
                  embed_dim=int(data["embed_dim"]))
        net.set_param_values([data[f"p{i}"] for i in range(len(net.params))])
        return net

    def features(self, tasks: list) -> np.ndarray:
        """Layout channels, shape (batch, 3, cells)."""
        B = len(tasks)
        x = np.zeros((B, 3, self.n_cells))
        for i, t in enumerate(tasks):
            x[i, 0, list(t.traps)] = 1.0
            x[i, 1, t.goal] = 1.0
            x[i, 2, t.start] = 1.0
        return x

    def forward(self, tasks: list, frozen: bool = False) -> Node:
        """Action logits, shape (batch, horizon, cells, 4).

        With ``frozen=True`` the parameters enter as constants, so the
        graph carries no gradient (detached scoring).
        """
        x = ad.constant(self.features(tasks))            # (B, 3, n)
        p = [ad.detach(q) if frozen else q for q in self.params]
        We, be, Wf1, Wf2, W1, b1, W2, b2, Wh, bh = p
        B = x.value.shape[0]
        n = self.n_cells

        flat = ad.reshape(x, (B, 3 * n))
        embed = ad.tanh(ad.affine(flat, We, be))          # (B, E)
        film1 = ad.reshape(ad.matmul(embed, Wf1), (B, 1, self.channels))
        film2 = ad.reshape(ad.matmul(embed, Wf2), (B, 1, self.channels))

        h = self._conv(x, W1, b1)                         # (B, n, F)
        h = ad.relu(ad.add(h, film1))
        h = self._conv(ad.transpose(h, (0, 2, 1)), W2, b2)
        h = ad.relu(ad.add(h, film2))

        out = ad.affine(h, Wh, bh)                        # (B, n, H*4)
        out = ad.reshape(out, (B, n, self.horizon, 4))
        return ad.transpose(out, (0, 2, 1, 3))

    def _conv(self, x: Node, W: Node, b: Node) -> Node:
        """3x3 same-padding conv via gather + matmul; x is (B, C, n)."""
        B, C, n = x.value.shape
        zero = ad.constant(np.zeros((B, C, 1)))
        padded = ad.concat([x, zero], axis=2)             # (B, C, n+1)
        patches = ad.take(padded, self.nb, axis=2)        # (B, C, n, 9)
        patches = ad.transpose(patches, (0, 2, 1, 3))     # (B, n, C, 9)
        patches = ad.reshape(patches, (B, n, C * 9))
        return ad.affine(patches, W, b)                   # (B, n, F)


def pretrain(
    net: PolicyNet,
    tasks: list,
    steps: int = 500,
    lr: float = 1e-4,
    batch: int = 16,
    rng: np.random.Generator | None = None,
    env: EnvParams | None = None,
    clip: float = 1.0,
) -> list[float]:
    """Return-maximization pretraining; returns the per-step mean return."""
    from .optim import AdamW

    if not tasks:
        raise ValueError("empty task list")
    env = env or EnvParams()
    rng = rng or np.random.default_rng(0)
    opt = AdamW(net.params, lr=lr, weight_decay=0.0, clip=clip)
    trace = []
    for _ in range(steps):
        idx = rng.integers(0, len(tasks), size=batch)
        batch_tasks = [tasks[i] for i in idx]
        logits = net.forward(batch_tasks)
        returns = policy_values_batch(batch_tasks, env, logits)
        loss = ad.neg(ad.mean_(returns))
        if not np.isfinite(loss.value):
            raise RuntimeError("pretraining diverged (non-finite loss)")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace.append(float(-loss.value))
    return trace
