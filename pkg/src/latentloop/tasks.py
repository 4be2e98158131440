"""Puzzle generators, token conventions, dataset files, and verifiers.

Two task families:

* Sudoku with box order 2 (4x4 boards) or 3 (9x9), generated by randomized
  backtracking and thinned by clue removal under a solution-counting
  certificate (exactly one solution).
* Unique-shortest-path mazes on an odd wall grid: a perfect maze (spanning
  tree) guarantees a unique simple path between any two cells, so the
  retained start/goal pair has a unique shortest path; a BFS counting
  oracle re-certifies every emitted instance.

Token vocabularies:
  sudoku (size 11): 0 pad, 1 blank, 2..10 -> digits 1..9
  maze   (size 6):  0 pad, 1 wall, 2 open, 3 start, 4 goal, 5 path

File format: one instance per line, ``input_tokens;target_tokens`` with
space-separated integers, plus a sibling ``manifest.json`` describing the
task, grid, vocab map, split sizes, seed and generator parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import RngStream

SUDOKU_PAD, SUDOKU_BLANK = 0, 1
SUDOKU_VOCAB_SIZE = 11
SUDOKU_VOCAB = {0: "pad", 1: "blank",
                **{d + 1: str(d) for d in range(1, 10)}}

MAZE_PAD, MAZE_WALL, MAZE_OPEN, MAZE_START, MAZE_GOAL, MAZE_PATH = range(6)
MAZE_VOCAB_SIZE = 6
MAZE_VOCAB = {0: "pad", 1: "wall", 2: "open", 3: "start", 4: "goal", 5: "path"}


class GenerationError(Exception):
    pass


class ParseError(Exception):
    pass


@dataclass
class TaskInstance:
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    grid: tuple
    vocab_size: int
    difficulty: Optional[float] = None

    def __post_init__(self):
        self.input_tokens = np.asarray(self.input_tokens, dtype=np.int64)
        self.target_tokens = np.asarray(self.target_tokens, dtype=np.int64)
        r, c = self.grid
        if self.input_tokens.shape != (r * c,) or \
                self.target_tokens.shape != (r * c,):
            raise ValueError(f"token lists must have length {r * c}")
        if self.input_tokens.max() >= self.vocab_size or \
                self.target_tokens.max() >= self.vocab_size:
            raise ValueError("token outside vocabulary")


@dataclass
class DatasetManifest:
    task: str
    grid: tuple
    vocab: dict
    splits: dict
    seed: int
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def verify(instance: TaskInstance, prediction) -> bool:
    """Sequence-level exact accuracy: every token must match the target."""
    prediction = np.asarray(prediction)
    if prediction.shape != instance.target_tokens.shape:
        raise ValueError(f"prediction length {prediction.shape} does not match "
                         f"target {instance.target_tokens.shape}")
    return bool(np.array_equal(prediction, instance.target_tokens))


# ---------------------------------------------------------------------------
# sudoku


def _box_index(r, c, box):
    return (r // box) * box + c // box


def count_sudoku_solutions(cells, box: int, cap: int = 2):
    """Count completions of a puzzle by backtracking with most-constrained
    cell ordering. ``cells`` holds 0 for blanks, 1..side for digits.

    Returns (count up to ``cap``, number of backtracks) — the backtrack
    count doubles as a difficulty rating.
    """
    side = box * box
    full = (1 << side) - 1
    rows = [0] * side
    cols = [0] * side
    boxes = [0] * side
    blanks = []
    for r in range(side):
        for c in range(side):
            v = cells[r * side + c]
            if v == 0:
                blanks.append((r, c))
            else:
                bit = 1 << (v - 1)
                if rows[r] & bit or cols[c] & bit or boxes[_box_index(r, c, box)] & bit:
                    return 0, 0  # contradictory clues
                rows[r] |= bit
                cols[c] |= bit
                boxes[_box_index(r, c, box)] |= bit

    count = 0
    backtracks = 0

    def rec(remaining):
        nonlocal count, backtracks
        if not remaining:
            count += 1
            return
        # most-constrained blank first
        best_i, best_mask, best_n = -1, 0, side + 1
        for i, (r, c) in enumerate(remaining):
            mask = full & ~(rows[r] | cols[c] | boxes[_box_index(r, c, box)])
            n = mask.bit_count()
            if n < best_n:
                best_i, best_mask, best_n = i, mask, n
                if n <= 1:
                    break
        if best_n == 0:
            backtracks += 1
            return
        r, c = remaining[best_i]
        rest = remaining[:best_i] + remaining[best_i + 1:]
        mask = best_mask
        while mask:
            bit = mask & -mask
            mask ^= bit
            b = _box_index(r, c, box)
            rows[r] |= bit
            cols[c] |= bit
            boxes[b] |= bit
            rec(rest)
            rows[r] ^= bit
            cols[c] ^= bit
            boxes[b] ^= bit
            if count >= cap:
                return
        backtracks += 1

    rec(blanks)
    return count, backtracks


def _fill_sudoku(box: int, rng: RngStream) -> Optional[list]:
    """Complete a full valid grid by randomized backtracking."""
    side = box * box
    full = (1 << side) - 1
    rows = [0] * side
    cols = [0] * side
    boxes = [0] * side
    grid = [0] * (side * side)

    def rec(pos):
        if pos == side * side:
            return True
        r, c = divmod(pos, side)
        b = _box_index(r, c, box)
        mask = full & ~(rows[r] | cols[c] | boxes[b])
        digits = [d for d in range(1, side + 1) if mask >> (d - 1) & 1]
        order = list(digits)
        rng.shuffle(order)
        for d in order:
            bit = 1 << (d - 1)
            grid[pos] = d
            rows[r] |= bit
            cols[c] |= bit
            boxes[b] |= bit
            if rec(pos + 1):
                return True
            grid[pos] = 0
            rows[r] ^= bit
            cols[c] ^= bit
            boxes[b] ^= bit
        return False

    return grid if rec(0) else None


def sudoku_valid(cells, box: int) -> bool:
    """Row/column/box constraint check on a complete digit grid."""
    side = box * box
    want = set(range(1, side + 1))
    g = np.asarray(cells).reshape(side, side)
    for i in range(side):
        if set(g[i, :]) != want or set(g[:, i]) != want:
            return False
    for br in range(0, side, box):
        for bc in range(0, side, box):
            if set(g[br:br + box, bc:bc + box].reshape(-1)) != want:
                return False
    return True


def gen_sudoku(box: int, count: int, clue_policy="minimal", seed: int = 0,
               max_attempts: int | None = None) -> list[TaskInstance]:
    """Uniquely solvable puzzles: fill a grid, then remove clues while the
    counting solver certifies exactly one solution.

    ``clue_policy`` is either "minimal" (remove every removable clue) or an
    integer target clue count; a target below the reachable minimum raises
    after the retry budget.
    """
    if box not in (2, 3):
        raise ValueError("box order must be 2 (4x4) or 3 (9x9)")
    side = box * box
    n_cells = side * side
    target_clues = None if clue_policy == "minimal" else int(clue_policy)
    if target_clues is not None and not 0 <= target_clues <= n_cells:
        raise ValueError(f"clue target {target_clues} outside [0, {n_cells}]")
    max_attempts = max_attempts or max(count * 40, 200)

    out: list[TaskInstance] = []
    seen: set[bytes] = set()
    attempt = 0
    while len(out) < count:
        if attempt >= max_attempts:
            raise GenerationError(
                f"sudoku generation exhausted {max_attempts} attempts "
                f"({len(out)}/{count} emitted); relax the clue policy")
        rng = RngStream(seed, f"sudoku.{attempt}")
        attempt += 1
        grid = _fill_sudoku(box, rng)
        if grid is None:
            continue
        puzzle = list(grid)
        order = list(range(n_cells))
        rng.shuffle(order)
        clues = n_cells
        for pos in order:
            if target_clues is not None and clues <= target_clues:
                break
            saved = puzzle[pos]
            puzzle[pos] = 0
            n_sol, _ = count_sudoku_solutions(puzzle, box, cap=2)
            if n_sol == 1:
                clues -= 1
            else:
                puzzle[pos] = saved
        if target_clues is not None and clues != target_clues:
            continue
        inp = np.array([SUDOKU_BLANK if v == 0 else v + 1 for v in puzzle])
        key = inp.tobytes()
        if key in seen:
            continue
        seen.add(key)
        _, backtracks = count_sudoku_solutions(puzzle, box, cap=2)
        tgt = np.array([v + 1 for v in grid])
        out.append(TaskInstance(inp, tgt, (side, side), SUDOKU_VOCAB_SIZE,
                                difficulty=float(backtracks)))
    return out


# ---------------------------------------------------------------------------
# maze


def _carve_perfect_maze(rows: int, cols: int, rng: RngStream) -> np.ndarray:
    """Spanning-tree maze on an odd wall grid via iterative backtracking.

    Returns a (rows, cols) array of 1 (wall) / 2 (open); cells sit at odd
    coordinates and carved corridors join them.
    """
    grid = np.full((rows, cols), MAZE_WALL, dtype=np.int64)
    cr, cc = rows // 2, cols // 2  # cell-lattice dimensions
    visited = np.zeros((cr, cc), dtype=bool)
    start = (int(rng.integers(0, cr)), int(rng.integers(0, cc)))
    stack = [start]
    visited[start] = True
    grid[2 * start[0] + 1, 2 * start[1] + 1] = MAZE_OPEN
    while stack:
        r, c = stack[-1]
        nbrs = [(r + dr, c + dc, dr, dc)
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= r + dr < cr and 0 <= c + dc < cc
                and not visited[r + dr, c + dc]]
        if not nbrs:
            stack.pop()
            continue
        nr, nc, dr, dc = nbrs[int(rng.integers(0, len(nbrs)))]
        visited[nr, nc] = True
        grid[2 * r + 1 + dr, 2 * c + 1 + dc] = MAZE_OPEN  # corridor
        grid[2 * nr + 1, 2 * nc + 1] = MAZE_OPEN
        stack.append((nr, nc))
    return grid


def _bfs(grid: np.ndarray, start: tuple):
    """Distance map over walkable cells (-1 = unreachable)."""
    rows, cols = grid.shape
    dist = np.full(grid.shape, -1, dtype=np.int64)
    dist[start] = 0
    frontier = [start]
    while frontier:
        nxt = []
        for r, c in frontier:
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and \
                        grid[rr, cc] != MAZE_WALL and dist[rr, cc] < 0:
                    dist[rr, cc] = dist[r, c] + 1
                    nxt.append((rr, cc))
        frontier = nxt
    return dist


def count_shortest_paths(input_tokens, grid_shape) -> int:
    """BFS-layer dynamic program counting distinct shortest start->goal
    paths on the walkable cells of an instance's input tokens."""
    g = np.asarray(input_tokens).reshape(grid_shape)
    starts = np.argwhere(g == MAZE_START)
    goals = np.argwhere(g == MAZE_GOAL)
    if len(starts) != 1 or len(goals) != 1:
        raise ValueError("maze must contain exactly one start and one goal")
    start, goal = tuple(starts[0]), tuple(goals[0])
    dist = _bfs(g, start)
    if dist[goal] < 0:
        return 0
    ways = np.zeros(g.shape, dtype=np.int64)
    ways[start] = 1
    order = sorted(zip(*np.where(dist >= 0)), key=lambda rc: dist[rc])
    for r, c in order:
        if dist[r, c] == 0:
            continue
        total = 0
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < g.shape[0] and 0 <= cc < g.shape[1] and \
                    dist[rr, cc] == dist[r, c] - 1:
                total += ways[rr, cc]
        ways[r, c] = total
    return int(ways[goal])


def shortest_path_cells(input_tokens, grid_shape) -> list[tuple]:
    """The cells of the unique shortest path, endpoints excluded."""
    g = np.asarray(input_tokens).reshape(grid_shape)
    start = tuple(np.argwhere(g == MAZE_START)[0])
    goal = tuple(np.argwhere(g == MAZE_GOAL)[0])
    dist = _bfs(g, start)
    if dist[goal] < 0:
        raise ValueError("goal unreachable")
    path = []
    cur = goal
    while dist[cur] > 1:
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = cur[0] + dr, cur[1] + dc
            if 0 <= rr < g.shape[0] and 0 <= cc < g.shape[1] and \
                    dist[rr, cc] == dist[cur] - 1:
                cur = (rr, cc)
                break
        path.append(cur)
    return path[::-1]


def maze_path_valid(instance: TaskInstance, prediction) -> bool:
    """Semantic validity: the prediction marks exactly the unique shortest
    path and leaves every other cell unchanged. Diagnostics only; the
    accuracy metric is token equality."""
    pred = np.asarray(prediction)
    inp = instance.input_tokens
    changed = pred != inp
    if np.any(inp[changed] != MAZE_OPEN) or \
            np.any(pred[changed] != MAZE_PATH):
        return False
    want = shortest_path_cells(inp, instance.grid)
    marked = {tuple(rc) for rc in
              np.argwhere(pred.reshape(instance.grid) == MAZE_PATH)}
    return marked == set(want)


def gen_maze_unique(rows: int, cols: int, count: int,
                    path_range: tuple = (1, 10 ** 9), seed: int = 0,
                    max_attempts: int | None = None) -> list[TaskInstance]:
    """Perfect-maze shortest-path instances with a unique solution.

    ``path_range`` bounds the number of intermediate path cells between the
    start and goal (inclusive). Maze layouts are de-duplicated, so no
    layout can appear in more than one emitted instance.
    """
    if rows < 5 or cols < 5 or rows % 2 == 0 or cols % 2 == 0:
        raise ValueError("maze wall grid needs odd rows/cols >= 5")
    lo, hi = path_range
    max_attempts = max_attempts or max(count * 50, 500)
    out: list[TaskInstance] = []
    seen: set[bytes] = set()
    attempt = 0
    while len(out) < count:
        if attempt >= max_attempts:
            raise GenerationError(
                f"maze generation exhausted {max_attempts} attempts "
                f"({len(out)}/{count} emitted); widen the path range")
        rng = RngStream(seed, f"maze.{attempt}")
        attempt += 1
        grid = _carve_perfect_maze(rows, cols, rng)
        if grid.tobytes() in seen:
            continue
        cells = np.argwhere(grid == MAZE_OPEN)
        cells = cells[(cells[:, 0] % 2 == 1) & (cells[:, 1] % 2 == 1)]
        picked = None
        for _ in range(20):
            i, j = rng.integers(0, len(cells)), rng.integers(0, len(cells))
            if i == j:
                continue
            start, goal = tuple(cells[i]), tuple(cells[j])
            dist = _bfs(grid, start)
            plen = int(dist[goal]) - 1  # intermediate cells on the path
            if lo <= plen <= hi:
                picked = (start, goal, plen)
                break
        if picked is None:
            continue
        seen.add(grid.tobytes())
        start, goal, plen = picked
        inp = grid.copy()
        inp[start] = MAZE_START
        inp[goal] = MAZE_GOAL
        tgt = inp.copy()
        for rc in shortest_path_cells(inp.reshape(-1), (rows, cols)):
            tgt[rc] = MAZE_PATH
        out.append(TaskInstance(inp.reshape(-1), tgt.reshape(-1),
                                (rows, cols), MAZE_VOCAB_SIZE,
                                difficulty=float(plen)))
    return out


def split_disjoint_solutions(instances, eval_count: int, seed: int = 0):
    """Split instances so no solution grid is shared between train and eval.

    Small boards have few complete grids, so a clue-pattern-disjoint split
    still leaks every answer into training; holding out whole solution
    grids keeps the eval split a test of constraint solving rather than
    answer recall. Grids are assigned to the eval pool until it can cover
    ``eval_count`` instances.
    """
    groups: dict[bytes, list] = {}
    for inst in instances:
        groups.setdefault(inst.target_tokens.tobytes(), []).append(inst)
    keys = sorted(groups)  # deterministic before shuffling
    rng = RngStream(seed, "solution-split")
    rng.shuffle(keys)
    eval_insts: list[TaskInstance] = []
    train_insts: list[TaskInstance] = []
    for key in keys:
        if len(eval_insts) < eval_count:
            eval_insts.extend(groups[key])
        else:
            train_insts.extend(groups[key])
    if len(eval_insts) < eval_count:
        raise GenerationError(
            f"not enough instances to hold out {eval_count} eval rows")
    return train_insts, eval_insts[:eval_count]


# ---------------------------------------------------------------------------
# files


def serialize_instance(instance: TaskInstance) -> str:
    return (" ".join(map(str, instance.input_tokens)) + ";" +
            " ".join(map(str, instance.target_tokens)))


def deserialize_instance(line: str, grid: tuple, vocab_size: int,
                         lineno: int = 0) -> TaskInstance:
    try:
        left, right = line.strip().split(";")
        inp = np.array([int(v) for v in left.split()])
        tgt = np.array([int(v) for v in right.split()])
        return TaskInstance(inp, tgt, tuple(grid), vocab_size)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed dataset line {lineno}: {exc}") from exc


def write_split(path, instances) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(serialize_instance(inst) + "\n")


def read_split(path, grid, vocab_size) -> list[TaskInstance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                out.append(deserialize_instance(line, grid, vocab_size, lineno))
    return out


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as fh:
        json.dump({
            "task": manifest.task,
            "grid": list(manifest.grid),
            "vocab": {str(k): v for k, v in manifest.vocab.items()},
            "splits": manifest.splits,
            "seed": manifest.seed,
            "params": manifest.params,
            "stats": manifest.stats,
        }, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        d = json.load(fh)
    return DatasetManifest(task=d["task"], grid=tuple(d["grid"]),
                           vocab={int(k): v for k, v in d["vocab"].items()},
                           splits=d["splits"], seed=d["seed"],
                           params=d.get("params", {}), stats=d.get("stats", {}))


def load_dataset(data_dir, split: str = "train"):
    """Load one split as (inputs, targets) arrays plus the manifest."""
    manifest = read_manifest(os.path.join(data_dir, "manifest.json"))
    path = os.path.join(data_dir, f"{split}.txt")
    instances = read_split(path, manifest.grid, _vocab_size(manifest))
    declared = manifest.splits.get(split)
    if declared is not None and declared != len(instances):
        raise ParseError(f"{path}: {len(instances)} rows, manifest declares "
                         f"{declared}")
    inputs = np.stack([i.input_tokens for i in instances])
    targets = np.stack([i.target_tokens for i in instances])
    return inputs, targets, manifest


def _vocab_size(manifest: DatasetManifest) -> int:
    return max(manifest.vocab) + 1
