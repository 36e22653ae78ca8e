"""Synthetic grounded-VQA environment and a tabular softmax policy.

Each task is a ``K x K`` grid of symbols.  The question key names one target
cell; the gold answer is the symbol stored there.  Symbols are drawn i.i.d.
uniformly, so an agent that never looks at the grid answers at chance.  The
policy has three logit tables:

* ``theta_ground[key]`` -- which cell to zoom into,
* ``theta_answer_sighted[observed]`` -- answer after seeing the zoomed cell,
* ``theta_answer_blind[key]`` -- answer without a grounding phase.

Training follows GRPO with analytic gradients of the clipped surrogate.
"""
from __future__ import annotations

import dataclasses
import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite
from .geometry import BBox, giou
from .grpo import (
    AnswerRollout,
    GroundingRollout,
    GrpoConfig,
    RolloutGroup,
    compute_advantages,
    grpo_objective,
    importance_ratios,
    kl_categorical,
)
from .reward import GoldAnswer, QuestionType, RewardConfig, RewardMode, total_reward
from .trace import format_bbox, parse_trace


class ToyMode(str, enum.Enum):
    GROUND_R1 = "ground-r1"
    GROUND_R1_BBOX = "ground-r1-bbox"
    GROUND_R1_KL = "ground-r1-kl"
    VANILLA_R1 = "vanilla-r1"


_REWARD_MODE = {
    ToyMode.GROUND_R1: RewardMode.GROUND_R1,
    ToyMode.GROUND_R1_BBOX: RewardMode.GROUND_R1_BBOX,
    ToyMode.GROUND_R1_KL: RewardMode.GROUND_R1,
    ToyMode.VANILLA_R1: RewardMode.VANILLA_R1,
}

DEFAULT_KL_COEF = 0.1


@dataclass(frozen=True)
class ToyConfig:
    K: int = 4
    V: int = 8
    G1: int = 4
    G2: int = 2
    batch: int = 8
    steps: int = 3000
    lr: float = 0.5
    epsilon: float = 0.2
    kl_coef: float | None = None
    mode: ToyMode = ToyMode.GROUND_R1
    combine_ground_reward: str = "sum"
    alpha: float = 1.0
    cell_px: int = 32
    eval_tasks: int = 256
    accuracy_tasks: int = 4096
    cell_match_threshold: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "mode", ToyMode(self.mode))
        if self.K < 2 or self.V < 2:
            raise ValueError("K and V must be >= 2")
        if self.batch < 1 or self.steps < 0 or self.eval_tasks < 1:
            raise ValueError("batch and eval_tasks must be >= 1, steps >= 0")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        # validates epsilon, G1, G2, combine rule
        self.grpo()

    @property
    def num_cells(self) -> int:
        return self.K * self.K

    @property
    def num_questions(self) -> int:
        return self.K * self.K

    @property
    def grounded(self) -> bool:
        return self.mode is not ToyMode.VANILLA_R1

    @property
    def effective_kl_coef(self) -> float:
        if self.kl_coef is not None:
            return self.kl_coef
        return DEFAULT_KL_COEF if self.mode is ToyMode.GROUND_R1_KL else 0.0

    def grpo(self) -> GrpoConfig:
        return GrpoConfig(epsilon=self.epsilon, kl_coef=self.effective_kl_coef,
                          combine_ground_reward=self.combine_ground_reward,
                          alpha=self.alpha, G1=self.G1, G2=self.G2)

    def reward(self) -> RewardConfig:
        return RewardConfig.for_mode(_REWARD_MODE[self.mode],
                                     question_type=QuestionType.MULTIPLE_CHOICE)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass(frozen=True, eq=False)
class ToyTask:
    grid: np.ndarray
    target_cell: tuple[int, int]
    question_key: int
    gold_symbol: int
    V: int
    cell_px: int = 32

    @property
    def K(self) -> int:
        return int(self.grid.shape[0])

    @property
    def target_index(self) -> int:
        return self.target_cell[0] * self.K + self.target_cell[1]

    def symbol_at(self, cell: int) -> int:
        return int(self.grid.flat[cell])

    def gold(self) -> GoldAnswer:
        return GoldAnswer(symbol_name(self.gold_symbol),
                          choices=tuple(symbol_name(s) for s in range(self.V)),
                          gt_box=cell_box(self.target_index, self.K, self.cell_px))


@dataclass
class PolicyParams:
    theta_ground: np.ndarray
    theta_answer_blind: np.ndarray
    theta_answer_sighted: np.ndarray

    FIELDS = ("theta_ground", "theta_answer_blind", "theta_answer_sighted")

    @classmethod
    def zeros(cls, cfg: ToyConfig) -> "PolicyParams":
        return cls(np.zeros((cfg.num_questions, cfg.num_cells)),
                   np.zeros((cfg.num_questions, cfg.V)),
                   np.zeros((cfg.V, cfg.V)))

    def arrays(self):
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self) -> "PolicyParams":
        return PolicyParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, v: np.ndarray) -> "PolicyParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(v[i:i + a.size], dtype=float).reshape(a.shape).copy())
            i += a.size
        return PolicyParams(*out)

    def axpy(self, alpha: float, other: "PolicyParams") -> "PolicyParams":
        return PolicyParams(*(a + alpha * b for a, b in zip(self.arrays(), other.arrays())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def log_tables(self) -> dict:
        """Row-wise log-softmax and CDF tables; params must not be mutated afterwards."""
        cache = self.__dict__.get("_tables")
        if cache is None:
            cache = {}
            for f in self.FIELDS:
                lp = log_softmax(getattr(self, f))
                cache[f] = (lp, np.cumsum(np.exp(lp), axis=-1))
            self.__dict__["_tables"] = cache
        return cache


@dataclass(frozen=True)
class TrainStats:
    step: int
    mean_format_reward: float
    mean_accuracy_reward: float
    mean_giou: float
    mean_response_rounds: float
    cell_match: float = 0.0
    mean_total_reward: float = 0.0
    mean_kl: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    stats: list[TrainStats]
    params: PolicyParams
    final: dict = field(default_factory=dict)
    steps_to_threshold: int | None = None


class TrainingAborted(NonFinite):
    def __init__(self, message, result: TrainResult):
        super().__init__(message)
        self.result = result


def symbol_name(s: int) -> str:
    return f"s{s}"


def cell_box(cell: int, K: int, cell_px: int) -> BBox:
    r, c = divmod(cell, K)
    return BBox(c * cell_px, r * cell_px, (c + 1) * cell_px, (r + 1) * cell_px)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def sample_task(rng: np.random.Generator, K: int, V: int, cell_px: int = 32) -> ToyTask:
    if K < 2 or V < 2:
        raise ValueError("K and V must be >= 2")
    # The cue maps question key k to cell k; symbols are independent of the key.
    key = int(rng.integers(K * K))
    grid = rng.integers(V, size=(K, K))
    target = divmod(key, K)
    return ToyTask(grid=grid, target_cell=target, question_key=key,
                   gold_symbol=int(grid[target]), V=V, cell_px=cell_px)


def generate_task(seed: int, K: int, V: int, cell_px: int = 32) -> ToyTask:
    return sample_task(np.random.default_rng(seed), K, V, cell_px)


def _draw(logp: np.ndarray, cdf: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, logp.shape[-1] - 1)
    return k, float(logp[k])


class GroundingDraw(tuple):
    """``(cell, logp)`` plus the emitted box and trace text."""

    def __new__(cls, cell, logp, box, text):
        self = super().__new__(cls, (cell, logp))
        self.box, self.text = box, text
        return self


class AnswerDraw(tuple):
    def __new__(cls, symbol, logp, text):
        self = super().__new__(cls, (symbol, logp))
        self.text = text
        return self


def grounding_text(task: ToyTask, box: BBox) -> str:
    return f"<think>question {task.question_key} points at a region</think><bbox>{format_bbox(box)}</bbox>"


def answer_text(symbol: int, zoomed: bool) -> str:
    why = "the zoomed region shows the symbol" if zoomed else "answering from the question alone"
    return f"<think>{why}</think><answer>{symbol_name(symbol)}</answer>"


def sample_grounding(params: PolicyParams, task: ToyTask, rng) -> GroundingDraw:
    lp, cdf = params.log_tables()["theta_ground"]
    q = task.question_key
    cell, logp = _draw(lp[q], cdf[q], rng)
    box = cell_box(cell, task.K, task.cell_px)
    return GroundingDraw(cell, logp, box, grounding_text(task, box))


def sample_answer(params: PolicyParams, task: ToyTask, zoomed: int | None, rng) -> AnswerDraw:
    if zoomed is not None:
        lp, cdf = params.log_tables()["theta_answer_sighted"]
        row = task.symbol_at(zoomed)
    else:
        lp, cdf = params.log_tables()["theta_answer_blind"]
        row = task.question_key
    symbol, logp = _draw(lp[row], cdf[row], rng)
    return AnswerDraw(symbol, logp, answer_text(symbol, zoomed is not None))


@functools.lru_cache(maxsize=65536)
def _parse(text: str):
    return parse_trace(text)


@functools.lru_cache(maxsize=65536)
def _score(text: str, gold_symbol: int, target: int, V: int, K: int, cell_px: int, rcfg: RewardConfig):
    gold = GoldAnswer(symbol_name(gold_symbol), choices=tuple(symbol_name(s) for s in range(V)),
                      gt_box=cell_box(target, K, cell_px))
    return total_reward(_parse(text), gold, rcfg)


def rollout_group(params_old: PolicyParams, task: ToyTask, cfg: ToyConfig, rng) -> RolloutGroup:
    rcfg = cfg.reward()
    grounding, answers = [], []
    for _ in range(cfg.G1):
        if cfg.grounded:
            g = sample_grounding(params_old, task, rng)
            cell, logp_g, prefix = g[0], g[1], g.text
        else:
            cell, logp_g, prefix = None, 0.0, ""
        row, r_ground = [], 0.0
        for j in range(cfg.G2):
            symbol, logp_a = a = sample_answer(params_old, task, cell, rng)
            text = prefix + a.text
            trace = _parse(text)
            br = _score(text, task.gold_symbol, task.target_index, task.V, task.K, task.cell_px, rcfg)
            r_ground = rcfg.w_fg * br.format_ground
            row.append(AnswerRollout(
                trace=trace, logp_old=logp_g + logp_a, r_answer=br.total - r_ground,
                action=symbol, context=task.symbol_at(cell) if cell is not None else None,
                extras={"breakdown": br, "cell": cell},
            ))
        prefix_trace = _parse(prefix) if cfg.grounded else None
        grounding.append(GroundingRollout(prefix_trace, logp_g, r_ground, action=cell))
        answers.append(row)
    return RolloutGroup(cfg.G1, cfg.G2, grounding, answers, task=task)


def _trajectory_logps(params: PolicyParams, group: RolloutGroup, cfg: ToyConfig, tables=None) -> np.ndarray:
    key = group.task.question_key
    ls = log_softmax(params.theta_answer_sighted) if tables is None else tables["log_sighted"]
    out = np.empty((group.G1, group.G2))
    lg = log_softmax(params.theta_ground[key]) if cfg.grounded else None
    lb = log_softmax(params.theta_answer_blind[key])
    for i, (g, row) in enumerate(zip(group.grounding, group.answers)):
        for j, a in enumerate(row):
            if cfg.grounded:
                out[i, j] = lg[g.action] + ls[a.context, a.action]
            else:
                out[i, j] = lb[a.action]
    return out


def _kl_rows(zp: np.ndarray, zq: np.ndarray) -> np.ndarray:
    lp, lq = log_softmax(zp), log_softmax(zq)
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=-1), 0.0)


def fast_group_kl(params: PolicyParams, ref: PolicyParams, group: RolloutGroup, cfg: ToyConfig) -> float:
    """Vectorized equivalent of :func:`group_kl` used for logging."""
    key = group.task.question_key
    if cfg.grounded:
        g_kl = float(_kl_rows(params.theta_ground[key], ref.theta_ground[key]))
        ctx = np.array([a.context for row in group.answers for a in row])
        rows = _kl_rows(params.theta_answer_sighted[ctx], ref.theta_answer_sighted[ctx])
        return g_kl + float(np.mean(rows))
    return float(_kl_rows(params.theta_answer_blind[key], ref.theta_answer_blind[key]))


def group_kl(params: PolicyParams, ref: PolicyParams, group: RolloutGroup, cfg: ToyConfig) -> float:
    """Exact KL(current || reference) averaged over the group's trajectories."""
    key = group.task.question_key
    total = 0.0
    g_kl = 0.0
    if cfg.grounded:
        g_kl = kl_categorical(softmax(params.theta_ground[key]), softmax(ref.theta_ground[key]))
    for row in group.answers:
        for a in row:
            if cfg.grounded:
                p = softmax(params.theta_answer_sighted[a.context])
                q = softmax(ref.theta_answer_sighted[a.context])
            else:
                p = softmax(params.theta_answer_blind[key])
                q = softmax(ref.theta_answer_blind[key])
            total += g_kl + kl_categorical(p, q)
    return total / (group.G1 * group.G2)


def surrogate_objective(params: PolicyParams, groups, cfg: ToyConfig, ref: PolicyParams | None = None) -> float:
    """Batch mean of the per-group clipped objective evaluated at ``params``."""
    gcfg = cfg.grpo()
    values = []
    for group in groups:
        adv = compute_advantages(group.reward_matrix(gcfg), gcfg)
        kl = group_kl(params, ref, group, cfg) if gcfg.kl_coef > 0 else 0.0
        values.append(grpo_objective(_trajectory_logps(params, group, cfg),
                                     group.logp_old_matrix(), adv, gcfg, kl=kl))
    return math.fsum(values) / len(values)


def _kl_grad(z: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    # d KL(softmax(z) || softmax(z_ref)) / dz = p * (log p - log q - KL)
    lp, lq = log_softmax(z), log_softmax(z_ref)
    p = np.exp(lp)
    kl = float(np.sum(p * (lp - lq)))
    return p * (lp - lq - kl)


def grad_objective(params: PolicyParams, groups, cfg: ToyConfig, ref: PolicyParams | None = None) -> PolicyParams:
    """Exact gradient of :func:`surrogate_objective` with respect to ``params``.

    At a clip boundary where both branches of the min agree the clipped
    (constant) branch is used, so such trajectories contribute nothing.
    """
    gcfg = cfg.grpo()
    eps = gcfg.epsilon
    grad = PolicyParams(*(np.zeros_like(a) for a in params.arrays()))
    n_groups = len(groups)
    sighted = softmax(params.theta_answer_sighted)
    tables = {"log_sighted": log_softmax(params.theta_answer_sighted)}
    for group in groups:
        key = group.task.question_key
        adv = compute_advantages(group.reward_matrix(gcfg), gcfg).a
        ratios = importance_ratios(_trajectory_logps(params, group, cfg, tables), group.logp_old_matrix())
        scale = 1.0 / (group.G1 * group.G2 * n_groups)
        pg = softmax(params.theta_ground[key]) if cfg.grounded else None
        pb = softmax(params.theta_answer_blind[key])
        for i, (g, row) in enumerate(zip(group.grounding, group.answers)):
            for j, a in enumerate(row):
                r, A = ratios[i, j], adv[i, j]
                active = (1 - eps < r < 1 + eps) or (A > 0 and r < 1 - eps) or (A < 0 and r > 1 + eps)
                coef = scale * A * r if active and A != 0 else 0.0
                if cfg.grounded:
                    ps = sighted[a.context]
                    if coef:
                        d = -coef * pg
                        d[g.action] += coef
                        grad.theta_ground[key] += d
                        d = -coef * ps
                        d[a.action] += coef
                        grad.theta_answer_sighted[a.context] += d
                    if gcfg.kl_coef > 0:
                        c = gcfg.kl_coef * scale
                        grad.theta_ground[key] -= c * _kl_grad(params.theta_ground[key], ref.theta_ground[key])
                        grad.theta_answer_sighted[a.context] -= c * _kl_grad(
                            params.theta_answer_sighted[a.context], ref.theta_answer_sighted[a.context])
                else:
                    if coef:
                        d = -coef * pb
                        d[a.action] += coef
                        grad.theta_answer_blind[key] += d
                    if gcfg.kl_coef > 0:
                        grad.theta_answer_blind[key] -= gcfg.kl_coef * scale * _kl_grad(
                            params.theta_answer_blind[key], ref.theta_answer_blind[key])
    return grad


@functools.lru_cache(maxsize=None)
def _giou_table(K: int, cell_px: int) -> np.ndarray:
    boxes = [cell_box(c, K, cell_px) for c in range(K * K)]
    return np.array([[giou(a, b) for b in boxes] for a in boxes])


def grounding_metrics(params: PolicyParams, tasks) -> tuple[float, float]:
    """Greedy-argmax grounding: (cell match rate, mean GIoU to the target cell)."""
    tasks = list(tasks)
    if not tasks:
        return 0.0, 0.0
    K, px = tasks[0].K, tasks[0].cell_px
    keys = np.array([t.question_key for t in tasks])
    targets = np.array([t.target_index for t in tasks])
    pred = np.argmax(params.theta_ground[keys], axis=1)
    table = _giou_table(K, px)
    return float(np.mean(pred == targets)), float(np.mean(table[pred, targets]))


def answer_accuracy(params: PolicyParams, tasks, grounded: bool = True) -> float:
    """Expected answer accuracy of the sampling policy, computed exactly."""
    acc = []
    ps = softmax(params.theta_answer_sighted)
    for t in tasks:
        if grounded:
            pg = softmax(params.theta_ground[t.question_key])
            observed = t.grid.ravel()
            acc.append(float(np.dot(pg, ps[observed, t.gold_symbol])))
        else:
            acc.append(float(softmax(params.theta_answer_blind[t.question_key])[t.gold_symbol]))
    return math.fsum(acc) / len(acc)


def _task_rng(seed: int, step: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, b]))


def eval_tasks(cfg: ToyConfig, seed: int, n: int | None = None, stream: int = 0) -> list[ToyTask]:
    """Held-out tasks, disjoint from the training streams."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**32 - 1, stream]))
    n = cfg.eval_tasks if n is None else n
    return [sample_task(rng, cfg.K, cfg.V, cfg.cell_px) for _ in range(n)]


def _step_stats(step, groups, params, ref, cfg, evals) -> TrainStats:
    fmt, acc, tot, segs, kls = [], [], [], [], []
    for group in groups:
        for row in group.answers:
            for a in row:
                br = a.extras["breakdown"]
                fmt.append((br.format_ground + br.format_answer) / 2 if cfg.grounded else br.format_answer)
                acc.append(br.accuracy)
                tot.append(br.total)
                segs.append(len(a.trace.segments))
        kls.append(fast_group_kl(params, ref, group, cfg))
    cell_match, mean_g = grounding_metrics(params, evals)
    return TrainStats(step=step,
                      mean_format_reward=float(np.mean(fmt)),
                      mean_accuracy_reward=float(np.mean(acc)),
                      mean_giou=mean_g,
                      mean_response_rounds=float(np.mean(segs)),
                      cell_match=cell_match,
                      mean_total_reward=float(np.mean(tot)),
                      mean_kl=float(np.mean(kls)))


def train(cfg: ToyConfig, seed: int, params: PolicyParams | None = None, callback=None) -> TrainResult:
    """Run GRPO on freshly sampled task batches for ``cfg.steps`` steps.

    Stats at step ``t`` describe the policy before the ``t``-th update.
    Raises TrainingAborted (a NonFinite) carrying the stats gathered so far.
    """
    params = PolicyParams.zeros(cfg) if params is None else params.copy()
    ref = params.copy()
    evals = eval_tasks(cfg, seed)
    stats: list[TrainStats] = []
    reached = None
    for step in range(cfg.steps):
        groups = []
        for b in range(cfg.batch):
            rng = _task_rng(seed, step, b)
            task = sample_task(rng, cfg.K, cfg.V, cfg.cell_px)
            groups.append(rollout_group(params, task, cfg, rng))
        st = _step_stats(step, groups, params, ref, cfg, evals)
        stats.append(st)
        if callback is not None:
            callback(st)
        if reached is None and cfg.grounded and st.cell_match >= cfg.cell_match_threshold:
            reached = step
        try:
            grad = grad_objective(params, groups, cfg, ref)
        except NonFinite as exc:
            raise TrainingAborted(str(exc), TrainResult(stats, params, steps_to_threshold=reached)) from exc
        new = params.axpy(cfg.lr, grad)
        if not new.is_finite():
            raise TrainingAborted(f"non-finite parameters after step {step}",
                                  TrainResult(stats, params, steps_to_threshold=reached))
        params = new
    cell_match, mean_g = grounding_metrics(params, evals)
    if reached is None and cfg.grounded and cell_match >= cfg.cell_match_threshold:
        reached = cfg.steps
    final = {"cell_match": cell_match, "mean_giou": mean_g,
             "answer_accuracy": answer_accuracy(params, eval_tasks(cfg, seed, cfg.accuracy_tasks, 1),
                                                cfg.grounded),
             "initial_giou": stats[0].mean_giou if stats else mean_g}
    return TrainResult(stats, params, final, reached)
