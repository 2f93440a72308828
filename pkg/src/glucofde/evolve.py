"""Grammar-guided evolution of difference equations with epsilon-lexicase selection."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .fde import FdeModel, SegmentBatch, segment_rmse
from .grammar import CODON_LIMIT, Genotype, GenotypeLimits, decode, default_grammar, random_genotype

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 200
    generations: int = 100
    crossover_rate: float = 0.9
    mutation_rate: float = 0.05
    elitism: int = 1
    runs: int = 30
    max_depth: int = 6
    seed: int = 0
    # None means per-case median absolute deviation
    epsilon: float = None
    # stop a run early once the best training MRMSE drops to this value
    stop_mrmse: float = None

    def __post_init__(self):
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("population_size", "generations", "runs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not 0 <= self.elitism <= self.population_size:
            raise ConfigError("elitism must lie in [0, population_size]")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**dict(d or {}))
        except TypeError as exc:
            raise ConfigError(f"evolution config: {exc}") from None


# ---------------------------------------------------------------------------
# selection and variation


def case_epsilons(fitness):
    """Median absolute deviation of every column over the whole population."""
    med = np.median(fitness, axis=0)
    return np.median(np.abs(fitness - med), axis=0)


def epsilon_lexicase_select(fitness, rng, epsilon=None):
    """Pick one individual (row index) by epsilon-lexicase selection.

    ``epsilon`` overrides the per-case median absolute deviation; pass 0 for
    classic lexicase.
    """
    return int(lexicase_batch(prepare_lexicase(fitness, epsilon), 1, rng)[0])


def prepare_lexicase(fitness, epsilon=None):
    """Deduplicate fitness rows once per generation for repeated selections."""
    fitness = np.asarray(fitness, dtype=float)
    if fitness.ndim != 2 or fitness.shape[0] == 0:
        raise DomainError("selection needs a nonempty fitness matrix")
    eps = case_epsilons(fitness) if epsilon is None else np.full(fitness.shape[1], float(epsilon))
    unique, inverse, counts = np.unique(fitness, axis=0, return_inverse=True, return_counts=True)
    inverse = np.asarray(inverse).reshape(-1)
    order = np.argsort(inverse, kind="stable")
    members = np.split(order, np.cumsum(counts)[:-1])
    return unique, counts, members, eps


def lexicase_batch(prepared, k, rng):
    """Run ``k`` independent selections at once; each gets its own case order.

    Survivors after the last case are drawn uniformly over individuals, which
    is the same as weighting each surviving fitness row by its multiplicity.
    """
    unique, counts, members, eps = prepared
    n_rows, n_cases = unique.shape
    alive = np.ones((k, n_rows), dtype=bool)
    if n_cases and n_rows > 1:
        orders = rng.permuted(np.tile(np.arange(n_cases), (k, 1)), axis=1)
        for step in range(n_cases):
            cases = orders[:, step]
            vals = unique[:, cases].T  # (k, n_rows)
            best = np.where(alive, vals, np.inf).min(axis=1)
            alive &= vals <= (best + eps[cases])[:, None]
    weights = alive * counts[None, :]
    cum = np.cumsum(weights, axis=1)
    draws = rng.random(k) * cum[:, -1]
    rows = (cum <= draws[:, None]).sum(axis=1)
    out = np.empty(k, dtype=int)
    for i, row in enumerate(rows):
        group = members[row]
        out[i] = group[0] if len(group) == 1 else group[rng.integers(len(group))]
    return out


def crossover(a, b, rng, mask=None):
    """Uniform crossover at list level: each nonterminal's list comes whole from one parent."""
    names = sorted(set(a.genes) | set(b.genes))
    if mask is None:
        mask = {nt: bool(rng.random() < 0.5) for nt in names}
    genes = {nt: list((a if mask[nt] else b).genes.get(nt, [])) for nt in names}
    return Genotype(genes, a.max_depth)


def mutate(g, rng, rate):
    """Resample every gene independently with probability ``rate``."""
    out = g.copy()
    if rate <= 0:
        return out
    for nt, genes in out.genes.items():
        if not genes:
            continue
        hit = rng.random(len(genes)) < rate
        if hit.any():
            fresh = rng.integers(0, CODON_LIMIT, size=int(hit.sum()))
            arr = np.array(genes)
            arr[hit] = fresh
            out.genes[nt] = arr.tolist()
    return out


# ---------------------------------------------------------------------------
# one run


@dataclass
class RunResult:
    model: FdeModel
    genotype: Genotype
    log: list
    train_mrmse: float


class _Evaluator:
    """Per-case RMSE rows with a cache keyed by the decoded expression."""

    def __init__(self, batch):
        self.batch = batch
        self.cache = {}

    def __call__(self, expr):
        row = self.cache.get(expr)
        if row is None:
            row = segment_rmse(expr, self.batch)
            self.cache[expr] = row
        return row


def _best_index(mrmse):
    # argmin returns the lowest index among ties, which keeps elitism deterministic
    return int(np.argmin(mrmse))


def run_isige(train_cases, config=EvolutionConfig(), seed=None, grammar=None, run_index=0):
    """Evolve one population; returns a :class:`RunResult`."""
    if not train_cases:
        raise DomainError("no training cases")
    grammar = grammar or default_grammar()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(run_index)]))
    batch = train_cases if isinstance(train_cases, SegmentBatch) else SegmentBatch.from_segments(train_cases)
    evaluate = _Evaluator(batch)
    limits = GenotypeLimits(max_depth=config.max_depth)

    population = [random_genotype(grammar, rng, limits) for _ in range(config.population_size)]
    exprs = [decode(grammar, g, rng) for g in population]
    fitness = np.stack([evaluate(e) for e in exprs])
    mrmse = fitness.mean(axis=1)
    history = [_log_row(0, mrmse)]

    for gen in range(1, config.generations + 1):
        if config.stop_mrmse is not None and mrmse.min() <= config.stop_mrmse:
            break
        prepared = prepare_lexicase(fitness, config.epsilon)
        elite_order = np.argsort(mrmse, kind="stable")[:config.elitism]
        n_children = config.population_size - len(elite_order)
        mate = rng.random(n_children) < config.crossover_rate
        parents = iter(lexicase_batch(prepared, n_children + int(mate.sum()), rng))
        offspring = [population[i].copy() for i in elite_order]
        for paired in mate:
            a = population[next(parents)]
            child = crossover(a, population[next(parents)], rng) if paired else a.copy()
            offspring.append(mutate(child, rng, config.mutation_rate))
        population = offspring
        exprs = [decode(grammar, g, rng) for g in population]
        fitness = np.stack([evaluate(e) for e in exprs])
        mrmse = fitness.mean(axis=1)
        history.append(_log_row(gen, mrmse))

    best = _best_index(mrmse)
    model = FdeModel("isige", expr=exprs[best], metadata={
        "seed": int(seed),
        "run": int(run_index),
        "train_mrmse": float(mrmse[best]),
        "generations": history[-1]["generation"],
        "genotype": {nt: list(v) for nt, v in population[best].genes.items()},
    })
    return RunResult(model, population[best], history, float(mrmse[best]))


def _log_row(gen, mrmse):
    valid = mrmse[mrmse < 1e9]
    return {
        "generation": gen,
        "best_mrmse": float(mrmse.min()),
        # failed evaluations carry the sentinel and would swamp the average
        "mean_mrmse": float(valid.mean()) if valid.size else float("nan"),
    }


# ---------------------------------------------------------------------------
# protocol: many runs, validation-based choice


def _run_job(args):
    segments, config, seed, run, grammar = args
    return run_isige(segments, config, seed, grammar, run_index=run)


def train_runs(train_cases, config=EvolutionConfig(), seed=None, threads=1, grammar=None):
    """``config.runs`` independent seeded runs, returned in run order."""
    seed = config.seed if seed is None else seed
    batch = SegmentBatch.from_segments(train_cases) if not isinstance(train_cases, SegmentBatch) else train_cases
    jobs = [(batch, config, seed, r, grammar) for r in range(config.runs)]
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_run_job, jobs))
    return [_run_job(j) for j in jobs]


def validation_scores(models, validation_cases):
    batch = SegmentBatch.from_segments(validation_cases)
    return [float(segment_rmse(m, batch).mean()) for m in models]


def select_validation(models, validation_cases):
    """Model with the lowest validation MRMSE; earlier runs win ties."""
    if not models:
        raise DomainError("no models to choose from")
    if not validation_cases:
        raise DomainError("no validation cases")
    scores = validation_scores(models, validation_cases)
    best = min(range(len(models)), key=lambda i: (scores[i], i))
    chosen = models[best]
    meta = dict(chosen.metadata, validation_mrmse=scores[best])
    return FdeModel(chosen.kind, expr=chosen.expr, metadata=meta)


def train_isige(train_cases, validation_cases, config=EvolutionConfig(), seed=None, threads=1, grammar=None):
    """Full protocol for one cluster; returns ``(selected model, run results)``."""
    results = train_runs(train_cases, config, seed, threads, grammar)
    chosen = select_validation([r.model for r in results], validation_cases)
    return chosen, results
