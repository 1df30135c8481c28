"""
Block-wise evolutionary scale search.

This module provides the population container, the uniform epsilon-ball
perturbation, a generic elitist evolution loop over a flat vector, and the
block-wise driver that sweeps every transformer block for several passes.

Fitness is the negated calibration score, so higher is better everywhere in
this module.
"""

import itertools
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from core.error_handler import ParameterError
from core.models import MIN_SCALE, BlockScales, Candidate, SearchResult, SearchSettings
from core.objectives import BlockObjective, Objective
from utils.search_log import INITIAL_CYCLE, SearchLog

logger = logging.getLogger(__name__)

EvaluationHook = Callable[[int, int, float, float, float], None]


class Population:
    """
    Ordered multiset of candidates with a capacity of K.

    Insertion order doubles as age: on equal fitness the oldest member counts
    as best and the youngest is removed first.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError(f"population capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.members: List[Candidate] = []

    def __len__(self) -> int:
        return len(self.members)

    def insert(self, candidate: Candidate) -> None:
        self.members.append(candidate)

    def best(self) -> Candidate:
        """Highest fitness; the earliest inserted wins ties."""
        best = self.members[0]
        for candidate in self.members[1:]:
            if candidate.fitness > best.fitness:
                best = candidate
        return best

    def delete_dead(self) -> Candidate:
        """Remove and return the lowest-fitness member; the youngest goes on ties."""
        worst_index = 0
        for i, candidate in enumerate(self.members):
            if candidate.fitness <= self.members[worst_index].fitness:
                worst_index = i
        return self.members.pop(worst_index)

    def sample(self, count: int, rng: np.random.Generator) -> List[Candidate]:
        """Draw ``count`` members uniformly with replacement."""
        indices = rng.integers(0, len(self.members), size=count)
        return [self.members[i] for i in indices]

    def tournament(self, count: int, rng: np.random.Generator) -> Candidate:
        """Best of ``count`` uniformly sampled members."""
        contenders = self.sample(count, rng)
        winner = contenders[0]
        for candidate in contenders[1:]:
            if candidate.fitness > winner.fitness:
                winner = candidate
        return winner


def perturb(
    values: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Draw every element uniformly from ``[v - eps, v + eps]``, clamped to >= 1e-8.

    Args:
        values: Current scale vector.
        epsilon: Half-width of the uniform ball (> 0).
        rng: Random generator; one draw per element, masked or not.
        mask: Optional boolean mask; unmasked elements are left unchanged.

    Returns:
        A new vector with the dtype of ``values``.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    values = np.asarray(values)
    if not np.issubdtype(values.dtype, np.floating):
        values = values.astype(np.float64)
    noise = rng.uniform(-epsilon, epsilon, size=values.shape)
    child = (values.astype(np.float64) + noise).astype(values.dtype)
    child = np.maximum(child, _scale_floor(values.dtype))
    if mask is not None:
        child = np.where(mask, child, values)
    return child


def _scale_floor(dtype: np.dtype):
    """Smallest value of ``dtype`` that is >= MIN_SCALE."""
    floor = np.dtype(dtype).type(MIN_SCALE)
    if floor < MIN_SCALE:
        floor = np.nextafter(floor, np.dtype(dtype).type(1.0))
    return floor


def evolve_vector(
    initial: np.ndarray,
    objective: Objective,
    settings: SearchSettings,
    rng: np.random.Generator,
    initial_fitness: Optional[float] = None,
    mask: Optional[np.ndarray] = None,
    on_evaluation: Optional[EvaluationHook] = None,
) -> SearchResult:
    """
    Elitist evolution of one flat vector.

    The population starts with the unchanged incumbent plus K-1 perturbations
    of it. Each cycle picks a parent by tournament of S samples (with
    replacement), perturbs it, inserts the child and removes the worst member.

    Args:
        initial: Incumbent vector.
        objective: Loss to minimize; fitness is its negation.
        settings: Population size, cycles, tournament size and epsilon.
        rng: Random generator, consumed in a fixed order.
        initial_fitness: Known fitness of ``initial``; evaluated when None.
        mask: Optional perturbation mask.
        on_evaluation: Called as ``(cycle, candidate_id, fitness, best, wall_ms)``
            after every fresh evaluation.

    Returns:
        The best member of the final population and bookkeeping.
    """
    ids = itertools.count()
    evaluations = 0
    if initial_fitness is None:
        initial_fitness = -objective(initial)
        evaluations += 1
    population = Population(settings.population)
    population.insert(Candidate(np.array(initial, copy=True), initial_fitness, INITIAL_CYCLE, next(ids)))
    history = [initial_fitness]
    if settings.cycles == 0:
        # nothing is selected without a cycle, so the incumbent stands
        return SearchResult(population.best(), initial_fitness, evaluations, history)

    def evaluate(values: np.ndarray, cycle: int) -> None:
        nonlocal evaluations
        started = time.perf_counter()
        candidate = Candidate(values, -objective(values), cycle, next(ids))
        evaluations += 1
        population.insert(candidate)
        if cycle != INITIAL_CYCLE:
            population.delete_dead()
        best = population.best().fitness
        history.append(best)
        if on_evaluation is not None:
            wall_ms = (time.perf_counter() - started) * 1000.0
            on_evaluation(cycle, candidate.candidate_id, candidate.fitness, best, wall_ms)

    for _ in range(settings.population - 1):
        evaluate(perturb(initial, settings.epsilon, rng, mask), INITIAL_CYCLE)

    for cycle in range(settings.cycles):
        parent = population.tournament(settings.samples, rng)
        evaluate(perturb(parent.scales, settings.epsilon, rng, mask), cycle)

    return SearchResult(
        best=population.best(),
        initial_fitness=initial_fitness,
        evaluations=evaluations,
        best_history=history,
    )


@dataclass
class SearchSummary:
    """Outcome of a full block-wise run."""

    initial_score: float
    final_score: float
    evaluations: int
    wall_seconds: float

    @property
    def improved(self) -> bool:
        return self.final_score < self.initial_score

    def to_dict(self):
        return {
            "initial_score": self.initial_score,
            "final_score": self.final_score,
            "evaluations": self.evaluations,
            "wall_seconds": self.wall_seconds,
            "improved": self.improved,
        }


class EvolutionarySearch:
    """
    Block-wise search driver.

    Holds the random generator, the trace and the incumbent fitness across
    block visits. The fitness of the installed model state is carried from
    one visit to the next: it is a pure function of that state, so
    re-evaluating it would give the same number.
    """

    def __init__(self, evaluator, settings: SearchSettings, log: Optional[SearchLog] = None):
        self.evaluator = evaluator
        self.model = evaluator.quant_model
        self.settings = settings
        self.rng = np.random.default_rng(settings.seed)
        self.log = log if log is not None else SearchLog()
        self.incumbent_fitness: Optional[float] = None
        self.evaluations = 0

    def current_fitness(self) -> float:
        if self.incumbent_fitness is None:
            self.incumbent_fitness = -self.evaluator.score()
            self.evaluations += 1
        return self.incumbent_fitness

    def search_block(self, block_index: int, pass_index: int = 0) -> BlockScales:
        """
        Search one block's scales and install the best candidate.

        Returns:
            The installed BlockScales.
        """
        start = self.model.get_block_scales(block_index)
        incumbent = self.current_fitness()
        objective = BlockObjective(self.evaluator, block_index)
        mask = start.mask("attn.") if self.settings.attention_only else None
        self.log.start_visit(pass_index, block_index, incumbent)

        def record(cycle, candidate_id, fit, best, wall_ms):
            self.log.add_record(pass_index, block_index, cycle, candidate_id, fit, best, wall_ms)

        result = evolve_vector(
            start.values,
            objective,
            self.settings,
            self.rng,
            initial_fitness=incumbent,
            mask=mask,
            on_evaluation=record,
        )
        best = start.with_values(result.best.scales)
        self.model.set_block_scales(block_index, best)
        self.incumbent_fitness = result.best.fitness
        self.evaluations += result.evaluations
        self.log.end_visit(result.best.fitness)
        logger.debug(
            f"Pass {pass_index} block {block_index}: fitness {incumbent:.6g} -> "
            f"{result.best.fitness:.6g}"
        )
        return best

    def run(self) -> SearchSummary:
        """P passes over blocks 0..B-1 in order."""
        started = time.perf_counter()
        initial_score = -self.current_fitness()
        for pass_index in range(self.settings.passes):
            for block_index in range(len(self.model.blocks)):
                self.search_block(block_index, pass_index)
            logger.info(
                f"Pass {pass_index + 1}/{self.settings.passes} done, "
                f"score {-self.incumbent_fitness:.6g}"
            )
        return SearchSummary(
            initial_score=initial_score,
            final_score=-self.incumbent_fitness,
            evaluations=self.evaluations,
            wall_seconds=time.perf_counter() - started,
        )


def search_block(evaluator, block_index: int, settings: SearchSettings) -> BlockScales:
    """Single block visit with a fresh generator seeded from ``settings.seed``."""
    return EvolutionarySearch(evaluator, settings).search_block(block_index)


def run(evaluator, settings: SearchSettings, log: Optional[SearchLog] = None):
    """
    Run the full block-wise search on ``evaluator.quant_model`` in place.

    Returns:
        ``(model, summary)``.
    """
    engine = EvolutionarySearch(evaluator, settings, log)
    summary = engine.run()
    return engine.model, summary
