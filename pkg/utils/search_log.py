"""
Search trace module.

Records every fitness evaluation of the block-wise search and provides
per-block statistics and CSV export.
"""

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List

logger = logging.getLogger(__name__)

# Cycle number used for evaluations of the initial population.
INITIAL_CYCLE = -1


@dataclass
class TraceRecord:
    """One fitness evaluation during a block visit."""

    pass_index: int
    block: int
    cycle: int
    candidate_id: int
    fitness: float
    best_fitness: float
    wall_ms: float = 0.0


CSV_HEADER = ["pass", "block", "cycle", "candidate_id", "fitness", "best_fitness", "wall_ms"]


class SearchLog:
    """
    Manages the trace of a search run.

    It tracks block visits and the evaluations within them, and summarizes
    how fitness moved per block.
    """

    def __init__(self, timing: bool = False) -> None:
        self.records: List[TraceRecord] = []
        self.timing = timing
        self.visits: List[Dict[str, Any]] = []

    def start_visit(self, pass_index: int, block: int, initial_fitness: float) -> None:
        """Open a new block visit."""
        self.visits.append(
            {
                "pass": pass_index,
                "block": block,
                "initial_fitness": initial_fitness,
                "final_fitness": initial_fitness,
            }
        )

    def end_visit(self, final_fitness: float) -> None:
        if self.visits:
            self.visits[-1]["final_fitness"] = final_fitness

    def add_record(
        self,
        pass_index: int,
        block: int,
        cycle: int,
        candidate_id: int,
        fitness: float,
        best_fitness: float,
        wall_ms: float = 0.0,
    ) -> None:
        """
        Add an evaluation to the trace.

        Args:
            pass_index: Pass over the blocks (0-based).
            block: Block being searched.
            cycle: Cycle number, or ``INITIAL_CYCLE`` for the initial population.
            candidate_id: Identifier of the evaluated candidate within the visit.
            fitness: Fitness of the evaluated candidate (negated score).
            best_fitness: Best fitness in the population after the insertion.
            wall_ms: Milliseconds spent; stays 0 unless timing is enabled.
        """
        self.records.append(
            TraceRecord(
                pass_index=pass_index,
                block=block,
                cycle=cycle,
                candidate_id=candidate_id,
                fitness=fitness,
                best_fitness=best_fitness,
                wall_ms=wall_ms if self.timing else 0.0,
            )
        )

    def __len__(self) -> int:
        return len(self.records)

    def get_block_statistics(self, block: int) -> Dict[str, Any]:
        """
        Summarize the visits of one block.

        Returns:
            Evaluation count, visit count and the total fitness gain of the block.
        """
        visits = [v for v in self.visits if v["block"] == block]
        return {
            "block": block,
            "visits": len(visits),
            "evaluations": sum(1 for r in self.records if r.block == block),
            "fitness_gain": sum(v["final_fitness"] - v["initial_fitness"] for v in visits),
        }

    def get_statistics(self) -> Dict[str, Any]:
        """Returns overall statistics of the run."""
        blocks = sorted({v["block"] for v in self.visits})
        return {
            "evaluations": len(self.records),
            "visits": len(self.visits),
            "improved_visits": sum(
                1 for v in self.visits if v["final_fitness"] > v["initial_fitness"]
            ),
            "blocks": [self.get_block_statistics(b) for b in blocks],
        }

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for record in self.records:
            row = asdict(record)
            row["pass"] = row.pop("pass_index")
            rows.append({key: row[key] for key in CSV_HEADER})
        return rows

    def write_csv(self, path: str) -> None:
        """Write the trace as CSV (``pass, block, cycle, candidate_id, fitness, best_fitness, wall_ms``)."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
            writer.writeheader()
            for row in self.to_rows():
                row["fitness"] = repr(float(row["fitness"]))
                row["best_fitness"] = repr(float(row["best_fitness"]))
                writer.writerow(row)
        logger.info(f"Search trace with {len(self.records)} rows written to {path}")


def read_csv(path: str) -> List[TraceRecord]:
    """Read a trace written by ``SearchLog.write_csv``."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            TraceRecord(
                pass_index=int(row["pass"]),
                block=int(row["block"]),
                cycle=int(row["cycle"]),
                candidate_id=int(row["candidate_id"]),
                fitness=float(row["fitness"]),
                best_fitness=float(row["best_fitness"]),
                wall_ms=float(row["wall_ms"]),
            )
            for row in csv.DictReader(f)
        ]
