"""Expert demonstrations: generation from the soft-optimal policy and a JSON-lines store.

File layout (``*.demos.jsonl``): one header object, then one object per
trajectory::

    {"format": "rize-demos", "version": "v1", "mdp_id": ..., "horizon": ...,
     "alpha": ..., "n_traj": ..., "seed": ..., "mean_return": ...}
    {"states": [...], "actions": [...], "next_states": [...], "dones": [...], "return": ...}
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import TabularMDP, Trajectory, sample_trajectory, soft_value_iteration

DEMO_FORMAT = "rize-demos"
DEMO_VERSION = "v1"
DEFAULT_EXPERT_ALPHA = 0.01
DEMO_REGIMES = (3, 10)


class DemoFormatError(ValueError):
    pass


@dataclass(eq=False)
class DemoSet:
    trajectories: list[Trajectory]
    source_mdp_id: str
    alpha_expert: float
    mean_return: float
    seed: int | None = None

    @property
    def horizon(self) -> int:
        return len(self.trajectories[0]) if self.trajectories else 0

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, DemoSet):
            return NotImplemented
        return (self.source_mdp_id == other.source_mdp_id
                and self.alpha_expert == other.alpha_expert
                and self.mean_return == other.mean_return
                and self.seed == other.seed
                and self.trajectories == other.trajectories)

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated (states, actions, next_states) over all trajectories."""
        s = np.concatenate([t.states for t in self.trajectories])
        a = np.concatenate([t.actions for t in self.trajectories])
        s2 = np.concatenate([t.next_states for t in self.trajectories])
        return s, a, s2


def _mean_return(trajectories) -> float:
    return float(np.mean([t.return_raw for t in trajectories]))


def generate_demos(mdp: TabularMDP, n_traj: int, horizon: int | None = None,
                   alpha: float = DEFAULT_EXPERT_ALPHA, rng_seed: int = 0) -> DemoSet:
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    horizon = mdp.horizon if horizon is None else horizon
    _, expert = soft_value_iteration(mdp, alpha)
    seeds = np.random.SeedSequence(rng_seed).spawn(n_traj)
    trajs = [sample_trajectory(mdp, expert, horizon, np.random.default_rng(sq)) for sq in seeds]
    return DemoSet(trajs, mdp.name, alpha, _mean_return(trajs), rng_seed)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_demos(demos: DemoSet, path) -> None:
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "mdp_id": demos.source_mdp_id,
        "horizon": demos.horizon,
        "alpha": demos.alpha_expert,
        "n_traj": len(demos),
        "seed": demos.seed,
        "mean_return": demos.mean_return,
    }
    lines = [json.dumps(header)]
    for t in demos.trajectories:
        lines.append(json.dumps({
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "next_states": t.next_states.tolist(),
            "dones": t.dones.tolist(),
            "return": t.return_raw,
        }))
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_demo_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    return _parse_header(first, path)


def _parse_header(line: str, path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DemoFormatError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("format") != DEMO_FORMAT:
        raise DemoFormatError(f"{path}: line 1: not a demo file header")
    if header.get("version") != DEMO_VERSION:
        raise DemoFormatError(f"{path}: line 1: unsupported version {header.get('version')!r}")
    return header


def load_demos(path) -> DemoSet:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DemoFormatError(f"{path}: line 1: empty file")
    header = _parse_header(lines[0], path)
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            traj = Trajectory(
                np.array(rec["states"], dtype=np.int64),
                np.array(rec["actions"], dtype=np.int64),
                np.array(rec["next_states"], dtype=np.int64),
                np.array(rec["dones"], dtype=bool),
                float(rec["return"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DemoFormatError(f"{path}: line {lineno}: malformed trajectory ({exc})") from None
        if len(traj) != header["horizon"]:
            raise DemoFormatError(
                f"{path}: line {lineno}: trajectory has {len(traj)} steps, header says {header['horizon']}")
        trajs.append(traj)
    if len(trajs) != header["n_traj"]:
        raise DemoFormatError(
            f"{path}: line {len(lines) + 1}: expected {header['n_traj']} trajectories, found {len(trajs)}")
    demos = DemoSet(trajs, header["mdp_id"], float(header["alpha"]),
                    float(header["mean_return"]), header.get("seed"))
    if demos.mean_return != _mean_return(trajs):
        raise DemoFormatError(f"{path}: line 1: mean_return disagrees with trajectory returns")
    return demos
