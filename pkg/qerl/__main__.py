import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import fire  # type: ignore[import-untyped]
from danielutils import error, warning

from .config import load_config
from .errors import QerlError, ValidationError
from .files import write_json_atomic
from .logging_ import setup_logging
from .rl_core import run_gradcheck_suite
from .trainer import (
    ABLATION_VARIANTS,
    CHECKPOINT_FILE,
    EVENTS_FILE,
    METRICS_FILE,
    TEST_CASES_FILE,
    evaluate,
    export_metrics,
    replay,
    run_ablation_suite,
    run_training,
)
from .validators import validate_required_path

setup_logging()
logger = logging.getLogger(__name__)

SUBCOMMANDS: Tuple[str, ...] = ("train", "ablate", "evaluate", "replay", "export", "gradcheck")
GRADCHECK_FILE = "gradcheck.json"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


@dataclass(frozen=True)
class CliInvocation:
    subcommand: str
    config: Optional[str] = None
    overrides: Tuple[str, ...] = ()
    out: Optional[str] = None
    seeds: Optional[int] = None
    feedback: Optional[str] = None
    tests: Optional[str] = None
    checkpoint: Optional[str] = None
    events: Optional[str] = None
    episodes: int = 10


def _progress(total: int, desc: str):  # type: ignore[no-untyped-def]
    try:
        from tqdm import tqdm

        return tqdm(total=total, desc=desc, unit="ep")
    except ImportError:
        return None


def _train(invocation: CliInvocation) -> None:
    config = load_config(validate_required_path("config", invocation.config), invocation.overrides)
    out = invocation.out or config.output_dir
    bar = _progress(config.episode_count, "train")
    try:
        run_training(config, out, bar)
    finally:
        if bar is not None:
            bar.close()


def _ablate(invocation: CliInvocation) -> None:
    config = load_config(validate_required_path("config", invocation.config), invocation.overrides)
    out = invocation.out or config.output_dir
    bar = _progress(len(ABLATION_VARIANTS) * (invocation.seeds or config.n_seeds), "ablate")
    try:
        run_ablation_suite(config, invocation.seeds, out, bar)
    finally:
        if bar is not None:
            bar.close()


def _evaluate(invocation: CliInvocation) -> None:
    config = load_config(validate_required_path("config", invocation.config), invocation.overrides)
    out = invocation.out or config.output_dir
    checkpoint = invocation.checkpoint or str(Path(out) / CHECKPOINT_FILE)
    metrics = evaluate(checkpoint, invocation.episodes, out)
    logger.info("Evaluated %d greedy episodes from %s", len(metrics), checkpoint)


def _replay(invocation: CliInvocation) -> None:
    config = load_config(validate_required_path("config", invocation.config), invocation.overrides)
    feedback = validate_required_path("feedback", invocation.feedback)
    tests = invocation.tests or str(Path(feedback).parent / TEST_CASES_FILE)
    out = invocation.out or config.output_dir
    _, summary = replay(config, feedback, tests, out)
    if summary.rejected:
        warning(f"{summary.rejected} feedback line(s) were rejected, see the log for line numbers")


def _export(invocation: CliInvocation) -> None:
    config = load_config(validate_required_path("config", invocation.config), invocation.overrides)
    out = invocation.out or config.output_dir
    events = invocation.events or str(Path(out) / EVENTS_FILE)
    export_metrics(events, Path(out) / METRICS_FILE)


def _gradcheck(invocation: CliInvocation) -> None:
    results = run_gradcheck_suite()
    worst = max(r.max_relative_error for r in results)
    passed = all(r.passed for r in results)
    if invocation.out is not None:
        write_json_atomic(
            Path(invocation.out) / GRADCHECK_FILE,
            {"max_relative_error": worst, "passed": passed, "cases": [r.to_dict() for r in results]},
        )
    print(f"gradcheck: {len(results)} cases, max relative error {worst:.3e}")
    if not passed:
        raise QerlError(f"Gradient check failed: max relative error {worst:.3e}", module="rl_core")


_HANDLERS = {
    "train": _train,
    "ablate": _ablate,
    "evaluate": _evaluate,
    "replay": _replay,
    "export": _export,
    "gradcheck": _gradcheck,
}


def execute(invocation: CliInvocation) -> int:
    """Runs one subcommand. 0 on success, 1 on validation errors, 2 on anything else."""
    start = time.perf_counter()
    code = EXIT_OK
    try:
        if invocation.subcommand not in _HANDLERS:
            raise ValidationError(
                f"Unknown subcommand '{invocation.subcommand}', expected one of {', '.join(SUBCOMMANDS)}",
                key="subcommand",
                module="cli",
            )
        _HANDLERS[invocation.subcommand](invocation)
    except ValidationError as e:
        error(e.describe())
        code = EXIT_VALIDATION
    except QerlError as e:
        error(e.describe())
        code = EXIT_RUNTIME
    except Exception as e:
        logger.exception("Unexpected failure in '%s'", invocation.subcommand)
        error(f"[cli] {e}")
        code = EXIT_RUNTIME
    finally:
        logger.info(
            "'%s' finished in %.3fs (exit code %d)", invocation.subcommand, time.perf_counter() - start, code
        )
    return code


class QerlCommands:
    """qerl <subcommand> --config PATH [--out DIR] [--set key=value ...]"""

    def __init__(self, overrides: Sequence[str] = ()) -> None:
        self._overrides = tuple(overrides)
        self.exit_code = EXIT_OK

    def _run(self, subcommand: str, **kwargs: object) -> None:
        self.exit_code = execute(CliInvocation(subcommand, overrides=self._overrides, **kwargs))  # type: ignore[arg-type]

    def train(self, config: Optional[str] = None, out: Optional[str] = None) -> None:
        """Runs training episodes and writes all run artifacts."""
        self._run("train", config=config, out=out)

    def ablate(self, config: Optional[str] = None, out: Optional[str] = None, seeds: Optional[int] = None) -> None:
        """Full system plus the four single-flag ablations."""
        self._run("ablate", config=config, out=out, seeds=seeds)

    def evaluate(
        self,
        config: Optional[str] = None,
        checkpoint: Optional[str] = None,
        episodes: int = 10,
        out: Optional[str] = None,
    ) -> None:
        """Greedy episodes from a checkpoint, no learning."""
        self._run("evaluate", config=config, checkpoint=checkpoint, episodes=episodes, out=out)

    def replay(
        self,
        config: Optional[str] = None,
        feedback: Optional[str] = None,
        tests: Optional[str] = None,
        out: Optional[str] = None,
    ) -> None:
        """Feeds a JSONL feedback file through rewards and knowledge evolution."""
        self._run("replay", config=config, feedback=feedback, tests=tests, out=out)

    def export(self, config: Optional[str] = None, events: Optional[str] = None, out: Optional[str] = None) -> None:
        """Re-derives metrics.csv from an event log."""
        self._run("export", config=config, events=events, out=out)

    def gradcheck(self, config: Optional[str] = None, out: Optional[str] = None) -> None:
        """Finite-difference check of the network backward pass."""
        self._run("gradcheck", config=config, out=out)


def split_overrides(argv: Sequence[str]) -> Tuple[List[str], List[str]]:
    """Pulls every `--set key=value` (or `--set=key=value`) out of argv."""
    rest: List[str] = []
    overrides: List[str] = []
    index = 0
    while index < len(argv):
        arg = argv[index]
        if arg == "--set":
            if index + 1 >= len(argv):
                raise ValidationError("--set needs a key=value argument", key="set", module="cli")
            overrides.append(argv[index + 1])
            index += 2
            continue
        if arg.startswith("--set="):
            overrides.append(arg[len("--set=") :])
        else:
            rest.append(arg)
        index += 1
    return rest, overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(args)
    except ValidationError as e:
        error(e.describe())
        return EXIT_VALIDATION
    commands = QerlCommands(overrides)
    try:
        fire.Fire(commands, command=rest, name="qerl")
    except fire.core.FireExit as e:
        return int(e.code or 0)
    return commands.exit_code


if __name__ == "__main__":
    sys.exit(main())

__all__ = ["CliInvocation", "SUBCOMMANDS", "execute", "split_overrides", "QerlCommands", "main"]
