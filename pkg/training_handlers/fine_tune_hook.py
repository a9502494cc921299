import logging
import shlex
import subprocess
from typing import Optional

logger = logging.getLogger(__name__)


def run_fine_tune_hook(
    command: Optional[str],
    stage: str,
    dataset_path: str,
    model_ref: str,
    lr: float,
    batch_size: int,
) -> str:
    """Hand a dataset to the external trainer; its last stdout line is the model_ref.

    `command` is a template with {stage}, {dataset}, {model_ref}, {lr} and {batch}.
    With no command the model_ref is returned unchanged.
    """
    if not command:
        logger.info("no fine-tune command configured, %s keeps %s", stage, model_ref)
        return model_ref
    argv = shlex.split(
        command.format(
            stage=stage,
            dataset=dataset_path,
            model_ref=model_ref,
            lr=lr,
            batch=batch_size,
        )
    )
    logger.info("running %s fine-tune hook: %s", stage, argv[0])
    completed = subprocess.run(argv, capture_output=True, text=True, check=True)
    lines = [line.strip() for line in completed.stdout.splitlines() if line.strip()]
    new_ref = lines[-1] if lines else model_ref
    logger.info("%s hook returned model_ref %s", stage, new_ref)
    return new_ref
