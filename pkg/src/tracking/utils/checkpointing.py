from pathlib import Path
from typing import Optional

from model.network import ModelHparams, ModelParams
from model.utils.io import load_weights, save_weights
from tracking.utils.settings import check_hparams_match


def write_training_checkpoint(
    checkpoint_path: Path,
    params: ModelParams,
    epoch: int,
    loss_trace: list,
) -> Path:
    """
    Overwrite the checkpoint with the parameters after `epoch` (0-based).

    The completed epoch count and the loss trace travel in the weights header.
    """
    extra = {
        "completed_epochs": epoch + 1,
        "loss_trace": [float(v) for v in loss_trace],
    }
    return save_weights(checkpoint_path, params, extra=extra)


def validate_checkpoint(checkpoint_path: Path, expected: ModelHparams) -> bool:
    """
    Check that a checkpoint can resume a run with the given architecture.

    Returns:
        bool: True if the checkpoint is valid or does not exist.

    Raises:
        WeightsFileError: If the checkpoint file is malformed.
        ConfigError: If it was written for other hyperparameters.
        ValueError: If its training state is inconsistent.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        print("No checkpoint found, skipping validation.")
        return True

    params, extra = load_weights(checkpoint_path)
    check_hparams_match(expected, params.hparams)
    completed = extra.get("completed_epochs")
    trace = extra.get("loss_trace", [])
    if not isinstance(completed, int) or completed < 0:
        raise ValueError(f"Checkpoint has an invalid epoch count: {completed!r}")
    if len(trace) != completed:
        raise ValueError(
            f"Checkpoint records {completed} epochs but {len(trace)} losses."
        )

    print(f"Checkpoint OK: {completed} completed epochs.")
    return True


def resume_from_checkpoint(
    checkpoint_path: Path, expected: ModelHparams
) -> Optional[tuple[ModelParams, int, list]]:
    """
    Load a validated checkpoint.

    Returns:
        Optional[tuple]: (parameters, completed epoch count, loss trace), or
            None if there is no checkpoint.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        return None
    validate_checkpoint(checkpoint_path, expected)
    params, extra = load_weights(checkpoint_path)
    return params, int(extra["completed_epochs"]), list(extra["loss_trace"])
