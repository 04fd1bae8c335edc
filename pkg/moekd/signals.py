import logging

from django.dispatch import Signal, receiver

logger = logging.getLogger("moekd")

# All signals are sent with sender=<Pipeline instance> and stage=<stage name>.
stage_started = Signal()
stage_skipped = Signal()
stage_finished = Signal()  # also outputs=<list of artifact paths>
stage_failed = Signal()  # also error=<exception>


@receiver(stage_started)
def log_stage_started(sender, stage, **kwargs):
    logger.info(f"[{stage}] starting (seed {sender.seed})")


@receiver(stage_skipped)
def log_stage_skipped(sender, stage, **kwargs):
    logger.info(f"[{stage}] up to date, skipped")


@receiver(stage_finished)
def log_stage_finished(sender, stage, outputs, **kwargs):
    logger.info(f"[{stage}] finished, {len(outputs)} artifact(s) recorded")


@receiver(stage_failed)
def log_stage_failed(sender, stage, error, **kwargs):
    logger.error(f"[{stage}] failed: {error}")
