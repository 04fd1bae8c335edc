"""Stage decorator: resume from the manifest and record what each stage wrote"""

from functools import wraps

from .signals import stage_failed, stage_finished, stage_skipped, stage_started


def stage(name, requires=(), reads=None, config=None):
    """
    Decorator for Pipeline stage methods.
    Usage: @stage("fuse", requires=("train-experts", "train-router"), config=lambda p: {...})

    The wrapped method returns the list of paths it wrote. ``requires`` names
    the upstream stages whose recorded outputs are this stage's inputs,
    ``reads`` returns extra input files outside the workdir, and ``config``
    returns the JSON-able part of the pipeline config the stage depends on.
    A stage whose config hash and inputs match the manifest is skipped; the
    wrapper returns True when the stage ran.
    """

    def decorator(method):
        @wraps(method)
        def wrapper(pipeline):
            from .pipeline import StageFailed, StaleArtifact

            extra = reads(pipeline) if reads else []
            inputs = pipeline.stage_inputs(name, requires, extra)
            config_hash = pipeline.config_hash(name, config(pipeline) if config else {})

            record = pipeline.manifest.stages.get(name)
            if record and record["config_hash"] == config_hash and record["inputs"] == inputs:
                pipeline.verify_outputs(name)
                stage_skipped.send(sender=pipeline, stage=name)
                return False

            stage_started.send(sender=pipeline, stage=name)
            try:
                outputs = method(pipeline)
            except (StageFailed, StaleArtifact) as exc:
                stage_failed.send(sender=pipeline, stage=name, error=exc)
                raise
            except Exception as exc:
                stage_failed.send(sender=pipeline, stage=name, error=exc)
                raise StageFailed(name, exc) from exc

            pipeline.record_stage(name, config_hash, inputs, outputs)
            stage_finished.send(sender=pipeline, stage=name, outputs=outputs)
            return True

        wrapper.stage_name = name
        return wrapper

    return decorator
