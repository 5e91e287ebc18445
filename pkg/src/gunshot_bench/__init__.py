"""Synthetic gunshot audio benchmark.

Synthesis of labeled gunshot/background clips, from-scratch DSP features
(log-mel spectrograms, autocorrelation, bag-of-audio-words), an SVM baseline
and a joint detection + gun-type CNN trained with an in-house autodiff core,
and a reproducible split/metric evaluation harness with a CLI front end.
"""

__version__ = "0.1.0"

from .synthgun import (  # noqa: F401
    AudioClip,
    FirearmClass,
    FirearmClassSpec,
    SceneConfig,
    ShotEvent,
    DEFAULT_CLASS_SPECS,
    compose_scene,
    generate_dataset,
    synth_muzzle_blast,
    synth_shockwave,
    synth_shot,
)
