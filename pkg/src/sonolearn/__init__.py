"""Learning robot behaviors from the sounds they make.

The pipeline: a deterministic contact-sound simulator renders parameterized
actions to audio (synth); clips are decimated and turned into normalized mel
spectrograms (dsp); a convolutional encoder is pretrained with BYOL-style
self-supervision (ssl, nn); a linear probe or a supervised baseline maps
audio to action parameters (models); and the harness evaluates action MSE
and repeat-normalized DTW similarity of re-simulated sounds (harness, dtw).
"""

from .dsp import (
    AudioClip,
    ChannelStats,
    Envelope,
    MelSpectrogram,
    SpectrogramNormalizer,
    amplitude_envelope,
    fit_channel_stats,
    mel_spectrogram,
    preprocess_clip,
)
from .dtw import DtwResult, NormalizationStats, dtw_distance, fit_normalization
from .harness import (
    ConfigError,
    EvalReport,
    RunConfig,
    StageError,
    ensure_dataset,
    eval_dtw_rollout,
    eval_mse,
    load_run_config,
    low_data_sweep,
    make_config,
    run_pipeline,
    validate_report,
)
from .models import (
    ActionScaler,
    AudioBehaviorModel,
    LinearProbe,
    SupervisedAudioRegressor,
    fit_normalizer,
    fit_probe_model,
    fit_supervised_model,
    least_squares_loss,
    load_model,
    oracle_baseline,
    random_baseline,
    save_model,
)
from .ssl import (
    AugmentationConfig,
    ByolPretrainer,
    PretrainConfig,
    SpectrogramPool,
    byol_loss,
    ema_update,
    make_view_pair,
    mixup,
    random_resize_crop,
)
from .synth import (
    TASKS,
    ActionSpec,
    ContactSoundDataset,
    DatasetError,
    SampleRecord,
    count_envelope_bursts,
    generate_dataset,
    load_dataset,
    mix_seed,
    quantize_action,
    sample_action,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ChannelStats",
    "Envelope",
    "MelSpectrogram",
    "SpectrogramNormalizer",
    "amplitude_envelope",
    "fit_channel_stats",
    "mel_spectrogram",
    "preprocess_clip",
    "DtwResult",
    "NormalizationStats",
    "dtw_distance",
    "fit_normalization",
    "ConfigError",
    "EvalReport",
    "RunConfig",
    "StageError",
    "ensure_dataset",
    "eval_dtw_rollout",
    "eval_mse",
    "load_run_config",
    "low_data_sweep",
    "make_config",
    "run_pipeline",
    "validate_report",
    "ActionScaler",
    "AudioBehaviorModel",
    "LinearProbe",
    "SupervisedAudioRegressor",
    "fit_normalizer",
    "fit_probe_model",
    "fit_supervised_model",
    "least_squares_loss",
    "load_model",
    "oracle_baseline",
    "random_baseline",
    "save_model",
    "AugmentationConfig",
    "ByolPretrainer",
    "PretrainConfig",
    "SpectrogramPool",
    "byol_loss",
    "ema_update",
    "make_view_pair",
    "mixup",
    "random_resize_crop",
    "TASKS",
    "ActionSpec",
    "ContactSoundDataset",
    "DatasetError",
    "SampleRecord",
    "count_envelope_bursts",
    "generate_dataset",
    "load_dataset",
    "mix_seed",
    "quantize_action",
    "sample_action",
    "simulate",
    "__version__",
]
