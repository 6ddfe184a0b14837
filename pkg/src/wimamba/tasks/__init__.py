"""Synthetic scenes and downstream task heads."""
from .channels import (
    N_BEAMS,
    ChannelSample,
    SceneConfig,
    beam_index_of,
    dft_codebook,
    generate_dataset,
    generate_sample,
    interp_mask_input,
    steering_vector,
)
from .heads import (
    DEFAULT_REPRESENTATION,
    TASKS,
    HeadConfig,
    TaskHead,
    dataset_scale,
    evaluate_task,
    fit_head,
    head_forward,
    make_head,
    nmse,
    predict,
    score,
    task_features,
    train_head,
)
