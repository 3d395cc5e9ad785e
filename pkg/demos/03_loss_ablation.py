"""
Loss ablation
=============

Train the same network with growing sets of loss terms and compare the
median test errors. Three seeds and short runs keep this to a few minutes;
the acceptance suite uses five seeds and longer training.
"""

from siamreloc.dataset import SynthSceneConfig, generate_synth_splits
from siamreloc.trainer import TrainConfig, run_ablation, summarize_ablation


def scenes(seed):
    return generate_synth_splits(SynthSceneConfig(rng_seed=seed))


rows = run_ablation(scenes, TrainConfig(learning_rate=1e-3, max_epochs=40), ["G", "G+C", "G+C+R", "full"], [0, 1, 2])
for combination, (pos, ort) in summarize_ablation(rows).items():
    print(f"{combination:6s} {pos:.3f} m  {ort:.2f} deg")
