"""Seeded end-to-end trials on the synthetic corpus: synth -> train -> segment -> Dice."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .data import SynthConfig, balance_sets, synth_generate
from .evaluate import evaluate_dataset
from .model import NetworkSpec, forward_main
from .segment import compute_histogram, find_peaks, invert_image, segment_dataset
from .trainer import TrainingSchedule, run_training


@dataclass
class TrialResult:
    seed: int
    polarity: str
    peaks: list[int]
    threshold_level: int
    mean_dice: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruct(main, images: np.ndarray, batch_size: int = 50) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward_main(main, torch.from_numpy(images[i : i + batch_size])).recon.numpy())
    return np.concatenate(out).astype(np.float64)


def synthetic_trial(
    seed: int,
    polarity: str = "bright",
    synth: SynthConfig | None = None,
    spec: NetworkSpec | None = None,
    schedule: TrainingSchedule | None = None,
    use_regions: bool = True,
) -> TrialResult:
    """Train on a freshly generated corpus and score the query set.

    The threshold is picked automatically from the pooled histogram of all
    query reconstructions. With ``use_regions`` the organ supports restrict
    both the histogram and the masks.
    """
    t0 = time.perf_counter()
    synth = replace(synth or SynthConfig(), polarity=polarity)
    spec = spec or NetworkSpec(input_size=(synth.size, synth.size))
    schedule = replace(schedule or TrainingSchedule(), seed=seed)
    reference, query = synth_generate(synth, seed)
    ref_b, query_b = balance_sets(reference, query, seed)
    state = run_training(schedule, ref_b, query_b, spec)
    recon = reconstruct(state.main, query.stack())
    regions = query.regions if use_regions else None
    oriented = [invert_image(r) if polarity == "dark" else r for r in recon]
    peaks = find_peaks(compute_histogram(oriented, regions))
    results = segment_dataset(recon, polarity, "auto", regions)
    report = evaluate_dataset(results, query.masks, query.names)
    return TrialResult(
        seed, polarity, [int(p) for p in peaks], results[0].threshold_level, report.mean_dice, time.perf_counter() - t0
    )
