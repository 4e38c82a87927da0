"""Two-stage cyclic adversarial training of the main module and discriminator."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from .data import SliceDataset
from .losses import (
    loss_discriminator,
    loss_disjoint,
    loss_fence,
    loss_main_total,
    loss_reconstruction,
)
from .model import (
    Discriminator,
    MainModule,
    NetworkSpec,
    build_discriminator,
    build_main_module,
    forward_discriminator,
    forward_main,
)
from .segment import compute_histogram, find_peaks

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("step", "stage", "cycle", "loss_name", "value")
SEPARATION_BAND = (3, 4)


@dataclass
class TrainingSchedule:
    stage1_cycles: int = 2
    stage2_cycles: int = 1
    epochs_per_d_step: int = 1
    epochs_per_m_step: int = 1
    batch_size: int = 16
    learning_rate: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stop_on_separation: bool = False
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self) -> None:
        if self.stage1_cycles < 1 or self.stage2_cycles < 0:
            raise ValueError("need stage1_cycles >= 1 and stage2_cycles >= 0")
        if self.epochs_per_d_step < 1 or self.epochs_per_m_step < 1 or self.batch_size < 1:
            raise ValueError("epochs per step and batch size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ValueError("loss_weights must be three non-negative values, not all zero")

    @property
    def total_cycles(self) -> int:
        return self.stage1_cycles + self.stage2_cycles

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["loss_weights"] = list(self.betas), list(self.loss_weights)
        return d


@dataclass
class TrainingState:
    spec: NetworkSpec
    schedule: TrainingSchedule
    main: MainModule
    disc: Discriminator
    opt_main: torch.optim.Adam
    opt_disc: torch.optim.Adam
    rng: np.random.Generator
    stage: int = 1
    cycle: int = 0
    step: int = 0
    augmented_reference: np.ndarray | None = None
    loss_rows: list[tuple] = field(default_factory=list)
    last_d_counts: dict = field(default_factory=dict)

    def record(self, name: str, value: float) -> None:
        self.loss_rows.append((self.step, self.stage, self.cycle + 1, name, float(value)))


def _adam(params, schedule: TrainingSchedule) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=schedule.learning_rate, betas=schedule.betas, eps=schedule.adam_eps, foreach=False
    )


def init_state(spec: NetworkSpec, schedule: TrainingSchedule) -> TrainingState:
    seed = schedule.seed
    main = build_main_module(spec, seed)
    disc = build_discriminator(spec, seed + 1)
    torch.manual_seed(seed)
    return TrainingState(
        spec=spec,
        schedule=schedule,
        main=main,
        disc=disc,
        opt_main=_adam(main.parameters(), schedule),
        opt_disc=_adam(disc.parameters(), schedule),
        rng=np.random.default_rng(seed),
    )


def _images(ds) -> np.ndarray:
    if isinstance(ds, SliceDataset):
        return ds.stack()
    return np.asarray(ds, dtype=np.float32)


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def generate_fence(main: MainModule, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """I_fc for every image, inference mode, no gradients."""
    out = []
    with torch.no_grad():
        for idx in _batches(np.arange(len(images)), batch_size):
            out.append(forward_main(main, torch.from_numpy(images[idx]), False).fence.numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.float32)


def real_stream(state: TrainingState, reference) -> np.ndarray:
    """Images the discriminator treats as real: R_d, plus I_fc(R_d) in stage 2."""
    ref = _images(reference)
    if state.stage == 2 and state.augmented_reference is not None:
        return np.concatenate([ref, state.augmented_reference])
    return ref


def train_discriminator_step(state: TrainingState, reference, query) -> TrainingState:
    """Update D on shuffled real (+1) and fake (-1) images with M frozen.

    Fakes are regenerated from the query images batch by batch.
    """
    real = real_stream(state, reference)
    src = _images(query)
    if len(real) == 0 or len(src) == 0:
        raise ValueError("discriminator step needs non-empty reference and query sets")
    sched = state.schedule
    state.last_d_counts = {"real": len(real), "fake": len(src)}
    for p in state.disc.parameters():
        p.requires_grad_(True)
    for _ in range(sched.epochs_per_d_step):
        labels = np.concatenate([np.ones(len(real), bool), np.zeros(len(src), bool)])
        index = np.concatenate([np.arange(len(real)), np.arange(len(src))])
        order = state.rng.permutation(len(labels))
        t0 = time.perf_counter()
        for b in _batches(order, sched.batch_size):
            r_idx, f_idx = index[b][labels[b]], index[b][~labels[b]]
            with torch.no_grad():
                fakes = forward_main(state.main, torch.from_numpy(src[f_idx]), False).fence
            x = torch.cat([torch.from_numpy(real[r_idx]), fakes])
            scores = forward_discriminator(state.disc, x, train_mode=True)
            loss = loss_discriminator(scores[len(r_idx) :], scores[: len(r_idx)])
            state.opt_disc.zero_grad(set_to_none=True)
            loss.backward()
            state.opt_disc.step()
            state.step += 1
            state.record("loss_discriminator", loss.item())
        ms = 1e3 * (time.perf_counter() - t0) / len(labels)
        log.info("stage %d cycle %d D epoch: %.2f ms/slice", state.stage, state.cycle + 1, ms)
    state.disc.eval()
    return state


def main_losses(state: TrainingState, x: torch.Tensor, train_mode: bool = True) -> dict:
    out = forward_main(state.main, x, train_mode)
    scores = forward_discriminator(state.disc, out.fence, train_mode=False)
    lf = loss_fence(scores)
    lw = loss_disjoint(out.fence, out.wild)
    lr = loss_reconstruction(x, out.recon)
    total = loss_main_total(lf, lw, lr, state.schedule.loss_weights)
    return {"loss_fence": lf, "loss_disjoint": lw, "loss_reconstruction": lr, "loss_main_total": total}


def train_main_step(state: TrainingState, query) -> TrainingState:
    """Update M on the query images through the frozen discriminator."""
    src = _images(query)
    if len(src) == 0:
        raise ValueError("main step needs a non-empty query set")
    sched = state.schedule
    for p in state.disc.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(sched.epochs_per_m_step):
            order = state.rng.permutation(len(src))
            t0 = time.perf_counter()
            for b in _batches(order, sched.batch_size):
                x = torch.from_numpy(src[b])
                losses = main_losses(state, x)
                state.opt_main.zero_grad(set_to_none=True)
                losses["loss_main_total"].backward()
                state.opt_main.step()
                state.step += 1
                for name, v in losses.items():
                    state.record(name, v.item())
            ms = 1e3 * (time.perf_counter() - t0) / len(src)
            log.info("stage %d cycle %d M epoch: %.2f ms/slice", state.stage, state.cycle + 1, ms)
    finally:
        for p in state.disc.parameters():
            p.requires_grad_(True)
    state.main.eval()
    return state


def run_cycle(state: TrainingState, reference, query) -> TrainingState:
    train_discriminator_step(state, reference, query)
    train_main_step(state, query)
    state.cycle += 1
    return state


def enter_stage2(state: TrainingState, reference) -> TrainingState:
    """Freeze I_fc(R_d) with the current weights and add it to D's real set."""
    if state.stage != 1:
        raise RuntimeError("already in stage 2")
    state.augmented_reference = generate_fence(state.main, _images(reference))
    state.stage = 2
    return state


def peak_separation(recons, **peak_kw) -> dict:
    hist = compute_histogram(np.asarray(recons))
    peaks = find_peaks(hist, **peak_kw)
    lo, hi = SEPARATION_BAND
    return {"n_peaks": len(peaks), "peaks": peaks, "separated": lo <= len(peaks) <= hi}


def peak_separation_monitor(state: TrainingState, probe_batch, **peak_kw) -> dict:
    """Advisory report on the pooled I_ro histogram of a probe batch."""
    with torch.no_grad():
        recon = forward_main(state.main, probe_batch, False).recon.numpy()
    return peak_separation(recon, **peak_kw)


# --------------------------------------------------------------------------- persistence


def _opt_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{idx}/{k}"] = v.detach().cpu().numpy()
    return {"param_groups": sd["param_groups"]}, arrays


def _opt_load(opt: torch.optim.Optimizer, meta: dict, arrays: dict, prefix: str) -> None:
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, k = name.split("/")
        state.setdefault(int(idx), {})[k] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_state(state: TrainingState, path: Path) -> None:
    arrays = {}
    for prefix, model in (("main", state.main), ("disc", state.disc)):
        for k, v in model.state_dict().items():
            arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
    om, a = _opt_arrays(state.opt_main, "opt_main")
    arrays.update(a)
    od, a = _opt_arrays(state.opt_disc, "opt_disc")
    arrays.update(a)
    arrays["torch_rng"] = torch.get_rng_state().numpy()
    if state.augmented_reference is not None:
        arrays["augmented_reference"] = state.augmented_reference
    meta = {
        "spec": state.spec.to_dict(),
        "schedule": state.schedule.to_dict(),
        "progress": {"stage": state.stage, "cycle": state.cycle, "step": state.step, "seed": state.schedule.seed},
        "numpy_rng": state.rng.bit_generator.state,
        "opt_main": om,
        "opt_disc": od,
    }
    checkpoint.write_archive(path, meta, arrays)


def load_state(path: Path) -> TrainingState:
    meta, arrays = checkpoint.read_archive(path)
    spec = NetworkSpec.from_dict(meta["spec"])
    schedule = TrainingSchedule(**meta["schedule"])
    main, disc = MainModule(spec), Discriminator(spec)
    for prefix, model in (("main", main), ("disc", disc)):
        sd = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
        model.load_state_dict(sd)
        model.eval()
    opt_main, opt_disc = _adam(main.parameters(), schedule), _adam(disc.parameters(), schedule)
    _opt_load(opt_main, meta["opt_main"], arrays, "opt_main")
    _opt_load(opt_disc, meta["opt_disc"], arrays, "opt_disc")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["numpy_rng"]
    torch.set_rng_state(torch.from_numpy(arrays["torch_rng"].copy()))
    prog = meta["progress"]
    return TrainingState(
        spec=spec,
        schedule=schedule,
        main=main,
        disc=disc,
        opt_main=opt_main,
        opt_disc=opt_disc,
        rng=rng,
        stage=prog["stage"],
        cycle=prog["cycle"],
        step=prog["step"],
        augmented_reference=arrays.get("augmented_reference"),
    )


def load_main_module(path: Path) -> MainModule:
    return load_state(path).main


# --------------------------------------------------------------------------- driver


def _flush_losses(state: TrainingState, path: Path | None) -> None:
    if path is None:
        state.loss_rows.clear()
        return
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_CSV_HEADER)
        for step, stage, cycle, name, value in state.loss_rows:
            w.writerow((step, stage, cycle, name, repr(value)))
    state.loss_rows.clear()


def run_training(
    schedule: TrainingSchedule,
    reference,
    query,
    spec: NetworkSpec | None = None,
    out_dir: Path | None = None,
    state: TrainingState | None = None,
    callbacks: Sequence[Callable[[TrainingState], object]] = (),
    probe=None,
) -> TrainingState:
    """Stage-1 cycles, the stage-2 switch, then stage-2 cycles.

    With ``out_dir`` a checkpoint ``cycle_XX.ckpt`` is written after every
    cycle, plus ``final.ckpt``, and losses are appended to ``losses.csv``.
    Passing a loaded ``state`` resumes after its last completed cycle.
    Callbacks run after each cycle.
    """
    if len(reference) != len(query):
        raise ValueError(
            f"reference and query sets must be balanced first ({len(reference)} vs {len(query)})"
        )
    if state is None:
        if spec is None:
            raise ValueError("need a NetworkSpec to start training")
        state = init_state(spec, schedule)
    out_dir = Path(out_dir) if out_dir is not None else None
    loss_csv = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        loss_csv = out_dir / "losses.csv"
    if probe is None:
        probe = _images(query)[: schedule.batch_size]

    while state.cycle < schedule.total_cycles:
        if state.stage == 1 and state.cycle >= schedule.stage1_cycles:
            enter_stage2(state, reference)
        t0 = time.perf_counter()
        run_cycle(state, reference, query)
        _flush_losses(state, loss_csv)
        report = peak_separation_monitor(state, probe)
        log.info(
            "cycle %d/%d (stage %d) done in %.1fs; I_ro peaks %s",
            state.cycle, schedule.total_cycles, state.stage, time.perf_counter() - t0, report["peaks"],
        )
        if out_dir is not None:
            save_state(state, out_dir / f"cycle_{state.cycle:02d}.ckpt")
        for cb in callbacks:
            cb(state)
        if schedule.stop_on_separation and report["separated"]:
            log.info("peaks separated (%d); stopping early", report["n_peaks"])
            break
    if out_dir is not None:
        save_state(state, out_dir / "final.ckpt")
    return state
