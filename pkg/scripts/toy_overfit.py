"""Overfit the wiring-4 model on four synthetic 64x64 chips and report loss and building F1."""

import argparse
import json
import time

import numpy as np

from floodsense.data import compute_stats, normalize, synth_event
from floodsense.ffss import FloodDamageModel
from floodsense.losses import LossConfig, TaskLossConfig
from floodsense.train import TrainConfig, dataset_class_weights, evaluate, mean_loss, train


def run(seed=0, steps=300, lr=1e-3, batch_size=1, accumulation_steps=1, verbose=True):
    event = synth_event(seed, 4, 64)
    stats = compute_stats(event.chips)
    chips = [normalize(c, stats) for c in event.chips]
    weights = dataset_class_weights(chips, event.truth.values())
    loss_cfg = LossConfig()
    for task, w in weights.items():
        base = loss_cfg.tasks[task]
        loss_cfg.tasks[task] = TaskLossConfig(base.lambda_ce, base.lambda_lov, w)
    cfg = TrainConfig(lr=lr, batch_size=batch_size, accumulation_steps=accumulation_steps, epochs=10**6,
                      max_steps=steps, seed=seed, loss=loss_cfg)
    model = FloodDamageModel(cfg.model, wiring=4, seed=seed)
    t0 = time.time()
    initial = mean_loss(model, chips, loss_cfg)

    def on_step(step, loss):
        if verbose and step % 25 == 0:
            print(f"step {step:4d} loss {loss:.4f} ({time.time() - t0:.0f}s)", flush=True)

    trace = train(model, chips, cfg, on_step=on_step)
    final = mean_loss(model, chips, loss_cfg)
    report = evaluate(model, chips, event.footprints, event.truth)
    return {
        "initial_loss": initial,
        "final_loss": final,
        "reduction": (initial - final) / initial,
        "building_f1_hmean": report["building"]["f1_hmean"],
        "building_f1": report["building"]["f1"],
        "seconds": time.time() - t0,
        "trace": trace,
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()
    res = run(args.seed, args.steps, args.lr)
    res.pop("trace")
    print(json.dumps(res, indent=1))
