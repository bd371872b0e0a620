"""Train each input wiring (0..4) briefly on one synthetic event and compare held-out metrics."""

import argparse
import json

from floodsense.data import SplitSpec, compute_stats, normalize, split, synth_event
from floodsense.encoders import ModelConfig
from floodsense.ffss import FloodDamageModel
from floodsense.losses import LossConfig, TaskLossConfig
from floodsense.train import TrainConfig, dataset_class_weights, evaluate, train


def run_wiring(wiring, event, parts, steps, lr, seed, model_cfg):
    by_id = {c.chip_id: c for c in event.chips}
    tr = [by_id[i] for i in parts["train"]]
    te = [by_id[i] for i in parts["test"]]
    stats = compute_stats(tr)
    tr = [normalize(c, stats) for c in tr]
    te = [normalize(c, stats) for c in te]
    train_ids = set(parts["train"])
    classes = [k for fid, k in event.truth.items() if event.chip_of[fid] in train_ids]
    loss = LossConfig()
    for task, w in dataset_class_weights(tr, classes).items():
        b = loss.tasks[task]
        loss.tasks[task] = TaskLossConfig(b.lambda_ce, b.lambda_lov, w)
    cfg = TrainConfig(lr=lr, batch_size=1, accumulation_steps=2, epochs=10**6, max_steps=steps,
                      seed=seed, wiring=wiring, loss=loss, model=model_cfg)
    model = FloodDamageModel(model_cfg, wiring=wiring, seed=seed)
    trace = train(model, tr, cfg)
    rep = evaluate(model, te, event.footprints, event.truth, loss_cfg=loss)
    b = rep.get("building", {})
    return {"wiring": wiring, "final_train_loss": trace[-1], "test_loss": rep["loss"],
            "building_f1_hmean": b.get("f1_hmean"), "building_upper_adjacent_hmean": b.get("upper_adjacent_f1_hmean"),
            "fm_f1": rep["pixel"].get("fm", {}).get("f1"), "loc_f1": rep["pixel"]["loc"]["f1"]}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--chips", type=int, default=10)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--wirings", default="0,1,2,3,4")
    args = ap.parse_args()
    event = synth_event(args.seed, args.chips, 64)
    parts = split([c.chip_id for c in event.chips], SplitSpec(seed=args.seed))
    model_cfg = ModelConfig()
    rows = [run_wiring(int(w), event, parts, args.steps, args.lr, args.seed, model_cfg)
            for w in args.wirings.split(",")]
    for r in rows:
        print(json.dumps(r))


if __name__ == "__main__":
    main()
