"""Dry-run of the acceptance suite's training grids with the exact configs and
seeds the fixtures use, so the expensive criteria are verified before pytest.

Prints each run's overall and temporal-subset R@1@0.5 plus the criterion
checks (sampling gap >= 3, quality/fusion orderings, temporal-subset margin).
"""

import dataclasses
import tempfile

import numpy as np

from drn.config import AblateConfig, EvalConfig, ModelConfig, SynthConfig, TrainConfig, apply_fusion_mode
from drn import dataio, synth
from drn import train as tr
from drn.evaluate import predict_dataset, recall_at, top_n


def run_grid(methods, synth_cfg, epochs, seeds, tag):
    rows = {m: {} for m in methods}
    for seed in seeds:
        with tempfile.TemporaryDirectory() as tmp:
            manifest = synth.generate_dataset(synth_cfg, seed=seed, out_dir=tmp)
            train_ds = dataio.load_dataset(manifest, "train")
            test_ds = dataio.load_dataset(manifest, "test")
            gts = [s.gt_segments for s in test_ds.samples]
            t_idx = [i for i, s in enumerate(test_ds.samples) if s.kind == "temporal"]
            for sampling, quality, fusion in methods:
                mcfg = ModelConfig(quality_head=quality)
                apply_fusion_mode(mcfg, fusion)
                model = tr.build_model_for_dataset(mcfg, train_ds, seed=seed)
                tcfg = TrainConfig(sampling=sampling, epochs_stage1=epochs[0],
                                   epochs_stage2=epochs[1], epochs_stage3=epochs[2])
                tr.train_three_step(model, tcfg, EvalConfig(), train_ds, None, seed=seed)
                cands = predict_dataset(model, test_ds.samples)
                preds = [top_n(c, 1) for c in cands]
                overall = recall_at(preds, gts, 1, 0.5)
                temporal = recall_at([preds[i] for i in t_idx], [gts[i] for i in t_idx], 1, 0.5)
                rows[(sampling, quality, fusion)][seed] = (overall, temporal)
                print(f"[{tag}] seed{seed} {sampling}/{quality}/{fusion}: "
                      f"R@1@0.5={overall:.2f} temporal={temporal:.2f}", flush=True)
    means = {m: (float(np.mean([v[0] for v in rows[m].values()])),
                 float(np.mean([v[1] for v in rows[m].values()])))
             for m in methods}
    return means


def main():
    ab = AblateConfig()

    grid_methods = [("All", "iou", "full"), ("Center", "iou", "full"),
                    ("All", "none", "full"), ("All", "iou", "none")]
    synth_main = dataclasses.replace(SynthConfig(), num_train=ab.num_train,
                                     num_val=ab.num_val, num_test=ab.num_test)
    means = run_grid(grid_methods, synth_main,
                     (ab.epochs_stage1, ab.epochs_stage2, ab.epochs_stage3), list(ab.seeds), "grid")
    all_full = means[("All", "iou", "full")][0]
    center = means[("Center", "iou", "full")][0]
    no_iou = means[("All", "none", "full")][0]
    neither = means[("All", "iou", "none")][0]
    print(f"\n[grid] All {all_full:.2f} | Center {center:.2f} | no-iou {no_iou:.2f} | neither {neither:.2f}")
    print(f"[check6a] All - Center = {all_full - center:.2f} (need >= 3)  -> {all_full - center >= 3}")
    print(f"[check6b] iou >= none: {all_full:.2f} >= {no_iou:.2f} -> {all_full >= no_iou}")
    print(f"[check6c] full >= neither: {all_full:.2f} >= {neither:.2f} -> {all_full >= neither}")

    temporal_methods = [("All", "iou", "full"), ("All", "iou", "mlf")]
    synth_temporal = dataclasses.replace(
        SynthConfig(), segments=ab.temporal_segments, num_train=ab.temporal_num_train,
        num_val=0, num_test=ab.temporal_num_test, temporal_fraction=ab.temporal_fraction)
    t_means = run_grid(temporal_methods, synth_temporal, ab.temporal_epochs, list(ab.seeds), "temporal")
    with_loc = t_means[("All", "iou", "full")][1]
    without = t_means[("All", "iou", "mlf")][1]
    print(f"\n[check7] temporal with-loc {with_loc:.2f} > without {without:.2f} -> {with_loc > without}")


if __name__ == "__main__":
    main()
