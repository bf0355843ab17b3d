import time

from handlift.metrics import evaluate
from handlift.pipeline import annotate_sequence
from handlift.search import SearchConfig
from handlift.synth import NoiseSpec, SceneSpec, gt_annotations, generate_scene, render_detections

t0 = time.perf_counter()
spec = SceneSpec(n_cameras=8, n_hands=4, duration_frames=200, seed=1)
gt, cameras = generate_scene(spec)
frames = render_detections(gt, cameras, NoiseSpec(pixel_sigma=0.0, p_miss=0.0,
                                                  p_false_positive=0.0, p_side_flip=0.0), seed=1)
truth = gt_annotations(gt)
print(f"synth {time.perf_counter() - t0:.2f}s (untimed)")

total = 0.0
for mode in ("DM", "TM"):
    for crit in ("NS", "CD", "REPR"):
        cfg = SearchConfig(mode=mode, criterion=crit)
        t0 = time.perf_counter()
        anns, summary = annotate_sequence(cfg, cameras, frames)
        rep = evaluate(truth, anns)
        dt = time.perf_counter() - t0
        total += dt
        print(f"{mode}-{crit}: {dt:6.2f}s  mpjpe={rep.mpjpe_mm:.2e}mm pck={rep.pck_auc:.4f} "
              f"track={rep.track_acc:.4f} skipped={rep.skipped_frames}")
print(f"TOTAL {total:.2f}s")
