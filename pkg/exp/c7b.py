import time
import numpy as np
from mfsr.scenes import load_dataset
from mfsr.trainer import TrainConfig, baseline_scores, evaluate, train
from mfsr.metrics import leaderboard_score

train_scenes = load_dataset("exp/c7/train")
test_scenes = load_dataset("exp/c7/test")
cfg = TrainConfig.desk(epochs=160, lr=5e-3, patch=32, seed=0)
t0 = time.time()
rec = train(train_scenes, cfg, out_dir="exp/c7b/run")
mins = (time.time() - t0) / 60
print(f"train_minutes {mins:.1f}", flush=True)
print(f"final_val {rec.val_loss[-1]:.6f}", flush=True)
report = evaluate(test_scenes, cfg, models=rec.models)
model_db = dict(zip(report.scene_ids, report.cpsnr_db))
bic = baseline_scores(test_scenes, "bicubic")
esa = baseline_scores(test_scenes, "esa")
mm = float(np.mean(list(model_db.values())))
bm = float(np.mean(list(bic.values())))
print(f"model_mean {mm:.4f}  bicubic_mean {bm:.4f}  gain {mm-bm:+.4f}", flush=True)
print(f"normalized_vs_esa {leaderboard_score(model_db, esa).aggregate:.6f}", flush=True)
