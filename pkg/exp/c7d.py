import time
import numpy as np
from mfsr.scenes import load_dataset
from mfsr.trainer import TrainConfig, baseline_scores, evaluate, train
from mfsr.metrics import leaderboard_score

tr = load_dataset("exp/c7/train")
te = load_dataset("exp/c7/test")
cfg = TrainConfig.desk(epochs=200, lr=5e-3, patch=32, seed=0, batch=2,
                       plateau_factor=0.85, plateau_patience=5)
t0 = time.time()
rec = train(tr, cfg, out_dir="exp/c7d/run")
print(f"train_minutes {(time.time()-t0)/60:.1f}", flush=True)
print(f"final_val {rec.val_loss[-1]:.6f}", flush=True)
rep = evaluate(te, cfg, models=rec.models)
model_db = dict(zip(rep.scene_ids, rep.cpsnr_db))
bic = baseline_scores(te, "bicubic")
esa = baseline_scores(te, "esa")
mm = float(np.mean(list(model_db.values())))
bm = float(np.mean(list(bic.values())))
print(f"model_mean {mm:.4f}  bicubic_mean {bm:.4f}  gain {mm-bm:+.4f}", flush=True)
print(f"normalized_vs_esa {leaderboard_score(model_db, esa).aggregate:.6f}", flush=True)
