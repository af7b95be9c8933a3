import time
from mfsr.trainer import TrainConfig, train
from mfsr.scenes import load_dataset

scenes = load_dataset("exp/c7/train")
for name, over in [
    ("lr2e-3_p32", dict(lr=2e-3, patch=32, epochs=16)),
    ("lr3e-3_p32", dict(lr=3e-3, patch=32, epochs=16)),
    ("lr2e-3_p48", dict(lr=2e-3, patch=48, epochs=12)),
    ("lr5e-3_p32", dict(lr=5e-3, patch=32, epochs=16)),
]:
    cfg = TrainConfig.desk(**over)
    t0 = time.time()
    rec = train(scenes, cfg)
    dt = time.time() - t0
    print(f"{name}: {dt:6.1f}s val={rec.val_loss[-1]:.5f} train={rec.train_loss[-1]:.5f}", flush=True)
    print("  val trace:", " ".join(f"{v:.4f}" for v in rec.val_loss), flush=True)
