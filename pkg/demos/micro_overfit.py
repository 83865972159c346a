"""Overfit GELAN-ViT-mini on ten synthetic 64x64 images and report train-set mAP.

Takes a couple of minutes on one CPU core.  Pass a model name to try another
zoo entry, e.g. ``python demos/micro_overfit.py gelan-repvit-mini``.
"""

import sys
import tempfile
from pathlib import Path

from gelanvit import data as D
from gelanvit import train as Tr

name = sys.argv[1] if len(sys.argv) > 1 else "gelan-vit-mini"
with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "micro"
    D.gen_dataset(10, 2, 64, 0, root)
    ds = D.Dataset(root)
    cfg = Tr.TrainConfig(model=name, epochs=200, batch_size=2, loss_scale=128.0, grad_clip=10.0, aug=D.AugConfig.identity())

    def progress(row):
        if row.epoch % 20 == 0 or row.epoch == cfg.epochs - 1:
            print(f"epoch {row.epoch:>3}  box {row.box:.4f}  obj {row.obj:.4f}  mAP50 {row.val_map50:.3f}  mAP50:95 {row.val_map50_95:.3f}")

    model, log = Tr.train(cfg, ds, progress=progress)
    print(f"best train mAP50 {max(log.column('val_map50')):.3f}")
    print(Tr.evaluate(model, ds).format())
