"""Regenerate the evaluation fixture and its reference AP/AR.

Requires numpy and pycocotools. Run from this directory:

    python3 make_eval_fixture.py
"""
import contextlib
import io
import json

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

schema = json.load(open("../../data/coco_wholebody_133.json"))
sigmas = np.array(schema["sigmas"])
parts = {
    "whole": (0, 133),
    "body": (0, 17),
    "foot": (17, 23),
    "face": (23, 91),
    "hand": (91, 133),
}

rng = np.random.RandomState(20240501)
images, gts, preds = [], [], []
for img in (1, 2, 3):
    images.append({"id": img, "file_name": f"{img:06d}.jpg", "width": 640, "height": 480})
    x0, y0, w, h = 100.0 + 40 * img, 60.0 + 10 * img, 180.0, 300.0
    xs = np.round(x0 + rng.uniform(0, w, 133), 2)
    ys = np.round(y0 + rng.uniform(0, h, 133), 2)
    kp = np.stack([xs, ys, np.full(133, 2.0)], 1).reshape(-1)
    area = w * h * 0.6
    gts.append({
        "id": img, "image_id": img, "category_id": 1, "iscrowd": 0,
        "bbox": [x0, y0, w, h], "area": area, "num_keypoints": 133,
        "keypoints": kp.tolist(),
    })
    if img == 1:
        pk, score = kp.copy(), 0.9
    elif img == 2:
        # moderate error everywhere, larger on the hands
        d = np.round(rng.normal(0, 1, (133, 2)) * 4.0, 2)
        d[91:] *= 2.5
        pk = np.stack([xs + d[:, 0], ys + d[:, 1], np.full(133, 1.0)], 1).reshape(-1)
        score = 0.8
    else:
        # a detection far from the only person in the image
        pk = np.stack([xs + 250.0, ys - 30.0, np.full(133, 1.0)], 1).reshape(-1)
        score = 0.85
    preds.append({"image_id": img, "category_id": 1, "keypoints": np.round(pk, 2).tolist(), "score": score})

gt_file = {"schema": "coco-wholebody-133", "images": images, "annotations": gts,
           "categories": [{"id": 1, "name": "person"}]}
json.dump(gt_file, open("eval_gt.json", "w"), indent=1)
json.dump(preds, open("eval_pred.json", "w"), indent=1)


def evaluate(lo, hi):
    g = json.loads(json.dumps(gt_file))
    for a in g["annotations"]:
        k = np.array(a["keypoints"]).reshape(-1, 3)[lo:hi]
        a["keypoints"] = k.reshape(-1).tolist()
        a["num_keypoints"] = int((k[:, 2] > 0).sum())
    p = json.loads(json.dumps(preds))
    for a in p:
        a["keypoints"] = np.array(a["keypoints"]).reshape(-1, 3)[lo:hi].reshape(-1).tolist()
    with contextlib.redirect_stdout(io.StringIO()):
        coco = COCO()
        coco.dataset = g
        coco.createIndex()
        dt = coco.loadRes(p)
        ev = COCOeval(coco, dt, "keypoints")
        ev.params.kpt_oks_sigmas = sigmas[lo:hi]
        ev.evaluate()
        ev.accumulate()
        ev.summarize()
    return {"ap": float(ev.stats[0]), "ar": float(ev.stats[5])}


ref = {name: evaluate(*r) for name, r in parts.items()}
json.dump(ref, open("eval_reference.json", "w"), indent=1)
print(json.dumps(ref, indent=1))
