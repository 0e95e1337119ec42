"""Reproduction run on the UBIPr frontal subset (images and annotations supplied locally).

    python scripts/reproduce_ubipr.py --annotations /data/ubipr/annotations.csv --out runs/ubipr --workers 4

Prints normalised ROI sides, protocol counts and EERs next to the reference values.
"""

import argparse
from pathlib import Path

from PIL import Image

from safeperi import dataset, pipeline
from safeperi.config import RunConfig

REFERENCE_SIDES = (299, 347, 415, 517, 677)
REFERENCE_EER = {"safe": 0.12, "hog": 0.118, "lbp": 0.155, "sift": 0.149, "safe+sift+lbp+hog": 0.079}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--annotations", type=Path, required=True)
    ap.add_argument("--images", type=Path, help="image root (default: the annotation file's folder)")
    ap.add_argument("--out", type=Path, default=Path("runs/ubipr"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--genuine-mode", default="all_pairs", choices=("all_pairs", "first_vs_second"))
    ap.add_argument("--impostor-cells", default="all", choices=("all", "upper"))
    args = ap.parse_args()

    anns = dataset.load_annotations(args.annotations)
    norm = pipeline.normalize_dataset(anns, args.images or args.annotations.parent, args.out / "norm")
    tags = sorted({a.distance_tag for a in norm}, key=lambda t: (len(t), t))
    for tag, ref in zip(tags, REFERENCE_SIDES):
        first = next(a for a in norm if a.distance_tag == tag)
        with Image.open(args.out / "norm" / first.image_path) as im:
            print(f"{tag}: ROI side {im.size[0]} (reference {ref})")

    cfg = RunConfig(workers=args.workers, genuine_mode=args.genuine_mode, impostor_cells=args.impostor_cells)
    report = pipeline.evaluate(cfg, args.out / "norm" / "annotations.csv", args.out / "eval")
    proto = report["protocol"]
    print(f"pairs: {proto['counts']} (reference {proto['reference_counts']})")
    got = {k: v["eer"] for k, v in {**report["matchers"], **report["fusion"]}.items()}
    for name, ref in REFERENCE_EER.items():
        print(f"{name:<20} EER {100 * got[name]:6.2f}%  reference {100 * ref:5.1f}%  "
              f"delta {100 * (got[name] - ref):+5.1f} pp")


if __name__ == "__main__":
    main()
