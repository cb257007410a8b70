"""Single-threaded cascade throughput on generated 64x256 scenes with the oracle detector.

    python scripts/stream_benchmark.py --ckpt runs/compare/scl_seed0/model.ckpt --frames 300

Warm-up frames (JIT compilation) are excluded from the reported rates.
"""
import argparse
import json

from facetouch.models import load_checkpoint
from facetouch.pipeline import OracleDetector, PipelineConfig, run_stream
from facetouch.synthdata import gen_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--occlusion-rate", type=float, default=0.5)
    ap.add_argument("--attention", action="store_true")
    ap.add_argument("--warmup", type=int, default=5)
    a = ap.parse_args()

    model = load_checkpoint(a.ckpt).model()
    det = OracleDetector()
    scenes = [gen_scene((1, 4), a.occlusion_rate, seed=i) for i in range(a.frames + a.warmup)]
    for s in scenes:
        det.register_scene(s)
    cfg = PipelineConfig(attention=a.attention)
    run_stream(enumerate(s.image for s in scenes[:a.warmup]), det, model, cfg)
    _, report = run_stream(enumerate(s.image for s in scenes[a.warmup:]), det, model, cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    print(f"end-to-end {report['fps_end_to_end']:.1f} FPS over {report['frames']} frames")


if __name__ == "__main__":
    main()
