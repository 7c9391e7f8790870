#!/usr/bin/env python3
# scripts/make_synthetic_scene.py

import argparse

from src.pipeline.synthetic import make_scene, write_scene


def main():
    parser = argparse.ArgumentParser(description="Write seeded KITTI-layout frames for pipeline runs.")
    parser.add_argument("--root", default="data/kitti", help="Output root (velodyne/, calib/, depth/, label_2/)")
    parser.add_argument("--frames", type=int, default=1, help="Number of frames, ids 000000, 000001, ...")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--objects", type=int, default=3)
    parser.add_argument("--points-per-object", type=int, default=200)
    parser.add_argument("--background-points", type=int, default=2000)
    args = parser.parse_args()

    for i in range(args.frames):
        frame_id = f"{i:06d}"
        scene = make_scene(args.seed + i, args.objects, args.points_per_object, args.background_points)
        write_scene(scene, args.root, frame_id)
        print(f"✓ frame {frame_id}: {scene.points.shape[0]} points, {len(scene.labels)} objects → {args.root}")


if __name__ == "__main__":
    main()
