"""Rebuild the golden CLI inputs and expected reports.

Run from the repository root after an intentional report change:

    python3 tests/golden/regenerate.py
"""

import json
from pathlib import Path


from hybridmem.cli import main
from hybridmem.geometry import PoseSE3, SimilaritySim3, Trajectory, sim3_apply
from hybridmem.evaluation import write_pose_file
from hybridmem.numerics import make_rng
from hybridmem.stream import OracleConfig, generate_scene, oracle_predict, partition_chunks, write_predictions_jsonl

HERE = Path(__file__).parent

# argv templates; {dir} is replaced by the folder holding the inputs
COMMANDS = {
    "ate": ["ate", "--pred", "{dir}/pred_poses.txt", "--gt", "{dir}/gt_poses.txt"],
    "ate_se3": ["ate", "--pred", "{dir}/pred_poses.txt", "--gt", "{dir}/gt_poses.txt", "--alignment", "se3"],
    "stitch": ["stitch", "--chunks", "{dir}/chunks.jsonl", "--gt", "{dir}/gt_poses.txt"],
    "recall": ["recall", "--pairs", "4", "--dims", "8", "--seed", "3"],
    "stream_oracle": ["stream", "--model", "oracle", "--frames", "40", "--chunk-size", "8",
                      "--overlap", "2", "--seed", "2", "--align", "sim3"],
}


def write_inputs(folder: Path) -> None:
    scene = generate_scene(26, "mixed", 11)
    write_pose_file(scene.trajectory, folder / "gt_poses.txt")
    rng = make_rng(5)
    g = SimilaritySim3.random(rng)
    noisy = [PoseSE3(p.R, p.t + 0.05 * rng.normal(size=3)) for p in scene.trajectory.poses]
    write_pose_file(Trajectory(scene.trajectory.frame_ids, [sim3_apply(g, p) for p in noisy]),
                    folder / "pred_poses.txt")
    preds = oracle_predict(scene, partition_chunks(26, 8, 2),
                           OracleConfig("per_chunk_se3", pose_noise_t=0.01, seed=4))
    write_predictions_jsonl(preds, folder / "chunks.jsonl")


def run(name: str, folder: Path, out: Path) -> int:
    argv = [a.replace("{dir}", str(folder)) for a in COMMANDS[name]] + ["--out", str(out)]
    return main(argv)


if __name__ == "__main__":
    write_inputs(HERE)
    for name in COMMANDS:
        out = HERE / f"{name}.json"
        assert run(name, HERE, out) == 0
        report = json.loads(out.read_text())
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print("golden files written to", HERE)
